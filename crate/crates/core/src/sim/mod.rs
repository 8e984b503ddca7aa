//! Kinematic dual-arm simulator with capsule collision checks and two task worlds.
//!
//! Joints move toward the command at a capped speed; there are no dynamics.
//! A step is split into substeps small enough that links cannot tunnel
//! through balls, and world effects (ball pushing, curtain, grasping) are
//! applied after every substep.

pub mod collision;
pub mod gather;
pub mod shelf;

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Isometry3;
use serde::{Deserialize, Serialize};

use crate::calibration::MappedFrame;
use crate::config::DualChain;
use crate::error::{invalid, schema, Error, Result};
use crate::model::{secs_to_ns, ArmDescriptor, ArmId, ARM_JOINTS};
use collision::{capsule_distance, capsule_plane_distance, Capsule, Owner, PairMask, TaggedCapsule};
pub use gather::{Ball, GatherBallsWorld, GatherConfig, Rect};
pub use shelf::{CurtainedShelfWorld, ShelfConfig, Stage, StageFlags};
use shelf::ArmView;

/// Stepping parameters shared by both worlds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub velocity_cap_rad_s: f64,
    pub gripper_speed_m_s: f64,
    /// Largest joint motion between two world updates.
    pub substep_rad: f64,
    pub pair_mask: PairMask,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { velocity_cap_rad_s: 1.0, gripper_speed_m_s: 0.2, substep_rad: 0.02, pair_mask: PairMask::default() }
    }
}

/// Trial length for a task: a time limit and optionally a hard step cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskProtocol {
    pub time_limit_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl TaskProtocol {
    /// Steps a trial runs at `rate_hz`.
    pub fn steps(&self, rate_hz: f64) -> u64 {
        let by_time = (rate_hz * self.time_limit_s + 1e-9).floor() as u64;
        self.max_steps.map_or(by_time, |cap| by_time.min(cap))
    }
}

/// Starting joint vector per arm (7 joints + gripper width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomePose {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl HomePose {
    pub fn arm(&self, arm: ArmId) -> &[f64] {
        match arm {
            ArmId::Left => &self.left,
            ArmId::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    GatherBalls(GatherConfig),
    CurtainedShelf(ShelfConfig),
}

impl TaskConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskConfig::GatherBalls(_) => "gather_balls",
            TaskConfig::CurtainedShelf(_) => "curtained_shelf",
        }
    }
}

/// A world file: task geometry, spawn seed, home pose and trial protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub home: HomePose,
    pub protocol: TaskProtocol,
    #[serde(default)]
    pub sim: SimParams,
    pub task: TaskConfig,
}

impl WorldConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn kind(&self) -> &'static str {
        self.task.kind()
    }

    pub fn gather(&self) -> Result<&GatherConfig> {
        match &self.task {
            TaskConfig::GatherBalls(g) => Ok(g),
            other => Err(world_type("gather_balls", other.kind())),
        }
    }

    pub fn shelf(&self) -> Result<&ShelfConfig> {
        match &self.task {
            TaskConfig::CurtainedShelf(s) => Ok(s),
            other => Err(world_type("curtained_shelf", other.kind())),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn default_gather() -> Self {
        Self::from_json(crate::config::DEFAULT_GATHER_WORLD).expect("shipped gather world is valid")
    }

    pub fn default_shelf() -> Self {
        Self::from_json(crate::config::DEFAULT_SHELF_WORLD).expect("shipped shelf world is valid")
    }
}

pub(crate) fn world_type(expected: &str, found: &str) -> Error {
    Error::WorldType { expected: expected.into(), found: found.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum World {
    GatherBalls(GatherBallsWorld),
    CurtainedShelf(CurtainedShelfWorld),
}

impl World {
    pub fn kind(&self) -> &'static str {
        match self {
            World::GatherBalls(_) => "gather_balls",
            World::CurtainedShelf(_) => "curtained_shelf",
        }
    }

    pub fn reset(task: &TaskConfig, seed: u64) -> Self {
        match task {
            TaskConfig::GatherBalls(c) => World::GatherBalls(GatherBallsWorld::reset(c, seed)),
            TaskConfig::CurtainedShelf(c) => World::CurtainedShelf(CurtainedShelfWorld::reset(c, seed)),
        }
    }

    pub fn gather(&self) -> Result<&GatherBallsWorld> {
        match self {
            World::GatherBalls(w) => Ok(w),
            other => Err(world_type("gather_balls", other.kind())),
        }
    }

    pub fn shelf(&self) -> Result<&CurtainedShelfWorld> {
        match self {
            World::CurtainedShelf(w) => Ok(w),
            other => Err(world_type("curtained_shelf", other.kind())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    /// Arm joint angles (gripper excluded).
    pub q: Vec<f64>,
    pub q_dot: Vec<f64>,
    pub gripper: f64,
    pub last_cmd_width: f64,
    pub last_cmd_t: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub t: u64,
    pub pair: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEventKind {
    /// A stage condition held before all earlier stages had been reached.
    ProtocolViolation { stage: Stage },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: u64,
    #[serde(flatten)]
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub sim_time: u64,
    pub left: ArmState,
    pub right: ArmState,
    pub world: World,
    pub collision_events: Vec<CollisionEvent>,
    pub events: Vec<SimEvent>,
}

impl SimState {
    pub fn arm(&self, arm: ArmId) -> &ArmState {
        match arm {
            ArmId::Left => &self.left,
            ArmId::Right => &self.right,
        }
    }

    fn arm_mut(&mut self, arm: ArmId) -> &mut ArmState {
        match arm {
            ArmId::Left => &mut self.left,
            ArmId::Right => &mut self.right,
        }
    }

    /// Joint vector (7 joints + gripper width) of one arm.
    pub fn joint_vector(&self, arm: ArmId) -> Vec<f64> {
        let a = self.arm(arm);
        let mut v = a.q.clone();
        v.push(a.gripper);
        v
    }

    pub fn collided(&self) -> bool {
        !self.collision_events.is_empty()
    }
}

/// Target for both arms: 7 joint angles followed by the gripper width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualArmCommand {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl DualArmCommand {
    pub fn arm(&self, arm: ArmId) -> &[f64] {
        match arm {
            ArmId::Left => &self.left,
            ArmId::Right => &self.right,
        }
    }

    pub fn arm_mut(&mut self, arm: ArmId) -> &mut Vec<f64> {
        match arm {
            ArmId::Left => &mut self.left,
            ArmId::Right => &mut self.right,
        }
    }

    pub fn hold(state: &SimState) -> Self {
        Self { left: state.joint_vector(ArmId::Left), right: state.joint_vector(ArmId::Right) }
    }

    /// Concatenated `[left..., right...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.left.iter().chain(&self.right).copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 2 * (ARM_JOINTS + 1) {
            return Err(schema(format!("dim mismatch {} != {}", values.len(), 2 * (ARM_JOINTS + 1))));
        }
        let (l, r) = values.split_at(ARM_JOINTS + 1);
        Ok(Self { left: l.to_vec(), right: r.to_vec() })
    }
}

impl From<&MappedFrame> for DualArmCommand {
    fn from(m: &MappedFrame) -> Self {
        Self { left: m.left.values().to_vec(), right: m.right.values().to_vec() }
    }
}

/// Stage flags of a curtained-shelf state.
pub fn detect_stage(state: &SimState) -> Result<StageFlags> {
    match &state.world {
        World::CurtainedShelf(w) => Ok(w.stage_flags),
        other => Err(Error::State(format!("stage detection needs a curtained_shelf world, found {}", other.kind()))),
    }
}

/// World-frame collision capsules of one arm.
pub fn arm_capsules(chain: &crate::kinematics::KinematicChain, frames: &[Isometry3<f64>]) -> Vec<Capsule> {
    chain.capsule_segments(frames).into_iter().map(|(a, b, r)| Capsule::new(a, b, r)).collect()
}

#[derive(Debug, Clone)]
pub struct Simulator {
    arms: [ArmDescriptor; 2],
    chains: DualChain,
    world: WorldConfig,
}

impl Simulator {
    pub fn new(arms: [ArmDescriptor; 2], chains: DualChain, world: WorldConfig) -> Result<Self> {
        for arm in ArmId::BOTH {
            let desc = &arms[arm.index()];
            chains.arm(arm).check_arm(desc)?;
            let home = world.home.arm(arm);
            if home.len() != desc.dof {
                return Err(schema(format!("home pose for {arm} has {} values, arm has {}", home.len(), desc.dof)));
            }
            if !desc.contains(home) {
                return Err(Error::Config(format!("home pose for {arm} is outside the joint limits")));
            }
        }
        let p = &world.sim;
        if !(p.velocity_cap_rad_s > 0.0 && p.gripper_speed_m_s > 0.0 && p.substep_rad > 0.0) {
            return Err(Error::Config("sim parameters must be positive".into()));
        }
        Ok(Self { arms, chains, world })
    }

    /// Simulator with the shipped arms and chains.
    pub fn with_defaults(world: WorldConfig) -> Result<Self> {
        Self::new(crate::config::default_arms(), DualChain::default(), world)
    }

    pub fn arms(&self) -> &[ArmDescriptor; 2] {
        &self.arms
    }

    pub fn chains(&self) -> &DualChain {
        &self.chains
    }

    pub fn world_config(&self) -> &WorldConfig {
        &self.world
    }

    pub fn reset(&self) -> SimState {
        self.reset_with_seed(self.world.seed)
    }

    pub fn reset_with_seed(&self, seed: u64) -> SimState {
        let arm_state = |arm: ArmId| {
            let home = self.world.home.arm(arm);
            let n = home.len() - 1;
            ArmState {
                q: home[..n].to_vec(),
                q_dot: vec![0.0; n],
                gripper: home[n],
                last_cmd_width: home[n],
                last_cmd_t: 0,
            }
        };
        SimState {
            sim_time: 0,
            left: arm_state(ArmId::Left),
            right: arm_state(ArmId::Right),
            world: World::reset(&self.world.task, seed),
            collision_events: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Command clamped into the arm limits, and whether clamping changed it.
    pub fn clamp_command(&self, cmd: &DualArmCommand) -> Result<(DualArmCommand, bool)> {
        let mut out = cmd.clone();
        let mut changed = false;
        for arm in ArmId::BOTH {
            let desc = &self.arms[arm.index()];
            let v = out.arm_mut(arm);
            if v.len() != desc.dof {
                return Err(schema(format!("dim mismatch {} != {}", v.len(), desc.dof)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("non-finite command for {arm}")));
            }
            let before = v.clone();
            desc.clamp_into(v);
            changed |= *v != before;
        }
        Ok((out, changed))
    }

    /// Advances `state` by `dt` seconds toward `cmd`.
    pub fn step(&self, state: &SimState, cmd: &DualArmCommand, dt: f64) -> Result<SimState> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid(format!("dt must be > 0, got {dt}")));
        }
        let (cmd, _) = self.clamp_command(cmd)?;
        let p = &self.world.sim;
        let max_dq = p.velocity_cap_rad_s * dt;
        let max_dw = p.gripper_speed_m_s * dt;

        let mut next = state.clone();
        let t_end = state.sim_time + secs_to_ns(dt);
        let mut starts = Vec::with_capacity(2);
        let mut ends = Vec::with_capacity(2);
        let mut substeps = 1usize;
        for arm in ArmId::BOTH {
            let a = state.arm(arm);
            let c = cmd.arm(arm);
            let n = a.q.len();
            let target: Vec<f64> = a.q.iter().zip(&c[..n]).map(|(&q, &c)| toward(q, c, max_dq)).collect();
            let width = toward(a.gripper, c[n], max_dw);
            for (q, t) in a.q.iter().zip(&target) {
                substeps = substeps.max(((t - q).abs() / p.substep_rad).ceil() as usize);
            }
            starts.push((a.q.clone(), a.gripper));
            ends.push((target, width));
        }

        let mut pairs = BTreeSet::new();
        let mut violations = Vec::new();
        for s in 1..=substeps {
            let frac = s as f64 / substeps as f64;
            let mut poses = Vec::with_capacity(2);
            for (i, arm) in ArmId::BOTH.into_iter().enumerate() {
                let (q0, w0) = &starts[i];
                let (q1, w1) = &ends[i];
                let (q, w) = if s == substeps {
                    (q1.clone(), *w1)
                } else {
                    (q0.iter().zip(q1).map(|(a, b)| a + (b - a) * frac).collect(), w0 + (w1 - w0) * frac)
                };
                let frames = self.chains.arm(arm).frames(&q)?;
                poses.push((frames, w));
            }
            let caps = [
                arm_capsules(&self.chains.left, &poses[0].0),
                arm_capsules(&self.chains.right, &poses[1].0),
            ];
            self.collect_collisions(&next.world, &caps, &mut pairs);
            violations.extend(self.apply_world(&mut next.world, &poses, &caps));
        }

        for (i, arm) in ArmId::BOTH.into_iter().enumerate() {
            let a = next.arm_mut(arm);
            let (target, width) = &ends[i];
            a.q_dot = target.iter().zip(&starts[i].0).map(|(q1, q0)| (q1 - q0) / dt).collect();
            a.q = target.clone();
            a.gripper = *width;
            let n = a.q.len();
            a.last_cmd_width = cmd.arm(arm)[n];
            a.last_cmd_t = t_end;
        }
        next.sim_time = t_end;
        next.collision_events.extend(pairs.into_iter().map(|pair| CollisionEvent { t: t_end, pair }));
        next.events.extend(
            violations.into_iter().map(|stage| SimEvent { t: t_end, kind: SimEventKind::ProtocolViolation { stage } }),
        );
        Ok(next)
    }

    fn collect_collisions(&self, world: &World, caps: &[Vec<Capsule>; 2], pairs: &mut BTreeSet<String>) {
        let mut tagged: Vec<TaggedCapsule> = Vec::new();
        for (arm, list) in ArmId::BOTH.into_iter().zip(caps) {
            tagged.extend(list.iter().enumerate().map(|(index, c)| TaggedCapsule {
                owner: Owner::Arm(arm),
                index,
                capsule: *c,
            }));
        }
        let table_z = match world {
            World::GatherBalls(w) => w.table_z,
            World::CurtainedShelf(w) => {
                tagged.extend(w.config.shelf_members.iter().enumerate().map(|(index, c)| TaggedCapsule {
                    owner: Owner::Shelf,
                    index,
                    capsule: *c,
                }));
                w.config.table_z
            }
        };
        let mask = &self.world.sim.pair_mask;
        for (i, a) in tagged.iter().enumerate() {
            if matches!(a.owner, Owner::Arm(_)) && capsule_plane_distance(&a.capsule, table_z) < 0.0 {
                pairs.insert(format!("{}|table", a.id()));
            }
            for b in &tagged[i + 1..] {
                if mask.enabled(a, b) && capsule_distance(&a.capsule, &b.capsule) < 0.0 {
                    pairs.insert(format!("{}|{}", a.id(), b.id()));
                }
            }
        }
    }

    fn apply_world(
        &self,
        world: &mut World,
        poses: &[(Vec<Isometry3<f64>>, f64)],
        caps: &[Vec<Capsule>; 2],
    ) -> Vec<Stage> {
        match world {
            World::GatherBalls(w) => {
                for link in caps.iter().flatten() {
                    if let Some(fp) = w.footprint(link) {
                        w.push_out(&fp);
                    }
                }
                Vec::new()
            }
            World::CurtainedShelf(w) => {
                let left_tcp = poses[0].0.last().expect("tcp frame");
                let right_tcp = poses[1].0.last().expect("tcp frame");
                let view = ArmView { left_tcp, right_tcp, right_links: &caps[1], left_gripper: poses[0].1 };
                w.update_curtain(&caps[1]);
                let mut v = w.latch(w.conditions(&view));
                w.update_object(left_tcp, view.left_gripper);
                v.extend(w.latch(w.conditions(&view)));
                v
            }
        }
    }
}

/// Moves `from` toward `to` by at most `max_step`, landing exactly on `to`
/// when it is within reach.
fn toward(from: f64, to: f64, max_step: f64) -> f64 {
    let d = to - from;
    if d.abs() <= max_step {
        to
    } else {
        from + max_step.copysign(d)
    }
}

/// Backend adapter: a simulator plus its live state.
#[derive(Debug, Clone)]
pub struct SimBackend {
    sim: Simulator,
    state: SimState,
}

impl SimBackend {
    pub fn new(sim: Simulator) -> Self {
        let state = sim.reset();
        Self { sim, state }
    }

    pub fn with_seed(sim: Simulator, seed: u64) -> Self {
        let state = sim.reset_with_seed(seed);
        Self { sim, state }
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn into_state(self) -> SimState {
        self.state
    }

    pub fn reset(&mut self, seed: u64) {
        self.state = self.sim.reset_with_seed(seed);
    }

    pub fn step(&mut self, cmd: &DualArmCommand, dt: f64) -> Result<()> {
        self.state = self.sim.step(&self.state, cmd, dt)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::collision::Capsule;

    fn gather_sim() -> Simulator {
        Simulator::with_defaults(WorldConfig::default_gather()).unwrap()
    }

    #[test]
    fn shipped_worlds_parse() {
        let g = WorldConfig::default_gather();
        assert_eq!(g.kind(), "gather_balls");
        assert_eq!(g.protocol.steps(5.0), 300);
        let s = WorldConfig::default_shelf();
        assert_eq!(s.kind(), "curtained_shelf");
        assert_eq!(s.protocol.steps(5.0), 400);
        assert!(g.shelf().is_err());
        Simulator::with_defaults(s).unwrap();
    }

    #[test]
    fn holding_only_advances_time() {
        let sim = gather_sim();
        let s0 = sim.reset();
        let s1 = sim.step(&s0, &DualArmCommand::hold(&s0), 0.2).unwrap();
        assert_eq!(s1.sim_time, 200_000_000);
        assert_eq!(s1.world, s0.world);
        assert_eq!(s1.left.q, s0.left.q);
        assert!(s1.left.q_dot.iter().all(|v| *v == 0.0));
        assert!(s1.collision_events.is_empty());
    }

    #[test]
    fn rate_limit_moves_exactly_cap_times_dt() {
        let sim = gather_sim();
        let s0 = sim.reset();
        let mut cmd = DualArmCommand::hold(&s0);
        cmd.left[0] += 1.0;
        cmd.right[0] -= 0.05;
        let s1 = sim.step(&s0, &cmd, 0.2).unwrap();
        assert!((s1.left.q[0] - (s0.left.q[0] + 0.2)).abs() < 1e-15);
        assert_eq!(s1.right.q[0], cmd.right[0]);
    }

    #[test]
    fn bad_dt_and_dims_rejected() {
        let sim = gather_sim();
        let s0 = sim.reset();
        let cmd = DualArmCommand::hold(&s0);
        assert!(matches!(sim.step(&s0, &cmd, 0.0), Err(Error::InvalidInput(_))));
        assert!(matches!(sim.step(&s0, &cmd, -1.0), Err(Error::InvalidInput(_))));
        let mut short = cmd.clone();
        short.left.pop();
        assert!(matches!(sim.step(&s0, &short, 0.2), Err(Error::Schema(_))));
    }

    #[test]
    fn commands_are_clamped_into_limits() {
        let sim = gather_sim();
        let s0 = sim.reset();
        let mut cmd = DualArmCommand::hold(&s0);
        cmd.left[1] = 50.0;
        let mut s = s0;
        for _ in 0..40 {
            s = sim.step(&s, &cmd, 0.2).unwrap();
        }
        assert!(sim.arms()[0].contains(&s.joint_vector(ArmId::Left)));
        assert_eq!(s.left.q[1], sim.arms()[0].joint_limits[1].1);
    }

    #[test]
    fn stage_detection_needs_shelf() {
        let sim = gather_sim();
        assert!(matches!(detect_stage(&sim.reset()), Err(Error::State(_))));
        let shelf = Simulator::with_defaults(WorldConfig::default_shelf()).unwrap();
        assert_eq!(detect_stage(&shelf.reset()).unwrap(), StageFlags::default());
    }

    #[test]
    fn home_poses_are_collision_free() {
        for world in [WorldConfig::default_gather(), WorldConfig::default_shelf()] {
            let sim = Simulator::with_defaults(world).unwrap();
            let s0 = sim.reset();
            let mut pairs = BTreeSet::new();
            let caps = [ArmId::Left, ArmId::Right].map(|arm| {
                let frames = sim.chains().arm(arm).frames(&s0.arm(arm).q).unwrap();
                arm_capsules(sim.chains().arm(arm), &frames)
            });
            sim.collect_collisions(&s0.world, &caps, &mut pairs);
            assert!(pairs.is_empty(), "{pairs:?}");
        }
    }

    #[test]
    fn low_link_reports_table_collision() {
        let sim = gather_sim();
        let s0 = sim.reset();
        let below = [vec![Capsule::new([0.5, 0.3, 0.01], [0.7, 0.3, 0.01], 0.04)], vec![]];
        let mut pairs = BTreeSet::new();
        sim.collect_collisions(&s0.world, &below, &mut pairs);
        assert_eq!(pairs.into_iter().collect::<Vec<_>>(), vec!["left:0|table".to_string()]);
    }
}
