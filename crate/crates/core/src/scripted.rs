//! Scripted joint-space demonstrations for both task worlds.
//!
//! A script is a piecewise-linear joint trajectory. Segment durations come
//! from a joint speed below the simulator's velocity cap so that, sampled at
//! the control rate, the robot follows the script without lag. Scripts can
//! be turned into encoder streams through a calibration, which is how
//! teleoperated and in-the-wild demonstrations are produced in tests.

use serde::{Deserialize, Serialize};

use crate::calibration::{capture_calibration, ticks_for_pose, CalibrationRecord, CaptureDefaults};
use crate::error::{schema, Error, Result};
use crate::kinematics::ChainConfig;
use crate::model::{default_resolution_rad, secs_to_ns, ArmDescriptor, ArmId, EncoderFrame, JointVector};
use crate::config::DualChain;
use crate::control::{LoopConfig, SimulatedEncoderSource, VirtualClock, DEFAULT_SOURCE_HZ};
use crate::recorder::{record_in_the_wild, record_teleop, Demonstration, RecordingMeta};
use crate::sim::{DualArmCommand, SimBackend, SimState, Simulator, WorldConfig};

/// Piecewise-linear dual-arm joint trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(time_s, target)` keyframes with strictly increasing times.
    pub keys: Vec<(f64, DualArmCommand)>,
}

impl Trajectory {
    pub fn builder(start: DualArmCommand) -> TrajectoryBuilder {
        TrajectoryBuilder { keys: vec![(0.0, start)], joint_speed: 0.6, gripper_speed: 0.1 }
    }

    pub fn duration(&self) -> f64 {
        self.keys.last().map_or(0.0, |k| k.0)
    }

    /// Target at `t` seconds, held at the ends.
    pub fn sample(&self, t: f64) -> DualArmCommand {
        let i = self.keys.partition_point(|k| k.0 <= t);
        if i == 0 {
            return self.keys[0].1.clone();
        }
        if i == self.keys.len() {
            return self.keys[i - 1].1.clone();
        }
        let (t0, a) = &self.keys[i - 1];
        let (t1, b) = &self.keys[i];
        let w = (t - t0) / (t1 - t0);
        let lerp = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p + (q - p) * w).collect();
        DualArmCommand { left: lerp(&a.left, &b.left), right: lerp(&a.right, &b.right) }
    }

    pub fn end(&self) -> &DualArmCommand {
        &self.keys.last().expect("trajectory has a start").1
    }

    /// Encoder frames sampled at `rate_hz` over the whole trajectory, starting at t = 0.
    pub fn encoder_script(&self, cal: &CalibrationRecord, rate_hz: f64) -> Result<Vec<EncoderFrame>> {
        if !(rate_hz > 0.0) {
            return Err(Error::InvalidInput(format!("rate must be > 0, got {rate_hz}")));
        }
        let res = default_resolution_rad();
        let n = (self.duration() * rate_hz).ceil() as usize + 1;
        (0..n)
            .map(|i| {
                let t = i as f64 / rate_hz;
                let cmd = self.sample(t);
                EncoderFrame::new(ticks_for_pose(cal, [&cmd.left, &cmd.right], res), res, secs_to_ns(t))
            })
            .collect()
    }
}

pub struct TrajectoryBuilder {
    keys: Vec<(f64, DualArmCommand)>,
    joint_speed: f64,
    gripper_speed: f64,
}

impl TrajectoryBuilder {
    /// Joint speed (rad/s) used for the following segments.
    pub fn speed(mut self, joint_speed: f64) -> Self {
        self.joint_speed = joint_speed;
        self
    }

    fn last(&self) -> &DualArmCommand {
        &self.keys.last().expect("builder has a start").1
    }

    /// Moves both arms to `target`, taking as long as the slowest DoF needs.
    pub fn to(mut self, target: DualArmCommand) -> Self {
        let from = self.last();
        let mut secs: f64 = 0.0;
        for arm in ArmId::BOTH {
            let (a, b) = (from.arm(arm), target.arm(arm));
            let n = a.len() - 1;
            for j in 0..n {
                secs = secs.max((b[j] - a[j]).abs() / self.joint_speed);
            }
            secs = secs.max((b[n] - a[n]).abs() / self.gripper_speed);
        }
        if secs > 0.0 {
            let t = self.keys.last().expect("start").0 + secs;
            self.keys.push((t, target));
        }
        self
    }

    /// Moves one arm, holding the other.
    pub fn arm_to(self, arm: ArmId, pose: &[f64]) -> Self {
        let mut target = self.last().clone();
        *target.arm_mut(arm) = pose.to_vec();
        self.to(target)
    }

    pub fn gripper(self, arm: ArmId, width: f64) -> Self {
        let mut target = self.last().clone();
        *target.arm_mut(arm).last_mut().expect("gripper slot") = width;
        self.to(target)
    }

    pub fn build(self) -> Trajectory {
        Trajectory { keys: self.keys }
    }
}

/// Vertical-plane model of the shipped arm layout: a yaw joint at the base,
/// then pitch joints at the shoulder, elbow and wrist with the rolls at zero.
#[derive(Debug, Clone, Copy)]
pub struct PlanarArm {
    pub base: [f64; 3],
    pub shoulder_height: f64,
    pub upper: f64,
    pub fore: f64,
    pub hand: f64,
}

impl PlanarArm {
    pub fn from_chain(chain: &ChainConfig) -> Result<Self> {
        if chain.joints.len() != 7 {
            return Err(schema(format!("planar model needs 7 joints, chain has {}", chain.joints.len())));
        }
        let s = chain.scale;
        let x = |i: usize| chain.joints[i].origin_xyz[0] * s;
        Ok(Self {
            base: chain.base.xyz,
            shoulder_height: chain.base.xyz[2] + chain.joints[1].origin_xyz[2] * s,
            upper: x(2) + x(3),
            fore: x(4) + x(5),
            hand: x(6) + chain.tcp_offset.xyz[0] * s,
        })
    }

    /// Joint angles placing the TCP at world `(x, y, z)` with the hand
    /// pitched `hand_pitch` below horizontal, elbow up.
    pub fn ik(&self, target: [f64; 3], hand_pitch: f64) -> Result<[f64; 7]> {
        let dx = target[0] - self.base[0];
        let dy = target[1] - self.base[1];
        let yaw = dy.atan2(dx);
        let r = dx.hypot(dy);
        let wr = r - self.hand * hand_pitch.cos();
        let wz = target[2] + self.hand * hand_pitch.sin();
        let down = self.shoulder_height - wz;
        let d2 = wr * wr + down * down;
        let c = (d2 - self.upper.powi(2) - self.fore.powi(2)) / (2.0 * self.upper * self.fore);
        if !(-1.0..=1.0).contains(&c) {
            return Err(Error::InvalidInput(format!("target {target:?} is out of reach")));
        }
        let elbow = c.acos();
        let pitch = down.atan2(wr) - (self.fore * elbow.sin()).atan2(self.upper + self.fore * elbow.cos());
        Ok([yaw, pitch, 0.0, elbow, 0.0, hand_pitch - pitch - elbow, 0.0])
    }

    /// Pose with the forearm and hand level at height `h`, pointing along `yaw`.
    pub fn level_forearm(&self, yaw: f64, h: f64) -> Result<[f64; 7]> {
        let s = (self.shoulder_height - h) / self.upper;
        if !(-1.0..=1.0).contains(&s) {
            return Err(Error::InvalidInput(format!("height {h} is out of reach")));
        }
        let pitch = s.asin();
        Ok([yaw, pitch, 0.0, -pitch, 0.0, 0.0, 0.0])
    }
}

fn with_gripper(q: [f64; 7], width: f64) -> Vec<f64> {
    let mut v = q.to_vec();
    v.push(width);
    v
}

fn home(world: &WorldConfig) -> DualArmCommand {
    DualArmCommand { left: world.home.left.clone(), right: world.home.right.clone() }
}

/// Which arms sweep and how far, for a Gather Balls script.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatherScript {
    pub left: bool,
    pub right: bool,
    /// Yaw (left arm sign) at which the forearm is lowered, outside the cluster.
    pub sweep_from: f64,
    /// Yaw at which the sweep stops, inside the goal area.
    pub sweep_to: f64,
    /// Height of the level forearm axis above the table.
    pub sweep_height: f64,
    pub sweep_speed: f64,
}

impl Default for GatherScript {
    fn default() -> Self {
        Self { left: true, right: true, sweep_from: 1.0, sweep_to: -0.2, sweep_height: 0.055, sweep_speed: 0.5 }
    }
}

/// One arm after the other lowers its forearm beside its cluster and sweeps
/// it toward the middle, then lifts it clear.
pub fn gather_demo(world: &WorldConfig, chains: &crate::kinematics::DualChainConfig, script: &GatherScript) -> Result<Trajectory> {
    let g = world.gather()?;
    let mut b = Trajectory::builder(home(world));
    for (arm, enabled) in [(ArmId::Left, script.left), (ArmId::Right, script.right)] {
        if !enabled {
            continue;
        }
        let planar = PlanarArm::from_chain(chains.arm(arm))?;
        let sign = if arm == ArmId::Left { 1.0 } else { -1.0 };
        let rest = world.home.arm(arm).to_vec();
        let width = rest[7];
        let mut raised_from = rest.clone();
        raised_from[0] = sign * script.sweep_from;
        let mut raised_to = rest.clone();
        raised_to[0] = sign * script.sweep_to;
        let low_from = planar.level_forearm(sign * script.sweep_from, g.table_z + script.sweep_height)?;
        let low_to = planar.level_forearm(sign * script.sweep_to, g.table_z + script.sweep_height)?;
        b = b
            .speed(0.6)
            .arm_to(arm, &raised_from)
            .arm_to(arm, &with_gripper(low_from, width))
            .speed(script.sweep_speed)
            .arm_to(arm, &with_gripper(low_to, width))
            .speed(0.6)
            .arm_to(arm, &raised_to);
    }
    Ok(b.build())
}

/// Right arm holds the curtain open while the left arm picks the toy and
/// drops it into the bin.
pub fn shelf_demo(world: &WorldConfig, chains: &crate::kinematics::DualChainConfig, object: [f64; 3]) -> Result<Trajectory> {
    let s = world.shelf()?;
    let left = PlanarArm::from_chain(&chains.left)?;
    let right = PlanarArm::from_chain(&chains.right)?;
    let open = world.home.left[7];
    let closed = s.object.width * 0.5;
    let px = s.curtain.plane_x;
    let z_push = (s.curtain.z[0] + s.curtain.z[1]) / 2.0;

    let r_front = with_gripper(right.ik([px - 0.1, -0.1, z_push], 0.0)?, open);
    let r_in = with_gripper(right.ik([px + s.curtain.push_threshold + 0.07, -0.1, z_push], 0.0)?, open);
    let [ox, oy, oz] = object;
    let l_front = with_gripper(left.ik([px - 0.1, oy + 0.05, oz + 0.12], 0.3)?, open);
    let l_above = with_gripper(left.ik([ox, oy, oz + 0.06], 0.3)?, open);
    let l_at = with_gripper(left.ik([ox, oy, oz], 0.3)?, open);
    let mut l_grip = l_at.clone();
    l_grip[7] = closed;
    let l_lift = with_gripper(left.ik([ox, oy, oz + 0.08], 0.3)?, closed);
    let l_out = with_gripper(left.ik([px - 0.15, oy + 0.05, oz + 0.12], 0.3)?, closed);
    let bin_c = [
        (s.bin.min[0] + s.bin.max[0]) / 2.0,
        (s.bin.min[1] + s.bin.max[1]) / 2.0,
        s.bin.max[2] + 0.12,
    ];
    let l_turn = with_gripper(left.ik([px - 0.25, (oy + bin_c[1]) / 2.0, oz + 0.15], 0.4)?, closed);
    let l_bin = with_gripper(left.ik(bin_c, 0.5)?, closed);
    let mut l_drop = l_bin.clone();
    l_drop[7] = open;
    let r_out = r_front.clone();

    Ok(Trajectory::builder(home(world))
        .speed(0.6)
        .arm_to(ArmId::Right, &r_front)
        .speed(0.4)
        .arm_to(ArmId::Right, &r_in)
        .speed(0.6)
        .arm_to(ArmId::Left, &l_front)
        .speed(0.4)
        .arm_to(ArmId::Left, &l_above)
        .arm_to(ArmId::Left, &l_at)
        .to(DualArmCommand { left: l_grip, right: r_in.clone() })
        .arm_to(ArmId::Left, &l_lift)
        .arm_to(ArmId::Left, &l_out)
        .speed(0.6)
        .arm_to(ArmId::Left, &l_turn)
        .arm_to(ArmId::Left, &l_bin)
        .arm_to(ArmId::Left, &l_drop)
        .arm_to(ArmId::Right, &r_out)
        .build())
}

/// The default script for a world: both-arm sweep for gather balls, pick
/// and drop for the shelf with the object where `seed` spawns it.
pub fn scripted_operator(world: &WorldConfig, chains: &crate::kinematics::DualChainConfig, seed: u64) -> Result<Trajectory> {
    match &world.task {
        crate::sim::TaskConfig::GatherBalls(_) => gather_demo(world, chains, &GatherScript::default()),
        crate::sim::TaskConfig::CurtainedShelf(_) => {
            let sim = Simulator::with_defaults(world.clone())?;
            let object = sim.reset_with_seed(seed).world.shelf()?.object_pose.position;
            shelf_demo(world, chains, object)
        }
    }
}

/// Calibration captured with the robot at all-zero joints (gripper open)
/// and the exoskeleton reading `base_tick + 100·i` on slot `i`.
pub fn scripted_calibration(arms: &[ArmDescriptor; 2], defaults: &CaptureDefaults, base_tick: i64) -> Result<CalibrationRecord> {
    let pose = |arm: ArmId| {
        let d = &arms[arm.index()];
        let mut v = vec![0.0; d.dof];
        v[d.dof - 1] = d.gripper_width_range.1;
        JointVector::for_arm(arm, v, d)
    };
    let (l, r) = (pose(ArmId::Left)?, pose(ArmId::Right)?);
    let n = arms[0].dof + arms[1].dof;
    let ticks = (0..n as i64).map(|i| base_tick + 100 * i).collect();
    let frame = EncoderFrame::dual_arm(ticks, 0)?;
    capture_calibration([&l, &r], &frame, "fully extended", arms, defaults, 0)
}

/// Plays `traj` as a 30 Hz encoder stream through `cal` into a simulator
/// reset with `seed` and records the session. Returns the demonstration and
/// the final simulator state.
pub fn record_scripted_teleop(
    world: &WorldConfig,
    seed: u64,
    traj: &Trajectory,
    cal: &CalibrationRecord,
    id: &str,
) -> Result<(Demonstration, SimState)> {
    let mut source = SimulatedEncoderSource::from_frames(traj.encoder_script(cal, DEFAULT_SOURCE_HZ)?)?;
    let mut backend = SimBackend::with_seed(Simulator::with_defaults(world.clone())?, seed);
    let chains = backend.simulator().chains().clone();
    let cfg = LoopConfig { max_steps: world.protocol.max_steps, ..LoopConfig::default() };
    let meta = RecordingMeta::new(id, world.kind()).with_world(world, seed);
    let (demo, _) = record_teleop(
        &mut source,
        cal,
        None,
        &mut backend,
        &chains,
        &cfg,
        world.protocol.time_limit_s,
        &mut VirtualClock::new(),
        &meta,
    )?;
    Ok((demo, backend.into_state()))
}

/// Plays `traj` as a 30 Hz encoder stream with no robot attached and
/// records an in-the-wild demonstration.
pub fn record_scripted_in_the_wild(
    world: &WorldConfig,
    traj: &Trajectory,
    cal: &CalibrationRecord,
    id: &str,
) -> Result<Demonstration> {
    let mut source = SimulatedEncoderSource::from_frames(traj.encoder_script(cal, DEFAULT_SOURCE_HZ)?)?;
    let chains = DualChain::default();
    let meta = RecordingMeta::new(id, world.kind());
    record_in_the_wild(
        &mut source,
        Some(cal),
        None,
        &chains,
        &LoopConfig::default(),
        world.protocol.time_limit_s,
        &mut VirtualClock::new(),
        &meta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_arms, default_capture, default_chain_config};
    use crate::kinematics::KinematicChain;

    #[test]
    fn planar_ik_round_trips_through_fk() {
        let cfg = default_chain_config();
        for arm in ArmId::BOTH {
            let planar = PlanarArm::from_chain(cfg.arm(arm)).unwrap();
            let chain = KinematicChain::new(cfg.arm(arm).clone()).unwrap();
            let sign = if arm == ArmId::Left { 1.0 } else { -1.0 };
            for ([x, y, z], phi) in [([0.6, 0.1, 0.2], 0.3), ([0.45, -0.2, 0.35], 0.0), ([0.35, 0.7, 0.37], 0.5)] {
                let target = [x, sign * y, z];
                let q = planar.ik(target, phi).unwrap();
                let tcp = chain.tcp(&q).unwrap();
                for i in 0..3 {
                    assert!((tcp.position[i] - target[i]).abs() < 1e-9, "{arm}: {:?} vs {target:?}", tcp.position);
                }
            }
            let q = planar.level_forearm(0.3, 0.055).unwrap();
            let frames = chain.frames(&q).unwrap();
            for f in &frames[4..] {
                assert!((f.translation.vector.z - 0.055).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn trajectory_respects_speed_and_interpolates() {
        let world = WorldConfig::default_gather();
        let traj = gather_demo(&world, &default_chain_config(), &GatherScript::default()).unwrap();
        assert!(traj.keys.windows(2).all(|w| w[1].0 > w[0].0));
        let dt = 0.01;
        let mut prev = traj.sample(0.0);
        let mut t = dt;
        while t <= traj.duration() {
            let cur = traj.sample(t);
            for (a, b) in prev.to_flat().iter().zip(cur.to_flat()) {
                assert!((b - a).abs() <= 0.6 * dt + 1e-12);
            }
            prev = cur;
            t += dt;
        }
        assert_eq!(traj.sample(-1.0), home(&world));
        assert_eq!(&traj.sample(1e6), traj.end());
    }

    #[test]
    fn encoder_script_maps_back_to_the_trajectory() {
        let arms = default_arms();
        let cal = scripted_calibration(&arms, &default_capture(), 1000).unwrap();
        let world = WorldConfig::default_gather();
        let traj = gather_demo(&world, &default_chain_config(), &GatherScript::default()).unwrap();
        let script = traj.encoder_script(&cal, 30.0).unwrap();
        assert!(script.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
        let res = default_resolution_rad();
        for f in script.iter().step_by(17) {
            let m = crate::calibration::map_frame(&cal, f, None).unwrap();
            let want = traj.sample(crate::model::ns_to_secs(f.timestamp));
            for (a, b) in DualArmCommand::from(&m).to_flat().iter().zip(want.to_flat()).take(7) {
                assert!((a - b).abs() <= res / 2.0 + 1e-12);
            }
        }
    }
}
