//! Demonstration recording, replay and resampling.

pub mod format;
mod resample;

use std::collections::BTreeMap;

use serde_json::json;

use crate::calibration::{map_frame, CalibrationRecord, TaskConstraint};
use crate::config::DualChain;
use crate::control::{
    run_teleop_session, Clock, EncoderSource, LoopConfig, LoopStats, Poll, RobotBackend, SessionOutcome, TickRecord,
};
use crate::error::{invalid, schema, Error, Result};
use crate::model::{ArmId, ARM_JOINTS, DUAL_ARM_TICKS};
use crate::sim::{world_type, DualArmCommand, SimState, WorldConfig};

pub use format::{
    image_ref, DemoFile, DemoFrame, DemoHeader, Demonstration, Dims, Domain, GripperObs, ImageRef, ACTION_DIM,
    DEMO_SCHEMA,
};
pub use resample::resample;

/// Step used for the finite-difference TCP twist.
const TWIST_DT: f64 = 1e-4;

/// Builds a frame from per-arm joints, velocities and gripper readings.
pub fn frame_from_joints(
    chains: &DualChain,
    t: u64,
    q: [&[f64]; 2],
    q_dot: [&[f64]; 2],
    grippers: [GripperObs; 2],
    encoder: Option<&[i64]>,
) -> Result<DemoFrame> {
    let mut f = DemoFrame {
        t,
        joint_pos: [0.0; 14],
        joint_vel: [0.0; 14],
        tcp_pos: [0.0; 14],
        tcp_vel: [0.0; 12],
        base_ft: [0.0; 12],
        tcp_ft: [0.0; 12],
        gripper: grippers.to_vec(),
        encoder: [0; DUAL_ARM_TICKS],
        image_refs: Vec::new(),
    };
    for arm in ArmId::BOTH {
        let i = arm.index();
        let chain = chains.arm(arm);
        if q[i].len() != ARM_JOINTS || q_dot[i].len() != ARM_JOINTS {
            return Err(schema(format!("{arm}: expected {ARM_JOINTS} joints")));
        }
        f.joint_pos[i * 7..][..7].copy_from_slice(q[i]);
        f.joint_vel[i * 7..][..7].copy_from_slice(q_dot[i]);
        f.tcp_pos[i * 7..][..7].copy_from_slice(&chain.tcp(q[i])?.to_array());
        f.tcp_vel[i * 6..][..6].copy_from_slice(&chain.tcp_twist(q[i], q_dot[i], TWIST_DT)?);
    }
    if let Some(ticks) = encoder {
        if ticks.len() != DUAL_ARM_TICKS {
            return Err(schema(format!("dim mismatch {} != {DUAL_ARM_TICKS}", ticks.len())));
        }
        f.encoder.copy_from_slice(ticks);
    }
    Ok(f)
}

/// Frame for a simulator state; force/torque fields stay zero.
pub fn frame_from_state(chains: &DualChain, state: &SimState, t: u64, encoder: Option<&[i64]>) -> Result<DemoFrame> {
    let grip = |arm: ArmId| {
        let a = state.arm(arm);
        GripperObs {
            width: a.gripper,
            force: 0.0,
            status: if a.gripper == a.last_cmd_width { 0.0 } else { 1.0 },
            last_cmd_width: a.last_cmd_width,
            last_cmd_force: 0.0,
            last_cmd_t: a.last_cmd_t as f64,
        }
    };
    frame_from_joints(
        chains,
        t,
        [&state.left.q, &state.right.q],
        [&state.left.q_dot, &state.right.q_dot],
        [grip(ArmId::Left), grip(ArmId::Right)],
        encoder,
    )
}

/// Identity and provenance of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingMeta {
    pub id: String,
    pub task_id: String,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl RecordingMeta {
    pub fn new(id: impl Into<String>, task_id: impl Into<String>) -> Self {
        Self { id: id.into(), task_id: task_id.into(), metadata: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: serde_json::Value) -> Self {
        self.metadata.insert(key.to_owned(), value);
        self
    }

    /// Stores the world file and seed so replay can rebuild the scene.
    pub fn with_world(self, world: &WorldConfig, seed: u64) -> Self {
        self.with("world", serde_json::to_value(world).expect("world config serializes"))
            .with("world_seed", json!(seed))
    }
}

fn header(meta: &RecordingMeta, domain: Domain, calibration_ref: Option<String>, start_t: u64, source: &str) -> DemoHeader {
    let mut metadata = meta.metadata.clone();
    metadata.insert("source".into(), json!(source));
    DemoHeader {
        schema: DEMO_SCHEMA.into(),
        id: meta.id.clone(),
        domain,
        task_id: meta.task_id.clone(),
        calibration_ref,
        dims: Dims::new(2, 0),
        start_t,
        metadata,
    }
}

/// Collects one frame per executed tick of a simulator-backed session.
pub struct TickRecorder<'a> {
    chains: &'a DualChain,
    pub frames: Vec<DemoFrame>,
    pub error: Option<Error>,
}

impl<'a> TickRecorder<'a> {
    pub fn new(chains: &'a DualChain) -> Self {
        Self { chains, frames: Vec::new(), error: None }
    }

    pub fn observe(&mut self, tick: &TickRecord, backend: &dyn RobotBackend) {
        if self.error.is_some() {
            return;
        }
        let Some(state) = backend.sim_state() else {
            self.error = Some(Error::Config("recording needs a simulator backend".into()));
            return;
        };
        match frame_from_state(self.chains, state, tick.t, tick.encoder.as_deref()) {
            Ok(f) => self.frames.push(f),
            Err(e) => self.error = Some(e),
        }
    }
}

/// Teleoperated demonstration: the session drives a simulator and every
/// tick's post-step state becomes a frame.
#[allow(clippy::too_many_arguments)]
pub fn record_teleop(
    source: &mut dyn EncoderSource,
    cal: &CalibrationRecord,
    constraint: Option<&TaskConstraint>,
    backend: &mut dyn RobotBackend,
    chains: &DualChain,
    cfg: &LoopConfig,
    duration_s: f64,
    clock: &mut dyn Clock,
    meta: &RecordingMeta,
) -> Result<(Demonstration, SessionOutcome)> {
    let mut rec = TickRecorder::new(chains);
    let outcome = run_teleop_session(source, cal, constraint, backend, cfg, duration_s, clock, &mut |t, b| {
        rec.observe(t, b)
    })?;
    if let Some(e) = rec.error {
        return Err(e);
    }
    let mut meta = meta.clone();
    if let Some(c) = constraint {
        meta = meta.with("task_constraint", serde_json::to_value(c)?);
    }
    let demo = Demonstration::new(
        header(&meta, Domain::Teleoperated, Some(cal.id()), 0, "teleop"),
        rec.frames,
    )?;
    Ok((demo, outcome))
}

/// In-the-wild demonstration: exoskeleton only, no robot. Each tick's
/// latest encoder frame is mapped into robot joints through `cal`, and TCP
/// fields come from the robot chains.
#[allow(clippy::too_many_arguments)]
pub fn record_in_the_wild(
    source: &mut dyn EncoderSource,
    cal: Option<&CalibrationRecord>,
    constraint: Option<&TaskConstraint>,
    chains: &DualChain,
    cfg: &LoopConfig,
    duration_s: f64,
    clock: &mut dyn Clock,
    meta: &RecordingMeta,
) -> Result<Demonstration> {
    let cal = cal.ok_or_else(|| Error::Config("in-the-wild recording needs a calibration".into()))?;
    cfg.validate()?;
    let start = clock.now_ns();
    let period_s = cfg.period_s();
    let mut frames = Vec::new();
    let mut latest = None;
    let mut prev: Option<DualArmCommand> = None;
    for n in 0..cfg.tick_count(duration_s) {
        let now = start + cfg.tick_time_ns(n);
        clock.sleep_until(now);
        match source.poll(now - start)? {
            Poll::Frame(f) => latest = Some(f),
            Poll::Pending => {}
            Poll::Ended => break,
        }
        let Some(enc) = &latest else { continue };
        let t = now - start + cfg.tick_time_ns(1);
        let cmd = DualArmCommand::from(&map_frame(cal, enc, constraint)?);
        let vel = |arm: ArmId| -> Vec<f64> {
            let q = &cmd.arm(arm)[..ARM_JOINTS];
            match &prev {
                Some(p) => q.iter().zip(&p.arm(arm)[..ARM_JOINTS]).map(|(a, b)| (a - b) / period_s).collect(),
                None => vec![0.0; ARM_JOINTS],
            }
        };
        let grip = |arm: ArmId| {
            let w = cmd.arm(arm)[ARM_JOINTS];
            GripperObs { width: w, last_cmd_width: w, last_cmd_t: t as f64, ..Default::default() }
        };
        let (vl, vr) = (vel(ArmId::Left), vel(ArmId::Right));
        frames.push(frame_from_joints(
            chains,
            t,
            [&cmd.left[..ARM_JOINTS], &cmd.right[..ARM_JOINTS]],
            [&vl, &vr],
            [grip(ArmId::Left), grip(ArmId::Right)],
            Some(&enc.ticks),
        )?);
        prev = Some(cmd);
    }
    let mut meta = meta.clone();
    if let Some(c) = constraint {
        meta = meta.with("task_constraint", serde_json::to_value(c)?);
    }
    Demonstration::new(header(&meta, Domain::InTheWild, Some(cal.id()), 0, "exoskeleton"), frames)
}

/// Recomputes in-the-wild joints from the stored encoder ticks and checks
/// they match exactly. Resampled demonstrations hold interpolated joints and
/// are skipped.
pub fn check_domain_integrity(demo: &Demonstration, cal: &CalibrationRecord) -> Result<()> {
    if demo.domain() != Domain::InTheWild || demo.metadata("resampled_hz").is_some() {
        return Ok(());
    }
    if demo.header.calibration_ref.as_deref() != Some(cal.id().as_str()) {
        return Err(Error::Config(format!(
            "demonstration references {:?}, calibration is {}",
            demo.header.calibration_ref,
            cal.id()
        )));
    }
    let constraint: Option<TaskConstraint> =
        demo.metadata("task_constraint").map(|v| serde_json::from_value(v.clone())).transpose()?;
    for f in &demo.frames {
        let enc = crate::model::EncoderFrame::new(f.encoder.to_vec(), crate::model::default_resolution_rad(), f.t)?;
        let m = DualArmCommand::from(&map_frame(cal, &enc, constraint.as_ref())?);
        for arm in ArmId::BOTH {
            if m.arm(arm)[..ARM_JOINTS] != *f.arm_joints(arm) {
                return Err(schema(format!("frame at t={}: {arm} joints differ from the calibration mapping", f.t)));
            }
        }
    }
    Ok(())
}

/// A command value that had to be clamped during replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayWarning {
    pub frame: usize,
    pub arm: ArmId,
    pub joint: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub stats: LoopStats,
    pub warnings: Vec<ReplayWarning>,
}

/// Commands each frame's joints at its recorded time, scaled by `rate_scale`.
///
/// The backend is stepped with the recorded intervals so a simulator
/// replays bit-identically; only the pacing of the clock changes. The
/// gripper is driven with the recorded command width.
pub fn replay(
    demo: &Demonstration,
    backend: &mut dyn RobotBackend,
    rate_scale: f64,
    clock: &mut dyn Clock,
) -> Result<ReplayOutcome> {
    if !(rate_scale > 0.0) || !rate_scale.is_finite() {
        return Err(invalid(format!("rate_scale must be > 0, got {rate_scale}")));
    }
    demo.validate()?;
    if let (Some(world), Some(state)) = (demo.metadata("world"), backend.sim_state()) {
        let kind = world.get("task").and_then(|t| t.get("kind")).and_then(|k| k.as_str()).unwrap_or("unknown");
        if kind != state.world.kind() {
            return Err(world_type(kind, state.world.kind()));
        }
    }
    let arms = backend.arms().clone();
    let start = clock.now_ns();
    let mut stats = LoopStats::default();
    let mut warnings = Vec::new();
    let mut prev_t = demo.header.start_t;
    for (i, f) in demo.frames.iter().enumerate() {
        let due = start + ((f.t - demo.header.start_t) as f64 / rate_scale).round() as u64;
        clock.sleep_until(due);
        stats.max_period_error_ms = stats.max_period_error_ms.max(clock.now_ns().saturating_sub(due) as f64 / 1e6);
        let mut cmd = DualArmCommand { left: Vec::with_capacity(8), right: Vec::with_capacity(8) };
        for arm in ArmId::BOTH {
            let v = cmd.arm_mut(arm);
            v.extend_from_slice(f.arm_joints(arm));
            v.push(f.gripper.get(arm.index()).map_or(0.0, |g| g.last_cmd_width));
            let desc = &arms[arm.index()];
            for (j, x) in v.iter_mut().enumerate() {
                let (lo, hi) = desc.joint_limits[j];
                if *x < lo || *x > hi {
                    warnings.push(ReplayWarning { frame: i, arm, joint: j, value: *x });
                    *x = x.clamp(lo, hi);
                }
            }
        }
        let dt = (f.t - prev_t) as f64 / 1e9;
        if dt <= 0.0 {
            return Err(schema(format!("frame {i} does not advance time")));
        }
        backend.command(&cmd, dt).map_err(|e| Error::Backend(e.to_string()))?;
        stats.ticks_executed += 1;
        prev_t = f.t;
    }
    stats.clamped_commands = warnings.len() as u64;
    backend.hold();
    Ok(ReplayOutcome { stats, warnings })
}

/// World config and seed stored with a recording.
pub fn recorded_world(demo: &Demonstration) -> Result<(WorldConfig, u64)> {
    let world = demo
        .metadata("world")
        .ok_or_else(|| Error::Config(format!("demonstration {} has no world metadata", demo.id())))?;
    let world: WorldConfig = serde_json::from_value(world.clone())?;
    let seed = demo.metadata("world_seed").and_then(|v| v.as_u64()).unwrap_or(world.seed);
    Ok((world, seed))
}
