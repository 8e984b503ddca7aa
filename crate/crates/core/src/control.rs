//! Fixed-rate control loop: encoder frames in, rate-limited joint commands out.
//!
//! The loop is generic over a [`Commander`] that turns "now" and the robot's
//! observation into an intent. Teleoperation maps the latest encoder frame
//! through the calibration; the policy runtime plugs in its own commander.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{map_frame, CalibrationRecord, TaskConstraint};
use crate::error::{invalid, schema, Error, Result};
use crate::model::{ArmDescriptor, ArmId, EncoderFrame, NANOS_PER_SEC};
use crate::sim::{DualArmCommand, SimBackend, SimState};

/// Encoder rate of the simulated source when none is given.
pub const DEFAULT_SOURCE_HZ: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub control_rate_hz: f64,
    /// Frames older than this are stale: the last command is repeated.
    pub command_timeout_ms: f64,
    pub velocity_cap_rad_s: f64,
    pub task_constraint: Option<String>,
    /// Hard cap on ticks, applied after the duration.
    pub max_steps: Option<u64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            control_rate_hz: 5.0,
            command_timeout_ms: 500.0,
            velocity_cap_rad_s: 1.0,
            task_constraint: None,
            max_steps: None,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.control_rate_hz > 0.0) || !self.control_rate_hz.is_finite() {
            return Err(Error::Config(format!("control_rate_hz must be > 0, got {}", self.control_rate_hz)));
        }
        if !(self.velocity_cap_rad_s > 0.0) {
            return Err(Error::Config("velocity_cap_rad_s must be > 0".into()));
        }
        if !(self.command_timeout_ms > 0.0) {
            return Err(Error::Config("command_timeout_ms must be > 0".into()));
        }
        Ok(())
    }

    pub fn period_ns(&self) -> f64 {
        NANOS_PER_SEC / self.control_rate_hz
    }

    pub fn period_s(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    /// Ticks a session of `duration_s` runs: `floor(rate · duration)`, capped.
    pub fn tick_count(&self, duration_s: f64) -> u64 {
        let n = (self.control_rate_hz * duration_s + 1e-9).floor().max(0.0) as u64;
        self.max_steps.map_or(n, |cap| n.min(cap))
    }

    /// Time of tick `n` relative to the session start.
    pub fn tick_time_ns(&self, n: u64) -> u64 {
        (n as f64 * self.period_ns()).round() as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopStats {
    pub ticks_executed: u64,
    pub mean_period_error_ms: f64,
    pub max_period_error_ms: f64,
    pub p99_period_error_ms: f64,
    pub dropped_frames: u64,
    pub last_latency_ms: f64,
    pub clamped_commands: u64,
}

/// Session time source.
pub trait Clock {
    fn now_ns(&self) -> u64;
    fn sleep_until(&mut self, t_ns: u64);
}

/// Deterministic clock that jumps straight to every requested time.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: u64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> u64 {
        self.now
    }

    fn sleep_until(&mut self, t_ns: u64) {
        self.now = self.now.max(t_ns);
    }
}

/// Monotonic wall clock measured from construction.
#[derive(Debug, Clone)]
pub struct WallClock {
    start: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self { start: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    fn sleep_until(&mut self, t_ns: u64) {
        let now = self.now_ns();
        if t_ns > now {
            std::thread::sleep(Duration::from_nanos(t_ns - now));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Poll {
    Frame(EncoderFrame),
    /// Nothing new yet.
    Pending,
    /// The stream is over.
    Ended,
}

/// A stream of encoder frames in session time.
pub trait EncoderSource {
    /// The newest frame stamped at or before `now_ns` that has not been
    /// returned yet; older unseen frames are skipped.
    fn poll(&mut self, now_ns: u64) -> Result<Poll>;
}

type Generator = Box<dyn FnMut(u64) -> Vec<i64> + Send>;

enum Script {
    Frames(Vec<EncoderFrame>),
    Generated { rate_hz: f64, end_ns: u64, resolution_rad: f64, f: Generator },
}

/// Scripted or generated encoder stream with optional seeded tick jitter.
pub struct SimulatedEncoderSource {
    script: Script,
    next: usize,
    jitter: Option<(i64, ChaCha8Rng)>,
}

impl SimulatedEncoderSource {
    /// Frames must have strictly increasing timestamps.
    pub fn from_frames(frames: Vec<EncoderFrame>) -> Result<Self> {
        if let Some(w) = frames.windows(2).find(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(schema(format!(
                "script timestamps must increase strictly: {} then {}",
                w[0].timestamp, w[1].timestamp
            )));
        }
        Ok(Self { script: Script::Frames(frames), next: 0, jitter: None })
    }

    /// Frames from `f(t_ns)` every `1/rate_hz` seconds for `duration_s`.
    pub fn generator(
        rate_hz: f64,
        duration_s: f64,
        resolution_rad: f64,
        f: impl FnMut(u64) -> Vec<i64> + Send + 'static,
    ) -> Result<Self> {
        if !(rate_hz > 0.0) {
            return Err(invalid(format!("rate must be > 0, got {rate_hz}")));
        }
        let end_ns = (duration_s.max(0.0) * NANOS_PER_SEC).round() as u64;
        Ok(Self {
            script: Script::Generated { rate_hz, end_ns, resolution_rad, f: Box::new(f) },
            next: 0,
            jitter: None,
        })
    }

    /// Adds uniform integer jitter in `[-magnitude, magnitude]` to every tick.
    pub fn with_jitter(mut self, magnitude: i64, seed: u64) -> Self {
        self.jitter = (magnitude > 0).then(|| (magnitude, ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    fn stamp(&self, i: usize) -> Option<u64> {
        match &self.script {
            Script::Frames(f) => f.get(i).map(|f| f.timestamp),
            Script::Generated { rate_hz, end_ns, .. } => {
                let t = (i as f64 * NANOS_PER_SEC / rate_hz).round() as u64;
                (t <= *end_ns).then_some(t)
            }
        }
    }

    fn emit(&mut self, i: usize) -> Result<EncoderFrame> {
        let mut frame = match &mut self.script {
            Script::Frames(f) => f[i].clone(),
            Script::Generated { rate_hz, resolution_rad, f, .. } => {
                let t = (i as f64 * NANOS_PER_SEC / *rate_hz).round() as u64;
                EncoderFrame::new(f(t), *resolution_rad, t)?
            }
        };
        if let Some((m, rng)) = &mut self.jitter {
            for tick in &mut frame.ticks {
                *tick += rng.gen_range(-*m..=*m);
            }
        }
        Ok(frame)
    }
}

impl EncoderSource for SimulatedEncoderSource {
    fn poll(&mut self, now_ns: u64) -> Result<Poll> {
        let mut latest = None;
        while let Some(t) = self.stamp(self.next) {
            if t > now_ns {
                break;
            }
            // Skipped frames still draw jitter so emissions do not depend on polling times.
            latest = Some(self.emit(self.next)?);
            self.next += 1;
        }
        Ok(match latest {
            Some(f) => Poll::Frame(f),
            None if self.stamp(self.next).is_none() => Poll::Ended,
            None => Poll::Pending,
        })
    }
}

/// Single-slot, latest-wins hand-off between one producer and one consumer.
#[derive(Debug)]
pub struct Mailbox<T> {
    slot: Arc<Mutex<Slot<T>>>,
}

#[derive(Debug)]
struct Slot<T> {
    value: Option<T>,
    closed: bool,
}

impl<T> Clone for Mailbox<T> {
    fn clone(&self) -> Self {
        Self { slot: Arc::clone(&self.slot) }
    }
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Self { slot: Arc::new(Mutex::new(Slot { value: None, closed: false })) }
    }
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces whatever is waiting.
    pub fn put(&self, value: T) {
        self.slot.lock().expect("mailbox poisoned").value = Some(value);
    }

    pub fn take(&self) -> Option<T> {
        self.slot.lock().expect("mailbox poisoned").value.take()
    }

    pub fn close(&self) {
        self.slot.lock().expect("mailbox poisoned").closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.slot.lock().expect("mailbox poisoned").closed
    }
}

/// Encoder source fed through a mailbox by another thread or task.
#[derive(Debug, Clone, Default)]
pub struct MailboxSource {
    pub mailbox: Mailbox<EncoderFrame>,
}

impl EncoderSource for MailboxSource {
    fn poll(&mut self, _now_ns: u64) -> Result<Poll> {
        Ok(match self.mailbox.take() {
            Some(f) => Poll::Frame(f),
            None if self.mailbox.is_closed() => Poll::Ended,
            None => Poll::Pending,
        })
    }
}

/// What the robot reports at a tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: u64,
    /// Joint vector (7 joints + gripper width) per arm.
    pub joints: DualArmCommand,
}

pub trait RobotBackend {
    fn arms(&self) -> &[ArmDescriptor; 2];
    fn observe(&self) -> Observation;
    fn command(&mut self, cmd: &DualArmCommand, dt_s: f64) -> Result<()>;
    /// Keeps the current pose; issued once when a session stops.
    fn hold(&mut self) {}
    /// Full simulator state, for backends that have one.
    fn sim_state(&self) -> Option<&SimState> {
        None
    }
}

impl RobotBackend for SimBackend {
    fn arms(&self) -> &[ArmDescriptor; 2] {
        self.simulator().arms()
    }

    fn observe(&self) -> Observation {
        let s = self.state();
        Observation { t: s.sim_time, joints: DualArmCommand::hold(s) }
    }

    fn command(&mut self, cmd: &DualArmCommand, dt_s: f64) -> Result<()> {
        self.step(cmd, dt_s)
    }

    fn sim_state(&self) -> Option<&SimState> {
        Some(self.state())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Intent {
    Command(DualArmCommand),
    /// No fresh input: repeat the previous command.
    Stale,
    /// The input is over; the session stops before this tick.
    Finished,
}

/// Decides the command at each tick.
pub trait Commander {
    fn next(&mut self, now_ns: u64, obs: &Observation) -> Result<Intent>;
    /// Age of the input behind the last `Command`, for latency accounting.
    fn last_latency_ns(&self) -> Option<u64> {
        None
    }
    /// Encoder reading behind the most recent decision, if any.
    fn last_input(&self) -> Option<&EncoderFrame> {
        None
    }
}

/// Teleoperation: latest encoder frame mapped through the calibration.
pub struct TeleopCommander<'a, S: EncoderSource + ?Sized> {
    pub source: &'a mut S,
    pub cal: &'a CalibrationRecord,
    pub constraint: Option<&'a TaskConstraint>,
    pub timeout_ns: u64,
    latest: Option<EncoderFrame>,
    latency: Option<u64>,
}

impl<'a, S: EncoderSource + ?Sized> TeleopCommander<'a, S> {
    pub fn new(
        source: &'a mut S,
        cal: &'a CalibrationRecord,
        constraint: Option<&'a TaskConstraint>,
        cfg: &LoopConfig,
    ) -> Result<Self> {
        if let (Some(want), got) = (&cfg.task_constraint, constraint) {
            if got.map(|c| &c.task_id) != Some(want) {
                return Err(Error::Config(format!("task constraint '{want}' is not loaded")));
            }
        }
        Ok(Self {
            source,
            cal,
            constraint,
            timeout_ns: (cfg.command_timeout_ms * 1e6).round() as u64,
            latest: None,
            latency: None,
        })
    }
}

impl<S: EncoderSource + ?Sized> Commander for TeleopCommander<'_, S> {
    fn next(&mut self, now_ns: u64, _obs: &Observation) -> Result<Intent> {
        match self.source.poll(now_ns)? {
            Poll::Frame(f) => self.latest = Some(f),
            Poll::Pending => {}
            Poll::Ended => return Ok(Intent::Finished),
        }
        let Some(frame) = &self.latest else {
            return Ok(Intent::Stale);
        };
        let age = now_ns.saturating_sub(frame.timestamp);
        if age > self.timeout_ns {
            return Ok(Intent::Stale);
        }
        self.latency = Some(age);
        let mapped = map_frame(self.cal, frame, self.constraint)?;
        Ok(Intent::Command(DualArmCommand::from(&mapped)))
    }

    fn last_latency_ns(&self) -> Option<u64> {
        self.latency
    }

    fn last_input(&self) -> Option<&EncoderFrame> {
        self.latest.as_ref()
    }
}

/// One executed tick, as seen by observers.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub index: u64,
    /// Session time after the step.
    pub t: u64,
    pub command: DualArmCommand,
    pub stale: bool,
    /// Encoder ticks behind the command, when the input is an exoskeleton.
    pub encoder: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AbortReason {
    SourceDisconnected { message: String },
    BackendRejected { message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub session_id: String,
    pub stats: LoopStats,
    pub aborted: Option<AbortReason>,
    /// Set when the input ended before the duration elapsed.
    pub input_ended: bool,
}

/// Clamps into the arm limits and limits each joint's change from `prev`.
pub fn limit_command(
    cmd: &DualArmCommand,
    prev: &DualArmCommand,
    arms: &[ArmDescriptor; 2],
    max_delta: f64,
) -> Result<(DualArmCommand, bool)> {
    let mut out = cmd.clone();
    let mut clamped = false;
    for arm in ArmId::BOTH {
        let desc = &arms[arm.index()];
        let v = out.arm_mut(arm);
        if v.len() != desc.dof {
            return Err(schema(format!("dim mismatch {} != {}", v.len(), desc.dof)));
        }
        let before = v.clone();
        desc.clamp_into(v);
        clamped |= *v != before;
        let p = prev.arm(arm);
        for j in 0..desc.dof - 1 {
            let d = v[j] - p[j];
            if d.abs() > max_delta {
                v[j] = p[j] + max_delta.copysign(d);
            }
        }
    }
    Ok((out, clamped))
}

/// Runs `commander` against `backend` at the configured rate for `duration_s`.
///
/// Tick `n` happens at `n / rate` seconds after the start and steps the
/// backend by one period. `observer` sees every executed tick.
pub fn run_loop(
    commander: &mut dyn Commander,
    backend: &mut dyn RobotBackend,
    cfg: &LoopConfig,
    duration_s: f64,
    clock: &mut dyn Clock,
    observer: &mut dyn FnMut(&TickRecord, &dyn RobotBackend),
) -> Result<SessionOutcome> {
    cfg.validate()?;
    if !(duration_s >= 0.0) {
        return Err(invalid(format!("duration must be >= 0, got {duration_s}")));
    }
    let start = clock.now_ns();
    let session_id = format!("session-{start}");
    let ticks = cfg.tick_count(duration_s);
    let period_s = cfg.period_s();
    let max_delta = cfg.velocity_cap_rad_s * period_s;
    let arms = backend.arms().clone();

    let mut stats = LoopStats::default();
    let mut errors_ms = Vec::with_capacity(ticks as usize);
    let mut prev = backend.observe().joints;
    let mut aborted = None;
    let mut input_ended = false;

    for n in 0..ticks {
        let scheduled = start + cfg.tick_time_ns(n);
        clock.sleep_until(scheduled);
        let now = clock.now_ns();
        errors_ms.push(now.saturating_sub(scheduled) as f64 / 1e6);

        let obs = backend.observe();
        let intent = match commander.next(now - start, &obs) {
            Ok(i) => i,
            Err(Error::Disconnected(message)) => {
                aborted = Some(AbortReason::SourceDisconnected { message });
                break;
            }
            Err(e) => return Err(e),
        };
        let (cmd, stale) = match intent {
            Intent::Finished => {
                input_ended = true;
                break;
            }
            Intent::Stale => {
                stats.dropped_frames += 1;
                (prev.clone(), true)
            }
            Intent::Command(c) => {
                if let Some(l) = commander.last_latency_ns() {
                    stats.last_latency_ms = l as f64 / 1e6;
                }
                let (c, clamped) = limit_command(&c, &prev, &arms, max_delta)?;
                stats.clamped_commands += clamped as u64;
                (c, false)
            }
        };
        if let Err(e) = backend.command(&cmd, period_s) {
            aborted = Some(AbortReason::BackendRejected { message: e.to_string() });
            break;
        }
        stats.ticks_executed += 1;
        let record = TickRecord {
            index: n,
            t: now - start + cfg.tick_time_ns(1),
            command: cmd.clone(),
            stale,
            encoder: commander.last_input().map(|f| f.ticks.clone()),
        };
        observer(&record, backend);
        prev = cmd;
    }
    backend.hold();

    if !errors_ms.is_empty() {
        stats.mean_period_error_ms = errors_ms.iter().sum::<f64>() / errors_ms.len() as f64;
        stats.max_period_error_ms = errors_ms.iter().copied().fold(0.0, f64::max);
        let mut sorted = errors_ms;
        sorted.sort_by(f64::total_cmp);
        let idx = ((sorted.len() as f64 * 0.99).ceil() as usize).clamp(1, sorted.len()) - 1;
        stats.p99_period_error_ms = sorted[idx];
    }
    Ok(SessionOutcome { session_id, stats, aborted, input_ended })
}

/// Teleoperation session: encoder stream → calibration → backend.
#[allow(clippy::too_many_arguments)]
pub fn run_teleop_session(
    source: &mut dyn EncoderSource,
    cal: &CalibrationRecord,
    constraint: Option<&TaskConstraint>,
    backend: &mut dyn RobotBackend,
    cfg: &LoopConfig,
    duration_s: f64,
    clock: &mut dyn Clock,
    observer: &mut dyn FnMut(&TickRecord, &dyn RobotBackend),
) -> Result<SessionOutcome> {
    let mut commander = TeleopCommander::new(source, cal, constraint, cfg)?;
    run_loop(&mut commander, backend, cfg, duration_s, clock, observer)
}
