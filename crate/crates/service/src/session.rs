//! Transport-free session state: clients, operator role, modes and the
//! control tick. The server wraps one of these behind a lock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use exo_core::calibration::{map_frame, CalibrationRecord, TaskConstraint};
use exo_core::config::DualChain;
use exo_core::control::{limit_command, LoopConfig, RobotBackend};
use exo_core::metrics::score_state;
use exo_core::model::{default_resolution_rad, ArmId, EncoderFrame, DUAL_ARM_TICKS};
use exo_core::policy::{NeighborDatabase, PolicyCommander, PolicyConfig};
use exo_core::recorder::{frame_from_state, recorded_world, DemoFrame, DemoHeader, Demonstration, Dims, Domain, DEMO_SCHEMA};
use exo_core::sim::{DualArmCommand, SimBackend, Simulator, World, WorldConfig};

use crate::error::{rejected, Result, ServiceError};
use crate::wire::{
    Body, CommandEcho, EncoderInput, ErrorPayload, EvalCtl, Event, Hello, Mode, RecordCtl, ReplayCtl, Role,
    ServerInfo, SessionHandle, StatePayload, WireMessage, WIRE_SCHEMA,
};

pub type ClientId = u64;

/// A message addressed to one client, already stamped with its `seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: ClientId,
    pub msg: WireMessage,
}

#[derive(Debug, Clone)]
pub struct SessionSetup {
    pub world: WorldConfig,
    pub calibration: CalibrationRecord,
    pub constraint: Option<TaskConstraint>,
    pub chains: DualChain,
    pub control: LoopConfig,
    pub state_decimation: u32,
    pub data_dir: PathBuf,
    /// Lockstep time: the session only advances on accepted input or an
    /// explicit step request.
    pub virtual_time: bool,
}

impl SessionSetup {
    pub fn new(world: WorldConfig, calibration: CalibrationRecord, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            world,
            calibration,
            constraint: None,
            chains: DualChain::default(),
            control: LoopConfig::default(),
            state_decimation: 1,
            data_dir: data_dir.into(),
            virtual_time: false,
        }
    }
}

#[derive(Debug, Default)]
struct Client {
    next_seq: u64,
    last_in: Option<u64>,
}

#[derive(Debug)]
struct Input {
    ticks: Vec<i64>,
    received: u64,
    /// Not yet echoed back to the operator.
    fresh: bool,
}

#[derive(Debug)]
struct Recording {
    id: String,
    start: u64,
    mode: Mode,
    frames: Vec<DemoFrame>,
}

#[derive(Debug)]
struct ReplayRun {
    demo: Demonstration,
    rate_scale: f64,
    ticks: u64,
}

pub struct ServiceCore {
    setup: SessionSetup,
    backend: SimBackend,
    session_id: String,
    mode: Mode,
    clients: BTreeMap<ClientId, Client>,
    next_client: ClientId,
    operator: Option<ClientId>,
    input: Option<Input>,
    prev: DualArmCommand,
    tick: u64,
    seed: u64,
    trial_start: u64,
    recording: Option<Recording>,
    replay: Option<ReplayRun>,
    policy: Option<PolicyCommander<Arc<NeighborDatabase>>>,
}

impl ServiceCore {
    pub fn new(setup: SessionSetup) -> Result<Self> {
        setup.control.validate()?;
        if setup.state_decimation == 0 {
            return Err(ServiceError::Config("state_decimation must be >= 1".into()));
        }
        let sim = Simulator::new(exo_core::config::default_arms(), setup.chains.clone(), setup.world.clone())?;
        let seed = setup.world.seed;
        let backend = SimBackend::with_seed(sim, seed);
        let prev = DualArmCommand::hold(backend.state());
        Ok(Self {
            session_id: format!("exo-{}-{seed}", setup.world.kind()),
            setup,
            backend,
            mode: Mode::Idle,
            clients: BTreeMap::new(),
            next_client: 1,
            operator: None,
            input: None,
            prev,
            tick: 0,
            seed,
            trial_start: 0,
            recording: None,
            replay: None,
            policy: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn operator(&self) -> Option<ClientId> {
        self.operator
    }

    pub fn backend(&self) -> &SimBackend {
        &self.backend
    }

    pub fn virtual_time(&self) -> bool {
        self.setup.virtual_time
    }

    pub fn control(&self) -> &LoopConfig {
        &self.setup.control
    }

    /// Session time of the latest state.
    pub fn now(&self) -> u64 {
        self.setup.control.tick_time_ns(self.tick)
    }

    pub fn handle(&self) -> SessionHandle {
        SessionHandle {
            session_id: self.session_id.clone(),
            mode: self.mode,
            world_id: format!("{}#{}", self.setup.world.kind(), self.seed),
            clients: self.clients.len(),
        }
    }

    fn send(&mut self, to: ClientId, body: Body) -> Option<Outgoing> {
        let t = self.now();
        let client = self.clients.get_mut(&to)?;
        let seq = client.next_seq;
        client.next_seq += 1;
        Some(Outgoing { to, msg: WireMessage { seq, t, body } })
    }

    fn broadcast(&mut self, body: Body) -> Vec<Outgoing> {
        let ids: Vec<ClientId> = self.clients.keys().copied().collect();
        ids.into_iter().filter_map(|id| self.send(id, body.clone())).collect()
    }

    fn event(&mut self, kind: &str, detail: serde_json::Value) -> Vec<Outgoing> {
        self.broadcast(Body::Event(Event { kind: kind.into(), detail }))
    }

    fn set_mode(&mut self, mode: Mode) -> Vec<Outgoing> {
        if mode == self.mode {
            return Vec::new();
        }
        let from = self.mode;
        self.mode = mode;
        if mode != Mode::Replay {
            self.replay = None;
        }
        if mode != Mode::Policy {
            self.policy = None;
        }
        self.event("mode", json!({ "from": from, "to": mode }))
    }

    pub fn connect(&mut self) -> (ClientId, Vec<Outgoing>) {
        let id = self.next_client;
        self.next_client += 1;
        self.clients.insert(id, Client::default());
        let info = ServerInfo {
            session: self.handle(),
            world: self.setup.world.clone(),
            chains: self.setup.chains.config(),
            arms: self.backend.arms().clone(),
            resolution_rad: default_resolution_rad(),
            encoder_dim: DUAL_ARM_TICKS,
            control_rate_hz: self.setup.control.control_rate_hz,
            state_decimation: self.setup.state_decimation,
            virtual_time: self.setup.virtual_time,
        };
        let hello = Body::Hello(Hello { schema: WIRE_SCHEMA.into(), role: None, server: Some(Box::new(info)) });
        (id, self.send(id, hello).into_iter().collect())
    }

    pub fn disconnect(&mut self, id: ClientId) -> Vec<Outgoing> {
        self.clients.remove(&id);
        let mut out = Vec::new();
        if self.operator == Some(id) {
            out.extend(self.release_operator());
        }
        out
    }

    fn release_operator(&mut self) -> Vec<Outgoing> {
        self.operator = None;
        self.input = None;
        let mut out = self.event("operator_released", json!({}));
        if self.mode == Mode::Teleop {
            out.extend(self.set_mode(Mode::Idle));
        }
        out
    }

    pub fn handle_text(&mut self, from: ClientId, text: &str) -> Vec<Outgoing> {
        match WireMessage::from_json(text) {
            Ok(msg) => self.handle_message(from, msg),
            Err(e) => self.reject(from, e.to_string(), None),
        }
    }

    /// An error message to one client.
    pub fn reject(&mut self, to: ClientId, message: String, in_reply_to: Option<u64>) -> Vec<Outgoing> {
        self.send(to, Body::Error(ErrorPayload { message, in_reply_to })).into_iter().collect()
    }

    pub fn handle_message(&mut self, from: ClientId, msg: WireMessage) -> Vec<Outgoing> {
        let Some(client) = self.clients.get_mut(&from) else {
            return Vec::new();
        };
        if let Some(last) = client.last_in {
            if msg.seq <= last {
                let detail = json!({ "seq": msg.seq, "last": last, "type": msg.body.kind() });
                return self
                    .send(from, Body::Event(Event { kind: "stale_seq".into(), detail }))
                    .into_iter()
                    .collect();
            }
        }
        client.last_in = Some(msg.seq);
        let seq = msg.seq;
        match self.dispatch(from, msg.body) {
            Ok(out) => out,
            Err(e) => self.reject(from, e.to_string(), Some(seq)),
        }
    }

    fn require_operator(&self, from: ClientId, what: &str) -> Result<()> {
        if self.operator != Some(from) {
            return Err(rejected(format!("{what} requires the operator role")));
        }
        Ok(())
    }

    fn dispatch(&mut self, from: ClientId, body: Body) -> Result<Vec<Outgoing>> {
        match body {
            Body::Hello(h) => self.on_hello(from, h),
            Body::EncoderInput(input) => {
                self.require_operator(from, "encoder_input")?;
                self.on_encoder_input(input)
            }
            Body::RecordCtl(c) => {
                self.require_operator(from, "record_ctl")?;
                self.on_record(c)
            }
            Body::ReplayCtl(c) => {
                self.require_operator(from, "replay_ctl")?;
                self.on_replay(c)
            }
            Body::EvalCtl(c) => {
                self.require_operator(from, "eval_ctl")?;
                self.on_eval(c)
            }
            other => Err(rejected(format!("clients may not send {}", other.kind()))),
        }
    }

    fn on_hello(&mut self, from: ClientId, h: Hello) -> Result<Vec<Outgoing>> {
        if h.schema != WIRE_SCHEMA {
            return Err(rejected(format!("unsupported schema '{}'", h.schema)));
        }
        match h.role {
            Some(Role::Operator) => match self.operator {
                Some(id) if id == from => Ok(Vec::new()),
                Some(_) => Err(rejected("operator role already held")),
                None => {
                    self.operator = Some(from);
                    Ok(self.event("operator_granted", json!({ "client": from })))
                }
            },
            Some(Role::Observer) if self.operator == Some(from) => Ok(self.release_operator()),
            _ => Ok(Vec::new()),
        }
    }

    fn on_encoder_input(&mut self, input: EncoderInput) -> Result<Vec<Outgoing>> {
        input.validate()?;
        if !matches!(self.mode, Mode::Idle | Mode::Teleop) {
            return Err(rejected(format!("encoder input ignored in {} mode", self.mode.name())));
        }
        self.input = Some(Input { ticks: input.ticks, received: self.now(), fresh: true });
        let mut out = self.set_mode(Mode::Teleop);
        if self.setup.virtual_time {
            out.extend(self.tick()?);
        }
        Ok(out)
    }

    fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.setup.data_dir.join(p)
        }
    }

    fn on_record(&mut self, c: RecordCtl) -> Result<Vec<Outgoing>> {
        match c {
            RecordCtl::Start { id } => {
                if self.recording.is_some() {
                    return Err(rejected("already recording"));
                }
                let id = id.unwrap_or_else(|| format!("rec-{}-{}", self.session_id, self.tick));
                if id.is_empty() || id.contains(['/', '\\']) {
                    return Err(rejected(format!("recording id '{id}' is not a file name")));
                }
                self.recording = Some(Recording { id: id.clone(), start: self.now(), mode: self.mode, frames: Vec::new() });
                Ok(self.event("recording_started", json!({ "id": id })))
            }
            RecordCtl::Stop => {
                let rec = self.recording.take().ok_or_else(|| rejected("not recording"))?;
                let n = rec.frames.len();
                if n < 2 {
                    return Err(rejected(format!("recording '{}' has {n} frames; at least 2 are needed", rec.id)));
                }
                let path = self.save_recording(rec)?;
                Ok(self.event("recording_saved", json!({ "path": path, "frames": n })))
            }
        }
    }

    fn save_recording(&self, rec: Recording) -> Result<PathBuf> {
        let mut metadata = BTreeMap::new();
        metadata.insert("source".into(), json!(format!("service-{}", rec.mode.name())));
        metadata.insert("world".into(), serde_json::to_value(&self.setup.world)?);
        metadata.insert("world_seed".into(), json!(self.seed));
        let header = DemoHeader {
            schema: DEMO_SCHEMA.into(),
            id: rec.id.clone(),
            domain: Domain::Teleoperated,
            task_id: self.setup.world.kind().into(),
            calibration_ref: (rec.mode == Mode::Teleop).then(|| self.setup.calibration.id()),
            dims: Dims::new(2, 0),
            start_t: 0,
            metadata,
        };
        let demo = Demonstration::new(header, rec.frames)?;
        std::fs::create_dir_all(&self.setup.data_dir)?;
        let path = self.setup.data_dir.join(format!("{}.demo", rec.id));
        demo.save(&path)?;
        Ok(path)
    }

    fn on_replay(&mut self, c: ReplayCtl) -> Result<Vec<Outgoing>> {
        match c {
            ReplayCtl::Start { path, rate_scale } => {
                if !rate_scale.is_finite() || rate_scale <= 0.0 {
                    return Err(rejected(format!("rate_scale must be > 0, got {rate_scale}")));
                }
                let demo = Demonstration::load(self.resolve(&path))?;
                let found = match recorded_world(&demo) {
                    Ok((w, _)) => w.kind().to_owned(),
                    Err(_) => demo.header.task_id.clone(),
                };
                if found != self.setup.world.kind() {
                    return Err(exo_core::Error::WorldType { expected: self.setup.world.kind().into(), found }.into());
                }
                let frames = demo.frames.len();
                let mut out = self.set_mode(Mode::Replay);
                self.replay = Some(ReplayRun { demo, rate_scale, ticks: 0 });
                out.extend(self.event("replay_started", json!({ "path": path, "frames": frames })));
                Ok(out)
            }
            ReplayCtl::Stop => Ok(self.set_mode(Mode::Idle)),
        }
    }

    fn on_eval(&mut self, c: EvalCtl) -> Result<Vec<Outgoing>> {
        match c {
            EvalCtl::Reset { seed } => {
                let seed = seed.unwrap_or(self.setup.world.seed);
                self.backend.reset(seed);
                self.seed = seed;
                self.prev = DualArmCommand::hold(self.backend.state());
                self.trial_start = self.tick;
                let mut out = if self.mode == Mode::Teleop { Vec::new() } else { self.set_mode(Mode::Idle) };
                out.extend(self.event("reset", json!({ "seed": seed })));
                Ok(out)
            }
            EvalCtl::Score => Ok(self.score()?),
            EvalCtl::RunPolicy { db, policy } => self.start_policy(&db, &policy),
            EvalCtl::Stop => Ok(self.set_mode(Mode::Idle)),
            EvalCtl::Step { ticks } => {
                if !self.setup.virtual_time {
                    return Err(rejected("step needs a virtual-time session"));
                }
                let mut out = Vec::new();
                for _ in 0..ticks {
                    out.extend(self.tick()?);
                }
                Ok(out)
            }
        }
    }

    fn start_policy(&mut self, db: &str, policy: &PolicyConfig) -> Result<Vec<Outgoing>> {
        let db = NeighborDatabase::load(self.resolve(db))?;
        let entries = db.len();
        let commander = PolicyCommander::new(Arc::new(db), policy, self.setup.control.control_rate_hz)?;
        let mut out = self.set_mode(Mode::Policy);
        self.policy = Some(commander);
        self.trial_start = self.tick;
        out.extend(self.event("policy_started", json!({ "entries": entries, "policy": policy })));
        Ok(out)
    }

    fn score(&mut self) -> Result<Vec<Outgoing>> {
        let duration = (self.tick - self.trial_start) as f64 * self.setup.control.period_s();
        let result = score_state(self.backend.state(), duration, false)?;
        Ok(self.event("trial_scored", serde_json::to_value(&result)?))
    }

    fn teleop_command(&self) -> Result<Option<DualArmCommand>> {
        let Some(input) = &self.input else {
            return Ok(None);
        };
        let timeout = (self.setup.control.command_timeout_ms * 1e6).round() as u64;
        if self.now().saturating_sub(input.received) > timeout {
            return Ok(None);
        }
        let frame = EncoderFrame::dual_arm(input.ticks.clone(), input.received)?;
        let mapped = map_frame(&self.setup.calibration, &frame, self.setup.constraint.as_ref())?;
        Ok(Some(DualArmCommand::from(&mapped)))
    }

    /// Next replay command, or `None` once the demonstration is exhausted.
    fn replay_command(&mut self) -> Result<Option<DualArmCommand>> {
        let period_ns = self.setup.control.period_ns();
        let Some(run) = &mut self.replay else {
            return Ok(None);
        };
        let frames = &run.demo.frames;
        let target = frames[0].t as f64 + run.ticks as f64 * period_ns * run.rate_scale;
        if target > frames[frames.len() - 1].t as f64 + 0.5 {
            return Ok(None);
        }
        let i = frames.partition_point(|f| f.t as f64 <= target + 0.5).max(1) - 1;
        run.ticks += 1;
        let action = frames[i].action();
        let cmd = DualArmCommand::from_flat(&action)?;
        Ok(Some(self.backend.simulator().clamp_command(&cmd)?.0))
    }

    /// Runs one control tick and returns the messages it produces.
    pub fn tick(&mut self) -> Result<Vec<Outgoing>> {
        let mut out = Vec::new();
        let arms = self.backend.arms().clone();
        let max_delta = self.setup.control.velocity_cap_rad_s * self.setup.control.period_s();
        let mut clamped = false;
        let mut stale = false;
        let cmd = match self.mode {
            Mode::Idle => self.prev.clone(),
            Mode::Teleop => match self.teleop_command()? {
                Some(c) => {
                    let (c, cl) = limit_command(&c, &self.prev, &arms, max_delta)?;
                    clamped = cl;
                    c
                }
                None => {
                    stale = true;
                    self.prev.clone()
                }
            },
            Mode::Replay => match self.replay_command()? {
                Some(c) => c,
                None => {
                    out.extend(self.event("replay_finished", json!({})));
                    out.extend(self.set_mode(Mode::Idle));
                    self.prev.clone()
                }
            },
            Mode::Policy => {
                let obs = self.backend.observe();
                let policy = self.policy.as_mut().expect("policy mode holds a commander");
                let (c, cl) = limit_command(&policy.act(&obs)?, &self.prev, &arms, max_delta)?;
                clamped = cl;
                c
            }
        };
        if let Err(e) = self.backend.command(&cmd, self.setup.control.period_s()) {
            out.extend(self.event("backend_rejected", json!({ "message": e.to_string() })));
            out.extend(self.set_mode(Mode::Idle));
            return Ok(out);
        }
        self.prev = cmd;
        self.tick += 1;

        let encoder = match self.mode {
            Mode::Teleop => self.input.as_ref().map(|i| i.ticks.clone()),
            _ => None,
        };
        let t = self.now();
        let frame = frame_from_state(&self.setup.chains, self.backend.state(), t, encoder.as_deref())?;
        if let Some(rec) = &mut self.recording {
            let mut f = frame.clone();
            f.t = t - rec.start;
            if rec.mode == Mode::Idle {
                rec.mode = self.mode;
            }
            rec.frames.push(f);
        }
        if self.mode == Mode::Teleop {
            if let (Some(op), Some(input)) = (self.operator, self.input.as_mut()) {
                if input.fresh || stale {
                    input.fresh = false;
                    let mut command = [0.0; 16];
                    command.copy_from_slice(&self.prev.to_flat());
                    let echo = CommandEcho { tick: self.tick, command, stale, clamped };
                    out.extend(self.send(op, Body::CommandEcho(echo)));
                }
            }
        }
        if self.tick.is_multiple_of(self.setup.state_decimation as u64) {
            let state = self.state_payload(&frame, encoder);
            out.extend(self.broadcast(Body::State(state)));
        }
        if self.mode == Mode::Policy {
            let steps = self.setup.world.protocol.steps(self.setup.control.control_rate_hz);
            if self.tick - self.trial_start >= steps {
                out.extend(self.score()?);
                out.extend(self.set_mode(Mode::Idle));
            }
        }
        Ok(out)
    }

    fn state_payload(&self, frame: &DemoFrame, encoder: Option<Vec<i64>>) -> StatePayload {
        let s = self.backend.state();
        StatePayload {
            tick: self.tick,
            mode: self.mode,
            joint_pos: frame.joint_pos,
            joint_vel: frame.joint_vel,
            tcp_pos: frame.tcp_pos,
            gripper: [frame.gripper[ArmId::Left.index()], frame.gripper[ArmId::Right.index()]],
            encoder,
            collided: s.collided(),
            stage_flags: match &s.world {
                World::CurtainedShelf(w) => Some(w.stage_flags),
                World::GatherBalls(_) => None,
            },
            recording: self.recording.is_some(),
        }
    }
}
