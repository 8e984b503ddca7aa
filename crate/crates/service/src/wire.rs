//! Messages exchanged with console clients, one JSON document per frame.
//!
//! Every message is `{"type": ..., "seq": n, "t": ns, "payload": {...}}`.
//! `seq` counts up per direction per connection; `t` is session time.

use serde::{Deserialize, Serialize};

use exo_core::kinematics::DualChainConfig;
use exo_core::model::{ArmDescriptor, DUAL_ARM_TICKS};
use exo_core::policy::PolicyConfig;
use exo_core::recorder::GripperObs;
use exo_core::sim::{StageFlags, WorldConfig};

use crate::error::{Result, ServiceError};

pub const WIRE_SCHEMA: &str = "airexo-wire/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub seq: u64,
    pub t: u64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Body {
    Hello(Hello),
    State(StatePayload),
    EncoderInput(EncoderInput),
    CommandEcho(CommandEcho),
    RecordCtl(RecordCtl),
    ReplayCtl(ReplayCtl),
    EvalCtl(EvalCtl),
    Event(Event),
    Error(ErrorPayload),
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello(_) => "hello",
            Body::State(_) => "state",
            Body::EncoderInput(_) => "encoder_input",
            Body::CommandEcho(_) => "command_echo",
            Body::RecordCtl(_) => "record_ctl",
            Body::ReplayCtl(_) => "replay_ctl",
            Body::EvalCtl(_) => "eval_ctl",
            Body::Event(_) => "event",
            Body::Error(_) => "error",
        }
    }
}

impl WireMessage {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let msg: Self = serde_json::from_str(text).map_err(|e| ServiceError::Malformed(e.to_string()))?;
        if let Body::Hello(h) = &msg.body {
            if h.schema != WIRE_SCHEMA {
                return Err(ServiceError::Malformed(format!("unsupported schema '{}'", h.schema)));
            }
        }
        Ok(msg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    Teleop,
    Replay,
    Policy,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Idle => "idle",
            Mode::Teleop => "teleop",
            Mode::Replay => "replay",
            Mode::Policy => "policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub mode: Mode,
    /// World kind and seed, e.g. `gather_balls#7`.
    pub world_id: String,
    pub clients: usize,
}

/// Sent by the server on connect. A client answers with its own hello,
/// carrying only `schema` and `role`, to claim the operator role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server: Option<Box<ServerInfo>>,
}

impl Hello {
    pub fn claim(role: Role) -> Self {
        Self { schema: WIRE_SCHEMA.into(), role: Some(role), server: None }
    }
}

/// Everything a console needs to draw the scene and quantize input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub session: SessionHandle,
    pub world: WorldConfig,
    pub chains: DualChainConfig,
    pub arms: [ArmDescriptor; 2],
    pub resolution_rad: f64,
    pub encoder_dim: usize,
    pub control_rate_hz: f64,
    /// A state message goes out every this many ticks.
    pub state_decimation: u32,
    pub virtual_time: bool,
}

/// One post-step snapshot; `tcp_pos` is FK of `joint_pos`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    pub tick: u64,
    pub mode: Mode,
    pub joint_pos: [f64; 14],
    pub joint_vel: [f64; 14],
    /// Position and quaternion `[x, y, z, qx, qy, qz, qw]` per arm.
    pub tcp_pos: [f64; 14],
    pub gripper: [GripperObs; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<Vec<i64>>,
    pub collided: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_flags: Option<StageFlags>,
    pub recording: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderInput {
    pub ticks: Vec<i64>,
}

impl EncoderInput {
    pub fn validate(&self) -> Result<()> {
        if self.ticks.len() != DUAL_ARM_TICKS {
            return Err(ServiceError::Rejected(format!("dim mismatch {} != {DUAL_ARM_TICKS}", self.ticks.len())));
        }
        Ok(())
    }
}

/// The command executed on the tick that consumed the operator's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEcho {
    pub tick: u64,
    /// 7 joints and gripper width, left arm first.
    pub command: [f64; 16],
    pub stale: bool,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RecordCtl {
    Start {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
    },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReplayCtl {
    Start {
        /// Demonstration file, relative paths resolve against the data directory.
        path: String,
        #[serde(default = "one")]
        rate_scale: f64,
    },
    Stop,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum EvalCtl {
    /// Respawn the world; the trial clock restarts.
    Reset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Score the current state as a finished trial.
    Score,
    /// Hand control to the nearest-neighbor policy.
    RunPolicy {
        db: String,
        #[serde(default)]
        policy: PolicyConfig,
    },
    /// Back to idle from policy or replay.
    Stop,
    /// Advance a lockstep (virtual-time) session by `ticks`.
    Step { ticks: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: String,
    #[serde(default)]
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
    /// `seq` of the offending client message, when there was one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<u64>,
}
