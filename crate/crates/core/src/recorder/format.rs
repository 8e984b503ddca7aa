//! Demonstration frames and the on-disk file format.
//!
//! A file is one line of JSON (the header) followed by fixed-stride
//! little-endian frame records:
//!
//! | field      | type       | count  |
//! |------------|------------|--------|
//! | t          | u64        | 1      |
//! | joint_pos  | f64        | 14     |
//! | joint_vel  | f64        | 14     |
//! | tcp_pos    | f64        | 14     |
//! | tcp_vel    | f64        | 12     |
//! | base_ft    | f64        | 12     |
//! | tcp_ft     | f64        | 12     |
//! | gripper    | f64        | 6 · G  |
//! | encoder    | i32        | 16     |
//! | image_refs | [u8; 32]   | C      |
//!
//! The stride is `696 + 48·G + 32·C` bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{schema, Result};
use crate::model::{ArmId, ARM_JOINTS, DUAL_ARM_TICKS};

pub const DEMO_SCHEMA: &str = "airexo-demo/1";
pub const JOINT_DIM: usize = 2 * ARM_JOINTS;
pub const TCP_POSE_DIM: usize = 14;
pub const TCP_VEL_DIM: usize = 12;
pub const FT_DIM: usize = 12;
pub const GRIPPER_FIELDS: usize = 6;
/// Dual-arm action: per arm 7 joints then the gripper width.
pub const ACTION_DIM: usize = 2 * (ARM_JOINTS + 1);
const FIXED_REALS: usize = 2 * JOINT_DIM + TCP_POSE_DIM + TCP_VEL_DIM + 2 * FT_DIM;
const QUAT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Teleoperated,
    InTheWild,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Teleoperated => "teleoperated",
            Domain::InTheWild => "in_the_wild",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GripperObs {
    pub width: f64,
    pub force: f64,
    pub status: f64,
    pub last_cmd_width: f64,
    pub last_cmd_force: f64,
    /// Time of the last command, ns.
    pub last_cmd_t: f64,
}

impl GripperObs {
    fn to_array(self) -> [f64; GRIPPER_FIELDS] {
        [self.width, self.force, self.status, self.last_cmd_width, self.last_cmd_force, self.last_cmd_t]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self {
            width: v[0],
            force: v[1],
            status: v[2],
            last_cmd_width: v[3],
            last_cmd_force: v[4],
            last_cmd_t: v[5],
        }
    }
}

/// Content hash of an image blob stored outside the demonstration file.
pub type ImageRef = [u8; 32];

pub fn image_ref(blob: &[u8]) -> ImageRef {
    Sha256::digest(blob).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoFrame {
    pub t: u64,
    /// Left 7 then right 7.
    pub joint_pos: [f64; JOINT_DIM],
    pub joint_vel: [f64; JOINT_DIM],
    /// Per arm `[x, y, z, rx, ry, rz, rw]`, left first.
    pub tcp_pos: [f64; TCP_POSE_DIM],
    /// Per arm `[vx, vy, vz, wx, wy, wz]`, left first.
    pub tcp_vel: [f64; TCP_VEL_DIM],
    pub base_ft: [f64; FT_DIM],
    pub tcp_ft: [f64; FT_DIM],
    /// One entry per gripper present, left first.
    pub gripper: Vec<GripperObs>,
    pub encoder: [i64; DUAL_ARM_TICKS],
    pub image_refs: Vec<ImageRef>,
}

impl DemoFrame {
    pub fn arm_joints(&self, arm: ArmId) -> &[f64] {
        &self.joint_pos[arm.index() * ARM_JOINTS..][..ARM_JOINTS]
    }

    /// Action vector: per arm the 7 joints then the commanded gripper width.
    pub fn action(&self) -> Vec<f64> {
        let mut a = Vec::with_capacity(ACTION_DIM);
        for arm in ArmId::BOTH {
            a.extend_from_slice(self.arm_joints(arm));
            a.push(self.gripper.get(arm.index()).map_or(0.0, |g| g.last_cmd_width));
        }
        a
    }

    /// Gripper widths, left first (0 for a missing gripper).
    pub fn gripper_widths(&self) -> [f64; 2] {
        [0, 1].map(|i| self.gripper.get(i).map_or(0.0, |g| g.width))
    }

    fn check(&self, dims: &Dims) -> Result<()> {
        if self.gripper.len() != dims.grippers || self.image_refs.len() != dims.cameras {
            return Err(schema(format!(
                "frame at t={} has {} grippers and {} images, header says {} and {}",
                self.t,
                self.gripper.len(),
                self.image_refs.len(),
                dims.grippers,
                dims.cameras
            )));
        }
        for arm in 0..2 {
            let q = &self.tcp_pos[arm * 7 + 3..arm * 7 + 7];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > QUAT_TOLERANCE {
                return Err(schema(format!("frame at t={}: tcp quaternion norm {n}", self.t)));
            }
        }
        let all = self
            .joint_pos
            .iter()
            .chain(&self.joint_vel)
            .chain(&self.tcp_pos)
            .chain(&self.tcp_vel)
            .chain(&self.base_ft)
            .chain(&self.tcp_ft);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(schema(format!("frame at t={} has non-finite values", self.t)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub grippers: usize,
    pub cameras: usize,
    pub stride: usize,
}

impl Dims {
    pub fn new(grippers: usize, cameras: usize) -> Self {
        Self { grippers, cameras, stride: stride(grippers, cameras) }
    }
}

/// Bytes per frame record.
pub fn stride(grippers: usize, cameras: usize) -> usize {
    8 + 8 * (FIXED_REALS + GRIPPER_FIELDS * grippers) + 4 * DUAL_ARM_TICKS + 32 * cameras
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoHeader {
    pub schema: String,
    pub id: String,
    pub domain: Domain,
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_ref: Option<String>,
    pub dims: Dims,
    /// Session time the first frame's step started from.
    pub start_t: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub header: DemoHeader,
    pub frames: Vec<DemoFrame>,
}

impl Demonstration {
    pub fn new(header: DemoHeader, frames: Vec<DemoFrame>) -> Result<Self> {
        let d = Self { header, frames };
        d.validate()?;
        Ok(d)
    }

    pub fn id(&self) -> &str {
        &self.header.id
    }

    pub fn domain(&self) -> Domain {
        self.header.domain
    }

    pub fn metadata(&self, key: &str) -> Option<&serde_json::Value> {
        self.header.metadata.get(key)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.schema != DEMO_SCHEMA {
            return Err(schema(format!("unknown demo schema '{}'", h.schema)));
        }
        if h.dims.stride != stride(h.dims.grippers, h.dims.cameras) {
            return Err(schema(format!("header stride {} does not match dims", h.dims.stride)));
        }
        if h.domain == Domain::InTheWild && h.calibration_ref.is_none() {
            return Err(schema("in_the_wild demonstration without calibration_ref"));
        }
        if self.frames.len() < 2 {
            return Err(schema(format!("a demonstration needs at least 2 frames, got {}", self.frames.len())));
        }
        if let Some(w) = self.frames.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(schema(format!("frame times must increase: {} then {}", w[0].t, w[1].t)));
        }
        self.frames.iter().try_for_each(|f| f.check(&h.dims))
    }

    /// `(n − 1) / (t_last − t_first)` in Hz.
    pub fn mean_hz(&self) -> f64 {
        let n = self.frames.len();
        let span = (self.frames[n - 1].t - self.frames[0].t) as f64 / 1e9;
        (n - 1) as f64 / span
    }

    pub fn duration_s(&self) -> f64 {
        (self.frames[self.frames.len() - 1].t - self.frames[0].t) as f64 / 1e9
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        let header = serde_json::to_string(&self.header)?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.header.dims.stride);
        for f in &self.frames {
            buf.clear();
            encode_frame(f, &mut buf)?;
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| schema("demonstration file has no header line"))?;
        let header: DemoHeader = serde_json::from_slice(&bytes[..nl])?;
        let body = &bytes[nl + 1..];
        let stride = header.dims.stride;
        if stride == 0 || !body.len().is_multiple_of(stride) {
            return Err(schema(format!("body of {} bytes is not a whole number of {stride}-byte frames", body.len())));
        }
        let frames = body
            .chunks_exact(stride)
            .map(|rec| decode_frame(rec, &header.dims))
            .collect::<Result<Vec<_>>>()?;
        Self::new(header, frames)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::ensure_parent(path.as_ref())?;
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Random access to the frames of a file without loading all of them.
pub struct DemoFile {
    pub header: DemoHeader,
    file: File,
    body_offset: u64,
    frame_count: u64,
}

impl DemoFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            if file.read(&mut byte)? == 0 {
                return Err(schema("demonstration file has no header line"));
            }
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        let header: DemoHeader = serde_json::from_slice(&line)?;
        let body_offset = line.len() as u64 + 1;
        let len = file.metadata()?.len() - body_offset;
        let stride = header.dims.stride as u64;
        if stride == 0 || !len.is_multiple_of(stride) {
            return Err(schema("truncated frame record"));
        }
        Ok(Self { frame_count: len / stride, header, file, body_offset })
    }

    pub fn frame_count(&self) -> u64 {
        self.frame_count
    }

    pub fn frame(&mut self, index: u64) -> Result<DemoFrame> {
        if index >= self.frame_count {
            return Err(schema(format!("frame {index} out of {}", self.frame_count)));
        }
        let stride = self.header.dims.stride;
        self.file.seek(SeekFrom::Start(self.body_offset + index * stride as u64))?;
        let mut rec = vec![0u8; stride];
        self.file.read_exact(&mut rec)?;
        decode_frame(&rec, &self.header.dims)
    }
}

fn encode_frame(f: &DemoFrame, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(&f.t.to_le_bytes());
    let reals = f
        .joint_pos
        .iter()
        .chain(&f.joint_vel)
        .chain(&f.tcp_pos)
        .chain(&f.tcp_vel)
        .chain(&f.base_ft)
        .chain(&f.tcp_ft);
    for v in reals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in &f.gripper {
        for v in g.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &tick in &f.encoder {
        let v = i32::try_from(tick).map_err(|_| schema(format!("encoder tick {tick} does not fit in 32 bits")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in &f.image_refs {
        out.extend_from_slice(r);
    }
    Ok(())
}

fn decode_frame(rec: &[u8], dims: &Dims) -> Result<DemoFrame> {
    if rec.len() != dims.stride {
        return Err(schema(format!("record of {} bytes, stride {}", rec.len(), dims.stride)));
    }
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = &rec[pos..pos + n];
        pos += n;
        s
    };
    let t = u64::from_le_bytes(take(8).try_into().expect("8 bytes"));
    let mut real = || f64::from_le_bytes(take(8).try_into().expect("8 bytes"));
    let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = real());
    let mut f = DemoFrame {
        t,
        joint_pos: [0.0; JOINT_DIM],
        joint_vel: [0.0; JOINT_DIM],
        tcp_pos: [0.0; TCP_POSE_DIM],
        tcp_vel: [0.0; TCP_VEL_DIM],
        base_ft: [0.0; FT_DIM],
        tcp_ft: [0.0; FT_DIM],
        gripper: Vec::with_capacity(dims.grippers),
        encoder: [0; DUAL_ARM_TICKS],
        image_refs: Vec::with_capacity(dims.cameras),
    };
    fill(&mut f.joint_pos);
    fill(&mut f.joint_vel);
    fill(&mut f.tcp_pos);
    fill(&mut f.tcp_vel);
    fill(&mut f.base_ft);
    fill(&mut f.tcp_ft);
    for _ in 0..dims.grippers {
        let mut g = [0.0; GRIPPER_FIELDS];
        fill(&mut g);
        f.gripper.push(GripperObs::from_slice(&g));
    }
    let base = 8 + 8 * (FIXED_REALS + GRIPPER_FIELDS * dims.grippers);
    for (i, tick) in f.encoder.iter_mut().enumerate() {
        let b = &rec[base + 4 * i..base + 4 * i + 4];
        *tick = i32::from_le_bytes(b.try_into().expect("4 bytes")) as i64;
    }
    let img = base + 4 * DUAL_ARM_TICKS;
    for c in 0..dims.cameras {
        f.image_refs.push(rec[img + 32 * c..img + 32 * (c + 1)].try_into().expect("32 bytes"));
    }
    Ok(f)
}
