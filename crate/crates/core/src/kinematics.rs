//! Forward kinematics for serial revolute chains.
//!
//! Each joint is a fixed origin transform (`origin_xyz`, `origin_rpy`)
//! followed by a rotation about `axis`. The gripper is not a chain link; it
//! contributes the fixed `tcp_offset`. A chain's `scale` multiplies every
//! link translation and the TCP offset but not the base pose, which is how
//! the 80% exoskeleton is modelled from the robot's own chain.

use std::path::Path;

use nalgebra::{Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{schema, Error, Result};
use crate::model::{ArmDescriptor, ArmId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    /// Unit quaternion `(rx, ry, rz, rw)`.
    pub orientation: [f64; 4],
}

impl Pose {
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let t = iso.translation.vector;
        let q = iso.rotation.renormalize_fast_copy();
        let c = q.quaternion().coords;
        Self { position: [t.x, t.y, t.z], orientation: [c.x, c.y, c.z, c.w] }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        let [x, y, z] = self.position;
        let [rx, ry, rz, rw] = self.orientation;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(rw, rx, ry, rz));
        Isometry3::from_parts(Translation3::new(x, y, z), q)
    }

    /// `[x, y, z, rx, ry, rz, rw]`, the layout used in recorded frames.
    pub fn to_array(&self) -> [f64; 7] {
        let [x, y, z] = self.position;
        let [rx, ry, rz, rw] = self.orientation;
        [x, y, z, rx, ry, rz, rw]
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.orientation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

trait RenormalizeCopy {
    fn renormalize_fast_copy(&self) -> Self;
}

impl RenormalizeCopy for UnitQuaternion<f64> {
    fn renormalize_fast_copy(&self) -> Self {
        UnitQuaternion::new_normalize(*self.quaternion())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameSpec {
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl FrameSpec {
    fn isometry(&self, scale: f64) -> Isometry3<f64> {
        let [x, y, z] = self.xyz;
        let [r, p, yaw] = self.rpy;
        Isometry3::from_parts(
            Translation3::new(x * scale, y * scale, z * scale),
            UnitQuaternion::from_euler_angles(r, p, yaw),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    #[serde(default)]
    pub name: String,
    pub origin_xyz: [f64; 3],
    #[serde(default)]
    pub origin_rpy: [f64; 3],
    pub axis: [f64; 3],
}

/// Collision capsule spanning two chain frames.
///
/// Frame indices: 0 is the base, `1..=n` follow each joint, `n + 1` is the TCP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapsuleSpec {
    pub from: usize,
    pub to: usize,
    pub radius: f64,
}

/// On-disk description of one arm's chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub name: String,
    pub base: FrameSpec,
    pub joints: Vec<JointSpec>,
    pub tcp_offset: FrameSpec,
    #[serde(default = "one")]
    pub scale: f64,
    /// TCP pose with every joint at zero, as documented for this chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub home_tcp: Option<Pose>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub capsules: Vec<CapsuleSpec>,
}

fn one() -> f64 {
    1.0
}

/// Left and right chain configs as stored in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualChainConfig {
    pub left: ChainConfig,
    pub right: ChainConfig,
}

impl DualChainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn arm(&self, arm: ArmId) -> &ChainConfig {
        match arm {
            ArmId::Left => &self.left,
            ArmId::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone)]
struct Link {
    origin: Isometry3<f64>,
    axis: Unit<Vector3<f64>>,
}

#[derive(Debug, Clone)]
pub struct KinematicChain {
    config: ChainConfig,
    base: Isometry3<f64>,
    links: Vec<Link>,
    tcp_offset: Isometry3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    /// World pose of each joint frame, in chain order.
    pub links: Vec<Pose>,
    pub tcp: Pose,
}

impl KinematicChain {
    pub fn new(config: ChainConfig) -> Result<Self> {
        if !(config.scale > 0.0) || !config.scale.is_finite() {
            return Err(Error::Config(format!("chain '{}': scale must be > 0", config.name)));
        }
        let links = config
            .joints
            .iter()
            .map(|j| {
                let axis = Vector3::from(j.axis);
                if axis.norm() < 1e-12 {
                    return Err(Error::Config(format!(
                        "chain '{}': joint '{}' has a zero axis",
                        config.name, j.name
                    )));
                }
                let origin = FrameSpec { xyz: j.origin_xyz, rpy: j.origin_rpy }.isometry(config.scale);
                Ok(Link { origin, axis: Unit::new_normalize(axis) })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_frames = links.len() + 2;
        if let Some(c) = config.capsules.iter().find(|c| c.from >= n_frames || c.to >= n_frames || !(c.radius > 0.0)) {
            return Err(Error::Config(format!(
                "chain '{}': capsule {:?} is out of range or has non-positive radius",
                config.name, c
            )));
        }
        Ok(Self {
            base: config.base.isometry(1.0),
            tcp_offset: config.tcp_offset.isometry(config.scale),
            links,
            config,
        })
    }

    /// The same chain resized, e.g. `0.8` for the exoskeleton.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.scale = scale;
        cfg.home_tcp = None;
        Self::new(cfg)
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn joint_count(&self) -> usize {
        self.links.len()
    }

    pub fn scale(&self) -> f64 {
        self.config.scale
    }

    /// A chain drives the revolute joints of an arm; the gripper adds no link.
    pub fn check_arm(&self, arm: &ArmDescriptor) -> Result<()> {
        if self.links.len() + 1 != arm.dof {
            return Err(schema(format!(
                "chain '{}' has {} joints, arm '{}' has {} DoF",
                self.config.name,
                self.links.len(),
                arm.name,
                arm.dof
            )));
        }
        Ok(())
    }

    /// World frames `[base, joint_1, ..., joint_n, tcp]`.
    pub fn frames(&self, q: &[f64]) -> Result<Vec<Isometry3<f64>>> {
        if q.len() != self.links.len() {
            return Err(schema(format!(
                "chain '{}' expects {} joint values, got {}",
                self.config.name,
                self.links.len(),
                q.len()
            )));
        }
        let mut out = Vec::with_capacity(self.links.len() + 2);
        let mut current = self.base;
        out.push(current);
        for (link, &angle) in self.links.iter().zip(q) {
            current = current * link.origin * UnitQuaternion::from_axis_angle(&link.axis, angle);
            out.push(current);
        }
        out.push(current * self.tcp_offset);
        Ok(out)
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<FkResult> {
        let frames = self.frames(q)?;
        let n = frames.len();
        Ok(FkResult {
            links: frames[1..n - 1].iter().map(Pose::from_isometry).collect(),
            tcp: Pose::from_isometry(&frames[n - 1]),
        })
    }

    pub fn tcp(&self, q: &[f64]) -> Result<Pose> {
        Ok(self.forward_kinematics(q)?.tcp)
    }

    /// Finite-difference TCP twist `[vx, vy, vz, wx, wy, wz]` in the world frame.
    pub fn tcp_twist(&self, q: &[f64], q_dot: &[f64], dt: f64) -> Result<[f64; 6]> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be > 0, got {dt}")));
        }
        if q_dot.len() != q.len() {
            return Err(schema(format!("q_dot has {} values, q has {}", q_dot.len(), q.len())));
        }
        let f0 = *self.frames(q)?.last().expect("tcp");
        let q1: Vec<f64> = q.iter().zip(q_dot).map(|(a, v)| a + v * dt).collect();
        let f1 = *self.frames(&q1)?.last().expect("tcp");
        let v = (f1.translation.vector - f0.translation.vector) / dt;
        let w = (f1.rotation * f0.rotation.inverse()).scaled_axis() / dt;
        Ok([v.x, v.y, v.z, w.x, w.y, w.z])
    }

    /// World endpoints and radius of each configured collision capsule.
    pub fn capsule_segments(&self, frames: &[Isometry3<f64>]) -> Vec<([f64; 3], [f64; 3], f64)> {
        let p = |i: usize| {
            let t = frames[i].translation.vector;
            [t.x, t.y, t.z]
        };
        self.config.capsules.iter().map(|c| (p(c.from), p(c.to), c.radius)).collect()
    }
}
