//! Shared numeric types and unit conventions.
//!
//! Angles are radians, lengths are meters and time is a monotonic clock in
//! integer nanoseconds. Gripper opening is carried as the last slot of a
//! [`JointVector`] (meters), so one arm is always `ARM_JOINTS + 1` values.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, schema, Error, Result};

/// Revolute joints per arm.
pub const ARM_JOINTS: usize = 7;
/// Degrees of freedom per arm including the gripper.
pub const ARM_DOF: usize = ARM_JOINTS + 1;
/// Encoder channels on the dual-arm exoskeleton.
pub const DUAL_ARM_TICKS: usize = 2 * ARM_DOF;
/// Encoder resolution of the exoskeleton, degrees per tick.
pub const ENCODER_RESOLUTION_DEG: f64 = 0.08;
/// Size of the exoskeleton relative to the robot.
pub const EXOSKELETON_SCALE: f64 = 0.8;
/// Values above this magnitude in a joint vector are almost certainly degrees.
pub const UNIT_BUG_LIMIT: f64 = 8.0 * std::f64::consts::PI;

pub const NANOS_PER_SEC: f64 = 1e9;

/// Default radians-per-tick; the only place the degree constant is converted.
pub fn default_resolution_rad() -> f64 {
    ENCODER_RESOLUTION_DEG.to_radians()
}

pub fn ns_to_secs(ns: u64) -> f64 {
    ns as f64 / NANOS_PER_SEC
}

pub fn secs_to_ns(secs: f64) -> u64 {
    (secs * NANOS_PER_SEC).round() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmId {
    Left,
    Right,
}

impl ArmId {
    pub const BOTH: [ArmId; 2] = [ArmId::Left, ArmId::Right];

    pub fn index(self) -> usize {
        match self {
            ArmId::Left => 0,
            ArmId::Right => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArmId::Left => "left",
            ArmId::Right => "right",
        }
    }
}

impl std::fmt::Display for ArmId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Joint angles of one arm (radians) followed by the gripper width (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVector {
    pub arm: ArmId,
    values: Vec<f64>,
}

impl JointVector {
    pub fn new(arm: ArmId, values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(invalid(format!("{arm} joint {i} is not finite ({v})")));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| v.abs() > UNIT_BUG_LIMIT) {
            return Err(invalid(format!(
                "{arm} joint {i} = {v} exceeds {UNIT_BUG_LIMIT:.3}; value looks like degrees"
            )));
        }
        Ok(Self { arm, values })
    }

    /// Builds a vector and checks its length against `desc`.
    pub fn for_arm(arm: ArmId, values: Vec<f64>, desc: &ArmDescriptor) -> Result<Self> {
        if values.len() != desc.dof {
            return Err(schema(format!(
                "{arm} joint vector has {} values, descriptor '{}' has {} DoF",
                values.len(),
                desc.name,
                desc.dof
            )));
        }
        Self::new(arm, values)
    }

    pub fn zeros(arm: ArmId, dof: usize) -> Self {
        Self { arm, values: vec![0.0; dof] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The revolute joints (everything but the trailing gripper slot).
    pub fn arm_joints(&self) -> &[f64] {
        &self.values[..self.values.len().saturating_sub(1)]
    }

    pub fn gripper(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// One sample of all exoskeleton encoders: left arm first, then right arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderFrame {
    pub ticks: Vec<i64>,
    pub resolution_rad: f64,
    pub timestamp: u64,
}

impl EncoderFrame {
    pub fn new(ticks: Vec<i64>, resolution_rad: f64, timestamp: u64) -> Result<Self> {
        if !(resolution_rad > 0.0) || !resolution_rad.is_finite() {
            return Err(invalid(format!("encoder resolution must be > 0, got {resolution_rad}")));
        }
        Ok(Self { ticks, resolution_rad, timestamp })
    }

    /// A dual-arm frame at the default 0.08 degree resolution.
    pub fn dual_arm(ticks: Vec<i64>, timestamp: u64) -> Result<Self> {
        if ticks.len() != DUAL_ARM_TICKS {
            return Err(schema(format!("dim mismatch {} != {DUAL_ARM_TICKS}", ticks.len())));
        }
        Self::new(ticks, default_resolution_rad(), timestamp)
    }

    pub fn arm_ticks(&self, arm: ArmId) -> &[i64] {
        let half = self.ticks.len() / 2;
        match arm {
            ArmId::Left => &self.ticks[..half],
            ArmId::Right => &self.ticks[half..],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmDescriptor {
    pub name: String,
    pub dof: usize,
    /// `(q_min, q_max)` per DoF; the gripper slot holds its width range.
    pub joint_limits: Vec<(f64, f64)>,
    pub gripper_width_range: (f64, f64),
}

impl ArmDescriptor {
    pub fn new(
        name: impl Into<String>,
        joint_limits: Vec<(f64, f64)>,
        gripper_width_range: (f64, f64),
    ) -> Result<Self> {
        let desc = Self {
            name: name.into(),
            dof: joint_limits.len(),
            joint_limits,
            gripper_width_range,
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dof != self.joint_limits.len() {
            return Err(schema(format!(
                "arm '{}': dof {} != {} joint limits",
                self.name,
                self.dof,
                self.joint_limits.len()
            )));
        }
        for (i, &(lo, hi)) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "arm '{}': joint {i} limits ({lo}, {hi}) are not ordered",
                    self.name
                )));
            }
        }
        let (w0, w1) = self.gripper_width_range;
        if !(w0 >= 0.0 && w0 < w1) {
            return Err(Error::Config(format!(
                "arm '{}': gripper width range ({w0}, {w1}) is invalid",
                self.name
            )));
        }
        Ok(())
    }

    /// Clamps every value of `values` into this arm's limits.
    pub fn clamp_into(&self, values: &mut [f64]) {
        for (v, &(lo, hi)) in values.iter_mut().zip(&self.joint_limits) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values
            .iter()
            .zip(&self.joint_limits)
            .all(|(v, &(lo, hi))| *v >= lo && *v <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamped<T> {
    pub t: u64,
    pub value: T,
}

impl<T> Timestamped<T> {
    pub fn new(t: u64, value: T) -> Self {
        Self { t, value }
    }
}

/// `min(max(x, lo), hi)`.
pub fn clamp(x: f64, lo: f64, hi: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::InvalidRange { lo, hi });
    }
    Ok(x.max(lo).min(hi))
}

/// Nearest whole number of encoder ticks for `angle_rad`, halves away from zero.
///
/// Quotients within a few ulps of a half are treated as exact halves, so a
/// degree-valued angle converted to radians rounds the way its decimal value
/// would.
pub fn quantize_to_resolution(angle_rad: f64, resolution_rad: f64) -> Result<i64> {
    if !angle_rad.is_finite() {
        return Err(invalid(format!("angle {angle_rad} is not finite")));
    }
    if !(resolution_rad > 0.0) || !resolution_rad.is_finite() {
        return Err(invalid(format!("resolution must be > 0, got {resolution_rad}")));
    }
    let x = angle_rad / resolution_rad;
    let trunc = x.trunc();
    let frac = (x - trunc).abs();
    let tie_tol = 8.0 * f64::EPSILON * x.abs().max(1.0);
    let ticks = if (frac - 0.5).abs() <= tie_tol {
        trunc + x.signum()
    } else {
        x.round()
    };
    Ok(ticks as i64)
}

/// Angle represented by a tick count.
pub fn reconstruct(ticks: i64, resolution_rad: f64) -> f64 {
    ticks as f64 * resolution_rad
}
