//! Single-pose calibration and the encoder-to-joint mapping.
//!
//! With the robot and the exoskeleton held in the same pose, each joint
//! stores the robot angle `q_c` and the encoder reading `p_c`. A later
//! reading `p` maps to
//!
//! ```text
//! q = min(max(q_c + k * (p - p_c) * res, q_lo), q_hi)
//! ```
//!
//! where `res` converts ticks to radians and `[q_lo, q_hi]` is either the
//! robot's kinematic range or a narrower task-specific range. The gripper
//! slot is mapped linearly from its encoder span onto the finger opening.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{schema, Error, Result};
use crate::model::{
    quantize_to_resolution, ArmDescriptor, ArmId, EncoderFrame, JointVector, ARM_DOF,
};

pub const CALIBRATION_SCHEMA: &str = "airexo-cal/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointCalibration {
    pub q_c: f64,
    pub p_c: i64,
    pub k: f64,
    pub q_min: f64,
    pub q_max: f64,
}

impl JointCalibration {
    pub fn new(q_c: f64, p_c: i64, k: f64, q_min: f64, q_max: f64) -> Result<Self> {
        let cal = Self { q_c, p_c, k, q_min, q_max };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k != 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("k must be finite and non-zero, got {}", self.k)));
        }
        if !(self.q_min <= self.q_c && self.q_c <= self.q_max) {
            return Err(Error::Config(format!(
                "q_c {} outside [{}, {}]",
                self.q_c, self.q_min, self.q_max
            )));
        }
        Ok(())
    }

    /// The affine part of the mapping, before any clamping.
    pub fn unclamped(&self, p: i64, res: f64, k: f64) -> f64 {
        self.q_c + k * (p - self.p_c) as f64 * res
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperCalibration {
    pub p_open: i64,
    pub p_closed: i64,
    pub width_open: f64,
    pub width_closed: f64,
}

impl GripperCalibration {
    pub fn new(p_open: i64, p_closed: i64, width_open: f64) -> Result<Self> {
        let g = Self { p_open, p_closed, width_open, width_closed: 0.0 };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_open == self.p_closed {
            return Err(Error::Config("gripper p_open equals p_closed".into()));
        }
        if !(self.width_open > self.width_closed && self.width_closed >= 0.0) {
            return Err(Error::Config(format!(
                "gripper widths open {} / closed {} are invalid",
                self.width_open, self.width_closed
            )));
        }
        Ok(())
    }

    fn unclamped(&self, p: i64) -> f64 {
        let span = (self.p_open - self.p_closed) as f64;
        let frac = (p - self.p_closed) as f64 / span;
        self.width_closed + frac * (self.width_open - self.width_closed)
    }
}

/// Calibration of one arm: one entry per DoF, the last entry being the gripper.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmCalibration {
    pub joints: Vec<JointCalibration>,
    pub gripper: GripperCalibration,
}

impl ArmCalibration {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Entries for the revolute joints only.
    pub fn arm_joints(&self) -> &[JointCalibration] {
        &self.joints[..self.joints.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub created_at: u64,
    pub pose_label: String,
    pub left: ArmCalibration,
    pub right: ArmCalibration,
}

impl CalibrationRecord {
    pub fn arm(&self, arm: ArmId) -> &ArmCalibration {
        match arm {
            ArmId::Left => &self.left,
            ArmId::Right => &self.right,
        }
    }

    /// Identifier stored by demonstrations that depend on this record.
    pub fn id(&self) -> String {
        format!("cal-{}", self.created_at)
    }

    pub fn slot_count(&self) -> usize {
        self.left.dof() + self.right.dof()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CalibrationFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CalibrationFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::ensure_parent(path.as_ref())?;
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Per-joint range and optional scale override for a specific task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConstraint {
    pub q_min: f64,
    pub q_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConstraint {
    pub task_id: String,
    pub left: Vec<JointConstraint>,
    pub right: Vec<JointConstraint>,
}

impl TaskConstraint {
    pub fn arm(&self, arm: ArmId) -> &[JointConstraint] {
        match arm {
            ArmId::Left => &self.left,
            ArmId::Right => &self.right,
        }
    }

    /// Checks that every task range nests inside the kinematic range.
    pub fn validate(&self, arms: &[ArmDescriptor; 2]) -> Result<()> {
        for arm in ArmId::BOTH {
            let desc = &arms[arm.index()];
            let entries = self.arm(arm);
            if entries.len() != desc.dof {
                return Err(schema(format!(
                    "task '{}' {arm}: {} constraints for {} DoF",
                    self.task_id,
                    entries.len(),
                    desc.dof
                )));
            }
            for (i, (c, &(lo, hi))) in entries.iter().zip(&desc.joint_limits).enumerate() {
                if !(c.q_min <= c.q_max && c.q_min >= lo && c.q_max <= hi) {
                    return Err(Error::Config(format!(
                        "task '{}' {arm} joint {i}: [{}, {}] does not nest in [{lo}, {hi}]",
                        self.task_id, c.q_min, c.q_max
                    )));
                }
                if matches!(c.k, Some(k) if k == 0.0 || !k.is_finite()) {
                    return Err(Error::Config(format!(
                        "task '{}' {arm} joint {i}: invalid k override",
                        self.task_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loads a `{id: TaskConstraint}` table.
pub fn load_task_constraints(text: &str) -> Result<BTreeMap<String, TaskConstraint>> {
    let list: Vec<TaskConstraint> = serde_json::from_str(text)?;
    Ok(list.into_iter().map(|c| (c.task_id.clone(), c)).collect())
}

/// Per-joint direction signs and the gripper's encoder span used at capture time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureDefaults {
    pub k_left: Vec<f64>,
    pub k_right: Vec<f64>,
    /// Encoder offset of the open gripper relative to the calibration reading.
    pub gripper_open_offset_ticks: i64,
    /// Encoder offset of the closed gripper relative to the calibration reading.
    pub gripper_closed_offset_ticks: i64,
}

impl CaptureDefaults {
    pub fn k_signs(&self, arm: ArmId) -> &[f64] {
        match arm {
            ArmId::Left => &self.k_left,
            ArmId::Right => &self.k_right,
        }
    }
}

/// Records `(q_c, p_c)` for every DoF of both arms.
///
/// `robot` holds the two arms' joint vectors (gripper width last) and
/// `frame` the exoskeleton reading at the same physical pose.
pub fn capture_calibration(
    robot: [&JointVector; 2],
    frame: &EncoderFrame,
    pose_label: &str,
    arms: &[ArmDescriptor; 2],
    defaults: &CaptureDefaults,
    created_at: u64,
) -> Result<CalibrationRecord> {
    let expected: usize = arms.iter().map(|a| a.dof).sum();
    if frame.ticks.len() != expected {
        return Err(schema(format!(
            "encoder frame has {} ticks, calibration has {expected} slots",
            frame.ticks.len()
        )));
    }
    let capture_arm = |arm: ArmId| -> Result<ArmCalibration> {
        let desc = &arms[arm.index()];
        let q = robot[arm.index()];
        if q.len() != desc.dof {
            return Err(schema(format!(
                "{arm}: {} joint values vs {} calibration slots",
                q.len(),
                desc.dof
            )));
        }
        let signs = defaults.k_signs(arm);
        if signs.len() != desc.dof {
            return Err(Error::Config(format!(
                "{arm}: {} k signs for {} DoF",
                signs.len(),
                desc.dof
            )));
        }
        let ticks = &frame.ticks[arm.index() * arms[0].dof..][..desc.dof];
        let joints = q
            .values()
            .iter()
            .zip(ticks)
            .zip(signs)
            .zip(&desc.joint_limits)
            .map(|(((&q_c, &p_c), &k), &(lo, hi))| JointCalibration::new(q_c, p_c, k, lo, hi))
            .collect::<Result<Vec<_>>>()?;
        let p_grip = *ticks.last().expect("dof > 0");
        let gripper = GripperCalibration::new(
            p_grip + defaults.gripper_open_offset_ticks,
            p_grip + defaults.gripper_closed_offset_ticks,
            desc.gripper_width_range.1,
        )?;
        Ok(ArmCalibration { joints, gripper })
    };
    Ok(CalibrationRecord {
        created_at,
        pose_label: pose_label.to_owned(),
        left: capture_arm(ArmId::Left)?,
        right: capture_arm(ArmId::Right)?,
    })
}

/// Holds the active calibration; a recapture replaces it with a newer timestamp.
#[derive(Debug, Default)]
pub struct Calibrator {
    current: Option<CalibrationRecord>,
}

impl Calibrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Option<&CalibrationRecord> {
        self.current.as_ref()
    }

    pub fn capture(
        &mut self,
        robot: [&JointVector; 2],
        frame: &EncoderFrame,
        pose_label: &str,
        arms: &[ArmDescriptor; 2],
        defaults: &CaptureDefaults,
        now: u64,
    ) -> Result<&CalibrationRecord> {
        let created_at = match &self.current {
            Some(prev) => now.max(prev.created_at + 1),
            None => now,
        };
        let record = capture_calibration(robot, frame, pose_label, arms, defaults, created_at)?;
        Ok(self.current.insert(record))
    }
}

/// Maps one encoder reading to a joint angle; the output always lies in the
/// active range (the task range when given, otherwise the kinematic range).
pub fn map_encoder_to_joint(
    cal: &JointCalibration,
    p: i64,
    res: f64,
    constraint: Option<&JointConstraint>,
) -> f64 {
    let (lo, hi, k) = match constraint {
        Some(c) => (c.q_min, c.q_max, c.k.unwrap_or(cal.k)),
        None => (cal.q_min, cal.q_max, cal.k),
    };
    cal.unclamped(p, res, k).max(lo).min(hi)
}

/// Linear map from the gripper encoder span onto the finger opening.
pub fn map_gripper(gcal: &GripperCalibration, p: i64) -> f64 {
    gcal.unclamped(p).max(gcal.width_closed).min(gcal.width_open)
}

/// Encoder reading that maps (before clamping) closest to `q`.
pub fn ticks_for_joint(cal: &JointCalibration, q: f64, res: f64) -> i64 {
    let delta = quantize_to_resolution((q - cal.q_c) / cal.k, res).unwrap_or(0);
    cal.p_c + delta
}

pub fn ticks_for_gripper(gcal: &GripperCalibration, width: f64) -> i64 {
    let frac = (width - gcal.width_closed) / (gcal.width_open - gcal.width_closed);
    gcal.p_closed + (frac * (gcal.p_open - gcal.p_closed) as f64).round() as i64
}

/// Inverse of [`map_frame`] for an unconstrained, in-range pose.
pub fn ticks_for_pose(cal: &CalibrationRecord, pose: [&[f64]; 2], res: f64) -> Vec<i64> {
    let mut ticks = Vec::with_capacity(cal.slot_count());
    for arm in ArmId::BOTH {
        let a = cal.arm(arm);
        let q = pose[arm.index()];
        for (j, c) in a.arm_joints().iter().enumerate() {
            ticks.push(ticks_for_joint(c, q[j], res));
        }
        ticks.push(ticks_for_gripper(&a.gripper, q[a.dof() - 1]));
    }
    ticks
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappedFrame {
    pub t: u64,
    pub left: JointVector,
    pub right: JointVector,
}

impl MappedFrame {
    pub fn arm(&self, arm: ArmId) -> &JointVector {
        match arm {
            ArmId::Left => &self.left,
            ArmId::Right => &self.right,
        }
    }
}

/// Maps a full encoder frame to both arms' joint vectors (gripper width last).
pub fn map_frame(
    cal: &CalibrationRecord,
    frame: &EncoderFrame,
    constraint: Option<&TaskConstraint>,
) -> Result<MappedFrame> {
    if frame.ticks.len() != cal.slot_count() {
        return Err(schema(format!(
            "dim mismatch {} != {}",
            frame.ticks.len(),
            cal.slot_count()
        )));
    }
    let map_arm = |arm: ArmId, ticks: &[i64]| -> Result<JointVector> {
        let a = cal.arm(arm);
        let cons = constraint.map(|c| c.arm(arm));
        let n = a.dof() - 1;
        let mut values = Vec::with_capacity(a.dof());
        for (j, c) in a.arm_joints().iter().enumerate() {
            values.push(map_encoder_to_joint(c, ticks[j], frame.resolution_rad, cons.map(|c| &c[j])));
        }
        let mut width = map_gripper(&a.gripper, ticks[n]);
        if let Some(c) = cons.map(|c| &c[n]) {
            width = width.max(c.q_min).min(c.q_max);
        }
        values.push(width);
        JointVector::new(arm, values)
    };
    let left_n = cal.left.dof();
    Ok(MappedFrame {
        t: frame.timestamp,
        left: map_arm(ArmId::Left, &frame.ticks[..left_n])?,
        right: map_arm(ArmId::Right, &frame.ticks[left_n..])?,
    })
}

/// Fraction of each joint's kinematic range reachable from the given encoder
/// tick ranges, using the affine part of the mapping before clamping.
pub fn coverage_report(
    cal: &ArmCalibration,
    tick_ranges: &[(i64, i64)],
    res: f64,
    arm: &ArmDescriptor,
) -> Result<Vec<f64>> {
    if tick_ranges.len() != cal.dof() || arm.dof != cal.dof() {
        return Err(schema(format!(
            "coverage needs {} tick ranges and descriptor DoF, got {} and {}",
            cal.dof(),
            tick_ranges.len(),
            arm.dof
        )));
    }
    let n = cal.dof() - 1;
    let mut out = Vec::with_capacity(cal.dof());
    for (j, (&(t0, t1), &(q_min, q_max))) in tick_ranges.iter().zip(&arm.joint_limits).enumerate() {
        if t0 > t1 {
            return Err(Error::InvalidRange { lo: t0 as f64, hi: t1 as f64 });
        }
        let (a, b) = if j == n {
            let (g, (w0, w1)) = (&cal.gripper, arm.gripper_width_range);
            if w0 == w1 {
                return Err(Error::InvalidRange { lo: w0, hi: w1 });
            }
            let (a, b) = (g.unclamped(t0), g.unclamped(t1));
            out.push(interval_overlap(a.min(b), a.max(b), w0, w1) / (w1 - w0));
            continue;
        } else {
            let c = &cal.joints[j];
            (c.unclamped(t0, res, c.k), c.unclamped(t1, res, c.k))
        };
        if q_min == q_max {
            return Err(Error::InvalidRange { lo: q_min, hi: q_max });
        }
        out.push(interval_overlap(a.min(b), a.max(b), q_min, q_max) / (q_max - q_min));
    }
    Ok(out)
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

// --- file format -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    schema: String,
    created_at: u64,
    pose_label: String,
    arms: ArmsFile,
}

#[derive(Serialize, Deserialize)]
struct ArmsFile {
    left: Vec<EntryFile>,
    right: Vec<EntryFile>,
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    q_c: f64,
    p_c: i64,
    k: f64,
    q_min: f64,
    q_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_open: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_closed: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width_open: Option<f64>,
}

impl From<&CalibrationRecord> for CalibrationFile {
    fn from(rec: &CalibrationRecord) -> Self {
        let arm = |a: &ArmCalibration| -> Vec<EntryFile> {
            let n = a.dof() - 1;
            a.joints
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let grip = j == n;
                    EntryFile {
                        q_c: c.q_c,
                        p_c: c.p_c,
                        k: c.k,
                        q_min: c.q_min,
                        q_max: c.q_max,
                        p_open: grip.then_some(a.gripper.p_open),
                        p_closed: grip.then_some(a.gripper.p_closed),
                        width_open: grip.then_some(a.gripper.width_open),
                    }
                })
                .collect()
        };
        Self {
            schema: CALIBRATION_SCHEMA.to_owned(),
            created_at: rec.created_at,
            pose_label: rec.pose_label.clone(),
            arms: ArmsFile { left: arm(&rec.left), right: arm(&rec.right) },
        }
    }
}

impl TryFrom<CalibrationFile> for CalibrationRecord {
    type Error = Error;

    fn try_from(file: CalibrationFile) -> Result<Self> {
        if file.schema != CALIBRATION_SCHEMA {
            return Err(schema(format!("unknown calibration schema '{}'", file.schema)));
        }
        let arm = |name: &str, entries: Vec<EntryFile>| -> Result<ArmCalibration> {
            if entries.len() != ARM_DOF {
                return Err(schema(format!("{name}: {} entries, expected {ARM_DOF}", entries.len())));
            }
            let last = entries.last().expect("non-empty");
            let gripper = match (last.p_open, last.p_closed, last.width_open) {
                (Some(o), Some(c), Some(w)) => GripperCalibration::new(o, c, w)?,
                _ => return Err(schema(format!("{name}: gripper entry lacks p_open/p_closed/width_open"))),
            };
            let joints = entries
                .iter()
                .map(|e| JointCalibration::new(e.q_c, e.p_c, e.k, e.q_min, e.q_max))
                .collect::<Result<Vec<_>>>()?;
            Ok(ArmCalibration { joints, gripper })
        };
        Ok(CalibrationRecord {
            created_at: file.created_at,
            pose_label: file.pose_label,
            left: arm("left", file.arms.left)?,
            right: arm("right", file.arms.right)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_resolution_rad;
    use std::f64::consts::PI;

    fn arms() -> [ArmDescriptor; 2] {
        let limits = {
            let mut l = vec![(-PI, PI); 7];
            l.push((0.0, 0.085));
            l
        };
        [
            ArmDescriptor::new("left", limits.clone(), (0.0, 0.085)).unwrap(),
            ArmDescriptor::new("right", limits, (0.0, 0.085)).unwrap(),
        ]
    }

    fn defaults() -> CaptureDefaults {
        CaptureDefaults {
            k_left: vec![1.0; 8],
            k_right: vec![-1.0; 8],
            gripper_open_offset_ticks: 0,
            gripper_closed_offset_ticks: -500,
        }
    }

    fn zero_record() -> CalibrationRecord {
        let l = JointVector::new(ArmId::Left, vec![0.0; 8]).unwrap();
        let r = JointVector::new(ArmId::Right, vec![0.0; 8]).unwrap();
        let frame = EncoderFrame::dual_arm(vec![1000; 16], 5).unwrap();
        capture_calibration([&l, &r], &frame, "extended", &arms(), &defaults(), 7).unwrap()
    }

    #[test]
    fn capture_records_every_slot() {
        let rec = zero_record();
        for arm in ArmId::BOTH {
            for c in &rec.arm(arm).joints {
                assert_eq!(c.q_c, 0.0);
                assert_eq!(c.p_c, 1000);
            }
        }
        assert_eq!(rec.slot_count(), 16);
        assert_eq!(rec.pose_label, "extended");
        assert_eq!(rec.left.joints[0].k, 1.0);
        assert_eq!(rec.right.joints[0].k, -1.0);
    }

    #[test]
    fn capture_rejects_length_mismatch() {
        let l = JointVector::new(ArmId::Left, vec![0.0; 7]).unwrap();
        let r = JointVector::new(ArmId::Right, vec![0.0; 8]).unwrap();
        let frame = EncoderFrame::dual_arm(vec![1000; 16], 0).unwrap();
        let err = capture_calibration([&l, &r], &frame, "x", &arms(), &defaults(), 0);
        assert!(matches!(err, Err(Error::Schema(_))));
    }

    #[test]
    fn recapture_bumps_created_at() {
        let l = JointVector::new(ArmId::Left, vec![0.0; 8]).unwrap();
        let r = JointVector::new(ArmId::Right, vec![0.0; 8]).unwrap();
        let frame = EncoderFrame::dual_arm(vec![1000; 16], 0).unwrap();
        let mut c = Calibrator::new();
        let first = c.capture([&l, &r], &frame, "a", &arms(), &defaults(), 50).unwrap().created_at;
        // A clock that did not move still yields a strictly newer record.
        let second = c.capture([&l, &r], &frame, "b", &arms(), &defaults(), 50).unwrap().created_at;
        assert!(second > first);
        assert_eq!(c.current().unwrap().pose_label, "b");
        let third = c.capture([&l, &r], &frame, "c", &arms(), &defaults(), 900).unwrap().created_at;
        assert_eq!(third, 900);
    }

    #[test]
    fn joint_mapping_examples() {
        let res = default_resolution_rad();
        let cal = JointCalibration::new(0.0, 1000, 1.0, -PI, PI).unwrap();
        assert_eq!(map_encoder_to_joint(&cal, 1000, res, None), 0.0);
        let q = map_encoder_to_joint(&cal, 1500, res, None);
        assert!((q - 0.6981317007977318).abs() < 1e-12);
        let tight = JointCalibration::new(0.0, 1000, 1.0, -PI, 0.5).unwrap();
        assert_eq!(map_encoder_to_joint(&tight, 1500, res, None), 0.5);
        let neg = JointCalibration::new(0.0, 1000, -1.0, -PI, PI).unwrap();
        assert!((map_encoder_to_joint(&neg, 1500, res, None) + 0.6981317007977318).abs() < 1e-12);
    }

    #[test]
    fn task_constraint_narrows_range_and_overrides_k() {
        let res = default_resolution_rad();
        let cal = JointCalibration::new(0.0, 0, 1.0, -PI, PI).unwrap();
        let c = JointConstraint { q_min: -0.2, q_max: 0.3, k: Some(2.0) };
        assert_eq!(map_encoder_to_joint(&cal, 10_000, res, Some(&c)), 0.3);
        assert_eq!(map_encoder_to_joint(&cal, -10_000, res, Some(&c)), -0.2);
        let q = map_encoder_to_joint(&cal, 10, res, Some(&c));
        assert!((q - 20.0 * res).abs() < 1e-15);
    }

    #[test]
    fn invalid_calibrations_are_rejected() {
        assert!(JointCalibration::new(0.0, 0, 0.0, -1.0, 1.0).is_err());
        assert!(JointCalibration::new(2.0, 0, 1.0, -1.0, 1.0).is_err());
        assert!(GripperCalibration::new(10, 10, 0.085).is_err());
        assert!(GripperCalibration::new(10, 0, 0.0).is_err());
    }

    #[test]
    fn gripper_mapping_examples() {
        let g = GripperCalibration::new(1000, 500, 0.085).unwrap();
        assert_eq!(map_gripper(&g, 1000), 0.085);
        assert_eq!(map_gripper(&g, 500), 0.0);
        assert!((map_gripper(&g, 750) - 0.0425).abs() < 1e-15);
        assert_eq!(map_gripper(&g, 5000), 0.085);
        assert_eq!(map_gripper(&g, -5000), 0.0);
    }

    #[test]
    fn frame_at_calibration_ticks_gives_calibration_pose() {
        let rec = zero_record();
        let frame = EncoderFrame::dual_arm(vec![1000; 16], 42).unwrap();
        let m = map_frame(&rec, &frame, None).unwrap();
        assert_eq!(m.t, 42);
        assert_eq!(m.left.arm_joints(), &[0.0; 7]);
        assert_eq!(m.right.arm_joints(), &[0.0; 7]);
        // Gripper sits at the open end of its span.
        assert_eq!(m.left.gripper(), 0.085);
    }

    #[test]
    fn single_tick_perturbs_single_joint() {
        let rec = zero_record();
        let base = map_frame(&rec, &EncoderFrame::dual_arm(vec![1000; 16], 0).unwrap(), None).unwrap();
        for slot in 0..16 {
            if slot % 8 == 7 {
                continue;
            }
            let mut ticks = vec![1000; 16];
            ticks[slot] += 1;
            let m = map_frame(&rec, &EncoderFrame::dual_arm(ticks, 0).unwrap(), None).unwrap();
            let before: Vec<f64> = base.left.values().iter().chain(base.right.values()).copied().collect();
            let after: Vec<f64> = m.left.values().iter().chain(m.right.values()).copied().collect();
            let changed: Vec<usize> = (0..16).filter(|&i| before[i] != after[i]).collect();
            assert_eq!(changed, vec![slot]);
            assert!(((after[slot] - before[slot]).abs() - default_resolution_rad()).abs() < 1e-15);
        }
    }

    #[test]
    fn frame_with_wrong_tick_count_is_rejected() {
        let rec = zero_record();
        let frame = EncoderFrame::new(vec![1000; 15], default_resolution_rad(), 0).unwrap();
        assert!(matches!(map_frame(&rec, &frame, None), Err(Error::Schema(_))));
    }

    #[test]
    fn coverage_examples() {
        let res = default_resolution_rad();
        let arm = &arms()[0];
        let mut cal = zero_record().left;
        // Full coverage: tick range whose image is exactly [-pi, pi].
        let full = (PI / res).round() as i64 + 1;
        let mut ranges = vec![(1000 - full, 1000 + full); 8];
        ranges[7] = (500, 1000);
        let cov = coverage_report(&cal, &ranges, res, arm).unwrap();
        assert!(cov.iter().all(|&c| (c - 1.0).abs() < 1e-12), "{cov:?}");

        // Image [-2, 2] inside [-pi, pi]: scale k so that 1 tick = 1 mrad.
        cal.joints[0].k = 1e-3 / res;
        ranges[0] = (-1000, 3000);
        let cov = coverage_report(&cal, &ranges, res, arm).unwrap();
        assert!((cov[0] - 4.0 / (2.0 * PI)).abs() < 1e-12);

        // Disjoint.
        cal.joints[1].q_c = 0.0;
        ranges[1] = (1_000_000, 1_000_001);
        assert_eq!(coverage_report(&cal, &ranges, res, arm).unwrap()[1], 0.0);
    }

    #[test]
    fn coverage_rejects_degenerate_range() {
        let res = default_resolution_rad();
        let mut arm = arms()[0].clone();
        arm.joint_limits[0] = (0.0, 0.0);
        let cal = zero_record().left;
        assert!(matches!(
            coverage_report(&cal, &[(0, 1); 8], res, &arm),
            Err(Error::InvalidRange { .. })
        ));
    }

    #[test]
    fn calibration_file_round_trip() {
        let rec = zero_record();
        let text = rec.to_json().unwrap();
        assert!(text.contains("\"schema\": \"airexo-cal/1\""));
        assert!(text.contains("\"p_open\""));
        let back = CalibrationRecord::from_json(&text).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn inverse_mapping_round_trips() {
        let rec = zero_record();
        let res = default_resolution_rad();
        let pose_l = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.04];
        let pose_r = [-0.1, 0.2, -0.3, -0.4, 0.5, -0.6, 0.7, 0.02];
        let ticks = ticks_for_pose(&rec, [&pose_l, &pose_r], res);
        let m = map_frame(&rec, &EncoderFrame::dual_arm(ticks, 0).unwrap(), None).unwrap();
        for (a, b) in m.left.values().iter().zip(&pose_l).take(7) {
            assert!((a - b).abs() <= res / 2.0 + 1e-15);
        }
        for (a, b) in m.right.values().iter().zip(&pose_r).take(7) {
            assert!((a - b).abs() <= res / 2.0 + 1e-15);
        }
        assert!((m.left.gripper() - 0.04).abs() < 0.085 / 500.0);
    }
}
