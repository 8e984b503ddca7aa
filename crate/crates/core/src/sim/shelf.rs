//! A toy on a curtained shelf: push the curtain aside with the right arm,
//! grasp the toy with the left gripper and drop it into a bin.

use nalgebra::{Isometry3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collision::{v3, Capsule};
use crate::kinematics::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurtainConfig {
    /// The curtain hangs in the plane `x = plane_x`, facing the robot.
    pub plane_x: f64,
    pub y: [f64; 2],
    pub z: [f64; 2],
    /// Displacement beyond which the curtain counts as pushed aside.
    pub push_threshold: f64,
}

impl CurtainConfig {
    fn in_aperture(&self, p: [f64; 3], margin: f64) -> bool {
        p[1] >= self.y[0] - margin
            && p[1] <= self.y[1] + margin
            && p[2] >= self.z[0] - margin
            && p[2] <= self.z[1] + margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub position: [f64; 3],
    pub width: f64,
    /// Half-width of the uniform spawn jitter in x and y.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShelfConfig {
    pub table_z: f64,
    /// Static shelf frame members, tested against the arms for collisions.
    pub shelf_members: Vec<Capsule>,
    pub shelf_region: Aabb,
    pub curtain: CurtainConfig,
    pub object: ObjectConfig,
    pub bin: Aabb,
    pub approach_radius: f64,
    pub grasp_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ReachIn,
    PushAside,
    Approach,
    Grasp,
    Throw,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::ReachIn, Stage::PushAside, Stage::Approach, Stage::Grasp, Stage::Throw];

    pub fn name(self) -> &'static str {
        match self {
            Stage::ReachIn => "reach_in",
            Stage::PushAside => "push_aside",
            Stage::Approach => "approach",
            Stage::Grasp => "grasp",
            Stage::Throw => "throw",
        }
    }
}

/// Ordered stage flags; a later flag is only ever set after all earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageFlags {
    pub reach_in: bool,
    pub push_aside: bool,
    pub approach: bool,
    pub grasp: bool,
    pub throw: bool,
}

impl StageFlags {
    pub fn to_array(self) -> [bool; 5] {
        [self.reach_in, self.push_aside, self.approach, self.grasp, self.throw]
    }

    pub fn from_array(a: [bool; 5]) -> Self {
        Self { reach_in: a[0], push_aside: a[1], approach: a[2], grasp: a[3], throw: a[4] }
    }

    pub fn get(&self, stage: Stage) -> bool {
        self.to_array()[stage as usize]
    }

    pub fn is_monotone(&self) -> bool {
        self.to_array().windows(2).all(|w| w[0] || !w[1])
    }

    /// Number of leading stages reached.
    pub fn reached(&self) -> usize {
        self.to_array().iter().take_while(|f| **f).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurtainedShelfWorld {
    pub config: ShelfConfig,
    pub curtain_displacement: f64,
    pub object_pose: Pose,
    /// Object pose in the left TCP frame while held.
    pub attached: Option<Pose>,
    pub stage_flags: StageFlags,
    /// Stages whose out-of-order detection has already been reported.
    pub suppressed: [bool; 5],
}

/// Arm quantities the stage detectors read.
#[derive(Debug, Clone)]
pub struct ArmView<'a> {
    pub left_tcp: &'a Isometry3<f64>,
    pub right_tcp: &'a Isometry3<f64>,
    pub right_links: &'a [Capsule],
    pub left_gripper: f64,
}

impl CurtainedShelfWorld {
    pub fn reset(cfg: &ShelfConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = cfg.object.jitter;
        let mut p = cfg.object.position;
        if j > 0.0 {
            p[0] += rng.gen_range(-j..=j);
            p[1] += rng.gen_range(-j..=j);
        }
        Self {
            config: cfg.clone(),
            curtain_displacement: 0.0,
            object_pose: Pose { position: p, orientation: [0.0, 0.0, 0.0, 1.0] },
            attached: None,
            stage_flags: StageFlags::default(),
            suppressed: [false; 5],
        }
    }

    /// How far the right arm reaches past the curtain plane inside its aperture.
    pub fn curtain_penetration(&self, right_links: &[Capsule]) -> f64 {
        let c = &self.config.curtain;
        let mut depth: f64 = 0.0;
        for link in right_links {
            for p in [link.a, link.b] {
                if c.in_aperture(p, link.radius) {
                    depth = depth.max(p[0] + link.radius - c.plane_x);
                }
            }
        }
        depth
    }

    /// The curtain follows the arm's penetration and stays open while contact lasts.
    pub fn update_curtain(&mut self, right_links: &[Capsule]) {
        let depth = self.curtain_penetration(right_links);
        self.curtain_displacement = if depth > 0.0 { self.curtain_displacement.max(depth) } else { 0.0 };
    }

    fn object_distance(&self, tcp: &Isometry3<f64>) -> f64 {
        (v3(self.object_pose.position) - tcp.translation.vector).norm()
    }

    /// Raw per-stage conditions, before latching.
    pub fn conditions(&self, arms: &ArmView<'_>) -> [bool; 5] {
        let c = &self.config;
        let rt = arms.right_tcp.translation.vector;
        let reach_in = rt.x > c.curtain.plane_x && c.curtain.in_aperture([rt.x, rt.y, rt.z], 0.0);
        let push_aside = self.curtain_displacement > c.curtain.push_threshold;
        let approach = self.object_distance(arms.left_tcp) <= c.approach_radius;
        let grasp = self.attached.is_some()
            || (arms.left_gripper < c.object.width && self.object_distance(arms.left_tcp) <= c.grasp_radius);
        let throw = self.attached.is_none() && c.bin.contains(self.object_pose.position);
        [reach_in, push_aside, approach, grasp, throw]
    }

    /// Latches newly satisfied stages in order; returns stages whose condition
    /// held out of order (reported once each).
    pub fn latch(&mut self, raw: [bool; 5]) -> Vec<Stage> {
        let mut flags = self.stage_flags.to_array();
        let mut violations = Vec::new();
        for i in 0..5 {
            if flags[i] || !raw[i] {
                continue;
            }
            if flags[..i].iter().all(|f| *f) {
                flags[i] = true;
            } else if !self.suppressed[i] {
                self.suppressed[i] = true;
                violations.push(Stage::ALL[i]);
            }
        }
        self.stage_flags = StageFlags::from_array(flags);
        violations
    }

    /// Attaches, carries or releases the object according to the left gripper.
    pub fn update_object(&mut self, left_tcp: &Isometry3<f64>, left_gripper: f64) {
        let width = self.config.object.width;
        match self.attached {
            Some(offset) if left_gripper < width => {
                self.object_pose = Pose::from_isometry(&(left_tcp * offset.to_isometry()));
            }
            Some(_) => {
                self.attached = None;
                self.drop_object();
            }
            None => {
                if self.stage_flags.grasp
                    && left_gripper < width
                    && self.object_distance(left_tcp) <= self.config.grasp_radius
                {
                    let rel = left_tcp.inverse() * self.object_pose.to_isometry();
                    self.attached = Some(Pose::from_isometry(&rel));
                }
            }
        }
    }

    /// A released object falls onto whatever is below it.
    fn drop_object(&mut self) {
        let c = &self.config;
        let half = c.object.width / 2.0;
        let p = &mut self.object_pose.position;
        let floor = if c.bin.contains([p[0], p[1], c.bin.min[2]]) {
            c.bin.min[2]
        } else if c.shelf_region.contains([p[0], p[1], c.shelf_region.min[2]]) && p[2] >= c.shelf_region.min[2] {
            c.shelf_region.min[2]
        } else {
            c.table_z
        };
        p[2] = (floor + half).min(p[2]);
        self.object_pose.orientation = [0.0, 0.0, 0.0, 1.0];
    }

    /// World-frame object centre.
    pub fn object_position(&self) -> Vector3<f64> {
        v3(self.object_pose.position)
    }
}
