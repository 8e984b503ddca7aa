//! Capsule geometry and the pair rules used for collision reporting.

use nalgebra::{Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: [f64; 3], b: [f64; 3], radius: f64) -> Self {
        debug_assert!(radius > 0.0);
        Self { a, b, radius }
    }
}

/// Closest points between segments `p1q1` and `p2q2`, returned as the two
/// segment parameters `(s, t)` in `[0, 1]`.
pub fn closest_segment_params(
    p1: &Point3<f64>,
    q1: &Point3<f64>,
    p2: &Point3<f64>,
    q2: &Point3<f64>,
) -> (f64, f64) {
    const EPS: f64 = 1e-18;
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);

    if a <= EPS && e <= EPS {
        return (0.0, 0.0);
    }
    if a <= EPS {
        return (0.0, (f / e).clamp(0.0, 1.0));
    }
    let c = d1.dot(&r);
    if e <= EPS {
        return ((-c / a).clamp(0.0, 1.0), 0.0);
    }
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    let mut s = if denom > EPS * a * e { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    (s, t)
}

/// Distance between two segments.
pub fn segment_distance(a1: [f64; 3], b1: [f64; 3], a2: [f64; 3], b2: [f64; 3]) -> f64 {
    let (p1, q1, p2, q2) = (Point3::from(a1), Point3::from(b1), Point3::from(a2), Point3::from(b2));
    let (s, t) = closest_segment_params(&p1, &q1, &p2, &q2);
    let c1 = p1 + (q1 - p1) * s;
    let c2 = p2 + (q2 - p2) * t;
    (c1 - c2).norm()
}

/// Signed surface distance; negative values are penetration depth.
pub fn capsule_distance(c1: &Capsule, c2: &Capsule) -> f64 {
    segment_distance(c1.a, c1.b, c2.a, c2.b) - c1.radius - c2.radius
}

/// Signed distance from a capsule to the horizontal plane `z = height`
/// (negative when the capsule dips below it).
pub fn capsule_plane_distance(c: &Capsule, height: f64) -> f64 {
    c.a[2].min(c.b[2]) - c.radius - height
}

pub fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    segment_distance(p, p, a, b)
}

/// Closest point on a 2-D segment to `p`.
pub fn closest_point_2d(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> Vector2<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= 1e-24 {
        return a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Part of segment `ab` with `z <= h`, if any.
pub fn clip_below(a: [f64; 3], b: [f64; 3], h: f64) -> Option<([f64; 3], [f64; 3])> {
    let (za, zb) = (a[2], b[2]);
    match (za <= h, zb <= h) {
        (true, true) => Some((a, b)),
        (false, false) => None,
        (a_in, _) => {
            let t = (h - za) / (zb - za);
            let cut = lerp3(a, b, t);
            if a_in {
                Some((a, cut))
            } else {
                Some((cut, b))
            }
        }
    }
}

pub(crate) fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Which body a capsule belongs to, for pair filtering and event ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Owner {
    Arm(crate::model::ArmId),
    Shelf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggedCapsule {
    pub owner: Owner,
    pub index: usize,
    pub capsule: Capsule,
}

impl TaggedCapsule {
    pub fn id(&self) -> String {
        match self.owner {
            Owner::Arm(arm) => format!("{arm}:{}", self.index),
            Owner::Shelf => format!("shelf:{}", self.index),
        }
    }
}

/// Capsules on the same body whose indices differ by at most `adjacent_skip`
/// share a joint and are never reported. Static scenery is never tested
/// against itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMask {
    pub adjacent_skip: usize,
}

impl Default for PairMask {
    fn default() -> Self {
        Self { adjacent_skip: 1 }
    }
}

impl PairMask {
    pub fn enabled(&self, a: &TaggedCapsule, b: &TaggedCapsule) -> bool {
        match (a.owner, b.owner) {
            (Owner::Shelf, Owner::Shelf) => false,
            (x, y) if x == y => a.index.abs_diff(b.index) > self.adjacent_skip,
            _ => true,
        }
    }
}

/// Ids of every enabled penetrating pair among `capsules`.
pub fn penetrating_pairs(capsules: &[TaggedCapsule], mask: &PairMask) -> Vec<String> {
    let mut out = Vec::new();
    for (i, a) in capsules.iter().enumerate() {
        for b in &capsules[i + 1..] {
            if mask.enabled(a, b) && capsule_distance(&a.capsule, &b.capsule) < 0.0 {
                out.push(format!("{}|{}", a.id(), b.id()));
            }
        }
    }
    out
}

pub(crate) fn v3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}
