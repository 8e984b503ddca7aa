//! Two clusters of balls on a table, to be swept into a central triangle.
//!
//! Pushing is quasi-static: after every substep each ball that lies inside
//! the table-plane footprint of a low link is moved the shortest distance
//! that takes it out of that footprint.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collision::{clip_below, closest_point_2d, Capsule};
use crate::model::ArmId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x[0] && p[0] <= self.x[1] && p[1] >= self.y[0] && p[1] <= self.y[1]
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0].clamp(self.x[0], self.x[1]), p[1].clamp(self.y[0], self.y[1])]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatherConfig {
    pub table_z: f64,
    pub table: Rect,
    pub ball_radius: f64,
    pub balls_per_cluster: usize,
    pub left_cluster: Rect,
    pub right_cluster: Rect,
    pub triangle: [[f64; 2]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub position: [f64; 2],
    /// Cluster the ball was spawned in.
    pub cluster: ArmId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatherBallsWorld {
    pub balls: Vec<Ball>,
    pub triangle: [[f64; 2]; 3],
    pub table: Rect,
    pub table_z: f64,
    pub ball_radius: f64,
}

impl GatherBallsWorld {
    /// Spawns `balls_per_cluster` balls uniformly in each cluster region.
    pub fn reset(cfg: &GatherConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut balls = Vec::with_capacity(2 * cfg.balls_per_cluster);
        for (cluster, region) in [(ArmId::Left, &cfg.left_cluster), (ArmId::Right, &cfg.right_cluster)] {
            for _ in 0..cfg.balls_per_cluster {
                let p = [rng.gen_range(region.x[0]..=region.x[1]), rng.gen_range(region.y[0]..=region.y[1])];
                balls.push(Ball { position: cfg.table.clamp(p), cluster });
            }
        }
        Self {
            balls,
            triangle: cfg.triangle,
            table: cfg.table,
            table_z: cfg.table_z,
            ball_radius: cfg.ball_radius,
        }
    }

    pub fn cluster_size(&self, cluster: ArmId) -> usize {
        self.balls.iter().filter(|b| b.cluster == cluster).count()
    }

    /// Height below which a link's axis (offset by its radius) reaches the balls.
    fn sweep_height(&self, link_radius: f64) -> f64 {
        self.table_z + 2.0 * self.ball_radius + link_radius
    }

    /// Table-plane footprint of a link: the part low enough to touch balls,
    /// projected onto the table, inflated by the ball radius.
    pub fn footprint(&self, link: &Capsule) -> Option<Footprint> {
        let (a, b) = clip_below(link.a, link.b, self.sweep_height(link.radius))?;
        Some(Footprint {
            a: Vector2::new(a[0], a[1]),
            b: Vector2::new(b[0], b[1]),
            radius: link.radius + self.ball_radius,
        })
    }

    /// Moves every ball out of `fp`, then back inside the table bounds.
    pub fn push_out(&mut self, fp: &Footprint) {
        for ball in &mut self.balls {
            let p = Vector2::new(ball.position[0], ball.position[1]);
            let c = closest_point_2d(p, fp.a, fp.b);
            let offset = p - c;
            let d = offset.norm();
            if d >= fp.radius {
                continue;
            }
            let dir = if d > 1e-12 {
                offset / d
            } else {
                // Ball exactly on the axis: leave along the segment normal.
                let ab = fp.b - fp.a;
                if ab.norm() > 1e-12 {
                    Vector2::new(-ab.y, ab.x).normalize()
                } else {
                    Vector2::new(1.0, 0.0)
                }
            };
            let out = c + dir * fp.radius;
            ball.position = self.table.clamp([out.x, out.y]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub radius: f64,
}

impl Footprint {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let p = Vector2::new(p[0], p[1]);
        (p - closest_point_2d(p, self.a, self.b)).norm() < self.radius
    }
}
