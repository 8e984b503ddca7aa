//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use exo_core::calibration::CalibrationRecord;
use exo_core::config::{default_arms, default_capture, default_chain_config, DualChain};
use exo_core::control::{LoopConfig, VirtualClock};
use exo_core::metrics::{score_state, TrialResult};
use exo_core::policy::{run_policy, Entry, NeighborDatabase, PolicyConfig};
use exo_core::recorder::{Demonstration, Domain, RecordingMeta};
use exo_core::scripted::{record_scripted_teleop, scripted_calibration, Trajectory};
use exo_core::sim::collision::Capsule;
use exo_core::sim::{SimBackend, SimState, Simulator, WorldConfig};

/// Joint mapping written out directly: clamp(q_c + k (p - p_c) res, lo, hi),
/// with the tick difference taken in 128-bit integers.
pub fn eq_joint(q_c: f64, p_c: i64, k: f64, p: i64, res: f64, lo: f64, hi: f64) -> f64 {
    let delta = (p as i128 - p_c as i128) as f64;
    let q = q_c + k * delta * res;
    if q < lo {
        lo
    } else if q > hi {
        hi
    } else {
        q
    }
}

/// Exhaustive k-NN: sort every entry by (squared distance, index).
pub fn knn_oracle(db: &NeighborDatabase, query: &[f64], k: usize, domain_weight: f64, eps: f64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut all: Vec<(f64, usize)> = db
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.feature.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let picked = &all[..k];
    let raw: Vec<f64> = picked
        .iter()
        .map(|(d2, i)| {
            let m = if db.entries[*i].domain == Domain::Teleoperated { domain_weight } else { 1.0 };
            m / (d2.sqrt() + eps)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let h = db.entries[picked[0].1].chunk.len();
    let dim = db.entries[picked[0].1].chunk[0].len();
    let mut out = vec![vec![0.0; dim]; h];
    for ((_, i), w) in picked.iter().zip(&raw) {
        let w = w / total;
        for (row, src) in out.iter_mut().zip(&db.entries[*i].chunk) {
            for (o, v) in row.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    (picked.iter().map(|p| p.1).collect(), out)
}

pub fn entry(feature: Vec<f64>, chunk: Vec<Vec<f64>>, domain: Domain) -> Entry {
    Entry { feature, chunk, padded: false, domain, demo_id: "oracle".into(), frame_index: 0 }
}

pub fn database(entries: Vec<Entry>) -> NeighborDatabase {
    let dim = entries[0].feature.len();
    NeighborDatabase {
        schema: exo_core::policy::DB_SCHEMA.into(),
        featurizer: exo_core::policy::DEFAULT_FEATURIZER.into(),
        feature_dim: dim,
        horizon: entries[0].chunk.len(),
        hz: 5.0,
        mean: vec![0.0; dim],
        std: vec![1.0; dim],
        entries,
    }
}

fn point(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

fn dist(p: [f64; 3], q: [f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn min_over_t(c1: &Capsule, c2: &Capsule, s: f64) -> f64 {
    let p = point(c1.a, c1.b, s);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if dist(p, point(c2.a, c2.b, m1)) <= dist(p, point(c2.a, c2.b, m2)) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    dist(p, point(c2.a, c2.b, (lo + hi) / 2.0))
}

/// Capsule separation by sampling a grid over both axes, then refining the
/// best cell with nested ternary search (the axis distance is convex).
pub fn capsule_distance_oracle(c1: &Capsule, c2: &Capsule) -> f64 {
    const N: usize = 64;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=N {
        let s = i as f64 / N as f64;
        let p = point(c1.a, c1.b, s);
        for j in 0..=N {
            let d = dist(p, point(c2.a, c2.b, j as f64 / N as f64));
            if d < best.0 {
                best = (d, s);
            }
        }
    }
    let (mut lo, mut hi) = ((best.1 - 2.0 / N as f64).max(0.0), (best.1 + 2.0 / N as f64).min(1.0));
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if min_over_t(c1, c2, m1) <= min_over_t(c1, c2, m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let refined = min_over_t(c1, c2, (lo + hi) / 2.0);
    refined.min(best.0) - c1.radius - c2.radius
}

/// Signed area test for a point against a triangle; 1 inside, 0.5 within
/// `tol` of an edge, 0 outside. Written independently of the scorer.
pub fn triangle_credit(p: [f64; 2], t: &[[f64; 2]; 3], tol: f64) -> f64 {
    for i in 0..3 {
        let (a, b) = (t[i], t[(i + 1) % 3]);
        let ab = [b[0] - a[0], b[1] - a[1]];
        let ap = [p[0] - a[0], p[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let u = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
        let d = ((ap[0] - u * ab[0]).powi(2) + (ap[1] - u * ab[1]).powi(2)).sqrt();
        if d <= tol {
            return 0.5;
        }
    }
    let area = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let total = area(t[0], t[1], t[2]).abs();
    let parts = area(p, t[0], t[1]).abs() + area(p, t[1], t[2]).abs() + area(p, t[2], t[0]).abs();
    if (parts - total).abs() <= 1e-12 * total.max(1.0) {
        1.0
    } else {
        0.0
    }
}

pub fn calibration() -> CalibrationRecord {
    scripted_calibration(&default_arms(), &default_capture(), 1000).unwrap()
}

pub fn teleop_demos(world: &WorldConfig, traj: &Trajectory, seeds: impl IntoIterator<Item = u64>) -> Vec<(Demonstration, SimState)> {
    let cal = calibration();
    seeds
        .into_iter()
        .map(|s| record_scripted_teleop(world, s, traj, &cal, &format!("td-{s}")).unwrap())
        .collect()
}

/// One policy rollout scored on its final state.
pub fn policy_trial(db: &NeighborDatabase, world: &WorldConfig, seed: u64, policy: &PolicyConfig) -> (TrialResult, u64) {
    let mut backend = SimBackend::with_seed(Simulator::with_defaults(world.clone()).unwrap(), seed);
    let cfg = LoopConfig { max_steps: world.protocol.max_steps, ..LoopConfig::default() };
    let ep = run_policy(
        db,
        &mut backend,
        &DualChain::new(&default_chain_config()).unwrap(),
        &cfg,
        policy,
        world.protocol.time_limit_s,
        &mut VirtualClock::new(),
        &RecordingMeta::new(format!("policy-{seed}"), world.kind()),
    )
    .unwrap();
    let state = ep.final_state.expect("simulator backend");
    let duration = ep.outcome.stats.ticks_executed as f64 / cfg.control_rate_hz;
    (score_state(&state, duration, ep.outcome.aborted.is_some()).unwrap(), ep.outcome.stats.ticks_executed)
}
