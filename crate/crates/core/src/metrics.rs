//! Trial scoring and aggregate reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::ArmId;
use crate::sim::{GatherBallsWorld, SimState, Stage, StageFlags, World};

/// Success thresholds on the completion rate.
pub const DELTAS: [f64; 3] = [0.4, 0.6, 0.8];
/// A ball whose center is this close to a triangle edge is on the line.
pub const EDGE_TOLERANCE: f64 = 1e-9;

pub fn delta_key(delta: f64) -> String {
    format!("{delta}")
}

fn edge_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a[0] + s * dx - p[0], a[1] + s * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// 1 strictly inside the triangle, 0.5 on an edge, 0 outside.
pub fn ball_credit(p: [f64; 2], tri: &[[f64; 2]; 3]) -> f64 {
    let on_edge = (0..3).any(|i| edge_distance(p, tri[i], tri[(i + 1) % 3]) <= EDGE_TOLERANCE);
    if on_edge {
        return 0.5;
    }
    let s = [cross(tri[0], tri[1], p), cross(tri[1], tri[2], p), cross(tri[2], tri[0], p)];
    let inside = s.iter().all(|v| *v > 0.0) || s.iter().all(|v| *v < 0.0);
    if inside {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task_id: String,
    /// Gather balls: credited balls over all balls. Curtained shelf: stages
    /// reached over 5.
    pub completion_overall: f64,
    pub completion_left: f64,
    pub completion_right: f64,
    /// Keyed by threshold, e.g. `"0.6"`; gather balls only.
    #[serde(default)]
    pub success_at: BTreeMap<String, bool>,
    pub collided: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_flags: Option<StageFlags>,
    pub duration_s: f64,
    pub aborted: bool,
}

impl TrialResult {
    pub fn success(&self, delta: f64) -> bool {
        self.success_at.get(&delta_key(delta)).copied().unwrap_or(false)
    }
}

/// Credited balls per spawn cluster: `(left, right)`.
pub fn credited_balls(world: &GatherBallsWorld) -> (f64, f64) {
    let mut c = (0.0, 0.0);
    for b in &world.balls {
        let v = ball_credit(b.position, &world.triangle);
        match b.cluster {
            ArmId::Left => c.0 += v,
            ArmId::Right => c.1 += v,
        }
    }
    c
}

pub fn score_gather_world(world: &GatherBallsWorld, collided: bool, duration_s: f64, aborted: bool) -> TrialResult {
    let (l, r) = credited_balls(world);
    let per_side = |n: usize| if n == 0 { 1.0 } else { n as f64 };
    let total = world.balls.len().max(1) as f64;
    let overall = (l + r) / total;
    TrialResult {
        task_id: "gather_balls".into(),
        completion_overall: overall,
        completion_left: l / per_side(world.cluster_size(ArmId::Left)),
        completion_right: r / per_side(world.cluster_size(ArmId::Right)),
        success_at: DELTAS.iter().map(|&d| (delta_key(d), overall >= d)).collect(),
        collided,
        stage_flags: None,
        duration_s,
        aborted,
    }
}

pub fn score_gather_balls(state: &SimState, duration_s: f64, aborted: bool) -> Result<TrialResult> {
    let World::GatherBalls(w) = &state.world else {
        return Err(Error::State(format!("gather-balls scoring on a {} world", state.world.kind())));
    };
    Ok(score_gather_world(w, state.collided(), duration_s, aborted))
}

pub fn score_stage_flags(flags: StageFlags, collided: bool, duration_s: f64, aborted: bool) -> TrialResult {
    let c = flags.reached() as f64 / Stage::ALL.len() as f64;
    TrialResult {
        task_id: "curtained_shelf".into(),
        completion_overall: c,
        completion_left: c,
        completion_right: c,
        success_at: BTreeMap::new(),
        collided,
        stage_flags: Some(flags),
        duration_s,
        aborted,
    }
}

pub fn score_curtained_shelf(state: &SimState, duration_s: f64, aborted: bool) -> Result<TrialResult> {
    let World::CurtainedShelf(w) = &state.world else {
        return Err(Error::State(format!("curtained-shelf scoring on a {} world", state.world.kind())));
    };
    Ok(score_stage_flags(w.stage_flags, state.collided(), duration_s, aborted))
}

pub fn score_state(state: &SimState, duration_s: f64, aborted: bool) -> Result<TrialResult> {
    match &state.world {
        World::GatherBalls(_) => score_gather_balls(state, duration_s, aborted),
        World::CurtainedShelf(_) => score_curtained_shelf(state, duration_s, aborted),
    }
}

/// Final state of one rollout, as stored for later scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub aborted: bool,
    pub final_state: SimState,
}

impl Episode {
    pub fn score(&self) -> Result<TrialResult> {
        score_state(&self.final_state, self.duration_s, self.aborted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionMeans {
    pub overall: f64,
    pub left: f64,
    pub right: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task_id: String,
    pub trial_count: usize,
    pub mean_completion: CompletionMeans,
    /// Fraction of trials with completion ≥ δ, keyed by δ.
    pub success_rate: BTreeMap<String, f64>,
    pub collision_rate: f64,
    pub abort_rate: f64,
    /// Fraction of trials reaching each stage, in stage order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_success: Vec<(String, f64)>,
    pub trials: Vec<TrialResult>,
}

pub fn aggregate(trials: &[TrialResult]) -> Result<EvaluationReport> {
    let Some(first) = trials.first() else {
        return Err(invalid("no trials to aggregate"));
    };
    if let Some(t) = trials.iter().find(|t| t.task_id != first.task_id) {
        return Err(invalid(format!("mixed tasks '{}' and '{}'", first.task_id, t.task_id)));
    }
    let n = trials.len() as f64;
    let mean = |f: fn(&TrialResult) -> f64| trials.iter().map(f).sum::<f64>() / n;
    let rate = |f: &dyn Fn(&TrialResult) -> bool| trials.iter().filter(|t| f(t)).count() as f64 / n;
    let success_rate = if first.stage_flags.is_none() {
        DELTAS.iter().map(|&d| (delta_key(d), rate(&|t| t.success(d)))).collect()
    } else {
        BTreeMap::new()
    };
    let stage_success = if first.stage_flags.is_some() {
        Stage::ALL
            .iter()
            .map(|&s| (s.name().to_owned(), rate(&|t| t.stage_flags.is_some_and(|f| f.get(s)))))
            .collect()
    } else {
        Vec::new()
    };
    Ok(EvaluationReport {
        task_id: first.task_id.clone(),
        trial_count: trials.len(),
        mean_completion: CompletionMeans {
            overall: mean(|t| t.completion_overall),
            left: mean(|t| t.completion_left),
            right: mean(|t| t.completion_right),
        },
        success_rate,
        collision_rate: rate(&|t| t.collided),
        abort_rate: rate(&|t| t.aborted),
        stage_success,
        trials: trials.to_vec(),
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-layout table, percentages with two decimals.
    pub fn table(&self) -> String {
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        let mut out = String::new();
        if self.stage_success.is_empty() {
            let _ = writeln!(
                out,
                "{:>8} {:>8} {:>8} | {:>7} {:>7} {:>7} | {:>9}",
                "c (%)", "Left", "Right", "c>=40", "c>=60", "c>=80", "Collision"
            );
            let s = |d: f64| self.success_rate.get(&delta_key(d)).copied().unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{:>8} {:>8} {:>8} | {:>7} {:>7} {:>7} | {:>9}",
                pct(self.mean_completion.overall),
                pct(self.mean_completion.left),
                pct(self.mean_completion.right),
                pct(s(0.4)),
                pct(s(0.6)),
                pct(s(0.8)),
                pct(self.collision_rate)
            );
        } else {
            let names = ["Reach in", "Push aside", "Approach", "Grasp", "Throw"];
            let _ = writeln!(out, "{}", names.map(|n| format!("{n:>10}")).join(" "));
            let vals: Vec<String> = self.stage_success.iter().map(|(_, v)| format!("{:>10}", pct(*v))).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        let _ = write!(out, "trials: {}", self.trial_count);
        out
    }
}
