use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_K_ENS: f64 = 0.01;

/// Exponential-weight average of predictions for one step.
///
/// `preds` holds `(age, action)`; age 0 is the newest chunk and gets weight
/// 1, age `i` gets `exp(-k·i)`.
pub fn fuse(preds: &[(u32, &[f64])], k_ens: f64) -> Result<Vec<f64>> {
    let Some((_, first)) = preds.first() else {
        return Err(invalid("nothing to fuse"));
    };
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for (age, a) in preds {
        if a.len() != dim {
            return Err(invalid(format!("prediction of length {} among length {dim}", a.len())));
        }
        let w = (-k_ens * *age as f64).exp();
        total += w;
        for (s, v) in acc.iter_mut().zip(*a) {
            *s += w * v;
        }
    }
    for (d, s) in acc.iter_mut().enumerate() {
        *s /= total;
        // Rounding can push the quotient an ulp outside the inputs' range.
        let (lo, hi) = preds.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, a)| (lo.min(a[d]), hi.max(a[d])));
        *s = s.clamp(lo, hi);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub k_ens: f64,
    /// Database frames per control tick.
    pub stride: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { k_ens: DEFAULT_K_ENS, stride: 1 }
    }
}

/// Overlapping action chunks, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleBuffer {
    pub config: EnsembleConfig,
    pending: VecDeque<(u32, Vec<Vec<f64>>)>,
}

impl EnsembleBuffer {
    pub fn new(config: EnsembleConfig) -> Result<Self> {
        if !(config.k_ens >= 0.0) || config.stride == 0 {
            return Err(invalid(format!("bad ensemble config {config:?}")));
        }
        Ok(Self { config, pending: VecDeque::new() })
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn ages(&self) -> Vec<u32> {
        self.pending.iter().map(|(a, _)| *a).collect()
    }

    /// Chunk element that predicts the current step for a chunk of this age.
    fn element(&self, age: u32) -> usize {
        (age as usize + 1) * self.config.stride - 1
    }

    /// Adds a fresh chunk and returns the fused action for this step, then
    /// ages every chunk and drops those with no prediction left.
    pub fn step(&mut self, chunk: Vec<Vec<f64>>) -> Result<Vec<f64>> {
        if chunk.len() < self.config.stride {
            return Err(invalid(format!("chunk of {} frames is shorter than stride {}", chunk.len(), self.config.stride)));
        }
        self.pending.push_front((0, chunk));
        let preds: Vec<(u32, &[f64])> =
            self.pending.iter().map(|(age, c)| (*age, c[self.element(*age)].as_slice())).collect();
        let fused = fuse(&preds, self.config.k_ens)?;
        for (age, _) in self.pending.iter_mut() {
            *age += 1;
        }
        let stride = self.config.stride;
        self.pending.retain(|(age, c)| (*age as usize + 1) * stride <= c.len());
        Ok(fused)
    }

    pub fn clear(&mut self) {
        self.pending.clear();
    }
}
