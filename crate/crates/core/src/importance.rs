//! Per-block importance scoring.
//!
//! A block's importance fuses two signals: a temporal score, the logistic of
//! its smoothed gradient magnitude and recent magnitude variance, and a
//! structural score built from layer depth and the block's share of the
//! parameter vector. The highest-scoring fraction `p` of blocks forms the
//! full-precision sync set.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BlockIndex, GradientVector};

#[derive(Debug, Clone, PartialEq)]
struct BlockStats {
    ema_mag: f64,
    window: VecDeque<f64>,
}

/// Gradient magnitude history for every block of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    rho: f64,
    window_len: usize,
    blocks: Vec<BlockStats>,
    rounds_seen: usize,
}

impl GradStats {
    pub fn new(n_blocks: usize, rho: f64, window_len: usize) -> Self {
        GradStats {
            rho,
            window_len: window_len.max(1),
            blocks: vec![
                BlockStats {
                    ema_mag: 0.0,
                    window: VecDeque::new(),
                };
                n_blocks
            ],
            rounds_seen: 0,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn rounds_seen(&self) -> usize {
        self.rounds_seen
    }

    pub fn ema_mag(&self, block: usize) -> f64 {
        self.blocks[block].ema_mag
    }

    pub fn window(&self, block: usize) -> impl Iterator<Item = f64> + '_ {
        self.blocks[block].window.iter().copied()
    }

    /// Population variance of the block's window; zero with fewer than two entries.
    pub fn variance(&self, block: usize) -> f64 {
        let w = &self.blocks[block].window;
        if w.len() < 2 {
            return 0.0;
        }
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }
}

/// Folds one gradient into the per-block statistics.
pub fn update_grad_stats(
    stats: &mut GradStats,
    grad: &GradientVector,
    index: &BlockIndex,
) -> Result<()> {
    if grad.len() != index.total || stats.blocks.len() != index.len() {
        return Err(Error::shape(format!(
            "gradient of {} entries / stats of {} blocks vs index of {} entries in {} blocks",
            grad.len(),
            stats.blocks.len(),
            index.total,
            index.len()
        )));
    }
    let first = stats.rounds_seen == 0;
    for (bs, block) in stats.blocks.iter_mut().zip(&index.blocks) {
        let seg = &grad.values[block.range()];
        let m = seg.iter().map(|g| g.abs()).sum::<f64>() / seg.len() as f64;
        bs.ema_mag = if first {
            m
        } else {
            stats.rho * bs.ema_mag + (1.0 - stats.rho) * m
        };
        bs.window.push_back(m);
        while bs.window.len() > stats.window_len {
            bs.window.pop_front();
        }
    }
    stats.rounds_seen += 1;
    Ok(())
}

/// Weights of the temporal attention `logistic(w1 * |g| + w2 * Var(g))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalAttentionParams {
    pub w1: f64,
    pub w2: f64,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn temporal_attention(stats: &GradStats, params: &TemporalAttentionParams) -> Vec<f64> {
    (0..stats.n_blocks())
        .map(|b| logistic(params.w1 * stats.ema_mag(b) + params.w2 * stats.variance(b)))
        .collect()
}

/// `0.5 * depth_score + 0.5 * (1 - density)`, where earlier layers score higher.
pub fn structural_attention(index: &BlockIndex, depth_count: usize) -> Vec<f64> {
    index
        .blocks
        .iter()
        .map(|b| {
            let depth_score = if depth_count <= 1 {
                1.0
            } else {
                (depth_count as f64 - b.depth as f64) / (depth_count as f64 - 1.0)
            };
            0.5 * depth_score.clamp(0.0, 1.0) + 0.5 * (1.0 - b.density).clamp(0.0, 1.0)
        })
        .collect()
}

/// Fused per-block importance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScore {
    pub scores: Vec<f64>,
    pub alpha: f64,
}

pub fn fuse_importance(temporal: &[f64], structural: &[f64], alpha: f64) -> Result<ImportanceScore> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    if temporal.len() != structural.len() {
        return Err(Error::shape(format!(
            "temporal has {} scores, structural {}",
            temporal.len(),
            structural.len()
        )));
    }
    let scores = temporal
        .iter()
        .zip(structural)
        .map(|(t, s)| alpha * t + (1.0 - alpha) * s)
        .collect();
    Ok(ImportanceScore { scores, alpha })
}

/// A set of selected blocks, ids ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub block_ids: Vec<usize>,
    /// Fraction used when produced by [`top_p_select`].
    pub p: Option<f64>,
}

impl SelectionResult {
    pub fn empty() -> Self {
        SelectionResult {
            block_ids: Vec::new(),
            p: None,
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.block_ids.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.block_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block_ids.is_empty()
    }
}

/// `ceil(p * n)` guarded against representation error in `p * n`.
pub fn top_p_count(p: f64, n: usize) -> usize {
    let p = p.clamp(0.0, 1.0);
    ((p * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Selects the `ceil(p * n_blocks)` highest scores; ties go to the lower id.
pub fn top_p_select(importance: &ImportanceScore, p: f64) -> SelectionResult {
    let n = importance.scores.len();
    let k = top_p_count(p, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        importance.scores[b]
            .total_cmp(&importance.scores[a])
            .then(a.cmp(&b))
    });
    let mut block_ids: Vec<usize> = order.into_iter().take(k).collect();
    block_ids.sort_unstable();
    SelectionResult {
        block_ids,
        p: Some(p),
    }
}

/// Step size and guard for [`calibrate_attention`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub eta: f64,
    pub eps: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { eta: 0.1, eps: 1e-8 }
    }
}

/// Mean pre-activation `w1 * ema + w2 * Var` over every block of every device.
pub fn mean_preactivation(params: &TemporalAttentionParams, stats: &[&GradStats]) -> f64 {
    let (sum, count) = stats.iter().fold((0.0, 0usize), |(s, c), st| {
        let part: f64 = (0..st.n_blocks())
            .map(|b| params.w1 * st.ema_mag(b) + params.w2 * st.variance(b))
            .sum();
        (s + part, c + st.n_blocks())
    });
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Moves the mean pre-activation toward zero with a damped step on `w1`.
///
/// Only applies once some block has at least two window entries.
pub fn calibrate_attention(
    params: &TemporalAttentionParams,
    stats: &[&GradStats],
    cal: &Calibration,
) -> TemporalAttentionParams {
    let ready = stats
        .iter()
        .any(|st| st.blocks.iter().any(|b| b.window.len() >= 2));
    if !ready {
        return *params;
    }
    let z_bar = mean_preactivation(params, stats);
    let (mag_sum, count) = stats.iter().fold((0.0, 0usize), |(s, c), st| {
        (s + st.blocks.iter().map(|b| b.ema_mag).sum::<f64>(), c + st.n_blocks())
    });
    let mean_mag = mag_sum / count.max(1) as f64;
    if z_bar == 0.0 || mean_mag == 0.0 {
        return *params;
    }
    TemporalAttentionParams {
        w1: params.w1 - cal.eta * z_bar / (mean_mag + cal.eps),
        w2: params.w2,
    }
}
