//! Importance-ratio machinery: token and sequence ratios, mixing weights,
//! mixed ratios, and the two clipping schemes.
//!
//! All ratios are formed from log-probability differences and exponentiated
//! last.

use serde::Serialize;

use crate::types::{ClipConfig, ClipMode, MixingMode};

/// Numerical floor on the entropy spread for min-max normalization.
pub const ENTROPY_SPREAD_FLOOR: f64 = 1e-12;

pub fn token_ratio(new_logprob: f64, old_logprob: f64) -> f64 {
    (new_logprob - old_logprob).exp()
}

/// Length-normalized sequence ratio: the geometric mean of token ratios.
pub fn seq_ratio(new_logprobs: &[f64], old_logprobs: &[f64]) -> f64 {
    seq_log_ratio(new_logprobs, old_logprobs).exp()
}

pub fn seq_log_ratio(new_logprobs: &[f64], old_logprobs: &[f64]) -> f64 {
    assert_eq!(new_logprobs.len(), old_logprobs.len());
    assert!(!new_logprobs.is_empty());
    let total: f64 = new_logprobs
        .iter()
        .zip(old_logprobs)
        .map(|(n, o)| n - o)
        .sum();
    total / new_logprobs.len() as f64
}

pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Where a ratio sits relative to its trust region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipState {
    Below,
    Inside,
    Above,
}

impl ClipState {
    pub fn of(x: f64, lo: f64, hi: f64) -> Self {
        if x < lo {
            ClipState::Below
        } else if x > hi {
            ClipState::Above
        } else {
            ClipState::Inside
        }
    }

    pub fn saturated(self) -> bool {
        self != ClipState::Inside
    }
}

/// Distance from `x` to the nearer of the two bounds.
pub fn boundary_distance(x: f64, lo: f64, hi: f64) -> f64 {
    (x - lo).abs().min((x - hi).abs())
}

/// Per-token mixing weights for one mini-batch.
///
/// `Averaged` is a constant 0.5. `EntropyGuided` min-max normalizes the
/// entropies over the whole slice and maps them linearly onto
/// `[w_min, w_max]`; if every entropy is equal the midpoint of the range is
/// used (0.5 for the default range).
pub fn mixing_weights(mode: MixingMode, entropies: &[f64]) -> Vec<f64> {
    match mode {
        MixingMode::Averaged => vec![0.5; entropies.len()],
        MixingMode::EntropyGuided { w_min, w_max } => {
            let lo = entropies.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let spread = hi - lo;
            if spread.is_nan() || spread < ENTROPY_SPREAD_FLOOR {
                return vec![w_min + 0.5 * (w_max - w_min); entropies.len()];
            }
            entropies
                .iter()
                .map(|h| {
                    let unit = ((h - lo) / spread).clamp(0.0, 1.0);
                    (w_min + (w_max - w_min) * unit).min(w_max).max(w_min)
                })
                .collect()
        }
    }
}

pub fn mixed_ratio(w: f64, r: f64, s: f64) -> f64 {
    w * r + (1.0 - w) * s
}

/// Clipped mixed ratio for one token plus which branches saturated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClippedMix {
    pub value: f64,
    pub token_state: ClipState,
    pub seq_state: ClipState,
}

impl ClippedMix {
    pub fn token_clipped(&self) -> bool {
        self.token_state.saturated()
    }

    pub fn seq_clipped(&self) -> bool {
        self.seq_state.saturated()
    }
}

/// Branch-specific: clip `r` and `s` in their own trust regions, then mix.
/// Unified: mix first, then clip once; both branch states report the single
/// saturation.
pub fn clip_mixed(w: f64, r: f64, s: f64, cfg: &ClipConfig) -> ClippedMix {
    match cfg.mode {
        ClipMode::BranchSpecific => {
            let (tlo, thi) = cfg.token_bounds();
            let (slo, shi) = cfg.seq_bounds();
            ClippedMix {
                value: w * clip(r, tlo, thi) + (1.0 - w) * clip(s, slo, shi),
                token_state: ClipState::of(r, tlo, thi),
                seq_state: ClipState::of(s, slo, shi),
            }
        }
        ClipMode::Unified => {
            let (lo, hi) = cfg.unified_bounds();
            let m = mixed_ratio(w, r, s);
            let state = ClipState::of(m, lo, hi);
            ClippedMix {
                value: clip(m, lo, hi),
                token_state: state,
                seq_state: state,
            }
        }
    }
}

/// Ratio decomposition of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioBundle {
    pub token_ratios: Vec<f64>,
    pub seq_ratio: f64,
    pub seq_ratio_tokenwise: Vec<f64>,
    pub weights: Vec<f64>,
    pub mixed: Vec<f64>,
    pub mixed_clipped: Vec<f64>,
    pub token_branch_clipped: Vec<bool>,
    pub seq_branch_clipped: Vec<bool>,
}

impl RatioBundle {
    pub fn compute(
        new_logprobs: &[f64],
        old_logprobs: &[f64],
        weights: &[f64],
        cfg: &ClipConfig,
    ) -> Self {
        let n = new_logprobs.len();
        assert_eq!(weights.len(), n);
        let s = seq_ratio(new_logprobs, old_logprobs);
        let token_ratios: Vec<f64> = new_logprobs
            .iter()
            .zip(old_logprobs)
            .map(|(&a, &b)| token_ratio(a, b))
            .collect();
        let mut bundle = RatioBundle {
            token_ratios: token_ratios.clone(),
            seq_ratio: s,
            seq_ratio_tokenwise: vec![s; n],
            weights: weights.to_vec(),
            mixed: Vec::with_capacity(n),
            mixed_clipped: Vec::with_capacity(n),
            token_branch_clipped: Vec::with_capacity(n),
            seq_branch_clipped: Vec::with_capacity(n),
        };
        for (&r, &w) in token_ratios.iter().zip(weights) {
            let c = clip_mixed(w, r, s, cfg);
            bundle.mixed.push(mixed_ratio(w, r, s));
            bundle.mixed_clipped.push(c.value);
            bundle.token_branch_clipped.push(c.token_clipped());
            bundle.seq_branch_clipped.push(c.seq_clipped());
        }
        bundle
    }
}
