//! Clipped surrogate objectives and their analytic gradients.
//!
//! Every objective here is a sum of per-token terms aggregated as
//! `(1/N) Σ_i (1/|o_i|) Σ_t term_{i,t}` over the `N` rollouts of a
//! mini-batch, and every term depends on the parameters only through the
//! log-probability of its own token (stop-gradient quantities are read from an
//! [`SgTape`]). The analytic gradient is therefore
//! `Σ_{i,t} c_{i,t} · ∇ log π(o_{i,t})` where `c_{i,t}` is the derivative of
//! the loss with respect to that log-probability; the per-row score function
//! comes from [`PolicyParams::score`].
//!
//! Sign convention: the loss is maximized (gradient ascent).
//!
//! GMPO and CISPO are reconstructions:
//! - GMPO clips the length-normalized geometric mean `g_i` of the token
//!   ratios as a whole, `min(g_i A, clip(g_i, 1-ε, 1+ε) A)` per token, with the
//!   same token-local gradient construction as the sequence branch.
//! - CISPO is REINFORCE weighted by a frozen truncated ratio,
//!   `sg[clip(r, max(0, 1-ε_low), 1+ε_high)] · A · (log π - log π_old)`. The
//!   constant `log π_old` offset does not change the gradient and makes the
//!   on-policy loss zero like every other objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::policy::{rollout_keys, ContextKey, PolicyParams, RowMap};
use crate::ratios::{
    boundary_distance, clip, clip_mixed, mixed_ratio, mixing_weights, seq_log_ratio, token_ratio,
    ClipState,
};
use crate::types::{ClipConfig, ClipMode, MixingMode, ObjectiveKind, Sample};

/// Clip ranges of the baseline objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineClips {
    pub grpo_eps_low: f64,
    pub grpo_eps_high: f64,
    pub gspo_eps_low: f64,
    pub gspo_eps_high: f64,
    pub gmpo_eps: f64,
    pub cispo_eps_low: f64,
    pub cispo_eps_high: f64,
}

impl Default for BaselineClips {
    fn default() -> Self {
        Self {
            grpo_eps_low: 0.2,
            grpo_eps_high: 0.2,
            gspo_eps_low: 3e-4,
            gspo_eps_high: 4e-4,
            gmpo_eps: 0.4,
            cispo_eps_low: 10.0,
            cispo_eps_high: 0.2,
        }
    }
}

/// A fully parameterized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Grpo {
        eps_low: f64,
        eps_high: f64,
    },
    Gspo {
        eps_low: f64,
        eps_high: f64,
    },
    Dhpo {
        mixing: MixingMode,
        clip: ClipConfig,
    },
    Gmpo {
        eps: f64,
    },
    Cispo {
        eps_low: f64,
        eps_high: f64,
    },
}

impl Objective {
    pub fn build(
        kind: ObjectiveKind,
        clip: &ClipConfig,
        entropy_weights: (f64, f64),
        baselines: &BaselineClips,
    ) -> Self {
        match kind {
            ObjectiveKind::Grpo => Objective::Grpo {
                eps_low: baselines.grpo_eps_low,
                eps_high: baselines.grpo_eps_high,
            },
            ObjectiveKind::Gspo => Objective::Gspo {
                eps_low: baselines.gspo_eps_low,
                eps_high: baselines.gspo_eps_high,
            },
            ObjectiveKind::DhpoA => Objective::Dhpo {
                mixing: MixingMode::Averaged,
                clip: *clip,
            },
            ObjectiveKind::DhpoE => Objective::Dhpo {
                mixing: MixingMode::EntropyGuided {
                    w_min: entropy_weights.0,
                    w_max: entropy_weights.1,
                },
                clip: *clip,
            },
            ObjectiveKind::Gmpo => Objective::Gmpo {
                eps: baselines.gmpo_eps,
            },
            ObjectiveKind::Cispo => Objective::Cispo {
                eps_low: baselines.cispo_eps_low,
                eps_high: baselines.cispo_eps_high,
            },
        }
    }

    /// The objective with its published default hyperparameters.
    pub fn with_defaults(kind: ObjectiveKind) -> Self {
        Self::build(
            kind,
            &ClipConfig::default(),
            (0.0, 1.0),
            &BaselineClips::default(),
        )
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Objective::Grpo { .. } => ObjectiveKind::Grpo,
            Objective::Gspo { .. } => ObjectiveKind::Gspo,
            Objective::Dhpo {
                mixing: MixingMode::Averaged,
                ..
            } => ObjectiveKind::DhpoA,
            Objective::Dhpo { .. } => ObjectiveKind::DhpoE,
            Objective::Gmpo { .. } => ObjectiveKind::Gmpo,
            Objective::Cispo { .. } => ObjectiveKind::Cispo,
        }
    }
}

/// Quantities held constant under differentiation, captured once per
/// evaluation point. The finite-difference oracle reuses the tape from the
/// base point for every perturbed evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SgTape {
    pub entropies: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// Length-normalized sequence ratio `s_i`.
    pub seq_ratios: Vec<f64>,
    /// `sg[log π(o_{i,t})]`, the denominator of the token-wise sequence ratio.
    pub token_logprobs: Vec<Vec<f64>>,
    /// Truncated importance weights (CISPO).
    pub truncated_weights: Vec<Vec<f64>>,
}

impl SgTape {
    /// `entropies` must cover every token of every sample; they drive the
    /// entropy-guided weights, normalized over the whole mini-batch.
    pub fn capture(
        objective: &Objective,
        samples: &[Sample<'_>],
        new_logprobs: &[Vec<f64>],
        entropies: &[Vec<f64>],
    ) -> Self {
        let seq_ratios = samples
            .iter()
            .zip(new_logprobs)
            .map(|(s, lp)| seq_log_ratio(lp, &s.rollout.old_logprobs).exp())
            .collect();
        let weights = match objective {
            Objective::Dhpo { mixing, .. } => {
                let flat: Vec<f64> = entropies.iter().flatten().copied().collect();
                let w = mixing_weights(*mixing, &flat);
                unflatten(&w, entropies)
            }
            _ => Vec::new(),
        };
        let truncated_weights = match *objective {
            Objective::Cispo { eps_low, eps_high } => {
                let lo = (1.0 - eps_low).max(0.0);
                let hi = 1.0 + eps_high;
                samples
                    .iter()
                    .zip(new_logprobs)
                    .map(|(s, lp)| {
                        lp.iter()
                            .zip(&s.rollout.old_logprobs)
                            .map(|(&n, &o)| clip(token_ratio(n, o), lo, hi))
                            .collect()
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        Self {
            entropies: entropies.to_vec(),
            weights,
            seq_ratios,
            token_logprobs: new_logprobs.to_vec(),
            truncated_weights,
        }
    }
}

fn unflatten(flat: &[f64], shape: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(shape.len());
    let mut offset = 0;
    for row in shape {
        out.push(flat[offset..offset + row.len()].to_vec());
        offset += row.len();
    }
    out
}

/// Which side of the `min` supplied the token's term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Unclipped,
    Clipped,
}

/// Per-token breakdown of a surrogate evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenTerm {
    /// The term inside the token average, before `1/|o_i|` and `1/N`.
    pub value: f64,
    /// Multiplier on `A_i · ∇ log π(o_{i,t})` in the token's gradient.
    pub ratio_factor: f64,
    pub branch: Branch,
    pub token_state: ClipState,
    pub seq_state: ClipState,
    /// Distance to the nearest clip bound or `min` crossover; a kink lies
    /// where this reaches zero.
    pub kink_margin: f64,
}

impl TokenTerm {
    fn regime(&self) -> (ClipState, ClipState, Branch) {
        (self.token_state, self.seq_state, self.branch)
    }
}

/// Result of evaluating a surrogate against a fixed tape.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    pub loss: f64,
    pub terms: Vec<Vec<TokenTerm>>,
    /// `∂L/∂ log π(o_{i,t})`.
    pub coefficients: Vec<Vec<f64>>,
}

/// `min(x·A, clip(x)·A)` with ties resolved toward the unclipped side.
/// `factor` is the derivative of `x` w.r.t. the token log-probability,
/// which equals `x` for every ratio used here.
fn clipped_term(x: f64, a: f64, lo: f64, hi: f64) -> (f64, f64, Branch, ClipState, f64) {
    let state = ClipState::of(x, lo, hi);
    let unclipped = x * a;
    let clipped = clip(x, lo, hi) * a;
    let mut margin = boundary_distance(x, lo, hi);
    if state.saturated() && a != 0.0 {
        margin = margin.min((unclipped - clipped).abs());
    }
    if unclipped <= clipped {
        (unclipped, x, Branch::Unclipped, state, margin)
    } else {
        // Selected clipped branch is saturated: zero derivative.
        (clipped, 0.0, Branch::Clipped, state, margin)
    }
}

fn token_term(
    objective: &Objective,
    tape: &SgTape,
    i: usize,
    t: usize,
    a: f64,
    new_lp: f64,
    old_lp: f64,
) -> TokenTerm {
    // s_{i,t} = sg[s_i] · π / sg[π]
    let tokenwise_seq = || tape.seq_ratios[i] * (new_lp - tape.token_logprobs[i][t]).exp();
    match *objective {
        Objective::Grpo { eps_low, eps_high } => {
            let r = token_ratio(new_lp, old_lp);
            let (value, ratio_factor, branch, token_state, kink_margin) =
                clipped_term(r, a, 1.0 - eps_low, 1.0 + eps_high);
            TokenTerm {
                value,
                ratio_factor,
                branch,
                token_state,
                seq_state: ClipState::Inside,
                kink_margin,
            }
        }
        Objective::Gspo { eps_low, eps_high } => {
            seq_only_term(tokenwise_seq(), a, 1.0 - eps_low, 1.0 + eps_high)
        }
        Objective::Gmpo { eps } => seq_only_term(tokenwise_seq(), a, 1.0 - eps, 1.0 + eps),
        Objective::Dhpo { clip: cfg, .. } => {
            let w = tape.weights[i][t];
            let r = token_ratio(new_lp, old_lp);
            let s = tokenwise_seq();
            let m = mixed_ratio(w, r, s);
            let c = clip_mixed(w, r, s, &cfg);
            let unclipped = m * a;
            let clipped = c.value * a;
            let mut kink_margin = match cfg.mode {
                ClipMode::BranchSpecific => {
                    let (tlo, thi) = cfg.token_bounds();
                    let (slo, shi) = cfg.seq_bounds();
                    boundary_distance(r, tlo, thi).min(boundary_distance(s, slo, shi))
                }
                ClipMode::Unified => {
                    let (lo, hi) = cfg.unified_bounds();
                    boundary_distance(m, lo, hi)
                }
            };
            if (c.token_clipped() || c.seq_clipped()) && a != 0.0 {
                kink_margin = kink_margin.min((unclipped - clipped).abs());
            }
            let (value, ratio_factor, branch) = if unclipped <= clipped {
                (unclipped, m, Branch::Unclipped)
            } else {
                let factor = match cfg.mode {
                    ClipMode::BranchSpecific => {
                        let tok = if c.token_clipped() { 0.0 } else { w * r };
                        let seq = if c.seq_clipped() { 0.0 } else { (1.0 - w) * s };
                        tok + seq
                    }
                    ClipMode::Unified => 0.0,
                };
                (clipped, factor, Branch::Clipped)
            };
            TokenTerm {
                value,
                ratio_factor,
                branch,
                token_state: c.token_state,
                seq_state: c.seq_state,
                kink_margin,
            }
        }
        Objective::Cispo { eps_low, eps_high } => {
            let weight = tape.truncated_weights[i][t];
            let state = ClipState::of(
                token_ratio(tape.token_logprobs[i][t], old_lp),
                (1.0 - eps_low).max(0.0),
                1.0 + eps_high,
            );
            TokenTerm {
                value: weight * a * (new_lp - old_lp),
                ratio_factor: weight,
                branch: Branch::Unclipped,
                token_state: state,
                seq_state: ClipState::Inside,
                kink_margin: f64::INFINITY,
            }
        }
    }
}

fn seq_only_term(s: f64, a: f64, lo: f64, hi: f64) -> TokenTerm {
    let (value, ratio_factor, branch, seq_state, kink_margin) = clipped_term(s, a, lo, hi);
    TokenTerm {
        value,
        ratio_factor,
        branch,
        token_state: ClipState::Inside,
        seq_state,
        kink_margin,
    }
}

/// Evaluates the surrogate at `new_logprobs` with every stop-gradient
/// quantity read from `tape`.
pub fn surrogate(
    objective: &Objective,
    samples: &[Sample<'_>],
    new_logprobs: &[Vec<f64>],
    tape: &SgTape,
) -> Result<SurrogateEval> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_rollouts = samples.len() as f64;
    let mut loss = 0.0;
    let mut terms = Vec::with_capacity(samples.len());
    let mut coefficients = Vec::with_capacity(samples.len());
    for (i, (sample, lp)) in samples.iter().zip(new_logprobs).enumerate() {
        let old = &sample.rollout.old_logprobs;
        let a = sample.advantage;
        let len = old.len() as f64;
        let row: Vec<TokenTerm> = lp
            .iter()
            .zip(old)
            .enumerate()
            .map(|(t, (&n, &o))| token_term(objective, tape, i, t, a, n, o))
            .collect();
        let sum: f64 = row.iter().map(|term| term.value).sum();
        loss += sum / len;
        coefficients.push(
            row.iter()
                .map(|term| term.ratio_factor * a / (len * n_rollouts))
                .collect(),
        );
        terms.push(row);
    }
    Ok(SurrogateEval {
        loss: loss / n_rollouts,
        terms,
        coefficients,
    })
}

/// Fractions of tokens whose token / sequence branch saturated and whose
/// `min` picked the clipped side.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipStats {
    pub token_frac: f64,
    pub seq_frac: f64,
    pub min_clipped_frac: f64,
}

impl ClipStats {
    pub fn from_terms(terms: &[Vec<TokenTerm>]) -> Self {
        let mut n = 0usize;
        let (mut tok, mut seq, mut min) = (0usize, 0usize, 0usize);
        for term in terms.iter().flatten() {
            n += 1;
            tok += usize::from(term.token_state.saturated());
            seq += usize::from(term.seq_state.saturated());
            min += usize::from(term.branch == Branch::Clipped);
        }
        if n == 0 {
            return Self::default();
        }
        let n = n as f64;
        Self {
            token_frac: tok as f64 / n,
            seq_frac: seq as f64 / n,
            min_clipped_frac: min as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub objective: ObjectiveKind,
    pub loss: f64,
    pub gradient: RowMap,
    pub clip_stats: ClipStats,
    pub mean_entropy: f64,
    pub token_count: usize,
}

impl ObjectiveReport {
    pub fn interpreted(&self) -> bool {
        self.objective.is_interpreted()
    }

    pub fn gradient_is_finite(&self) -> bool {
        self.gradient.values().flatten().all(|g| g.is_finite())
    }
}

#[derive(Serialize)]
struct GradientRow<'a> {
    query_id: u64,
    recent: &'a [u32],
    grad: &'a [f64],
}

impl Serialize for ObjectiveReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            objective: ObjectiveKind,
            interpreted_baseline: bool,
            loss: f64,
            gradient: Vec<GradientRow<'a>>,
            clip_stats: ClipStats,
            mean_entropy: f64,
            token_count: usize,
        }
        Repr {
            objective: self.objective,
            interpreted_baseline: self.interpreted(),
            loss: self.loss,
            gradient: self
                .gradient
                .iter()
                .map(|(k, g)| GradientRow {
                    query_id: k.query_id,
                    recent: &k.recent,
                    grad: g,
                })
                .collect(),
            clip_stats: self.clip_stats,
            mean_entropy: self.mean_entropy,
            token_count: self.token_count,
        }
        .serialize(serializer)
    }
}

/// Per-token inputs of an evaluation at one parameter point.
#[derive(Debug, Clone)]
pub struct PolicyView {
    pub keys: Vec<Vec<ContextKey>>,
    pub logprobs: Vec<Vec<f64>>,
    pub entropies: Vec<Vec<f64>>,
}

impl PolicyView {
    pub fn new(params: &PolicyParams, samples: &[Sample<'_>]) -> Self {
        let keys: Vec<Vec<ContextKey>> = samples
            .iter()
            .map(|s| rollout_keys(s.query, &s.rollout.tokens, params.window()))
            .collect();
        let logprobs = logprobs_at(params, samples, &keys);
        let entropies = keys
            .iter()
            .map(|row| row.iter().map(|k| params.token_entropy(k)).collect())
            .collect();
        Self {
            keys,
            logprobs,
            entropies,
        }
    }
}

fn logprobs_at(
    params: &PolicyParams,
    samples: &[Sample<'_>],
    keys: &[Vec<ContextKey>],
) -> Vec<Vec<f64>> {
    samples
        .iter()
        .zip(keys)
        .map(|(s, row)| {
            row.iter()
                .zip(&s.rollout.tokens)
                .map(|(k, &tok)| params.logprob(k, tok))
                .collect()
        })
        .collect()
}

/// Loss, analytic gradient and statistics at `params`.
///
/// Entropies (and therefore entropy-guided weights) are taken under `params`.
pub fn evaluate(
    objective: &Objective,
    samples: &[Sample<'_>],
    params: &PolicyParams,
) -> Result<ObjectiveReport> {
    let view = PolicyView::new(params, samples);
    evaluate_view(objective, samples, params, &view, None)
}

/// As [`evaluate`], optionally overriding the entropies fed to the mixing
/// weights (e.g. entropies frozen at the behavior policy).
pub fn evaluate_view(
    objective: &Objective,
    samples: &[Sample<'_>],
    params: &PolicyParams,
    view: &PolicyView,
    weight_entropies: Option<&[Vec<f64>]>,
) -> Result<ObjectiveReport> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let entropies = weight_entropies.unwrap_or(&view.entropies);
    let tape = SgTape::capture(objective, samples, &view.logprobs, entropies);
    let eval = surrogate(objective, samples, &view.logprobs, &tape)?;
    let gradient = analytic_gradient(params, samples, &view.keys, &eval.coefficients);
    let token_count: usize = view.keys.iter().map(Vec::len).sum();
    let mean_entropy = view.entropies.iter().flatten().sum::<f64>() / token_count as f64;
    Ok(ObjectiveReport {
        objective: objective.kind(),
        loss: eval.loss,
        gradient,
        clip_stats: ClipStats::from_terms(&eval.terms),
        mean_entropy,
        token_count,
    })
}

/// `Σ c_{i,t} · score(o_{i,t})`, accumulated in sample order. Every touched
/// row appears, even when its gradient is zero.
pub fn analytic_gradient(
    params: &PolicyParams,
    samples: &[Sample<'_>],
    keys: &[Vec<ContextKey>],
    coefficients: &[Vec<f64>],
) -> RowMap {
    let v = params.vocab_size();
    let mut grad: RowMap = BTreeMap::new();
    for ((sample, row_keys), row_coeffs) in samples.iter().zip(keys).zip(coefficients) {
        for ((key, &tok), &c) in row_keys.iter().zip(&sample.rollout.tokens).zip(row_coeffs) {
            let entry = grad.entry(key.clone()).or_insert_with(|| vec![0.0; v]);
            if c == 0.0 {
                continue;
            }
            for (g, s) in entry.iter_mut().zip(params.score(key, tok)) {
                *g += c * s;
            }
        }
    }
    grad
}

pub const DEFAULT_FD_STEP: f64 = 1e-6;
/// Perturbed evaluations closer than this to a clip bound or `min`
/// crossover are treated as kinks.
pub const KINK_TOLERANCE: f64 = 1e-9;

/// Central-difference gradient with kink exclusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    /// Entries for skipped coordinates are NaN.
    pub gradient: RowMap,
    pub skipped: Vec<(ContextKey, usize)>,
    pub checked: usize,
}

/// Central finite differences of the surrogate over every touched
/// coordinate, with the stop-gradient tape frozen at `params`.
///
/// A coordinate is skipped when a perturbed evaluation changes the clip or
/// `min` regime of any token it affects, or lands within
/// [`KINK_TOLERANCE`] of a boundary.
pub fn fd_gradient(
    objective: &Objective,
    samples: &[Sample<'_>],
    params: &PolicyParams,
    weight_entropies: Option<&[Vec<f64>]>,
    h: f64,
) -> Result<FdGradient> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let view = PolicyView::new(params, samples);
    let entropies = weight_entropies.unwrap_or(&view.entropies);
    let tape = SgTape::capture(objective, samples, &view.logprobs, entropies);
    let base = surrogate(objective, samples, &view.logprobs, &tape)?;

    let mut touched: BTreeMap<&ContextKey, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, row) in view.keys.iter().enumerate() {
        for (t, key) in row.iter().enumerate() {
            touched.entry(key).or_default().push((i, t));
        }
    }

    let v = params.vocab_size();
    let mut gradient = RowMap::new();
    let mut skipped = Vec::new();
    let mut checked = 0;
    for (key, positions) in touched {
        let mut row = vec![f64::NAN; v];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut evals = [None, None];
            for (e, sign) in evals.iter_mut().zip([1.0, -1.0]) {
                let mut moved = params.clone();
                moved.row_mut(key)[j] += sign * h;
                let lp = logprobs_at(&moved, samples, &view.keys);
                *e = Some(surrogate(objective, samples, &lp, &tape)?);
            }
            let [Some(plus), Some(minus)] = evals else {
                unreachable!()
            };
            let kink = positions.iter().any(|&(i, t)| {
                let b = &base.terms[i][t];
                [&plus.terms[i][t], &minus.terms[i][t]]
                    .iter()
                    .any(|p| p.regime() != b.regime() || p.kink_margin < KINK_TOLERANCE)
                    || b.kink_margin < KINK_TOLERANCE
            });
            if kink {
                skipped.push((key.clone(), j));
            } else {
                *slot = (plus.loss - minus.loss) / (2.0 * h);
                checked += 1;
            }
        }
        gradient.insert(key.clone(), row);
    }
    Ok(FdGradient {
        gradient,
        skipped,
        checked,
    })
}

/// Largest absolute analytic-vs-FD difference over non-skipped coordinates.
pub fn max_deviation(analytic: &RowMap, fd: &FdGradient) -> f64 {
    let mut worst: f64 = 0.0;
    for (key, fd_row) in &fd.gradient {
        let an_row = analytic.get(key);
        for (j, &f) in fd_row.iter().enumerate() {
            if f.is_nan() {
                continue;
            }
            let a = an_row.map_or(0.0, |r| r[j]);
            worst = worst.max((a - f).abs());
        }
    }
    // A row present analytically but absent from the oracle is a mismatch.
    for (key, row) in analytic {
        if !fd.gradient.contains_key(key) {
            worst = worst.max(row.iter().fold(0.0, |m, g| m.max(g.abs())));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::task_vocab;
    use crate::types::{Query, Rollout};

    fn query() -> Query {
        Query {
            id: 1,
            prompt_tokens: vec![3, 11],
            ground_truth: 3,
        }
    }

    fn rollout(tokens: Vec<u32>, old: Vec<f64>) -> Rollout {
        Rollout {
            query_id: 1,
            tokens,
            old_logprobs: old,
            reward: 0.0,
            truncated: false,
        }
    }

    fn samples<'a>(q: &'a Query, rs: &'a [Rollout], adv: &[f64]) -> Vec<Sample<'a>> {
        rs.iter()
            .zip(adv)
            .map(|(rollout, &advantage)| Sample {
                query: q,
                rollout,
                advantage,
            })
            .collect()
    }

    fn dummy_tape(n: usize) -> SgTape {
        SgTape {
            entropies: vec![vec![0.0; n]],
            weights: vec![vec![1.0; n]],
            seq_ratios: vec![1.0],
            token_logprobs: vec![vec![-1.0; n]],
            truncated_weights: vec![vec![1.0; n]],
        }
    }

    #[test]
    fn grpo_clipped_branch_has_zero_factor() {
        let q = query();
        let rs = [rollout(vec![0], vec![-1.0])];
        let s = samples(&q, &rs, &[1.0]);
        let obj = Objective::with_defaults(ObjectiveKind::Grpo);
        // r = e^{0.5} ≈ 1.65 > 1.2 with positive advantage: clipped.
        let eval = surrogate(&obj, &s, &[vec![-0.5]], &dummy_tape(1)).unwrap();
        let term = eval.terms[0][0];
        assert_eq!(term.branch, Branch::Clipped);
        assert_eq!(term.ratio_factor, 0.0);
        assert!((eval.loss - 1.2).abs() < 1e-12);
        // Same ratio, negative advantage: unclipped branch is smaller.
        let s = samples(&q, &rs, &[-1.0]);
        let eval = surrogate(&obj, &s, &[vec![-0.5]], &dummy_tape(1)).unwrap();
        assert_eq!(eval.terms[0][0].branch, Branch::Unclipped);
        assert!((eval.terms[0][0].ratio_factor - 0.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn cispo_weight_truncates_but_keeps_gradient() {
        let q = query();
        let rs = [rollout(vec![0], vec![-5f64.ln() - 1.0])];
        let s = samples(&q, &rs, &[1.0]);
        let obj = Objective::with_defaults(ObjectiveKind::Cispo);
        let lp = vec![vec![-1.0]];
        let tape = SgTape::capture(&obj, &s, &lp, &[vec![0.0]]);
        assert!((tape.truncated_weights[0][0] - 1.2).abs() < 1e-12);
        let eval = surrogate(&obj, &s, &lp, &tape).unwrap();
        assert!((eval.coefficients[0][0] - 1.2).abs() < 1e-12);
        assert!(eval.terms[0][0].token_state.saturated());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let obj = Objective::with_defaults(ObjectiveKind::DhpoA);
        let params = PolicyParams::new(task_vocab(), 2);
        assert!(matches!(
            evaluate(&obj, &[], &params),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn objective_kinds_round_trip() {
        for kind in ObjectiveKind::ALL {
            assert_eq!(Objective::with_defaults(kind).kind(), kind);
        }
    }

    #[test]
    fn dhpo_clipped_branch_keeps_interior_branch_gradient() {
        let q = query();
        let rs = [rollout(vec![0], vec![-1.0])];
        let s = samples(&q, &rs, &[1.0]);
        let obj = Objective::Dhpo {
            mixing: MixingMode::Averaged,
            clip: ClipConfig::default(),
        };
        // Token ratio 1.65 saturates; frozen sequence ratio 1.1 stays inside.
        let mut tape = dummy_tape(1);
        tape.weights = vec![vec![0.5]];
        tape.seq_ratios = vec![1.1];
        tape.token_logprobs = vec![vec![-0.5]];
        let eval = surrogate(&obj, &s, &[vec![-0.5]], &tape).unwrap();
        let term = eval.terms[0][0];
        assert_eq!(term.branch, Branch::Clipped);
        assert!((term.ratio_factor - 0.5 * 1.1).abs() < 1e-12);
        assert!((term.value - (0.5 * 1.28 + 0.5 * 1.1)).abs() < 1e-12);
    }
}
