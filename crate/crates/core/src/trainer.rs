//! The RLVR training loop.
//!
//! One outer step snapshots the policy as the behavior policy, samples `G`
//! responses for each of `P` fresh queries, standardizes rewards within each
//! group, then runs `E` inner epochs of shuffled mini-batch ascent on the
//! configured surrogate. Every random draw comes from a ChaCha stream keyed by
//! `(seed, step, purpose)`, so a run is reproducible from its config alone and
//! resumable from `(params, optimizer moments, step)`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advantage::DEFAULT_STD_FLOOR;
use crate::env::{self, generate_queries, TaskSpec};
use crate::error::{ConfigIssue, Error, Result};
use crate::metrics::{self, RunHeader, StepRecord};
use crate::objectives::{evaluate_view, BaselineClips, Objective, PolicyView};
use crate::policy::{PolicyParams, RowMap, DEFAULT_WINDOW};
use crate::types::{Batch, ClipConfig, Group, ObjectiveKind, Query, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightRange {
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for WeightRange {
    fn default() -> Self {
        Self {
            w_min: 0.0,
            w_max: 1.0,
        }
    }
}

/// When entropy-guided weights are recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyRefresh {
    /// Under the current parameters for every mini-batch.
    PerEpoch,
    /// Once per rollout batch, under the behavior policy.
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Argmax decoding, one response per query.
    Greedy,
    /// Mean reward of `eval_k` temperature samples per query.
    AvgAtK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    /// DHPO trust regions.
    pub clip: ClipConfig,
    /// Squash range of entropy-guided weights.
    pub entropy_weights: WeightRange,
    pub baselines: BaselineClips,
    pub prompts_per_step: usize,
    pub group_size: usize,
    pub inner_epochs: usize,
    pub minibatch_rollouts: usize,
    pub max_response_len: usize,
    pub total_steps: u64,
    pub optimizer: OptimizerConfig,
    pub temperature: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_queries: usize,
    pub eval_mode: EvalMode,
    pub eval_k: usize,
    pub entropy_refresh: EntropyRefresh,
    pub std_floor: f64,
    pub context_window: usize,
    pub checkpoint_every: u64,
    pub task: TaskSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::DhpoA,
            clip: ClipConfig::default(),
            entropy_weights: WeightRange::default(),
            baselines: BaselineClips::default(),
            prompts_per_step: 32,
            group_size: 16,
            inner_epochs: 4,
            minibatch_rollouts: 128,
            max_response_len: 32,
            total_steps: 200,
            optimizer: OptimizerConfig::default(),
            temperature: 1.0,
            seed: 0,
            eval_every: 10,
            eval_queries: 200,
            eval_mode: EvalMode::Greedy,
            eval_k: 4,
            entropy_refresh: EntropyRefresh::PerEpoch,
            std_floor: DEFAULT_STD_FLOOR,
            context_window: DEFAULT_WINDOW,
            checkpoint_every: 50,
            task: TaskSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn objective_spec(&self) -> Objective {
        Objective::build(
            self.objective,
            &self.clip,
            (self.entropy_weights.w_min, self.entropy_weights.w_max),
            &self.baselines,
        )
    }

    pub fn rollouts_per_step(&self) -> usize {
        self.prompts_per_step * self.group_size
    }

    /// Every invalid field, not just the first.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = self.clip.issues("clip");
        let w = self.entropy_weights;
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(w.w_min) || !in_unit(w.w_max) || w.w_min > w.w_max {
            out.push(ConfigIssue::new(
                "entropy_weights",
                format!(
                    "need 0 <= w_min <= w_max <= 1, got [{}, {}]",
                    w.w_min, w.w_max
                ),
            ));
        }
        let b = self.baselines;
        for (key, v, lower) in [
            ("baselines.grpo_eps_low", b.grpo_eps_low, true),
            ("baselines.grpo_eps_high", b.grpo_eps_high, false),
            ("baselines.gspo_eps_low", b.gspo_eps_low, true),
            ("baselines.gspo_eps_high", b.gspo_eps_high, false),
            ("baselines.gmpo_eps", b.gmpo_eps, true),
            ("baselines.cispo_eps_high", b.cispo_eps_high, false),
        ] {
            if !(v.is_finite() && v >= 0.0) || (lower && v >= 1.0) {
                out.push(ConfigIssue::new(key, format!("out of range: {v}")));
            }
        }
        // The CISPO lower bound is floored at ratio 0, so any size is allowed.
        if !(b.cispo_eps_low.is_finite() && b.cispo_eps_low >= 0.0) {
            out.push(ConfigIssue::new(
                "baselines.cispo_eps_low",
                format!("out of range: {}", b.cispo_eps_low),
            ));
        }
        if self.prompts_per_step == 0 {
            out.push(ConfigIssue::new("prompts_per_step", "must be at least 1"));
        }
        if self.group_size < 2 {
            out.push(ConfigIssue::new("group_size", "must be at least 2"));
        }
        if self.inner_epochs == 0 {
            out.push(ConfigIssue::new("inner_epochs", "must be at least 1"));
        }
        let total = self.rollouts_per_step();
        if self.minibatch_rollouts == 0
            || (total > 0 && !total.is_multiple_of(self.minibatch_rollouts))
        {
            out.push(ConfigIssue::new(
                "minibatch_rollouts",
                format!(
                    "must divide prompts_per_step * group_size = {total}, got {}",
                    self.minibatch_rollouts
                ),
            ));
        }
        if self.max_response_len < 2 {
            out.push(ConfigIssue::new(
                "max_response_len",
                "must be at least 2 (answer + EOS)",
            ));
        }
        let o = self.optimizer;
        if !(o.learning_rate.is_finite() && o.learning_rate >= 0.0) {
            out.push(ConfigIssue::new(
                "optimizer.learning_rate",
                "must be finite and >= 0",
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            out.push(ConfigIssue::new("optimizer.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            out.push(ConfigIssue::new("optimizer.beta2", "must be in [0, 1)"));
        }
        if o.adam_eps.is_nan() || o.adam_eps <= 0.0 {
            out.push(ConfigIssue::new("optimizer.adam_eps", "must be > 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            out.push(ConfigIssue::new("temperature", "must be finite and > 0"));
        }
        if self.eval_every == 0 {
            out.push(ConfigIssue::new("eval_every", "must be at least 1"));
        }
        if self.eval_queries == 0 {
            out.push(ConfigIssue::new("eval_queries", "must be at least 1"));
        }
        if self.eval_mode == EvalMode::AvgAtK && self.eval_k == 0 {
            out.push(ConfigIssue::new("eval_k", "must be at least 1"));
        }
        if self.std_floor.is_nan() || self.std_floor <= 0.0 {
            out.push(ConfigIssue::new("std_floor", "must be > 0"));
        }
        if self.context_window > 16 {
            out.push(ConfigIssue::new("context_window", "must be at most 16"));
        }
        if self.checkpoint_every == 0 {
            out.push(ConfigIssue::new("checkpoint_every", "must be at least 1"));
        }
        out.extend(self.task.issues("task"));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Stable identifier derived from the full config.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        format!(
            "{}-s{}-{hex}",
            self.objective.name().to_lowercase(),
            self.seed
        )
    }
}

/// Sparse Adam moments, keyed like the gradient rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: RowMap,
    pub v: RowMap,
}

/// One ascent step. Only rows present in `grad` are touched; their moments
/// are created lazily at zero.
pub fn adam_update(
    params: &mut PolicyParams,
    grad: &RowMap,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let v_len = params.vocab_size();
    for (key, g) in grad {
        let m = state
            .m
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; v_len]);
        let v = state
            .v
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; v_len]);
        let mut delta = vec![0.0; v_len];
        for j in 0..v_len {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            delta[j] = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        apply_delta(params, key, &delta);
    }
}

pub fn sgd_update(params: &mut PolicyParams, grad: &RowMap, learning_rate: f64) {
    for (key, g) in grad {
        let delta: Vec<f64> = g.iter().map(|x| learning_rate * x).collect();
        apply_delta(params, key, &delta);
    }
}

fn apply_delta(params: &mut PolicyParams, key: &crate::policy::ContextKey, delta: &[f64]) {
    if params.row(key).is_none() && delta.iter().all(|d| *d == 0.0) {
        return;
    }
    for (p, d) in params.row_mut(key).iter_mut().zip(delta) {
        *p += d;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParams,
    pub adam: AdamState,
    /// Number of completed outer steps.
    pub step: u64,
    pub last_accuracy: f64,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            params: PolicyParams::new(env::task_vocab(), config.context_window),
            adam: AdamState::default(),
            step: 0,
            last_accuracy: 0.0,
        }
    }
}

/// Purposes of the per-step random streams.
const STREAM_QUERIES: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_ROLLOUT: u64 = 1 << 32;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream `(seed, step, purpose)`.
pub fn stream_seed(seed: u64, step: u64, purpose: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step) ^ purpose)
}

fn stream(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, step, purpose))
}

/// Everything produced by one outer step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: StepRecord,
    /// The rollout batch, with behavior log-probabilities from the snapshot.
    pub batch: Batch,
    pub behavior_checksum: [u8; 32],
}

pub fn params_checksum(params: &PolicyParams) -> [u8; 32] {
    Sha256::digest(params.to_text().as_bytes()).into()
}

/// Samples `G` rollouts for every query, one independent stream per prompt.
pub fn sample_groups(
    params: &PolicyParams,
    queries: &[Query],
    config: &TrainConfig,
    step: u64,
) -> Result<Vec<Group>> {
    queries
        .par_iter()
        .enumerate()
        .map(|(idx, q)| {
            let mut rng = stream(config.seed, step, STREAM_ROLLOUT + idx as u64);
            let rollouts = (0..config.group_size)
                .map(|_| {
                    params.sample_rollout(q, config.max_response_len, config.temperature, &mut rng)
                })
                .collect();
            Group::new(q.clone(), rollouts, config.std_floor)
        })
        .collect()
}

pub fn run_step(state: &mut TrainState, config: &TrainConfig) -> Result<StepOutput> {
    run_step_timed(state, config, false)
}

/// One outer step. `wall_clock` controls whether `wall_ms` is measured;
/// leaving it off keeps logs byte-identical across runs.
pub fn run_step_timed(
    state: &mut TrainState,
    config: &TrainConfig,
    wall_clock: bool,
) -> Result<StepOutput> {
    let started = Instant::now();
    let step = state.step + 1;
    let objective = config.objective_spec();
    let params_old = state.params.clone();
    let behavior_checksum = params_checksum(&params_old);

    let queries = generate_queries(
        &config.task,
        config.prompts_per_step,
        stream_seed(config.seed, step, STREAM_QUERIES),
    );
    let batch = Batch::new(sample_groups(&params_old, &queries, config, step)?)?;
    let samples = batch.samples();
    let n = samples.len() as f64;
    let mean_reward = samples.iter().map(|s| s.rollout.reward).sum::<f64>() / n;
    let mean_response_len = samples.iter().map(|s| s.rollout.len() as f64).sum::<f64>() / n;
    let behavior = PolicyView::new(&params_old, &samples);
    let token_total: usize = behavior.entropies.iter().map(Vec::len).sum();
    let mean_entropy = behavior.entropies.iter().flatten().sum::<f64>() / token_total as f64;

    let mut loss_sum = 0.0;
    let mut updates = 0usize;
    let mut clip_tokens = 0usize;
    let (mut tok_clip, mut seq_clip, mut min_clip) = (0.0, 0.0, 0.0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.inner_epochs {
        let mut rng = stream(config.seed, step, STREAM_SHUFFLE + ((epoch as u64) << 8));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.minibatch_rollouts) {
            let mb: Vec<Sample<'_>> = chunk.iter().map(|&i| samples[i]).collect();
            let view = PolicyView::new(&state.params, &mb);
            let frozen: Option<Vec<Vec<f64>>> = match config.entropy_refresh {
                EntropyRefresh::PerEpoch => None,
                EntropyRefresh::PerBatch => Some(
                    chunk
                        .iter()
                        .map(|&i| behavior.entropies[i].clone())
                        .collect(),
                ),
            };
            let report = evaluate_view(&objective, &mb, &state.params, &view, frozen.as_deref())?;
            if !report.loss.is_finite() || !report.gradient_is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!(
                        "epoch {epoch}, objective {}, loss {}, {} gradient rows",
                        report.objective,
                        report.loss,
                        report.gradient.len()
                    ),
                });
            }
            match config.optimizer.kind {
                OptimizerKind::Adam => adam_update(
                    &mut state.params,
                    &report.gradient,
                    &mut state.adam,
                    &config.optimizer,
                ),
                OptimizerKind::Sgd => sgd_update(
                    &mut state.params,
                    &report.gradient,
                    config.optimizer.learning_rate,
                ),
            }
            let overflowed = report.gradient.keys().any(|k| {
                state
                    .params
                    .row(k)
                    .is_some_and(|row| row.iter().any(|x| !x.is_finite()))
            });
            if overflowed {
                return Err(Error::NonFinite {
                    step,
                    detail: format!(
                        "epoch {epoch}, parameters left the finite range after an update"
                    ),
                });
            }
            loss_sum += report.loss;
            updates += 1;
            let w = report.token_count as f64;
            tok_clip += report.clip_stats.token_frac * w;
            seq_clip += report.clip_stats.seq_frac * w;
            min_clip += report.clip_stats.min_clipped_frac * w;
            clip_tokens += report.token_count;
        }
    }
    debug_assert_eq!(params_checksum(&params_old), behavior_checksum);

    if step.is_multiple_of(config.eval_every) || step == 1 || step == config.total_steps {
        state.last_accuracy = evaluate_config(&state.params, config, step);
    }
    state.step = step;

    let ct = clip_tokens.max(1) as f64;
    let record = StepRecord {
        step,
        mean_reward,
        mean_entropy,
        mean_response_len,
        greedy_accuracy: state.last_accuracy,
        loss: loss_sum / updates.max(1) as f64,
        clip_token_frac: tok_clip / ct,
        clip_seq_frac: seq_clip / ct,
        min_clipped_frac: min_clip / ct,
        wall_ms: if wall_clock {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    };
    Ok(StepOutput {
        record,
        batch,
        behavior_checksum,
    })
}

fn evaluate_config(params: &PolicyParams, config: &TrainConfig, step: u64) -> f64 {
    let seed = stream_seed(config.seed, step, STREAM_EVAL);
    match config.eval_mode {
        EvalMode::Greedy => evaluate(
            params,
            &config.task,
            config.eval_queries,
            config.max_response_len,
            seed,
        ),
        EvalMode::AvgAtK => evaluate_sampled(
            params,
            &config.task,
            config.eval_queries,
            config.eval_k,
            config.max_response_len,
            config.temperature,
            seed,
        ),
    }
}

/// Greedy accuracy over `n_queries` fresh queries.
pub fn evaluate(
    params: &PolicyParams,
    task: &TaskSpec,
    n_queries: usize,
    max_len: usize,
    seed: u64,
) -> f64 {
    let queries = generate_queries(task, n_queries, seed);
    let solved: f64 = queries
        .iter()
        .map(|q| params.greedy_decode(q, max_len).reward)
        .sum();
    solved / n_queries as f64
}

/// Mean reward of `k` sampled responses per query (Avg@k).
pub fn evaluate_sampled(
    params: &PolicyParams,
    task: &TaskSpec,
    n_queries: usize,
    k: usize,
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> f64 {
    let queries = generate_queries(task, n_queries, seed);
    let total: f64 = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ i as u64));
            (0..k)
                .map(|_| {
                    params
                        .sample_rollout(q, max_len, temperature, &mut rng)
                        .reward
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / (n_queries * k) as f64
}

pub const CHECKPOINT_FORMAT: &str = "rlvr-lab-checkpoint v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentRow {
    query_id: u64,
    recent: Vec<u32>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRepr {
    format: String,
    step: u64,
    last_accuracy: f64,
    config: TrainConfig,
    policy: String,
    adam_t: u64,
    moments: Vec<MomentRow>,
}

/// Serializes the full training state. Random streams are derived from
/// `(seed, step)`, so no generator state needs saving.
pub fn checkpoint_to_json(state: &TrainState, config: &TrainConfig) -> Result<String> {
    let moments = state
        .adam
        .m
        .iter()
        .map(|(k, m)| MomentRow {
            query_id: k.query_id,
            recent: k.recent.clone(),
            m: m.clone(),
            v: state
                .adam
                .v
                .get(k)
                .cloned()
                .unwrap_or_else(|| vec![0.0; m.len()]),
        })
        .collect();
    let repr = CheckpointRepr {
        format: CHECKPOINT_FORMAT.into(),
        step: state.step,
        last_accuracy: state.last_accuracy,
        config: config.clone(),
        policy: state.params.to_text(),
        adam_t: state.adam.t,
        moments,
    };
    Ok(serde_json::to_string(&repr)?)
}

pub fn checkpoint_from_json(text: &str, path: &str) -> Result<(TrainState, TrainConfig)> {
    let bad = |message: String| Error::Parse {
        path: path.into(),
        line: 1,
        message,
    };
    let repr: CheckpointRepr =
        serde_json::from_str(text).map_err(|e| bad(format!("bad checkpoint: {e}")))?;
    if repr.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format {:?}", repr.format)));
    }
    repr.config.validate()?;
    let params = crate::policy::parse_checkpoint(&repr.policy, path)?;
    let v = params.vocab_size();
    let mut adam = AdamState {
        t: repr.adam_t,
        ..AdamState::default()
    };
    for row in repr.moments {
        if row.m.len() != v || row.v.len() != v {
            return Err(bad("moment row length does not match vocabulary".into()));
        }
        let key = crate::policy::ContextKey {
            query_id: row.query_id,
            recent: row.recent,
        };
        adam.m.insert(key.clone(), row.m);
        adam.v.insert(key, row.v);
    }
    Ok((
        TrainState {
            params,
            adam,
            step: repr.step,
            last_accuracy: repr.last_accuracy,
        },
        repr.config,
    ))
}

/// Writes via a temporary file and rename so a crash never leaves a torn
/// checkpoint.
pub fn save_checkpoint(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let json = checkpoint_to_json(state, config)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text, &path.display().to_string())
}

/// Output locations of one training run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub policy: PathBuf,
    pub abort_dump: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            log: dir.join(format!("{stem}.jsonl")),
            checkpoint: dir.join(format!("{stem}.checkpoint.json")),
            policy: dir.join(format!("{stem}.policy.txt")),
            abort_dump: dir.join(format!("{stem}.abort.json")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub wall_clock: bool,
    /// Continue from `paths.checkpoint` instead of starting fresh.
    pub resume: bool,
}

/// Runs training to `config.total_steps`, logging every step and
/// checkpointing every `checkpoint_every` steps and at the end.
///
/// On a non-finite loss or gradient a diagnostic dump is written next to the
/// log and the error is returned; the last checkpoint is left untouched.
pub fn train(
    config: &TrainConfig,
    paths: &RunPaths,
    options: TrainOptions,
) -> Result<(TrainState, Vec<StepRecord>)> {
    config.validate()?;
    let mut state = if options.resume {
        let (state, saved) = load_checkpoint(&paths.checkpoint)?;
        // Only the horizon may change, so a finished run can be extended.
        let comparable = TrainConfig {
            total_steps: config.total_steps,
            ..saved
        };
        if comparable != *config {
            return Err(Error::Usage(
                "checkpoint was written with a different config".into(),
            ));
        }
        metrics::truncate_log_after(&paths.log, state.step)?;
        state
    } else {
        let header = RunHeader::new(serde_json::to_value(config)?, config.run_id());
        metrics::create_log(&paths.log, &header)?;
        TrainState::new(config)
    };
    let mut records = Vec::new();
    while state.step < config.total_steps {
        let before = state.clone();
        let out = match run_step_timed(&mut state, config, options.wall_clock) {
            Ok(out) => out,
            Err(err @ Error::NonFinite { .. }) => {
                let dump = serde_json::json!({
                    "error": err.to_string(),
                    "step": before.step + 1,
                    "policy": before.params.to_text(),
                });
                std::fs::write(&paths.abort_dump, dump.to_string())
                    .map_err(|e| Error::io(&paths.abort_dump, e))?;
                return Err(err);
            }
            Err(err) => return Err(err),
        };
        metrics::append_record(&paths.log, &out.record)?;
        records.push(out.record);
        if state.step % config.checkpoint_every == 0 || state.step == config.total_steps {
            save_checkpoint(&paths.checkpoint, &state, config)?;
            std::fs::write(&paths.policy, state.params.to_text())
                .map_err(|e| Error::io(&paths.policy, e))?;
        }
    }
    Ok((state, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{query_for_operands, EOS};
    use crate::policy::ContextKey;

    fn key(id: u64) -> ContextKey {
        ContextKey {
            query_id: id,
            recent: vec![1, 2],
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            prompts_per_step: 4,
            group_size: 4,
            minibatch_rollouts: 8,
            inner_epochs: 2,
            total_steps: 3,
            eval_queries: 20,
            eval_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = PolicyParams::new(env::task_vocab(), 2);
        let before = p.clone();
        let mut st = AdamState::default();
        let grad: RowMap = [(key(0), vec![0.0; 14])].into_iter().collect();
        adam_update(&mut p, &grad, &mut st, &OptimizerConfig::default());
        assert_eq!(p, before);
        assert_eq!(st.m[&key(0)], vec![0.0; 14]);

        // Existing moments decay under a zero gradient.
        st.m.insert(key(0), vec![1.0; 14]);
        st.v.insert(key(0), vec![4.0; 14]);
        adam_update(&mut p, &grad, &mut st, &OptimizerConfig::default());
        assert!((st.m[&key(0)][0] - 0.9).abs() < 1e-15);
        assert!((st.v[&key(0)][0] - 4.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let cfg = OptimizerConfig::default();
        for g in [3.7, -0.02, 1e-3] {
            let mut p = PolicyParams::new(env::task_vocab(), 2);
            let mut st = AdamState::default();
            let mut row = vec![0.0; 14];
            row[4] = g;
            adam_update(
                &mut p,
                &[(key(1), row)].into_iter().collect(),
                &mut st,
                &cfg,
            );
            let moved = p.row(&key(1)).unwrap()[4];
            assert!((moved - cfg.learning_rate * g.signum()).abs() < 1e-5 * cfg.learning_rate);
            assert_eq!(p.row(&key(1)).unwrap()[3], 0.0);
        }
    }

    #[test]
    fn adam_two_step_trace() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            ..OptimizerConfig::default()
        };
        let mut p = PolicyParams::new(env::task_vocab(), 2);
        let mut st = AdamState::default();
        let grads = [0.5, -0.25];
        // Hand evaluation of the recurrence.
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x +=
                0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        for g in grads {
            let mut row = vec![0.0; 14];
            row[0] = g;
            adam_update(
                &mut p,
                &[(key(2), row)].into_iter().collect(),
                &mut st,
                &cfg,
            );
        }
        assert!((p.row(&key(2)).unwrap()[0] - x).abs() < 1e-12);
        // Step 1: +0.1 exactly up to eps; step 2: m=0.02, v=0.0003125.
        let m2: f64 = 0.9 * 0.05 + 0.1 * -0.25;
        let v2: f64 = 0.999 * 0.00025 + 0.001 * 0.0625;
        let expected = 0.1 * 0.5 / (0.5 + 1e-8)
            + 0.1 * (m2 / 0.19) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        assert!((p.row(&key(2)).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn untouched_rows_are_unchanged() {
        let mut p = PolicyParams::new(env::task_vocab(), 2);
        p.set_row(key(9), vec![0.5; 14]);
        let mut st = AdamState::default();
        let grad: RowMap = [(key(1), vec![1.0; 14])].into_iter().collect();
        adam_update(&mut p, &grad, &mut st, &OptimizerConfig::default());
        assert_eq!(p.row(&key(9)).unwrap(), &[0.5; 14]);
        assert!(!st.m.contains_key(&key(9)));
    }

    #[test]
    fn evaluate_oracle_policy_is_perfect() {
        let task = TaskSpec::default();
        let mut p = PolicyParams::new(env::task_vocab(), 2);
        for a in 0..10 {
            for b in 0..10 {
                let q = query_for_operands(&task, &[a, b]);
                let mut row = vec![0.0; 14];
                row[q.ground_truth as usize] = 20.0;
                p.set_row(p.key(&q, &[]), row);
                let mut row = vec![0.0; 14];
                row[EOS as usize] = 20.0;
                p.set_row(p.key(&q, &[q.ground_truth]), row);
            }
        }
        assert_eq!(evaluate(&p, &task, 300, 32, 5), 1.0);
        let uniform = PolicyParams::new(env::task_vocab(), 2);
        let a = evaluate(&uniform, &task, 1000, 32, 5);
        assert!(a < 0.3);
        assert_eq!(a, evaluate(&uniform, &task, 1000, 32, 5));
    }

    #[test]
    fn config_validation_reports_every_field() {
        let cfg = TrainConfig {
            minibatch_rollouts: 7,
            group_size: 1,
            clip: ClipConfig {
                eps_token_low: 1.5,
                ..ClipConfig::default()
            },
            ..TrainConfig::default()
        };
        let keys: Vec<String> = cfg.issues().into_iter().map(|i| i.key).collect();
        assert!(keys.contains(&"clip.eps_token_low".to_string()));
        assert!(keys.contains(&"group_size".to_string()));
        assert!(keys.contains(&"minibatch_rollouts".to_string()));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn first_minibatch_is_on_policy() {
        let cfg = small_config();
        let mut state = TrainState::new(&cfg);
        let out = run_step(&mut state, &cfg).unwrap();
        // Fresh parameters are the behavior policy, so every recorded
        // log-probability is exactly the uniform one.
        let uniform = -(14f64).ln();
        for s in out.batch.samples() {
            assert!(s.rollout.old_logprobs.iter().all(|&l| l == uniform));
        }
        assert_eq!(
            out.behavior_checksum,
            params_checksum(&TrainState::new(&cfg).params)
        );
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = small_config();
        let run = || {
            let mut state = TrainState::new(&cfg);
            (0..3)
                .map(|_| run_step(&mut state, &cfg).unwrap().record)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_resumes_exactly() {
        let cfg = small_config();
        let mut a = TrainState::new(&cfg);
        run_step(&mut a, &cfg).unwrap();
        let json = checkpoint_to_json(&a, &cfg).unwrap();
        let (mut b, cfg_b) = checkpoint_from_json(&json, "mem").unwrap();
        assert_eq!(cfg_b, cfg);
        assert_eq!(b, a);
        let ra = run_step(&mut a, &cfg).unwrap().record;
        let rb = run_step(&mut b, &cfg).unwrap().record;
        assert_eq!(ra, rb);
    }

    #[test]
    fn run_ids_are_stable_and_distinct() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            seed: 1,
            ..TrainConfig::default()
        };
        assert_eq!(a.run_id(), TrainConfig::default().run_id());
        assert_ne!(a.run_id(), b.run_id());
        assert!(a.run_id().starts_with("dhpo_a-s0-"));
    }
}
