//! Run configuration files, presets and `--set` overrides.
//!
//! A run config is a flat JSON object holding every [`TrainConfig`] field plus
//! `out_dir`. Layers are applied in order: built-in defaults, the config
//! file, a named preset, `--set key=value` overrides, then `--seed` / `--out`.
//! Every layer is merged as JSON and checked against the default document, so
//! an unknown key anywhere is reported with its dotted path.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{ConfigIssue, Error, Result};
use crate::trainer::TrainConfig;

pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from(DEFAULT_OUT_DIR),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.train).expect("config serializes");
        v.as_object_mut().expect("config is an object").insert(
            "out_dir".into(),
            Value::String(self.out_dir.display().to_string()),
        );
        v
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("config serializes")
    }

    /// Decodes a fully merged document and validates it.
    pub fn from_value(mut value: Value) -> Result<Self> {
        let out_dir = match value.as_object_mut().and_then(|m| m.remove("out_dir")) {
            None => PathBuf::from(DEFAULT_OUT_DIR),
            Some(Value::String(s)) => PathBuf::from(s),
            Some(other) => {
                return Err(Error::Config(vec![ConfigIssue::new(
                    "out_dir",
                    format!("expected a path string, got {other}"),
                )]))
            }
        };
        let train: TrainConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(vec![ConfigIssue::new(path, e.into_inner().to_string())])
        })?;
        train.validate()?;
        Ok(Self { out_dir, train })
    }
}

/// Named presets carrying published hyperparameters.
pub const PRESETS: [&str; 5] = [
    "paper-dhpo",
    "paper-grpo",
    "paper-gspo",
    "paper-gmpo",
    "paper-cispo",
];

/// The patch applied by a preset.
///
/// Besides the objective and clip ranges, presets set the published rollout
/// batch (512 prompts, 16 samples, temperature 1.0), mini-batches of 256
/// prompts, one pass per batch, learning rate 1e-6 and responses capped at
/// 4096 tokens.
pub fn preset(name: &str) -> Result<Value> {
    let objective = match name {
        "paper-dhpo" => "DHPO_E",
        "paper-grpo" => "GRPO",
        "paper-gspo" => "GSPO",
        "paper-gmpo" => "GMPO",
        "paper-cispo" => "CISPO",
        _ => {
            return Err(Error::Usage(format!(
                "unknown preset `{name}`; valid presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(serde_json::json!({
        "objective": objective,
        "clip": {
            "eps_token_low": 0.2,
            "eps_token_high": 0.28,
            "eps_seq_low": 0.2,
            "eps_seq_high": 0.28,
            "mode": "branch_specific",
        },
        "baselines": {
            "grpo_eps_low": 0.2,
            "grpo_eps_high": 0.2,
            "gspo_eps_low": 3e-4,
            "gspo_eps_high": 4e-4,
            "gmpo_eps": 0.4,
            "cispo_eps_low": 10.0,
            "cispo_eps_high": 0.2,
        },
        "prompts_per_step": 512,
        "group_size": 16,
        "minibatch_rollouts": 256 * 16,
        "inner_epochs": 1,
        "temperature": 1.0,
        "max_response_len": 4096,
        "optimizer": { "kind": "adam", "learning_rate": 1e-6 },
    }))
}

/// Merges `patch` into `base`, recording every key of `patch` that `base`
/// does not define.
pub fn merge(base: &mut Value, patch: &Value, prefix: &str, issues: &mut Vec<ConfigIssue>) {
    let (Some(base_map), Some(patch_map)) = (base.as_object_mut(), patch.as_object()) else {
        *base = patch.clone();
        return;
    };
    for (key, value) in patch_map {
        let path = join(prefix, key);
        match base_map.get_mut(key) {
            None => issues.push(ConfigIssue::new(path, "unknown key")),
            Some(slot) if slot.is_object() && value.is_object() => {
                merge(slot, value, &path, issues)
            }
            Some(slot) => *slot = value.clone(),
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Parses `a.b.c=value` into a one-key JSON patch. The value is read as
/// JSON when it parses, else taken as a plain string.
pub fn parse_override(spec: &str) -> Result<Value> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not of the form KEY=VALUE")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Usage(format!(
            "override `{spec}` has an empty key segment"
        )));
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for segment in path.rsplit('.') {
        let mut map = Map::new();
        map.insert(segment.to_string(), value);
        value = Value::Object(map);
    }
    Ok(value)
}

/// Everything that feeds config resolution.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    pub preset: Option<String>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, &path.display().to_string())
}

pub fn parse_config_text(text: &str, path: &str) -> Result<Value> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if !value.is_object() {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: "config must be a JSON object".into(),
        });
    }
    Ok(value)
}

pub fn resolve(sources: &ConfigSources) -> Result<RunConfig> {
    let file = sources.file.as_deref().map(read_config_file).transpose()?;
    resolve_values(file.as_ref(), sources)
}

/// Resolution with the config file already parsed.
pub fn resolve_values(file: Option<&Value>, sources: &ConfigSources) -> Result<RunConfig> {
    let mut doc = RunConfig::default().to_value();
    let mut issues = Vec::new();
    if let Some(file) = file {
        merge(&mut doc, file, "", &mut issues);
    }
    if let Some(name) = &sources.preset {
        merge(&mut doc, &preset(name)?, "", &mut issues);
    }
    for spec in &sources.overrides {
        merge(&mut doc, &parse_override(spec)?, "", &mut issues);
    }
    if let Some(seed) = sources.seed {
        doc["seed"] = Value::from(seed);
    }
    if let Some(out) = &sources.out_dir {
        doc["out_dir"] = Value::String(out.display().to_string());
    }
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    RunConfig::from_value(doc)
}

/// Description of every config key, in document order.
pub const FIELD_DOCS: &[(&str, &str)] = &[
    ("objective", "Surrogate objective: GRPO, GSPO, DHPO_A, DHPO_E, GMPO or CISPO."),
    ("clip.eps_token_low", "DHPO token-branch lower clip epsilon."),
    ("clip.eps_token_high", "DHPO token-branch upper clip epsilon."),
    ("clip.eps_seq_low", "DHPO sequence-branch lower clip epsilon."),
    ("clip.eps_seq_high", "DHPO sequence-branch upper clip epsilon."),
    ("clip.mode", "branch_specific clips each branch before mixing; unified clips the mixed ratio."),
    ("clip.unified_low", "Lower epsilon of the unified clip."),
    ("clip.unified_high", "Upper epsilon of the unified clip."),
    ("entropy_weights.w_min", "Smallest DHPO_E token weight."),
    ("entropy_weights.w_max", "Largest DHPO_E token weight."),
    ("baselines.grpo_eps_low", "GRPO lower clip epsilon."),
    ("baselines.grpo_eps_high", "GRPO upper clip epsilon."),
    ("baselines.gspo_eps_low", "GSPO lower clip epsilon."),
    ("baselines.gspo_eps_high", "GSPO upper clip epsilon."),
    ("baselines.gmpo_eps", "GMPO clip epsilon, both sides."),
    ("baselines.cispo_eps_low", "CISPO lower truncation epsilon; the bound is floored at 0."),
    ("baselines.cispo_eps_high", "CISPO upper truncation epsilon."),
    ("prompts_per_step", "Queries sampled per outer step (P)."),
    ("group_size", "Responses sampled per query (G), at least 2."),
    ("inner_epochs", "Passes over each rollout batch (E)."),
    ("minibatch_rollouts", "Rollouts per optimizer update; must divide P * G."),
    ("max_response_len", "Response length cap; longer responses are truncated with reward 0."),
    ("total_steps", "Outer steps to train."),
    ("optimizer.kind", "adam or sgd; both ascend the surrogate."),
    ("optimizer.learning_rate", "Step size."),
    ("optimizer.beta1", "Adam first-moment decay."),
    ("optimizer.beta2", "Adam second-moment decay."),
    ("optimizer.adam_eps", "Adam denominator epsilon."),
    ("temperature", "Sampling temperature for rollouts."),
    ("seed", "Master seed for queries, sampling, shuffling and evaluation."),
    ("eval_every", "Evaluate every this many steps (also at step 1 and the last step)."),
    ("eval_queries", "Fresh queries per evaluation."),
    ("eval_mode", "greedy, or avg_at_k for the mean reward of eval_k samples per query."),
    ("eval_k", "Samples per query under avg_at_k."),
    ("entropy_refresh", "per_epoch recomputes DHPO_E entropies under the current policy for each mini-batch; per_batch freezes them at the behavior policy."),
    ("std_floor", "Groups with reward std below this get zero advantages."),
    ("context_window", "Number of trailing tokens in a policy context key."),
    ("checkpoint_every", "Write a checkpoint every this many steps (and at the end)."),
    ("task.kind", "sum_mod (two operands) or chain_mod (chain_length operands)."),
    ("task.modulus", "Answer modulus, 2 to 10."),
    ("task.operand_min", "Smallest operand."),
    ("task.operand_max", "Largest operand."),
    ("task.chain_length", "Operand count for chain_mod."),
    ("task.seed", "Extra seed mixed into query generation."),
    ("out_dir", "Directory for logs, checkpoints and CSV tables."),
];

/// Flattens a JSON object into `(dotted key, value)` leaves.
pub fn leaves(value: &Value) -> Vec<(String, Value)> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<(String, Value)>) {
        match v.as_object() {
            Some(map) => {
                for (k, child) in map {
                    walk(child, &join(prefix, k), out);
                }
            }
            None => out.push((prefix.to_string(), v.clone())),
        }
    }
    let mut out = Vec::new();
    walk(value, "", &mut out);
    out
}

/// Markdown reference of every key with its default.
pub fn reference_markdown() -> String {
    let defaults = RunConfig::default().to_value();
    let values: std::collections::BTreeMap<String, Value> = leaves(&defaults).into_iter().collect();
    let mut out = String::from(
        "# Configuration reference\n\n\
         Generated by `rlvr-lab-core`; `cargo test` fails when this file is stale.\n\n\
         A config file is a JSON object with any subset of these keys. Nested keys\n\
         are written as nested objects in files and as dotted paths in\n\
         `--set key=value` overrides.\n\n\
         | key | default | description |\n|---|---|---|\n",
    );
    for (key, doc) in FIELD_DOCS {
        let default = values.get(*key).map_or(String::new(), Value::to_string);
        out.push_str(&format!("| `{key}` | `{default}` | {doc} |\n"));
    }
    out.push_str("\n## Presets\n\n");
    for name in PRESETS {
        let patch = preset(name).expect("built-in preset");
        let mut keys: Vec<String> = leaves(&patch)
            .into_iter()
            .map(|(k, v)| format!("`{k}={v}`"))
            .collect();
        keys.sort();
        out.push_str(&format!("- `{name}`: {}\n", keys.join(", ")));
    }
    out
}

/// Worker cap from `RLVR_LAB_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("RLVR_LAB_THREADS") {
        Err(_) => Ok(None),
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Usage(format!(
                "RLVR_LAB_THREADS must be a positive integer, got `{raw}`"
            ))),
        },
    }
}

/// Sizes the global worker pool from `RLVR_LAB_THREADS`. Later calls are
/// no-ops once the pool exists.
pub fn init_thread_pool() -> Result<()> {
    if let Some(n) = thread_cap()? {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}
