//! Policy-free auditing of recorded rollouts.
//!
//! A trace is JSONL, one rollout per line:
//!
//! ```json
//! {"query_id": 7, "tokens": [3, 13], "old_logprobs": [-0.4, -0.1],
//!  "new_logprobs": [-0.3, -0.1], "reward": 1.0}
//! ```
//!
//! An optional `entropies` array gives per-token entropies for the
//! entropy-guided weights. Without it, the sampled-token surprisal
//! `-new_logprob` stands in as a one-sample entropy estimate.
//!
//! Rollouts sharing a `query_id` form one group (ordered by first
//! appearance) and get group-relative advantages.

use serde::{Deserialize, Serialize};

use crate::advantage::DEFAULT_STD_FLOOR;
use crate::error::{Error, Result};
use crate::objectives::{surrogate, BaselineClips, ClipStats, Objective, SgTape};
use crate::ratios::{mixing_weights, RatioBundle};
use crate::types::{Batch, ClipConfig, Group, MixingMode, ObjectiveKind, Query, Rollout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub query_id: u64,
    pub tokens: Vec<u32>,
    pub old_logprobs: Vec<f64>,
    pub new_logprobs: Vec<f64>,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropies: Option<Vec<f64>>,
}

impl TraceLine {
    fn check(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if n == 0 {
            return Err("`tokens` is empty".into());
        }
        if self.old_logprobs.len() != n || self.new_logprobs.len() != n {
            return Err(format!(
                "{n} tokens but {} old and {} new log-probabilities",
                self.old_logprobs.len(),
                self.new_logprobs.len()
            ));
        }
        for (name, lps) in [
            ("old_logprobs", &self.old_logprobs),
            ("new_logprobs", &self.new_logprobs),
        ] {
            if let Some(lp) = lps.iter().find(|lp| !(lp.is_finite() && **lp <= 0.0)) {
                return Err(format!("`{name}` holds {lp}, expected a finite value <= 0"));
            }
        }
        if !self.reward.is_finite() {
            return Err("`reward` is not finite".into());
        }
        if let Some(e) = &self.entropies {
            if e.len() != n {
                return Err(format!("{n} tokens but {} entropies", e.len()));
            }
            if let Some(h) = e.iter().find(|h| !(h.is_finite() && **h >= 0.0)) {
                return Err(format!(
                    "`entropies` holds {h}, expected a finite value >= 0"
                ));
            }
        }
        Ok(())
    }
}

/// Parses a trace, skipping blank lines. Errors cite the 1-based line.
pub fn parse_trace(text: &str, path: &str) -> Result<Vec<TraceLine>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.into(),
            line: idx + 1,
            message,
        };
        let line: TraceLine = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        line.check().map_err(err)?;
        out.push(line);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: "trace holds no rollouts".into(),
        });
    }
    let entropies_given = out[0].entropies.is_some();
    if let Some(pos) = out
        .iter()
        .position(|l| l.entropies.is_some() != entropies_given)
    {
        return Err(Error::Parse {
            path: path.into(),
            line: pos + 1,
            message: "`entropies` must be given on every line or on none".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySource {
    Trace,
    Surprisal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveAudit {
    pub objective: ObjectiveKind,
    pub interpreted_baseline: bool,
    pub loss: f64,
    pub clip_stats: ClipStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutAudit {
    pub query_id: u64,
    pub advantage: f64,
    /// Ratios under the entropy-guided DHPO weights.
    pub ratios: RatioBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub groups: usize,
    pub rollouts: usize,
    pub tokens: usize,
    pub entropy_source: EntropySource,
    pub clip: ClipConfig,
    pub objectives: Vec<ObjectiveAudit>,
    pub rollout_ratios: Vec<RolloutAudit>,
}

/// Scores every objective on the trace at the given hyperparameters.
pub fn audit(
    lines: &[TraceLine],
    clip: &ClipConfig,
    weight_range: (f64, f64),
    baselines: &BaselineClips,
) -> Result<AuditReport> {
    let mut order: Vec<u64> = Vec::new();
    for l in lines {
        if !order.contains(&l.query_id) {
            order.push(l.query_id);
        }
    }
    let mut groups = Vec::new();
    let mut new_lp = Vec::new();
    let mut entropies = Vec::new();
    for &qid in &order {
        let members: Vec<&TraceLine> = lines.iter().filter(|l| l.query_id == qid).collect();
        let rollouts = members
            .iter()
            .map(|l| Rollout {
                query_id: qid,
                tokens: l.tokens.clone(),
                old_logprobs: l.old_logprobs.clone(),
                reward: l.reward,
                truncated: false,
            })
            .collect();
        for l in &members {
            new_lp.push(l.new_logprobs.clone());
            entropies.push(match &l.entropies {
                Some(e) => e.clone(),
                None => l.new_logprobs.iter().map(|lp| -lp).collect(),
            });
        }
        let query = Query {
            id: qid,
            prompt_tokens: Vec::new(),
            ground_truth: 0,
        };
        groups.push(Group::new(query, rollouts, DEFAULT_STD_FLOOR)?);
    }
    // Groups may differ in size here; aggregation is per rollout either way.
    let batch = Batch { groups };
    let samples = batch.samples();

    let objectives = ObjectiveKind::ALL
        .iter()
        .map(|&kind| {
            let obj = Objective::build(kind, clip, weight_range, baselines);
            let tape = SgTape::capture(&obj, &samples, &new_lp, &entropies);
            let eval = surrogate(&obj, &samples, &new_lp, &tape)?;
            Ok(ObjectiveAudit {
                objective: kind,
                interpreted_baseline: kind.is_interpreted(),
                loss: eval.loss,
                clip_stats: ClipStats::from_terms(&eval.terms),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (w_min, w_max) = weight_range;
    let flat: Vec<f64> = entropies.iter().flatten().copied().collect();
    let weights = mixing_weights(MixingMode::EntropyGuided { w_min, w_max }, &flat);
    let mut offset = 0;
    let rollout_ratios = samples
        .iter()
        .zip(&new_lp)
        .map(|(s, lp)| {
            let w = &weights[offset..offset + lp.len()];
            offset += lp.len();
            RolloutAudit {
                query_id: s.query.id,
                advantage: s.advantage,
                ratios: RatioBundle::compute(lp, &s.rollout.old_logprobs, w, clip),
            }
        })
        .collect();

    Ok(AuditReport {
        groups: batch.groups.len(),
        rollouts: samples.len(),
        tokens: flat.len(),
        entropy_source: if lines[0].entropies.is_some() {
            EntropySource::Trace
        } else {
            EntropySource::Surprisal
        },
        clip: *clip,
        objectives,
        rollout_ratios,
    })
}
