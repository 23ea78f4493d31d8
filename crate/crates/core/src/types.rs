//! Domain types shared across the crate.
//!
//! Everything here is a plain value type: cheap to clone, `Send + Sync`, and
//! serializable. Constructors validate invariants; fields stay public so that
//! tests and tooling can build odd instances on purpose.

use serde::{Deserialize, Serialize};

use crate::advantage::group_advantages;
use crate::error::{ConfigIssue, Error, Result};

pub type TokenId = u32;

/// Ordered token symbols with a designated end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    eos_id: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, eos_id: TokenId) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Vocab(format!(
                "need at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if eos_id as usize >= tokens.len() {
            return Err(Error::Vocab(format!(
                "eos id {eos_id} out of range for {} tokens",
                tokens.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::Vocab(format!("duplicate token symbol {t:?}")));
            }
        }
        Ok(Self { tokens, eos_id })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.tokens
            .iter()
            .position(|t| t == symbol)
            .map(|p| p as TokenId)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub prompt_tokens: Vec<TokenId>,
    pub ground_truth: u32,
}

impl Query {
    pub fn new(
        id: u64,
        prompt_tokens: Vec<TokenId>,
        ground_truth: u32,
        vocab: &Vocab,
    ) -> Result<Self> {
        if prompt_tokens.is_empty() {
            return Err(Error::Task("prompt must be non-empty".into()));
        }
        if let Some(bad) = prompt_tokens.iter().find(|&&t| t as usize >= vocab.size()) {
            return Err(Error::Task(format!(
                "prompt token {bad} outside vocabulary"
            )));
        }
        Ok(Self {
            id,
            prompt_tokens,
            ground_truth,
        })
    }
}

/// One sampled response together with its behavior-policy log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query_id: u64,
    pub tokens: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
    pub truncated: bool,
}

impl Rollout {
    pub fn new(
        query_id: u64,
        tokens: Vec<TokenId>,
        old_logprobs: Vec<f64>,
        reward: f64,
        eos_id: TokenId,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Rollout("response must contain a token".into()));
        }
        if tokens.len() != old_logprobs.len() {
            return Err(Error::Rollout(format!(
                "{} tokens but {} log-probabilities",
                tokens.len(),
                old_logprobs.len()
            )));
        }
        if let Some(lp) = old_logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(Error::Rollout(format!("log-probability {lp} is not <= 0")));
        }
        let truncated = tokens.last() != Some(&eos_id);
        Ok(Self {
            query_id,
            tokens,
            old_logprobs,
            reward,
            truncated,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// G rollouts for one query, plus their group-relative advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub query: Query,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(query: Query, rollouts: Vec<Rollout>, std_floor: f64) -> Result<Self> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = group_advantages(&rewards, std_floor)?;
        Ok(Self {
            query,
            rollouts,
            advantages,
        })
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub groups: Vec<Group>,
}

impl Batch {
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        let first = groups.first().ok_or(Error::EmptyBatch)?.size();
        if let Some(g) = groups.iter().find(|g| g.size() != first) {
            return Err(Error::RaggedBatch {
                expected: first,
                found: g.size(),
            });
        }
        Ok(Self { groups })
    }

    /// Flattens the batch into per-rollout samples, group by group.
    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.groups
            .iter()
            .flat_map(|g| {
                g.rollouts
                    .iter()
                    .zip(&g.advantages)
                    .map(move |(rollout, &advantage)| Sample {
                        query: &g.query,
                        rollout,
                        advantage,
                    })
            })
            .collect()
    }

    pub fn rollout_count(&self) -> usize {
        self.groups.iter().map(Group::size).sum()
    }
}

/// A rollout paired with its query and advantage; the unit objectives
/// aggregate over. Mini-batches are arbitrary slices of these.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub query: &'a Query,
    pub rollout: &'a Rollout,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    BranchSpecific,
    Unified,
}

/// Trust regions for the token and sequence branches of the mixed ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_token_low: f64,
    pub eps_token_high: f64,
    pub eps_seq_low: f64,
    pub eps_seq_high: f64,
    pub mode: ClipMode,
    pub unified_low: f64,
    pub unified_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_token_low: 0.2,
            eps_token_high: 0.28,
            eps_seq_low: 0.2,
            eps_seq_high: 0.28,
            mode: ClipMode::BranchSpecific,
            unified_low: 0.2,
            unified_high: 0.28,
        }
    }
}

impl ClipConfig {
    /// Same trust region on both branches.
    pub fn symmetric_branches(low: f64, high: f64) -> Self {
        Self {
            eps_token_low: low,
            eps_token_high: high,
            eps_seq_low: low,
            eps_seq_high: high,
            ..Self::default()
        }
    }

    pub fn token_bounds(&self) -> (f64, f64) {
        (1.0 - self.eps_token_low, 1.0 + self.eps_token_high)
    }

    pub fn seq_bounds(&self) -> (f64, f64) {
        (1.0 - self.eps_seq_low, 1.0 + self.eps_seq_high)
    }

    pub fn unified_bounds(&self) -> (f64, f64) {
        (1.0 - self.unified_low, 1.0 + self.unified_high)
    }

    pub(crate) fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut check = |name: &str, v: f64, lower_bound: bool| {
            let key = format!("{prefix}.{name}");
            if !v.is_finite() || v < 0.0 {
                out.push(ConfigIssue::new(
                    key,
                    format!("must be a finite non-negative number, got {v}"),
                ));
            } else if lower_bound && v >= 1.0 {
                out.push(ConfigIssue::new(
                    key,
                    format!("lower clip epsilon must be < 1, got {v}"),
                ));
            }
        };
        check("eps_token_low", self.eps_token_low, true);
        check("eps_token_high", self.eps_token_high, false);
        check("eps_seq_low", self.eps_seq_low, true);
        check("eps_seq_high", self.eps_seq_high, false);
        check("unified_low", self.unified_low, true);
        check("unified_high", self.unified_high, false);
        out
    }
}

/// How the token-level and sequence-level ratios are blended per token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingMode {
    /// Constant weight 0.5.
    Averaged,
    /// Weight from min-max normalized token entropy, squashed into `[w_min, w_max]`.
    EntropyGuided { w_min: f64, w_max: f64 },
}

impl MixingMode {
    pub fn entropy_guided() -> Self {
        MixingMode::EntropyGuided {
            w_min: 0.0,
            w_max: 1.0,
        }
    }

    /// Entropy-guided mode pinned to a single weight value.
    pub fn fixed(w: f64) -> Self {
        MixingMode::EntropyGuided { w_min: w, w_max: w }
    }

    pub fn range(&self) -> (f64, f64) {
        match *self {
            MixingMode::Averaged => (0.5, 0.5),
            MixingMode::EntropyGuided { w_min, w_max } => (w_min, w_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "GSPO")]
    Gspo,
    #[serde(rename = "DHPO_A")]
    DhpoA,
    #[serde(rename = "DHPO_E")]
    DhpoE,
    #[serde(rename = "GMPO")]
    Gmpo,
    #[serde(rename = "CISPO")]
    Cispo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 6] = [
        ObjectiveKind::Grpo,
        ObjectiveKind::Gspo,
        ObjectiveKind::DhpoA,
        ObjectiveKind::DhpoE,
        ObjectiveKind::Gmpo,
        ObjectiveKind::Cispo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Grpo => "GRPO",
            ObjectiveKind::Gspo => "GSPO",
            ObjectiveKind::DhpoA => "DHPO_A",
            ObjectiveKind::DhpoE => "DHPO_E",
            ObjectiveKind::Gmpo => "GMPO",
            ObjectiveKind::Cispo => "CISPO",
        }
    }

    /// GMPO and CISPO are reconstructed from qualitative descriptions.
    pub fn is_interpreted(self) -> bool {
        matches!(self, ObjectiveKind::Gmpo | ObjectiveKind::Cispo)
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let wanted = s.trim().to_ascii_uppercase().replace('-', "_");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == wanted)
            .ok_or_else(|| {
                format!(
                    "unknown objective `{s}` (expected one of {})",
                    ObjectiveKind::ALL.map(|k| k.name()).join(", ")
                )
            })
    }
}
