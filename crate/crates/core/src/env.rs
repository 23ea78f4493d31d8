//! Synthetic verifiable-reward tasks.
//!
//! Prompts are modular-arithmetic problems written with digit and operator
//! tokens. A response is correct iff it ends in `EOS` and the contiguous digit
//! run right before `EOS` spells the answer. Filler tokens (`·`) may precede the
//! answer freely; they only lengthen the response.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::types::{Query, TokenId, Vocab};

pub const PLUS: TokenId = 10;
pub const EQUALS: TokenId = 11;
pub const FILLER: TokenId = 12;
pub const EOS: TokenId = 13;
pub const TASK_VOCAB_SIZE: usize = 14;

/// Digits `0`–`9` occupy ids 0–9, then `+`, `=`, `·`, `EOS`.
pub fn task_vocab() -> Vocab {
    let mut tokens: Vec<String> = (0..10).map(|d| d.to_string()).collect();
    tokens.extend(["+", "=", "·", "EOS"].map(String::from));
    Vocab::new(tokens, EOS).expect("task vocabulary is well formed")
}

pub fn is_digit(token: TokenId) -> bool {
    token < 10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SumMod,
    ChainMod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub modulus: u32,
    pub operand_min: u32,
    pub operand_max: u32,
    /// Number of operands for `ChainMod`; `SumMod` always uses two.
    pub chain_length: u32,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::SumMod,
            modulus: 10,
            operand_min: 0,
            operand_max: 9,
            chain_length: 3,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn chain_mod(modulus: u32, chain_length: u32) -> Self {
        Self {
            kind: TaskKind::ChainMod,
            modulus,
            chain_length,
            ..Self::default()
        }
    }

    pub fn operand_count(&self) -> u32 {
        match self.kind {
            TaskKind::SumMod => 2,
            TaskKind::ChainMod => self.chain_length,
        }
    }

    /// Number of distinct problems; query ids index into this set.
    pub fn problem_count(&self) -> u64 {
        let span = u64::from(self.operand_max - self.operand_min) + 1;
        span.saturating_pow(self.operand_count())
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("task");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub(crate) fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if !(2..=10).contains(&self.modulus) {
            out.push(ConfigIssue::new(
                format!("{prefix}.modulus"),
                format!(
                    "must be in 2..=10 so answers are one digit, got {}",
                    self.modulus
                ),
            ));
        }
        if self.operand_min > self.operand_max {
            out.push(ConfigIssue::new(
                format!("{prefix}.operand_min"),
                format!(
                    "operand_min {} exceeds operand_max {}",
                    self.operand_min, self.operand_max
                ),
            ));
        }
        if self.operand_max > 999_999 {
            out.push(ConfigIssue::new(
                format!("{prefix}.operand_max"),
                "must be at most 999999".to_string(),
            ));
        }
        if self.kind == TaskKind::ChainMod && !(1..=16).contains(&self.chain_length) {
            out.push(ConfigIssue::new(
                format!("{prefix}.chain_length"),
                format!("must be in 1..=16, got {}", self.chain_length),
            ));
        }
        out
    }
}

fn push_number(out: &mut Vec<TokenId>, n: u32) {
    out.extend(n.to_string().bytes().map(|b| TokenId::from(b - b'0')));
}

/// Builds the query for an explicit operand list.
pub fn query_for_operands(spec: &TaskSpec, operands: &[u32]) -> Query {
    let mut prompt = Vec::new();
    for (i, &a) in operands.iter().enumerate() {
        if i > 0 {
            prompt.push(PLUS);
        }
        push_number(&mut prompt, a);
    }
    prompt.push(EQUALS);
    let sum: u64 = operands.iter().map(|&a| u64::from(a)).sum();
    let span = u64::from(spec.operand_max - spec.operand_min) + 1;
    let id = operands.iter().rev().fold(0u64, |acc, &a| {
        acc.wrapping_mul(span)
            .wrapping_add(u64::from(a - spec.operand_min))
    });
    Query {
        id,
        prompt_tokens: prompt,
        ground_truth: (sum % u64::from(spec.modulus)) as u32,
    }
}

/// Draws `n` queries; identical `(spec, rng_seed, n)` give identical lists.
///
/// A query's id is the index of its operand tuple, so the same problem drawn
/// twice shares an id (and therefore policy table rows).
pub fn generate_queries(spec: &TaskSpec, n: usize, rng_seed: u64) -> Vec<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ rng_seed.rotate_left(17));
    let k = spec.operand_count() as usize;
    (0..n)
        .map(|_| {
            let operands: Vec<u32> = (0..k)
                .map(|_| rng.gen_range(spec.operand_min..=spec.operand_max))
                .collect();
            query_for_operands(spec, &operands)
        })
        .collect()
}

/// Rule-based verifier: 1.0 for a correct final answer, else 0.0.
pub fn verify(query: &Query, tokens: &[TokenId]) -> f64 {
    let Some((&last, body)) = tokens.split_last() else {
        return 0.0;
    };
    if last != EOS {
        return 0.0;
    }
    let run_start = body
        .iter()
        .rposition(|&t| !is_digit(t))
        .map_or(0, |p| p + 1);
    let run = &body[run_start..];
    if run.is_empty() {
        return 0.0;
    }
    // Leading zeros do not change the value; anything longer than ten
    // significant digits cannot equal a single-digit answer.
    let significant = run
        .iter()
        .position(|&t| t != 0)
        .map_or(&run[run.len() - 1..], |p| &run[p..]);
    if significant.len() > 10 {
        return 0.0;
    }
    let value = significant
        .iter()
        .fold(0u64, |acc, &d| acc * 10 + u64::from(d));
    if value == u64::from(query.ground_truth) {
        1.0
    } else {
        0.0
    }
}
