//! Randomized analytic-vs-finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::objectives::{evaluate, fd_gradient, max_deviation, Objective, DEFAULT_FD_STEP};
use crate::policy::{rollout_keys, PolicyParams, DEFAULT_WINDOW};
use crate::types::{Batch, Group, ObjectiveKind, Query, Rollout, Vocab};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const MAX_VOCAB: usize = 6;
pub const MAX_RESPONSE_LEN: usize = 8;

/// A small random problem: current parameters, a rollout batch recorded
/// under perturbed behavior parameters, and non-degenerate rewards.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: PolicyParams,
    pub params_old: PolicyParams,
    pub batch: Batch,
}

fn random_logits(rng: &mut ChaCha8Rng, v: usize, scale: f64) -> Vec<f64> {
    (0..v).map(|_| rng.gen_range(-scale..=scale)).collect()
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let v = rng.gen_range(3..=MAX_VOCAB);
    let tokens: Vec<String> = (0..v).map(|i| format!("t{i}")).collect();
    let vocab = Vocab::new(tokens, (v - 1) as u32).expect("valid vocabulary");
    let group_size = if rng.gen_bool(0.5) { 2 } else { 4 };
    let n_groups = rng.gen_range(1..=2);
    // Mixes near-on-policy instances (ratios inside the trust regions) with
    // far ones (many clipped tokens).
    let drift = [0.02, 0.1, 0.4][rng.gen_range(0..3)];

    let queries: Vec<Query> = (0..n_groups)
        .map(|q| Query {
            id: q as u64,
            prompt_tokens: vec![rng.gen_range(0..v as u32)],
            ground_truth: 0,
        })
        .collect();

    let mut params_old = PolicyParams::new(vocab.clone(), DEFAULT_WINDOW);
    let mut responses = Vec::new();
    for q in &queries {
        let mut group = Vec::new();
        for _ in 0..group_size {
            let len = rng.gen_range(1..=MAX_RESPONSE_LEN);
            let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v as u32)).collect();
            for key in rollout_keys(q, &toks, DEFAULT_WINDOW) {
                if params_old.row(&key).is_none() {
                    params_old.set_row(key, random_logits(rng, v, 1.5));
                }
            }
            group.push(toks);
        }
        responses.push(group);
    }

    let mut params = params_old.clone();
    let keys: Vec<_> = params_old.rows().map(|(k, _)| k.clone()).collect();
    for key in keys {
        for x in params.row_mut(&key) {
            *x += rng.gen_range(-drift..=drift);
        }
    }

    let groups = queries
        .into_iter()
        .zip(responses)
        .map(|(q, group)| {
            // At least one success and one failure per group.
            let winner = rng.gen_range(0..group_size);
            let loser = (winner + 1 + rng.gen_range(0..group_size - 1)) % group_size;
            let rollouts = group
                .into_iter()
                .enumerate()
                .map(|(i, toks)| {
                    let reward = if i == winner {
                        1.0
                    } else if i == loser {
                        0.0
                    } else {
                        f64::from(u8::from(rng.gen_bool(0.5)))
                    };
                    let old = params_old.sequence_logprobs(&q, &toks);
                    Rollout::new(q.id, toks, old, reward, vocab.eos_id()).expect("valid rollout")
                })
                .collect();
            Group::new(q, rollouts, crate::advantage::DEFAULT_STD_FLOOR).expect("group of 2+")
        })
        .collect();
    Instance {
        params,
        params_old,
        batch: Batch::new(groups).expect("uniform group sizes"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveCheck {
    pub objective: ObjectiveKind,
    pub interpreted_baseline: bool,
    pub instances: usize,
    pub max_deviation: f64,
    pub checked_coordinates: usize,
    pub skipped_coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub fd_step: f64,
    pub objectives: Vec<ObjectiveCheck>,
    pub passed: bool,
}

/// Checks each objective (default hyperparameters) on `n_instances` random
/// instances. Instance `k` is the same problem for every objective.
pub fn run(objectives: &[Objective], n_instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    for objective in objectives {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let (mut checked, mut skipped) = (0, 0);
        for _ in 0..n_instances {
            let inst = random_instance(&mut rng);
            let samples = inst.batch.samples();
            let report = evaluate(objective, &samples, &inst.params)?;
            let fd = fd_gradient(objective, &samples, &inst.params, None, DEFAULT_FD_STEP)?;
            worst = worst.max(max_deviation(&report.gradient, &fd));
            checked += fd.checked;
            skipped += fd.skipped.len();
        }
        checks.push(ObjectiveCheck {
            objective: objective.kind(),
            interpreted_baseline: objective.kind().is_interpreted(),
            instances: n_instances,
            max_deviation: worst,
            checked_coordinates: checked,
            skipped_coordinates: skipped,
            passed: worst <= DEFAULT_TOLERANCE,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport {
        seed,
        tolerance: DEFAULT_TOLERANCE,
        fd_step: DEFAULT_FD_STEP,
        objectives: checks,
        passed,
    })
}
