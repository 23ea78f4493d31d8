//! Acceptance criteria 1 to 9, one PASS/FAIL line each.
//!
//! Runs as a plain binary so the lines reach `cargo test` output; the process
//! exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlvr_lab::advantage::group_advantages;
use rlvr_lab::env::{task_vocab, TaskSpec};
use rlvr_lab::gradcheck::{self, random_instance, Instance};
use rlvr_lab::metrics::{self, PLOT_FILES};
use rlvr_lab::objectives::{evaluate, Objective, PolicyView};
use rlvr_lab::policy::{rollout_keys, PolicyParams, RowMap};
use rlvr_lab::ratios::{clip_mixed, mixing_weights};
use rlvr_lab::trainer::{self, evaluate_sampled, RunPaths, TrainConfig, TrainOptions};
use rlvr_lab::types::{Batch, ClipConfig, Group, MixingMode, ObjectiveKind, Rollout, Sample};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn max_row_diff(a: &RowMap, b: &RowMap) -> f64 {
    let mut worst: f64 = 0.0;
    for key in a.keys().chain(b.keys()) {
        let zero = vec![0.0; a.values().next().map_or(0, Vec::len)];
        let ra = a.get(key).unwrap_or(&zero);
        let rb = b.get(key).unwrap_or(&zero);
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

fn all_objectives() -> Vec<Objective> {
    ObjectiveKind::ALL.map(Objective::with_defaults).to_vec()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let report = gradcheck::run(&all_objectives(), 100, 2024).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let mut parts = Vec::new();
    for c in &report.objectives {
        check(
            c.max_deviation <= 1e-6,
            format!("{} deviates by {:e}", c.objective, c.max_deviation),
        )?;
        check(
            c.checked_coordinates > 0,
            format!("{} checked nothing", c.objective),
        )?;
        parts.push(format!(
            "{} {:.1e} ({} skipped)",
            c.objective, c.max_deviation, c.skipped_coordinates
        ));
    }
    check(
        elapsed < Duration::from_secs(60),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "{}; {:.1}s",
        parts.join(", "),
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let token_only = ClipConfig {
        eps_token_low: 0.2,
        eps_token_high: 0.2,
        ..ClipConfig::default()
    };
    let seq_only = ClipConfig {
        eps_seq_low: 3e-4,
        eps_seq_high: 4e-4,
        ..ClipConfig::default()
    };
    let pairs = [
        (
            Objective::Dhpo {
                mixing: MixingMode::fixed(1.0),
                clip: token_only,
            },
            Objective::Grpo {
                eps_low: 0.2,
                eps_high: 0.2,
            },
        ),
        (
            Objective::Dhpo {
                mixing: MixingMode::fixed(0.0),
                clip: seq_only,
            },
            Objective::Gspo {
                eps_low: 3e-4,
                eps_high: 4e-4,
            },
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let inst = random_instance(&mut rng);
        let samples = inst.batch.samples();
        for (dhpo, base) in &pairs {
            let a = evaluate(dhpo, &samples, &inst.params).map_err(|e| e.to_string())?;
            let b = evaluate(base, &samples, &inst.params).map_err(|e| e.to_string())?;
            worst = worst
                .max((a.loss - b.loss).abs())
                .max(max_row_diff(&a.gradient, &b.gradient));
        }
    }
    check(worst <= 1e-12, format!("max difference {worst:e}"))?;
    Ok(format!(
        "50 batches, max loss/gradient difference {worst:.1e}"
    ))
}

/// Rebuilds the instance's rollouts with behavior log-probabilities taken
/// from the current parameters.
fn on_policy(inst: &Instance) -> Batch {
    let groups = inst
        .batch
        .groups
        .iter()
        .map(|g| {
            let rollouts = g
                .rollouts
                .iter()
                .map(|r| Rollout {
                    old_logprobs: inst.params.sequence_logprobs(&g.query, &r.tokens),
                    ..r.clone()
                })
                .collect();
            Group::new(g.query.clone(), rollouts, 1e-8).expect("valid group")
        })
        .collect();
    Batch::new(groups).expect("valid batch")
}

/// `(1/N) Σ_i A_i/|o_i| Σ_t (onehot(o_t) − softmax(row))`, from raw logits.
fn vanilla_gradient(params: &PolicyParams, samples: &[Sample<'_>]) -> RowMap {
    let v = params.vocab_size();
    let n = samples.len() as f64;
    let mut out = RowMap::new();
    for s in samples {
        let keys = rollout_keys(s.query, &s.rollout.tokens, params.window());
        let c = s.advantage / (s.rollout.len() as f64 * n);
        for (key, &tok) in keys.iter().zip(&s.rollout.tokens) {
            let logits = params.row(key).map_or(vec![0.0; v], <[f64]>::to_vec);
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            let row = out.entry(key.clone()).or_insert_with(|| vec![0.0; v]);
            for j in 0..v {
                let onehot = if j == tok as usize { 1.0 } else { 0.0 };
                row[j] += c * (onehot - logits[j].exp() / z);
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut loss_worst, mut grad_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let inst = random_instance(&mut rng);
        let batch = on_policy(&inst);
        let samples = batch.samples();
        let oracle = vanilla_gradient(&inst.params, &samples);
        for obj in all_objectives() {
            let r = evaluate(&obj, &samples, &inst.params).map_err(|e| e.to_string())?;
            loss_worst = loss_worst.max(r.loss.abs());
            grad_worst = grad_worst.max(max_row_diff(&r.gradient, &oracle));
        }
    }
    check(loss_worst <= 1e-12, format!("loss {loss_worst:e}"))?;
    check(
        grad_worst <= 1e-12,
        format!("gradient deviation {grad_worst:e}"),
    )?;
    Ok(format!(
        "6 objectives x 50 batches: |loss| <= {loss_worst:.1e}, gradient vs vanilla PG {grad_worst:.1e}"
    ))
}

fn criterion_4() -> Outcome {
    let cfg = ClipConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100_000 {
        let w: f64 = rng.gen();
        let r = (rng.gen_range(-4.0..4.0f64)).exp();
        let s = (rng.gen_range(-4.0..4.0f64)).exp();
        let lo = w * (1.0 - 0.2) + (1.0 - w) * (1.0 - 0.2);
        let hi = w * 1.28 + (1.0 - w) * 1.28;
        let m = clip_mixed(w, r, s, &cfg).value;
        check(
            m >= lo - 1e-15 && m <= hi + 1e-15,
            format!("m~ = {m} outside [{lo}, {hi}] for w={w}, r={r}, s={s}"),
        )?;
    }

    // Clip-flag fractions against a direct recount from log-probabilities.
    let mut compared = 0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let samples = inst.batch.samples();
        let view = PolicyView::new(&inst.params, &samples);
        for obj in [
            Objective::with_defaults(ObjectiveKind::DhpoA),
            Objective::with_defaults(ObjectiveKind::DhpoE),
        ] {
            let report = evaluate(&obj, &samples, &inst.params).map_err(|e| e.to_string())?;
            let (mut n, mut tok, mut seq) = (0usize, 0usize, 0usize);
            for (s, lp) in samples.iter().zip(&view.logprobs) {
                let old = &s.rollout.old_logprobs;
                let mean: f64 =
                    lp.iter().zip(old).map(|(a, b)| a - b).sum::<f64>() / lp.len() as f64;
                let seq_ratio = mean.exp();
                for (a, b) in lp.iter().zip(old) {
                    let r = (a - b).exp();
                    n += 1;
                    tok += usize::from(!(0.8..=1.28).contains(&r));
                    seq += usize::from(!(0.8..=1.28).contains(&seq_ratio));
                }
            }
            let st = report.clip_stats;
            check(
                st.token_frac == tok as f64 / n as f64 && st.seq_frac == seq as f64 / n as f64,
                format!(
                    "flags ({}, {}) vs recount ({}, {})",
                    st.token_frac,
                    st.seq_frac,
                    tok as f64 / n as f64,
                    seq as f64 / n as f64
                ),
            )?;
            compared += 1;
        }
    }
    Ok(format!(
        "100000 mixed-ratio draws inside [0.8, 1.28]; {compared} flag-fraction recounts exact"
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let n = rng.gen_range(2..64);
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let a: f64 = rng.gen();
        let b: f64 = rng.gen();
        let (w_min, w_max) = (a.min(b), a.max(b));
        let w = mixing_weights(MixingMode::EntropyGuided { w_min, w_max }, &h);
        check(
            w.iter().all(|x| (w_min..=w_max).contains(x)),
            "weight outside [w_min, w_max]",
        )?;
        for i in 0..n {
            for j in 0..n {
                if h[i] < h[j] {
                    check(
                        w[i] <= w[j],
                        format!(
                            "not monotone: h {} < {} but w {} > {}",
                            h[i], h[j], w[i], w[j]
                        ),
                    )?;
                }
            }
        }
        let d = mixing_weights(MixingMode::entropy_guided(), &h);
        let (imin, imax) = argminmax(&h);
        check(
            d[imin] == 0.0 && d[imax] == 1.0,
            "default range misses 0 or 1",
        )?;
        let flat = vec![h[0]; n];
        let e = mixing_weights(MixingMode::entropy_guided(), &flat);
        check(
            e.iter().all(|&x| x == 0.5),
            "equal entropies do not give 0.5",
        )?;
    }
    Ok("2000 random mini-batches: bounded, monotone, 0/1 at extremes, 0.5 when flat".into())
}

fn argminmax(xs: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[lo] {
            lo = i;
        }
        if x > xs[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut mean_worst, mut std_worst): (f64, f64) = (0.0, 0.0);
    let mut degenerate = 0;
    for k in 0..5000 {
        let g = rng.gen_range(2..33);
        let rewards: Vec<f64> = if k % 5 == 0 {
            vec![rng.gen_range(-2.0..2.0); g]
        } else if k % 2 == 0 {
            (0..g)
                .map(|_| f64::from(u8::from(rng.gen_bool(0.5))))
                .collect()
        } else {
            (0..g).map(|_| rng.gen_range(-3.0..3.0)).collect()
        };
        let adv = group_advantages(&rewards, 1e-8).map_err(|e| e.to_string())?;
        let mean_r = rewards.iter().sum::<f64>() / g as f64;
        let var_r = rewards.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / g as f64;
        if var_r.sqrt() < 1e-8 {
            check(adv.iter().all(|&a| a == 0.0), "degenerate group not zeroed")?;
            degenerate += 1;
            continue;
        }
        let mean = adv.iter().sum::<f64>() / g as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        mean_worst = mean_worst.max(mean.abs());
        std_worst = std_worst.max((std - 1.0).abs());
    }
    check(mean_worst <= 1e-12, format!("mean {mean_worst:e}"))?;
    check(std_worst <= 1e-9, format!("std off by {std_worst:e}"))?;
    Ok(format!(
        "5000 groups ({degenerate} degenerate): |mean| <= {mean_worst:.1e}, |std - 1| <= {std_worst:.1e}"
    ))
}

pub const LEARNING_SEED: u64 = 7;

fn criterion_7(dir: &Path) -> Outcome {
    let task = TaskSpec::default();
    let uniform = PolicyParams::new(task_vocab(), 2);
    let baseline = evaluate_sampled(&uniform, &task, 5000, 1, 32, 1.0, 99);
    let mut parts = Vec::new();
    let mut curve = BTreeMap::new();
    for kind in ObjectiveKind::ALL {
        let cfg = TrainConfig {
            objective: kind,
            seed: LEARNING_SEED,
            total_steps: 200,
            ..TrainConfig::default()
        };
        let started = Instant::now();
        let paths = RunPaths::in_dir(dir, kind.name());
        let (_, records) =
            trainer::train(&cfg, &paths, TrainOptions::default()).map_err(|e| e.to_string())?;
        let elapsed = started.elapsed();
        let acc = records.last().expect("200 records").greedy_accuracy;
        check(
            acc >= baseline + 0.3,
            format!("{kind} reached {acc}, random baseline {baseline}"),
        )?;
        if kind == ObjectiveKind::DhpoA {
            check(acc >= 0.9, format!("DHPO_A reached only {acc}"))?;
            for r in records
                .iter()
                .filter(|r| r.step == 1 || r.step % cfg.eval_every == 0)
            {
                curve.insert(r.step, r.greedy_accuracy);
            }
        }
        check(
            elapsed < Duration::from_secs(300),
            format!("{kind} took {elapsed:?}"),
        )?;
        parts.push(format!("{kind} {acc:.2} ({:.0}s)", elapsed.as_secs_f64()));
    }
    Ok(format!(
        "random baseline {baseline:.4}; {}; DHPO_A curve {}",
        parts.join(", "),
        compare_fixture(&curve)
    ))
}

const CURVE_FIXTURE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/tests/fixtures/sum_mod_dhpo_a_curve.json"
);

/// The recorded DHPO_A accuracy curve (seed 7). Platform math libraries may
/// shift it slightly, so a mismatch is reported rather than failed; the
/// thresholds above are the gate. `RLVR_LAB_BLESS=1` rewrites it.
fn compare_fixture(curve: &BTreeMap<u64, f64>) -> String {
    let current = serde_json::json!({ "seed": LEARNING_SEED, "greedy_accuracy": curve });
    if std::env::var_os("RLVR_LAB_BLESS").is_some() {
        std::fs::write(
            CURVE_FIXTURE,
            serde_json::to_string_pretty(&current).unwrap() + "\n",
        )
        .expect("write fixture");
    }
    let recorded: Option<serde_json::Value> = std::fs::read_to_string(CURVE_FIXTURE)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    match recorded {
        Some(r) if r == current => "matches the recorded fixture".into(),
        Some(_) => format!("differs from the recorded fixture: {curve:?}"),
        None => format!("has no recorded fixture: {curve:?}"),
    }
}

fn chain_compare(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut logs = Vec::new();
    for kind in [
        ObjectiveKind::Grpo,
        ObjectiveKind::DhpoA,
        ObjectiveKind::DhpoE,
    ] {
        let cfg = TrainConfig {
            objective: kind,
            seed: 11,
            total_steps: 40,
            eval_every: 10,
            task: TaskSpec::chain_mod(7, 3),
            ..TrainConfig::default()
        };
        let paths = RunPaths::in_dir(dir, kind.name());
        trainer::train(&cfg, &paths, TrainOptions::default()).map_err(|e| e.to_string())?;
        logs.push(paths.log);
    }
    metrics::emit_plot_data(&logs, dir).map_err(|e| e.to_string())?;
    Ok(logs)
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_8(a: &Path, b: &Path) -> Outcome {
    let logs = chain_compare(a)?;
    chain_compare(b)?;
    for (name, _) in PLOT_FILES {
        let bytes = read(&a.join(name))?;
        check(
            bytes == read(&b.join(name))?,
            format!("{name} differs between runs"),
        )?;
        let mut reader = csv::Reader::from_reader(bytes.as_slice());
        let header = reader.headers().map_err(|e| e.to_string())?.clone();
        check(
            header.get(0) == Some("step"),
            format!("{name} lacks a step column"),
        )?;
        let expected_cols = if name == "clip_fractions.csv" {
            1 + 3 * 3
        } else {
            1 + 3
        };
        check(
            header.len() == expected_cols,
            format!("{name} has {} columns", header.len()),
        )?;
        let mut rows = 0;
        for rec in reader.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            check(
                rec[0].parse::<u64>().is_ok(),
                format!("{name}: bad step {}", &rec[0]),
            )?;
            for cell in rec.iter().skip(1) {
                check(
                    cell.parse::<f64>().is_ok(),
                    format!("{name}: bad cell {cell}"),
                )?;
            }
            rows += 1;
        }
        check(rows == 40, format!("{name} has {rows} rows"))?;
    }
    // Directional reading, reported only.
    let late = |path: &PathBuf| -> f64 {
        let log = metrics::read_log(path).expect("log written above");
        let tail = &log.records[log.records.len() - 10..];
        tail.iter().map(|r| r.mean_entropy).sum::<f64>() / 10.0
    };
    Ok(format!(
        "4 panels schema-valid and identical across runs; late entropy GRPO {:.3}, DHPO_A {:.3}, DHPO_E {:.3}",
        late(&logs[0]),
        late(&logs[1]),
        late(&logs[2])
    ))
}

fn criterion_9(a: &Path, b: &Path, compare_a: &Path, compare_b: &Path) -> Outcome {
    let cfg = TrainConfig {
        objective: ObjectiveKind::DhpoE,
        total_steps: 20,
        eval_every: 5,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut bytes = Vec::new();
    for dir in [a, b] {
        let paths = RunPaths::in_dir(dir, "det");
        trainer::train(&cfg, &paths, TrainOptions::default()).map_err(|e| e.to_string())?;
        bytes.push(read(&paths.log)?);
    }
    check(bytes[0] == bytes[1], "train logs differ")?;
    for kind in [
        ObjectiveKind::Grpo,
        ObjectiveKind::DhpoA,
        ObjectiveKind::DhpoE,
    ] {
        let name = format!("{}.jsonl", kind.name());
        check(
            read(&compare_a.join(&name))? == read(&compare_b.join(&name))?,
            format!("compare log {name} differs"),
        )?;
    }
    Ok(format!(
        "train log of {} bytes and 3 compare logs byte-identical",
        bytes[0].len()
    ))
}

fn main() {
    // Timings are stated for one core.
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .expect("fresh thread pool");
    let tmp = tempfile::tempdir().expect("temp dir");
    let sub = |name: &str| {
        let p = tmp.path().join(name);
        std::fs::create_dir_all(&p).expect("create dir");
        p
    };
    let (c8a, c8b) = (sub("c8a"), sub("c8b"));
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient fidelity", criterion_1()),
        (2, "endpoint reductions", criterion_2()),
        (3, "on-policy identity", criterion_3()),
        (4, "clipping bounds", criterion_4()),
        (5, "entropy-weight properties", criterion_5()),
        (6, "advantage properties", criterion_6()),
        (7, "toy-scale learning", criterion_7(&sub("c7"))),
        (8, "dynamics analog panels", criterion_8(&c8a, &c8b)),
        (
            9,
            "determinism",
            criterion_9(&sub("c9a"), &sub("c9b"), &c8a, &c8b),
        ),
    ];
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL  {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
