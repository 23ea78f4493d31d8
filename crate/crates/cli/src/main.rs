use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rlvr_lab::config::{self, ConfigSources, RunConfig};
use rlvr_lab::objectives::Objective;
use rlvr_lab::trainer::{self, RunPaths, TrainConfig, TrainOptions};
use rlvr_lab::types::ObjectiveKind;
use rlvr_lab::{audit, gradcheck, metrics, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

/// Policy-optimization laboratory for verifiable-reward tasks.
#[derive(Debug, Parser)]
#[command(name = "rlvr-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one policy and write its JSONL log and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Record real per-step wall time (logs stop being byte-reproducible).
        #[arg(long)]
        wall_clock: bool,
    },
    /// Compare analytic gradients with finite differences on random instances.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random instances per objective.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Train several objectives and seeds, then write comparison CSVs.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated objectives.
        #[arg(long, value_delimiter = ',', default_values_t = [ObjectiveKind::Grpo, ObjectiveKind::DhpoA, ObjectiveKind::DhpoE])]
        objectives: Vec<ObjectiveKind>,
        /// Outer steps per run (defaults to `total_steps`).
        #[arg(long)]
        steps: Option<u64>,
        /// Comma-separated seeds (defaults to the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Score every objective on a recorded JSONL trace.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Trace file, one rollout per line.
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied after the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Dotted-path override, e.g. `--set clip.eps_seq_high=0.3`. Repeatable.
    #[arg(long = "set", value_name = "K=V")]
    overrides: Vec<String>,
    /// Master seed, applied after all other layers.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn sources(&self) -> ConfigSources {
        ConfigSources {
            file: self.config.clone(),
            preset: self.preset.clone(),
            overrides: self.overrides.clone(),
            seed: self.seed,
            out_dir: self.out.clone(),
        }
    }
}

struct Failure {
    code: u8,
    error: Error,
}

fn usage(error: Error) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error,
    }
}

fn runtime(error: Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        error,
    }
}

fn long_help() -> String {
    let defaults: std::collections::BTreeMap<String, serde_json::Value> =
        config::leaves(&RunConfig::default().to_value())
            .into_iter()
            .collect();
    let mut out = String::from("Config keys (default):\n");
    for (key, _) in config::FIELD_DOCS {
        out.push_str(&format!("  {key} = {}\n", defaults[*key]));
    }
    out.push_str(&format!("\nPresets: {}\n", config::PRESETS.join(", ")));
    out.push_str("\nRLVR_LAB_THREADS caps worker threads (default: all cores).\n");
    out.push_str(
        "Exit codes: 0 ok, 1 usage or config error, 2 runtime abort, 3 gradcheck failure.\n",
    );
    out
}

fn main() -> ExitCode {
    let help = long_help();
    let command = Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|sub| sub.after_long_help(help.clone()));
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    config::init_thread_pool().map_err(usage)?;
    let cfg = config::resolve(&common.sources()).map_err(usage)?;
    eprintln!("resolved config:\n{}", cfg.to_json_pretty());
    Ok(cfg)
}

fn create_dir(path: &std::path::Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| {
        runtime(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn run_stem(cfg: &TrainConfig) -> String {
    format!("{}-s{}", cfg.objective.name().to_lowercase(), cfg.seed)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Train {
            common,
            resume,
            wall_clock,
        } => {
            let cfg = resolve(&common)?;
            create_dir(&cfg.out_dir)?;
            let paths = RunPaths::in_dir(&cfg.out_dir, &run_stem(&cfg.train));
            let options = TrainOptions { wall_clock, resume };
            let (state, records) =
                trainer::train(&cfg.train, &paths, options).map_err(|e| match e {
                    Error::Usage(_) | Error::Config(_) => usage(e),
                    e => runtime(e),
                })?;
            if let Some(last) = records.last() {
                println!(
                    "step {} greedy_accuracy {} mean_reward {} mean_entropy {}",
                    last.step, last.greedy_accuracy, last.mean_reward, last.mean_entropy
                );
            }
            println!("log {}", paths.log.display());
            println!(
                "checkpoint {} (step {})",
                paths.checkpoint.display(),
                state.step
            );
            Ok(0)
        }
        Command::Gradcheck { common, instances } => {
            if instances == 0 {
                return Err(usage(Error::Usage("--instances must be at least 1".into())));
            }
            let cfg = resolve(&common)?;
            let t = &cfg.train;
            let objectives: Vec<Objective> = ObjectiveKind::ALL
                .iter()
                .map(|&k| {
                    Objective::build(
                        k,
                        &t.clip,
                        (t.entropy_weights.w_min, t.entropy_weights.w_max),
                        &t.baselines,
                    )
                })
                .collect();
            let report = gradcheck::run(&objectives, instances, t.seed).map_err(runtime)?;
            for c in &report.objectives {
                eprintln!(
                    "{:<7} max deviation {:.3e}  checked {}  kink-skipped {}  {}",
                    c.objective.name(),
                    c.max_deviation,
                    c.checked_coordinates,
                    c.skipped_coordinates,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            print_json(&report)?;
            Ok(if report.passed { 0 } else { EXIT_GRADCHECK })
        }
        Command::Compare {
            common,
            objectives,
            steps,
            seeds,
        } => {
            if objectives.is_empty() {
                return Err(usage(Error::Usage("--objectives is empty".into())));
            }
            let mut cfg = resolve(&common)?;
            if let Some(steps) = steps {
                cfg.train.total_steps = steps;
                cfg.train.validate().map_err(usage)?;
            }
            let seeds = if seeds.is_empty() {
                vec![cfg.train.seed]
            } else {
                seeds
            };
            let runs_dir = cfg.out_dir.join("runs");
            create_dir(&runs_dir)?;
            let mut logs = Vec::new();
            for &objective in &objectives {
                for &seed in &seeds {
                    let train = TrainConfig {
                        objective,
                        seed,
                        ..cfg.train.clone()
                    };
                    let paths = RunPaths::in_dir(&runs_dir, &run_stem(&train));
                    let (_, records) =
                        trainer::train(&train, &paths, TrainOptions::default()).map_err(runtime)?;
                    eprintln!(
                        "{} seed {}: final greedy_accuracy {}",
                        objective,
                        seed,
                        records.last().map_or(f64::NAN, |r| r.greedy_accuracy)
                    );
                    logs.push(paths.log);
                }
            }
            let written = metrics::emit_plot_data(&logs, &cfg.out_dir).map_err(runtime)?;
            for path in written {
                println!("{}", path.display());
            }
            Ok(0)
        }
        Command::Audit { common, trace } => {
            let cfg = resolve(&common)?;
            let text = std::fs::read_to_string(&trace).map_err(|e| {
                usage(Error::Io {
                    path: trace.clone(),
                    source: e,
                })
            })?;
            let lines = audit::parse_trace(&text, &trace.display().to_string()).map_err(usage)?;
            let t = &cfg.train;
            let report = audit::audit(
                &lines,
                &t.clip,
                (t.entropy_weights.w_min, t.entropy_weights.w_max),
                &t.baselines,
            )
            .map_err(usage)?;
            print_json(&report)?;
            Ok(0)
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(value).map_err(|e| runtime(e.into()))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{json}").map_err(|e| {
        runtime(Error::Io {
            path: "<stdout>".into(),
            source: e,
        })
    })
}
