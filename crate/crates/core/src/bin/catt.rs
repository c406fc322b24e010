use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use catt::commands::{self, GradcheckArgs, EXIT_ACCEPTANCE, EXIT_OK};
use catt::config::RunConfig;
use catt::model::Mode;
use catt::par::Execution;
use catt::Result;

const EXIT_HELP: &str = "Exit codes:
  0  success
  2  configuration error (bad or missing config value, oversize gradcheck model)
  3  I/O error (missing or unwritable file)
  4  validation error (malformed data, checkpoint mismatch, positivity violation)
  5  acceptance failure (gradcheck mismatch, benchmark gap below --require-gap)

Environment:
  CATT_THREADS  worker threads for evaluation, gradcheck and benchmark cells (default 1)";

#[derive(Parser)]
#[command(name = "catt", version, about = "Causal attention toy harness", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate confounded train/test JSONL splits.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides data.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory receiving train.jsonl and test.jsonl (default: paths.train / paths.test).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint and per-epoch metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path (default: paths.checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "catt")]
        mode: Mode,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to score (default: paths.test).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the mode implied by the checkpoint.
        #[arg(long)]
        mode: Option<Mode>,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of the full model loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Check only the linear predictor.
        #[arg(long)]
        linear_only: bool,
        /// Add this value to one autodiff entry (negative control).
        #[arg(long)]
        corrupt: Option<f64>,
    },
    /// Print exact observational and interventional distributions of an SCM file.
    Oracle {
        #[arg(long)]
        scm: PathBuf,
        #[arg(long)]
        x: usize,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every arm on every seed and tabulate spurious-present accuracy.
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds overriding benchmark.seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Write the summary as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit 5 unless the catt median beats the baseline median by this many points.
        #[arg(long)]
        require_gap: Option<f64>,
    },
    /// Run K-means over embedded training tokens and dump the result.
    KmeansDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::parse("", None),
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let exec = Execution::from_env();
    match cli.command {
        Command::Datagen { config, seed, out: dir } => {
            let mut cfg = load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            commands::cmd_datagen(&cfg, dir.as_deref(), out)?;
        }
        Command::Train {
            config,
            seed,
            out: ckpt,
            mode,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            commands::cmd_train(&cfg, mode, ckpt.as_deref(), exec, out)?;
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            mode,
            out: report,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt = checkpoint.or_else(|| cfg.paths.checkpoint.clone());
            let data = data.or_else(|| cfg.paths.test.clone());
            let (Some(ckpt), Some(data)) = (ckpt, data) else {
                return Err(catt::Error::Config("eval needs a checkpoint and a dataset".into()));
            };
            commands::cmd_eval(&cfg, &ckpt, &data, mode, report.as_deref(), exec, out)?;
        }
        Command::Gradcheck {
            config,
            seed,
            tolerance,
            linear_only,
            corrupt,
        } => {
            let mut cfg = load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let args = GradcheckArgs {
                tolerance,
                corrupt,
                linear_only,
            };
            if !commands::cmd_gradcheck(&cfg, args, exec, out)?.passed() {
                return Ok(EXIT_ACCEPTANCE);
            }
        }
        Command::Oracle { scm, x, out: json } => {
            let r = commands::cmd_oracle(&scm, x, out)?;
            if let Some(p) = json {
                let text = serde_json::to_string_pretty(&r).map_err(|e| catt::Error::Input(e.to_string()))?;
                catt::checkpoint::write_atomic(&p, text.as_bytes())?;
            }
        }
        Command::Benchmark {
            config,
            seeds,
            out: json,
            require_gap,
        } => {
            let mut cfg = load(config.as_deref())?;
            if let Some(s) = seeds {
                cfg.benchmark.seeds = s;
            }
            let summary = commands::cmd_benchmark(&cfg, json.as_deref(), exec, out)?;
            if let Some(gap) = require_gap {
                let (Some(c), Some(b)) = (summary.median("catt"), summary.median("baseline")) else {
                    return Err(catt::Error::Config("--require-gap needs the catt and baseline arms".into()));
                };
                let got = 100.0 * (c - b);
                writeln!(out, "catt - baseline = {got:.2} points (required {gap})").ok();
                if got < gap {
                    return Ok(EXIT_ACCEPTANCE);
                }
            }
        }
        Command::KmeansDump { config, seed, out: json } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            commands::cmd_kmeans_dump(&cfg, json.as_deref(), out)?;
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    let code = match run(cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
