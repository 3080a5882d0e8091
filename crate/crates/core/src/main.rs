use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lemn::harness::{self, best_of, ExperimentConfig};

#[derive(Parser)]
#[command(name = "lemn", version, about = "Train and evaluate learned memory-retention agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the vocabulary and QA episode files.
    Generate(Common),
    /// Train an agent; writes metrics.csv and checkpoints into --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from <out>/checkpoints/latest.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint, or pick the best of several run directories.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to the best checkpoint under --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run directories to compare; each is evaluated with its own config.
        #[arg(long, num_args = 1.., conflicts_with = "checkpoint")]
        runs: Vec<PathBuf>,
    },
    /// Print the memory trace of one evaluation episode.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// fifo, im, s or st.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    memory_size: Option<usize>,
    /// original, noisy, large, imaze or singind.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        self.resolve_from(None)
    }

    /// Starts from the config saved in the run directory, if any.
    fn resolve_saved(&self) -> Result<ExperimentConfig> {
        let saved = self.out.as_ref().map(|o| o.join(harness::CONFIG_FILE));
        self.resolve_from(saved.filter(|p| p.exists() && self.config.is_none()))
    }

    fn resolve_from(&self, saved: Option<PathBuf>) -> Result<ExperimentConfig> {
        let mut cfg = match saved.as_ref().or(self.config.as_ref()) {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("policy", self.policy.clone()),
            ("memory_size", self.memory_size.map(|v| v.to_string())),
            ("task", self.task.clone()),
            ("steps", self.steps.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            };
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.resolve()?;
            let s = harness::generate(&cfg)?;
            println!(
                "wrote {} training and {} evaluation episodes to {}",
                s.train,
                s.eval,
                s.dir.display()
            );
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let s = harness::train_run(&cfg, resume)?;
            print!("trained {} steps", s.steps);
            if let Some(m) = s.best_eval {
                print!(", best eval {m:.4}");
            }
            println!(" -> {}", cfg.out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            runs,
        } => {
            if runs.is_empty() {
                let cfg = common.resolve_saved()?;
                let ckpt = checkpoint.unwrap_or_else(|| harness::preferred_checkpoint(&cfg.out));
                let report = harness::eval_run(&cfg, &ckpt)?;
                print!("{}", report.to_table());
            } else {
                let reports = harness::eval_runs(&runs)?;
                for r in &reports {
                    print!("{}", r.to_table());
                    println!();
                }
                let best = best_of(&reports).expect("at least one run");
                println!(
                    "best of {}: {} ({} {:.2}%)",
                    reports.len(),
                    best.run,
                    best.metric_name,
                    100.0 * best.metric
                );
            }
        }
        Command::Inspect {
            common,
            checkpoint,
            episode,
        } => {
            let cfg = common.resolve_saved()?;
            let ckpt = checkpoint.unwrap_or_else(|| harness::preferred_checkpoint(&cfg.out));
            for line in harness::inspect(&cfg, &ckpt, episode)? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
