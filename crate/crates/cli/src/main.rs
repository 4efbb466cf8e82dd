//! `eager` command-line entry point.
//!
//! Every command reads one pipeline config file. Any config key can be
//! overridden after the command's own flags as `--key value`; a key given
//! without a value is set to `true` (so `--tsg-only` works as a switch).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eager_core::pipeline::{self, PipelineConfig};
use eager_core::selfcheck;

#[derive(Parser)]
#[command(name = "eager", version, about = "Two-stream generative sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config file.
    #[arg(short, long)]
    config: PathBuf,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the raw interaction log and write the dataset and split.
    Prepare(Common),
    /// Build the frozen per-stream embeddings.
    Embed {
        #[arg(long)]
        stream: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Build per-stream code trees.
    Codes {
        #[arg(long)]
        stream: Option<String>,
        /// Only reload the stored trees and check their invariants.
        #[arg(long)]
        validate: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train and keep the best checkpoint.
    Train(Common),
    /// Evaluate the checkpoint on validation and test targets.
    Eval(Common),
    /// Recommend for each history line `user_id item_id ...`.
    Recommend {
        #[arg(long)]
        histories: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// List length; defaults to the config's `topk`.
        #[arg(short)]
        k: Option<usize>,
        /// Beam width; defaults to the config's `beam`.
        #[arg(long)]
        beam: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the gradient and beam-search self-checks.
    Selfcheck,
}

/// Turn `--some-key value --flag` into `(some_key, value), (flag, true)`.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        let Some(key) = raw[i].strip_prefix("--") else {
            bail!("expected `--key` in overrides, found `{}`", raw[i]);
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => match raw.get(i + 1) {
                Some(v) if !v.starts_with("--") => {
                    i += 1;
                    (key, v.clone())
                }
                _ => (key, "true".to_string()),
            },
        };
        if key.is_empty() {
            bail!("empty override key");
        }
        out.push((key.replace('-', "_"), value));
        i += 1;
    }
    Ok(out)
}

fn load(common: &Common) -> Result<PipelineConfig> {
    let overrides = parse_overrides(&common.overrides)?;
    PipelineConfig::load(&common.config, &overrides).with_context(|| format!("loading {}", common.config.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(c) => {
            let s = pipeline::prepare(&load(&c)?)?;
            println!(
                "users {}  items {}  interactions {}  excluded from evaluation {}",
                s.num_users, s.num_items, s.num_interactions, s.excluded_users
            );
        }
        Command::Embed { stream, common } => {
            for (name, n, d) in pipeline::embed(&load(&common)?, stream.as_deref())? {
                println!("{name}: {n} x {d}");
            }
        }
        Command::Codes { stream, validate, common } => {
            let cfg = load(&common)?;
            let summaries = if validate {
                pipeline::validate_codes(&cfg)?
            } else {
                pipeline::codes(&cfg, stream.as_deref())?
            };
            for s in summaries {
                println!("{}: branch_k {}  depth {}  max imbalance {}", s.stream, s.branch_k, s.depth, s.max_imbalance);
            }
        }
        Command::Train(c) => {
            let r = pipeline::train_model(&load(&c)?)?;
            let last = r.history.last().context("no training step ran")?;
            println!(
                "steps {}  final gen {:.4} con {:.4} recon {:.4} recog {:.4}  best step {}",
                r.steps(),
                last.gen,
                last.con,
                last.recon,
                last.recog,
                r.best_step.map_or("-".to_string(), |s| s.to_string())
            );
        }
        Command::Eval(c) => {
            let (valid, test) = pipeline::evaluate(&load(&c)?)?;
            println!("validation\n{}\ntest\n{}", valid.table(), test.table());
        }
        Command::Recommend { histories, output, k, beam, common } => {
            let cfg = load(&common)?;
            let k = k.unwrap_or(cfg.topk);
            let beam = beam.unwrap_or(cfg.beam);
            if beam < k {
                bail!("beam size {beam} is smaller than k = {k}");
            }
            let s = pipeline::recommend(&cfg, &histories, &output, k, beam)?;
            println!("{} recommendation lines, {} skipped", s.written, s.errors.len());
            for (line, msg) in &s.errors {
                eprintln!("{}:{line}: {msg}", histories.display());
            }
        }
        Command::Selfcheck => {
            let mut failed = 0;
            for c in selfcheck::run_all() {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                bail!("{failed} self-check(s) failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("EAGER_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
