//! `coopflow`: experiment runner for the cooperative-perception
//! simulator. Generates scenario datasets, trains checkpoints, runs the
//! latency sweep, and self-checks the build.
//!
//! Exit codes: 0 success, 1 usage, 2 bad configuration, 3 runtime
//! failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use coopflow::error::{Error, Result};
use coopflow::sweep::Variant;

use config::LoadedSpec;

#[derive(Parser)]
#[command(name = "coopflow", version, about = "Cooperative-perception latency experiments")]
struct Cli {
    /// Override the spec's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the evaluated variants, comma-separated tags
    /// (e.g. flow_fusion,mid_no_pred,non_fusion).
    #[arg(long, global = true)]
    variants: Option<String>,
    /// Override the sweep latencies, comma-separated milliseconds
    /// (e.g. 0,100,200,300,500).
    #[arg(long, global = true)]
    latencies: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the training and evaluation scenario files for a spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; receives train/ and eval/ subdirectories.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the checkpoints the spec's variants need, on generated data.
    Train {
        #[arg(long)]
        spec: PathBuf,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        scenarios: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the latency sweep. Evaluation scenarios are derived from the
    /// spec, so `gen` output is not required here.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        /// Directory holding narrow.ckpt / wide.ckpt from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for results.csv and the per-variant curves.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle/invariant self-check suite and print pass/fail.
    Verify {
        #[arg(long)]
        spec: PathBuf,
    },
}

fn parse_variants(raw: &str) -> Result<Vec<String>> {
    let tags: Vec<String> =
        raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if tags.is_empty() {
        return Err(Error::usage("--variants needs at least one tag".to_string()));
    }
    for t in &tags {
        Variant::from_tag(t).map_err(|_| Error::usage(format!("--variants: unknown tag {t:?}")))?;
    }
    Ok(tags)
}

fn parse_latencies(raw: &str) -> Result<Vec<u32>> {
    let vals: Vec<u32> = raw
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| Error::usage(format!("--latencies: bad value {s:?}"))))
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::usage("--latencies needs at least one value".to_string()));
    }
    Ok(vals)
}

fn load(cli: &Cli, spec_path: &std::path::Path) -> Result<LoadedSpec> {
    let mut loaded = config::load_spec(spec_path)?;
    if let Some(seed) = cli.seed {
        loaded.seed = seed;
    }
    if let Some(raw) = &cli.variants {
        loaded.spec.eval.variants = parse_variants(raw)?;
    }
    if let Some(raw) = &cli.latencies {
        loaded.spec.channel.latencies_ms = parse_latencies(raw)?;
    }
    config::revalidate(&loaded.spec)?;
    Ok(loaded)
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.cmd {
        Cmd::Gen { spec, out } => {
            commands::cmd_gen(&load(cli, spec)?, out)?;
            Ok(0)
        }
        Cmd::Train { spec, scenarios, out } => {
            commands::cmd_train(&load(cli, spec)?, scenarios, out)?;
            Ok(0)
        }
        Cmd::Sweep { spec, checkpoint, out } => {
            commands::cmd_sweep(&load(cli, spec)?, checkpoint, out)?;
            Ok(0)
        }
        Cmd::Verify { spec } => commands::cmd_verify(&load(cli, spec)?),
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => 1,
        Error::Config(_) | Error::Format { .. } => 2,
        _ => 3,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
