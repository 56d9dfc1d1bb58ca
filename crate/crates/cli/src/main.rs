use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use headroute::accounting::BenchConfig;
use headroute::Error;

mod commands;
mod config;

use commands::{CountArgs, ModelSource, TrainArgs};
use config::Split;

/// A numeric check that ran to completion but failed its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericFailure(String);

#[derive(Parser)]
#[command(name = "headroute", version, about = "Routed expert-head encoder: train, prune, count, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Checkpoint prefix.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Built-in shape instead of a checkpoint.
    #[arg(long, value_parser = ["bert-base"])]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Progressive conversion training; writes PREFIX checkpoint, log and report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Step log path (default PREFIX.log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Tallies expert selections over one pass of a dataset split.
    Usage {
        #[arg(long)]
        model: PathBuf,
        /// Run config or data-source JSON.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Keeps the m most used experts of every routed layer and drops routers.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        usage: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP counts against a baseline.
    Count {
        #[command(flatten)]
        source: Source,
        /// Preset only: number of top layers converted and pruned.
        #[arg(long, default_value_t = 0)]
        converted: usize,
        /// Preset only: experts kept per pruned layer.
        #[arg(long, default_value_t = 1)]
        m: usize,
        /// Baseline checkpoint (default: the unconverted model of the same shape).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        /// Leave out the d×d pooler that BERT-style totals include.
        #[arg(long)]
        no_pooler: bool,
        #[arg(long)]
        json: bool,
    },
    /// Median forward throughput on a fixed random batch.
    Bench {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 0)]
        converted: usize,
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Allow models that still route.
        #[arg(long)]
        routed: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Classification accuracy on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        split: Split,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference checks of every op and of the routed-model loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Train with each k, prune with each m, and report accuracy before and after.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "1,3")]
        ks: String,
        #[arg(long, default_value = "1")]
        ms: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn source(s: &Source, converted: usize, m: usize) -> ModelSource<'_> {
    match &s.model {
        Some(p) => ModelSource::Checkpoint(p),
        None => ModelSource::Preset { converted, m },
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, log, quiet } => commands::train_cmd(TrainArgs {
            config: &config,
            out: &out,
            log: log.as_deref(),
            quiet,
        }),
        Command::Usage {
            model,
            data,
            split,
            out,
            batch_size,
        } => commands::usage_cmd(&model, &data, split, &out, batch_size),
        Command::Prune { model, usage, m, out } => commands::prune_cmd(&model, &usage, m, &out),
        Command::Count {
            source: s,
            converted,
            m,
            baseline,
            seq_len,
            no_pooler,
            json,
        } => commands::count_cmd(CountArgs {
            model: source(&s, converted, m),
            baseline: baseline.as_deref(),
            seq_len,
            no_pooler,
            json,
        }),
        Command::Bench {
            source: s,
            converted,
            m,
            batch,
            seq_len,
            warmup,
            iters,
            routed,
            seed,
            json,
        } => {
            let cfg = BenchConfig {
                batch,
                seq_len,
                warmup_iters: warmup,
                timed_iters: iters,
                routed,
                seed,
            };
            commands::bench_cmd(source(&s, converted, m), cfg, json)
        }
        Command::Eval {
            model,
            data,
            split,
            batch_size,
            json,
        } => commands::eval_cmd(&model, &data, split, batch_size, json),
        Command::Gradcheck { seed, json } => commands::gradcheck_cmd(seed, json),
        Command::Ablate { config, ks, ms, out } => {
            commands::ablate_cmd(&config, &commands::parse_list(&ks)?, &commands::parse_list(&ms)?, &out)
        }
    }
}

/// 2 for bad configuration or input, 3 for numeric failure, 4 for I/O and
/// checkpoint problems.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Usage(_) | Error::Contract(_) | Error::Parse { .. } | Error::Index { .. } => 2,
                Error::NonFinite(_) | Error::Domain(_) | Error::Statistics(_) => 3,
                Error::Io { .. } | Error::Checkpoint { .. } | Error::Format(_) | Error::Json(_) => 4,
                Error::Shape { .. } => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
