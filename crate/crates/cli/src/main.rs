//! Command-line driver: data preparation, masked-LM and translation training, evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmlm_da::cmlm::{ConditioningMode, Side};
use cmlm_da::numcore::Scalar;
use cmlm_da::{Error, Result};

use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "cmlm-da", version, about = "Soft contextual data augmentation for translation")]
struct Cli {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, `key=value`. Repeatable.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn BPE and write id files, or generate a synthetic corpus.
    PrepareData,
    /// Fine-tune a masked language model for one side.
    TrainCmlm {
        #[arg(long)]
        side: String,
        /// `both` or `mono`; defaults to `cmlm.mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    TrainNmt {
        /// Continue from a checkpoint written by an earlier run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this global step.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Masked-token recovery accuracy of a masked language model.
    ConsistencyCheck {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Paired bootstrap test between two hypothesis files.
    Significance {
        #[arg(long)]
        hyp_a: PathBuf,
        #[arg(long)]
        hyp_b: PathBuf,
        #[arg(long)]
        refs: PathBuf,
    },
    SweepGamma {
        /// Comma-separated values; defaults to `sweep.gammas`.
        #[arg(long)]
        gammas: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) | Error::EmptyCorpus => 2,
        Error::Numerical(_) | Error::Shape { .. } => 3,
    }
}

fn parse_side(s: &str) -> Result<Side> {
    match s {
        "source" | "src" => Ok(Side::Source),
        "target" | "tgt" => Ok(Side::Target),
        _ => Err(Error::Config(format!("unknown side `{s}` (source|target)"))),
    }
}

fn parse_mode(s: &str) -> Result<ConditioningMode> {
    match s {
        "both" => Ok(ConditioningMode::Both),
        "mono" => Ok(ConditioningMode::Mono),
        _ => Err(Error::Config(format!("unknown mode `{s}` (both|mono)"))),
    }
}

fn run<T: Scalar>(cfg: &ExperimentConfig, cli: &Cli) -> Result<()> {
    let out = &cli.out;
    let split = |s: &Option<String>| s.clone().unwrap_or_else(|| cfg.get("eval.split").to_string());
    match &cli.command {
        Command::PrepareData => {
            commands::prepare_data(cfg, out)?;
            println!("data written to {}", out.display());
        }
        Command::TrainCmlm { side, mode } => {
            let side = parse_side(side)?;
            let mode = match mode {
                Some(m) => parse_mode(m)?,
                None => cfg.cmlm_mode(),
            };
            let p = commands::train_cmlm::<T>(cfg, side, mode, out)?;
            println!("{}", p.display());
        }
        Command::TrainNmt { resume, stop_after } => {
            let state = commands::train_nmt::<T>(cfg, out, resume.as_deref(), *stop_after, true)?;
            println!("step={} params={}", state.step, state.model.params.checksum());
        }
        Command::Evaluate { checkpoint, split: s } => {
            let rep = commands::evaluate::<T>(cfg, checkpoint, &split(s), out)?;
            println!("{rep}");
        }
        Command::ConsistencyCheck { checkpoint, split: s } => {
            let acc = commands::consistency_check::<T>(cfg, checkpoint, &split(s), out)?;
            println!("accuracy={acc:.6}");
        }
        Command::Significance { hyp_a, hyp_b, refs } => {
            let p = commands::significance(cfg, hyp_a, hyp_b, refs, out)?;
            println!("p_value={p:.6}");
        }
        Command::SweepGamma { gammas } => {
            let gs = match gammas {
                Some(g) => g
                    .split(',')
                    .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad gamma `{x}`"))))
                    .collect::<Result<Vec<_>>>()?,
                None => cfg.floats("sweep.gammas"),
            };
            for (g, b) in commands::sweep_gamma::<T>(cfg, &gs, out)? {
                println!("gamma={g} bleu={b:.2}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = (|| {
        let mut overrides = cli.set.clone();
        if let Some(s) = cli.seed {
            overrides.push(format!("seed={s}"));
        }
        let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
        eprintln!("config_digest={}", cfg.digest_hex());
        match cfg.get("precision") {
            "f64" => run::<f64>(&cfg, &cli),
            _ => run::<f32>(&cfg, &cli),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
