//! `ibp`: train, attack and certify classifiers with interval bound propagation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ibp_core::training::{LossVariant, Method};

#[derive(Parser, Debug)]
#[command(name = "ibp", version, about = "Verified training with interval bound propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// `toy`, `toy:SEED` or `idx:PATH`.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Layer list, e.g. "conv 16 4x4+2; conv 32 4x4+1; fc 100; fc 10".
    #[arg(long, global = true)]
    arch: Option<String>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossArg>,
    /// Bound the logits directly instead of folding the last layer into the specification.
    #[arg(long, global = true)]
    no_elision: bool,
    /// Train at the full ε from the first step.
    #[arg(long, global = true)]
    no_eps_schedule: bool,
    /// Model manifest; repeat to pass several checkpoints.
    #[arg(long, global = true)]
    model: Vec<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Nominal,
    Ibp,
    Pgd,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum LossArg {
    Xent,
    Softplus,
    Hinge,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; `--model` resumes from a checkpoint.
    Train {
        /// Also save a checkpoint every N steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Nominal error of a model.
    Eval,
    /// Untargeted PGD attack report.
    Attack,
    /// Per-example verification report (IBP, PGD, branch-and-bound).
    Verify,
    /// IBP versus complete verified error.
    Tightness,
    /// Sample the adversarial polytope of one input for each `--model`.
    Polytope,
    /// Examples where PGD fails but branch-and-bound finds a counterexample.
    Hunt,
    /// Re-serialize a model, optionally dumping weights as CSV.
    Export {
        #[arg(long)]
        weights_csv: bool,
    },
}

impl Common {
    fn overrides(&self) -> config::Overrides {
        config::Overrides {
            seed: self.seed,
            epsilon: self.epsilon,
            dataset: self.dataset.clone(),
            arch: self.arch.clone(),
            method: self.method.map(|m| match m {
                MethodArg::Nominal => Method::Nominal,
                MethodArg::Ibp => Method::Ibp,
                MethodArg::Pgd => Method::Pgd,
            }),
            loss: self.loss.map(|l| match l {
                LossArg::Xent => LossVariant::CrossEntropy,
                LossArg::Softplus => LossVariant::Softplus,
                LossArg::Hinge => LossVariant::Hinge,
            }),
            no_elision: self.no_elision,
            no_eps_schedule: self.no_eps_schedule,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let report = serde_json::json!({
                "error": {
                    "message": e.to_string(),
                    "chain": chain,
                }
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
