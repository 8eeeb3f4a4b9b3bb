//! `bnrobust` — train, fine-tune, attack-evaluate and analyze models for
//! studying adversarial fine-tuning of batch-normalization layers.
//!
//! Exit codes: 0 success, 2 input or data error, 3 checkpoint error,
//! 4 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use bnrobust::config::ExperimentConfig;
use bnrobust::experiment::{run_analyze, run_eval, run_finetune, run_train, RunOutput};
use bnrobust::{Error, ErrorClass, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bnrobust", version, about = "Adversarial fine-tuning of batch-norm layers at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a freshly initialized model under a named configuration.
    Train(Common),
    /// Fine-tune a checkpoint adversarially under a named configuration.
    Finetune {
        /// Checkpoint to start from.
        base: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Robust error of a checkpoint under the evaluation ensemble.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer normalized-weight means, histograms, mean shifts and
    /// parameter accounting for one or more checkpoints.
    Analyze {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Also histogram logits and confidences on the test split.
        #[arg(long)]
        with_data: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// Options shared by every subcommand; each overrides the matching key of
/// the configuration file.
#[derive(Args, Debug)]
struct Common {
    /// Configuration file (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (`data.dir`).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Dataset kind: mnist, cifar10 or synthetic (`data.dataset`).
    #[arg(long)]
    dataset: Option<String>,
    /// Output directory (`output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for model init, training and evaluation.
    #[arg(long)]
    seed: Option<u64>,
    /// `n,w1,w2,...` for a ResNet, or `linear`.
    #[arg(long)]
    arch: Option<String>,
    /// normal, adv, bn_only, bn_stats, bn_only_params or bn_params.
    #[arg(long)]
    config_name: Option<String>,
    #[arg(long)]
    plus_logit: bool,
    #[arg(long)]
    plus_conv1: bool,
    /// Reset running statistics to (0, 1) before training.
    #[arg(long)]
    reset_stats: bool,
    /// Force adversarial (`true`) or clean (`false`) training.
    #[arg(long)]
    adversarial: Option<bool>,
    /// Attack radius as an exact rational, e.g. `8/255`.
    #[arg(long)]
    epsilon: Option<String>,
    /// PGD steps of the training attack.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of test examples to evaluate.
    #[arg(long)]
    eval_n: Option<usize>,
    /// Comma-separated ensemble labels, e.g. `pgd20x1,rs1000`.
    #[arg(long)]
    ensemble: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut set = |k: &str, v: String| cfg.set(k, &v);
        if let Some(d) = &self.data_dir {
            set("data.dir", d.display().to_string())?;
        }
        if let Some(d) = &self.dataset {
            set("data.dataset", d.clone())?;
        }
        if let Some(o) = &self.out {
            set("output.dir", o.display().to_string())?;
        }
        if let Some(s) = self.seed {
            for k in ["model.seed", "train.seed", "eval.seed"] {
                set(k, s.to_string())?;
            }
        }
        if let Some(a) = &self.arch {
            if a == "linear" {
                set("model.arch", a.clone())?;
            } else {
                let (n, widths) = a
                    .split_once(',')
                    .ok_or_else(|| Error::InvalidConfig(format!("--arch `{a}`: expected n,w1,w2,...")))?;
                set("model.n", n.to_string())?;
                set("model.widths", widths.to_string())?;
            }
        }
        if let Some(c) = &self.config_name {
            set("train.config_name", c.clone())?;
        }
        if self.plus_logit {
            set("train.plus_logit", "true".into())?;
        }
        if self.plus_conv1 {
            set("train.plus_conv1", "true".into())?;
        }
        if self.reset_stats {
            set("train.reset_stats", "true".into())?;
        }
        if let Some(a) = self.adversarial {
            set("train.adversarial", a.to_string())?;
        }
        if let Some(e) = &self.epsilon {
            set("attack.epsilon", e.clone())?;
        }
        if let Some(s) = self.steps {
            set("attack.steps", s.to_string())?;
        }
        if let Some(e) = self.epochs {
            set("train.epochs", e.to_string())?;
        }
        if let Some(n) = self.eval_n {
            set("eval.n", n.to_string())?;
        }
        if let Some(e) = &self.ensemble {
            set("eval.ensemble", e.clone())?;
        }
        Ok(cfg)
    }
}

fn print_run(run: &RunOutput) {
    println!("epoch  split  loss        clean_err  robust_err_pgd10");
    for r in &run.log.epochs {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        println!(
            "{:>5}  {:<5}  {:<10.6}  {:>9}  {:>16}",
            r.epoch,
            format!("{:?}", r.split).to_lowercase(),
            r.loss,
            opt(r.clean_err),
            opt(r.robust_err_pgd10)
        );
    }
    println!("checkpoint: {}", run.checkpoint.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => print_run(&run_train(&common.resolve()?)?),
        Command::Finetune { base, common } => print_run(&run_finetune(&common.resolve()?, &base)?),
        Command::Eval { checkpoint, common } => print!("{}", run_eval(&common.resolve()?, &checkpoint)?.table()),
        Command::Analyze {
            checkpoints,
            with_data,
            common,
        } => {
            let out = run_analyze(&common.resolve()?, &checkpoints, with_data)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            for f in &out.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Input => 2,
                ErrorClass::Checkpoint => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}
