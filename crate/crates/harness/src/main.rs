use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use softprune::pruner;
use softprune_harness::data::{self, Normalization};
use softprune_harness::sweep::{self, SweepAxis};
use softprune_harness::{evaluate, train_from_config, Checkpoint, Dataset, ExperimentConfig, HarnessError};

const MNIST_MEAN: &[f32] = &[0.1307];
const MNIST_STD: &[f32] = &[0.3081];
const CIFAR_MEAN: &[f32] = &[0.4914, 0.4822, 0.4465];
const CIFAR_STD: &[f32] = &[0.2470, 0.2435, 0.2616];

#[derive(Parser)]
#[command(name = "softprune", version, about = "Channel pruning with learned soft masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set sparsity.lambda=5e-5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Remove hard-masked channels from a checkpoint.
    Prune {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report test accuracy of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// IDX image file, or comma-separated CIFAR-10 binary batches.
        #[arg(long)]
        data: String,
        /// IDX label file; selects the IDX reader.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Per-channel mean, comma-separated (defaults to MNIST or CIFAR-10 statistics).
        #[arg(long)]
        mean: Option<String>,
        #[arg(long)]
        std: Option<String>,
    },
    /// Compare channel, parameter and FLOP counts of two checkpoints.
    Report { before: PathBuf, after: PathBuf },
    /// Train once per value of `sparsity.lambda` or `sparsity.s`.
    #[command(group(ArgGroup::new("axis").required(true).args(["lambda", "s"])))]
    Sweep {
        config: PathBuf,
        #[arg(long, value_name = "LIST")]
        lambda: Option<String>,
        #[arg(long, value_name = "LIST")]
        s: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn floats(flag: &str, text: &str) -> Result<Vec<f32>, HarnessError> {
    text.split(',')
        .map(|v| v.trim().parse().map_err(|_| HarnessError::InvalidConfig(format!("{flag}: {v:?} is not a number"))))
        .collect()
}

fn load_eval_data(data_arg: &str, labels: Option<&Path>, mean: Option<&str>, std: Option<&str>, classes: usize) -> Result<Dataset, HarnessError> {
    let (dm, ds) = if labels.is_some() { (MNIST_MEAN, MNIST_STD) } else { (CIFAR_MEAN, CIFAR_STD) };
    let norm = Normalization {
        mean: mean.map(|m| floats("--mean", m)).transpose()?.unwrap_or_else(|| dm.to_vec()),
        std: std.map(|s| floats("--std", s)).transpose()?.unwrap_or_else(|| ds.to_vec()),
    };
    match labels {
        Some(l) => data::load_idx(Path::new(data_arg), l, &norm, classes),
        None => {
            let paths: Vec<PathBuf> = data_arg.split(',').map(|p| PathBuf::from(p.trim())).collect();
            let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
            data::load_cifar_binary(&refs, &norm, classes)
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let outcome = train_from_config(&cfg)?;
            println!("pruned_test_accuracy={:.4}", outcome.summary.accuracy);
            println!("{}", outcome.summary.report);
            println!("output={}", cfg.output_dir.display());
        }
        Command::Prune { checkpoint, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let masks = pruner::extract_masks(&ckpt.model, &ckpt.mask, &ckpt.variant)?;
            let pruned = pruner::surgery(&ckpt.model, &masks)?;
            let report = pruner::make_report(&ckpt.model, &pruned, &ckpt.model.input_shape())?;
            Checkpoint { model: pruned, ..ckpt }.save(&out)?;
            println!("{report}");
        }
        Command::Eval { checkpoint, data, labels, mean, std } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let classes = ckpt.model.num_classes();
            let set = load_eval_data(&data, labels.as_deref(), mean.as_deref(), std.as_deref(), classes)?;
            if set.image_shape() != ckpt.model.input_shape() {
                return Err(HarnessError::InvalidConfig(format!(
                    "images are {:?} but the model expects {:?}",
                    set.image_shape(),
                    ckpt.model.input_shape()
                )));
            }
            println!("accuracy={}", evaluate(&ckpt.model, &set, &ckpt.mask, &ckpt.variant)?);
        }
        Command::Report { before, after } => {
            let a = Checkpoint::load(&before)?;
            let b = Checkpoint::load(&after)?;
            println!("{}", pruner::make_report(&a.model, &b.model, &a.model.input_shape())?);
        }
        Command::Sweep { config, lambda, s, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let (axis, list) = match (lambda, s) {
                (Some(l), _) => (SweepAxis::Lambda, l),
                (None, Some(s)) => (SweepAxis::S, s),
                (None, None) => unreachable!("clap requires one axis"),
            };
            let values = sweep::parse_list(&list)?;
            print!("{}", sweep::sweep_from_config(&cfg, axis, &values)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("softprune: error: {e}");
            match e {
                HarnessError::MissingFile { .. } => {
                    eprintln!("usage: softprune <train|prune|eval|report|sweep> ... (see --help)");
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}
