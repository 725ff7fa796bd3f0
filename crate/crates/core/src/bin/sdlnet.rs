use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sdlnet::cli::{execute, Command, ExperimentKind, RunConfig, ERROR_EXIT_CODE, SEED_ENV};

/// Document localization: data generation, training, evaluation,
/// rectification and experiments.
#[derive(Parser)]
#[command(name = "sdlnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Extra override, any configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Worker threads for experiment cells.
    #[arg(long, global = true)]
    jobs: Option<String>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, value_name = "DIR")]
    data: Option<String>,
    #[arg(long, value_name = "CKPT")]
    out: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_name = "DIR")]
        out: Option<String>,
        #[arg(long)]
        n: Option<String>,
        #[arg(long)]
        size: Option<String>,
        /// Largest corner displacement as a fraction of the card side.
        #[arg(long)]
        perspective: Option<String>,
    },
    /// Train a full model on some classes.
    Train {
        #[command(flatten)]
        flags: TrainFlags,
        /// Comma-separated classes, or `all`.
        #[arg(long)]
        classes: Option<String>,
        /// Width multiplier of the channel plan.
        #[arg(long)]
        width: Option<String>,
    },
    /// Fine-tune the decoder of a checkpoint on one class.
    Finetune {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, value_name = "CKPT")]
        init: Option<String>,
        /// Upsampler blocks in the frozen encoder: 0, 1, 2 or 3.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        class: Option<String>,
        /// Percent of the class training set.
        #[arg(long, value_name = "PCT")]
        fraction: Option<String>,
    },
    /// Test-set metrics of a checkpoint.
    Eval {
        #[arg(long, value_name = "CKPT")]
        model: Option<String>,
        #[arg(long, value_name = "DIR")]
        data: Option<String>,
        #[arg(long)]
        class: Option<String>,
        /// CSV path; defaults to `<model stem>.eval.csv`.
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        threshold: Option<String>,
    },
    /// Detect and rectify a document in an image.
    Rectify {
        #[arg(long, value_name = "CKPT")]
        model: Option<String>,
        #[arg(long, value_name = "PATH")]
        image: Option<String>,
        #[arg(long, value_name = "PATH")]
        out: Option<String>,
        /// Use this quadrangle instead of a detection.
        #[arg(long, value_name = "JSON")]
        quad: Option<String>,
        #[arg(long)]
        height: Option<String>,
        #[arg(long)]
        threshold: Option<String>,
    },
    /// Run an experiment protocol (resumable).
    Experiment {
        #[arg(value_parser = ["splits", "generalization"])]
        kind: String,
        #[arg(long, value_name = "DIR")]
        data: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<String>,
    },
}

fn push(overrides: &mut Vec<(String, String)>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        overrides.push((key.to_string(), v));
    }
}

fn push_train(overrides: &mut Vec<(String, String)>, f: TrainFlags, finetune: bool) {
    let prefix = if finetune { "finetune_" } else { "" };
    push(overrides, "data", f.data);
    push(overrides, "out", f.out);
    push(overrides, &format!("{prefix}max_epochs"), f.epochs);
    push(overrides, &format!("{prefix}patience"), f.patience);
    push(overrides, &format!("{prefix}learning_rate"), f.lr);
    push(overrides, "batch_size", f.batch_size);
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let mut overrides = Vec::new();
    push(&mut overrides, "seed", cli.common.seed);
    push(&mut overrides, "jobs", cli.common.jobs);
    let command = match cli.command {
        Cmd::GenData { out, n, size, perspective } => {
            push(&mut overrides, "out", out);
            push(&mut overrides, "n", n);
            push(&mut overrides, "size", size);
            push(&mut overrides, "perspective", perspective);
            Command::GenData
        }
        Cmd::Train { flags, classes, width } => {
            push_train(&mut overrides, flags, false);
            push(&mut overrides, "classes", classes);
            push(&mut overrides, "width", width);
            Command::Train
        }
        Cmd::Finetune { flags, init, split, class, fraction } => {
            push_train(&mut overrides, flags, true);
            push(&mut overrides, "init", init);
            push(&mut overrides, "split", split);
            push(&mut overrides, "class", class);
            push(&mut overrides, "fraction", fraction);
            Command::Finetune
        }
        Cmd::Eval { model, data, class, out, threshold } => {
            push(&mut overrides, "model", model);
            push(&mut overrides, "data", data);
            push(&mut overrides, "class", class);
            push(&mut overrides, "out", out);
            push(&mut overrides, "score_threshold", threshold);
            Command::Eval
        }
        Cmd::Rectify { model, image, out, quad, height, threshold } => {
            push(&mut overrides, "model", model);
            push(&mut overrides, "image", image);
            push(&mut overrides, "out", out);
            push(&mut overrides, "quad", quad);
            push(&mut overrides, "height", height);
            push(&mut overrides, "score_threshold", threshold);
            Command::Rectify
        }
        Cmd::Experiment { kind, data, out } => {
            push(&mut overrides, "data", data);
            push(&mut overrides, "out", out);
            Command::Experiment(if kind == "splits" { ExperimentKind::Splits } else { ExperimentKind::Generalization })
        }
    };
    for item in cli.common.set {
        let (k, v) = item.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {item:?}"))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let config = RunConfig::resolve(cli.common.config.as_deref(), &overrides, env_seed.as_deref())?;
    let outcome = execute(command, &config, &mut io::stdout()).with_context(|| format!("sdlnet {} failed", command.name()))?;
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { ERROR_EXIT_CODE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(ERROR_EXIT_CODE)
        }
    }
}
