//! `convexlab` command-line front end.
//!
//! Exit codes: 0 ok, 1 config or usage error, 2 transport or data integrity
//! error, 3 training failure, 4 verification failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use convexlab_core::Error;

use commands::Command;
use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => e.exit_code() as u8,
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "convexlab", version, about = "Risk-averting training, gradient checks and convexity scans")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// MNIST directory (falls back to $CONVEXLAB_DATA_DIR).
    #[arg(long, global = true)]
    data_dir: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    run_name: Option<String>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    #[arg(long)]
    dataset: Option<String>,
    /// Layer widths, e.g. 784,128,10.
    #[arg(long)]
    net: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    output: Option<String>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    lambda_lr: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    decay: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Download the MNIST IDX files.
    Fetch {
        #[arg(long)]
        base_url: Option<String>,
    },
    /// Train one strategy and report test metrics of the best epoch.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        lr: Option<String>,
        #[arg(long)]
        a: Option<String>,
    },
    /// Grid search over learning rate and penalty weight.
    Gridsearch {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Single learning rate instead of a grid.
        #[arg(long)]
        lr: Option<String>,
        /// Single penalty weight instead of a grid.
        #[arg(long)]
        a: Option<String>,
        #[arg(long)]
        grid_lr: Option<String>,
        #[arg(long)]
        grid_a: Option<String>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        configs: Option<String>,
        /// Fix lambda for every configuration.
        #[arg(long)]
        lambda: Option<String>,
        /// Fix p for every configuration.
        #[arg(long)]
        p: Option<String>,
        #[arg(long)]
        tolerance: Option<String>,
        #[arg(long)]
        lambda_tolerance: Option<String>,
    },
    /// Sample Hessian spectra of RAE over a parameter box.
    Scan {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long)]
        points: Option<String>,
        #[arg(long)]
        radius: Option<String>,
        /// `logistic`: one sigmoid unit on separable binary data.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Evaluate a saved model on the test split.
    Eval {
        #[command(flatten)]
        model_flags: ModelFlags,
        #[arg(long)]
        model: Option<String>,
    },
}

fn push(overrides: &mut Vec<(&'static str, String)>, key: &'static str, value: &Option<String>) {
    if let Some(v) = value {
        overrides.push((key, v.clone()));
    }
}

fn model_overrides(o: &mut Vec<(&'static str, String)>, m: &ModelFlags) {
    push(o, "dataset", &m.dataset);
    push(o, "net", &m.net);
    push(o, "activation", &m.activation);
    push(o, "output", &m.output);
}

fn train_overrides(o: &mut Vec<(&'static str, String)>, t: &TrainFlags) {
    push(o, "strategy", &t.strategy);
    push(o, "lambda_lr", &t.lambda_lr);
    push(o, "lambda", &t.lambda);
    push(o, "p", &t.p);
    push(o, "q", &t.q);
    push(o, "epochs", &t.epochs);
    push(o, "batch_size", &t.batch_size);
    push(o, "decay", &t.decay);
}

/// Config file, then `--set`, then dedicated flags.
fn resolve(command: &Cmd, common: &Common) -> Result<(Command, RunConfig), CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let mut o: Vec<(&'static str, String)> = Vec::new();
    if let Some(seed) = common.seed {
        o.push(("seed", seed.to_string()));
    }
    push(&mut o, "data_dir", &common.data_dir);
    push(&mut o, "out_dir", &common.out);
    push(&mut o, "run_name", &common.run_name);
    let which = match command {
        Cmd::Fetch { base_url } => {
            push(&mut o, "mnist_base_url", base_url);
            Command::Fetch
        }
        Cmd::Train { model, train, lr, a } => {
            model_overrides(&mut o, model);
            train_overrides(&mut o, train);
            push(&mut o, "lr", lr);
            push(&mut o, "a", a);
            Command::Train
        }
        Cmd::Gridsearch {
            model,
            train,
            lr,
            a,
            grid_lr,
            grid_a,
        } => {
            if lr.is_some() && grid_lr.is_some() {
                return Err(CliError::Usage("--lr and --grid-lr are mutually exclusive".into()));
            }
            if a.is_some() && grid_a.is_some() {
                return Err(CliError::Usage("--a and --grid-a are mutually exclusive".into()));
            }
            model_overrides(&mut o, model);
            train_overrides(&mut o, train);
            push(&mut o, "grid_lr", lr);
            push(&mut o, "grid_lr", grid_lr);
            push(&mut o, "grid_a", a);
            push(&mut o, "grid_a", grid_a);
            Command::Gridsearch
        }
        Cmd::Gradcheck {
            configs,
            lambda,
            p,
            tolerance,
            lambda_tolerance,
        } => {
            push(&mut o, "configs", configs);
            push(&mut o, "check_lambda", lambda);
            push(&mut o, "check_p", p);
            push(&mut o, "tolerance", tolerance);
            push(&mut o, "lambda_tolerance", lambda_tolerance);
            Command::Gradcheck
        }
        Cmd::Scan {
            model,
            lambdas,
            points,
            radius,
            preset,
        } => {
            match preset.as_deref() {
                None => {}
                Some("logistic") => {
                    o.push(("dataset", "binary".into()));
                    o.push(("net", "1,1".into()));
                }
                Some(other) => return Err(CliError::Usage(format!("unknown preset '{other}' (expected logistic)"))),
            }
            model_overrides(&mut o, model);
            push(&mut o, "lambdas", lambdas);
            push(&mut o, "points", points);
            push(&mut o, "box_radius", radius);
            Command::Scan
        }
        Cmd::Eval { model_flags, model } => {
            model_overrides(&mut o, model_flags);
            push(&mut o, "model", model);
            Command::Eval
        }
    };
    for (k, v) in o {
        cfg.set(k, &v)?;
    }
    Ok((which, cfg))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = resolve(&cli.command, &cli.common).and_then(|(command, cfg)| commands::run(command, &cfg));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
