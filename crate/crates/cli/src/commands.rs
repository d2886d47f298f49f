//! Command implementations. Each takes a resolved [`RunConfig`] and writes
//! its outputs under `out_dir` with the `run_name` prefix.

use std::fs;
use std::path::{Path, PathBuf};

use convexlab_core::convexity::{scan_convexity, ScanOptions};
use convexlab_core::criteria::CriterionParams;
use convexlab_core::data::{
    fetch_mnist, split, synthetic_binary, synthetic_regression, Mnist, SampleBatch, SplitSpec, Splits, SyntheticFn,
    Targets,
};
use convexlab_core::gradcheck::{gradcheck, GradcheckOptions};
use convexlab_core::network::{Activation, MlpModel, OutputMode};
use convexlab_core::rng::derived_seeds;
use convexlab_core::trainer::{
    evaluate, grid_search, train, Evaluation, GridSpec, ScheduleParams, StagnancyParams, Strategy, TrainConfig,
};
use convexlab_core::Error;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Fetch,
    Train,
    Gridsearch,
    Gradcheck,
    Scan,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fetch => "fetch",
            Command::Train => "train",
            Command::Gridsearch => "gridsearch",
            Command::Gradcheck => "gradcheck",
            Command::Scan => "scan",
            Command::Eval => "eval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic(SyntheticFn),
    Binary,
}

pub fn dataset_kind(cfg: &RunConfig, command: Command) -> Result<DatasetKind, Error> {
    match cfg.raw("dataset")? {
        "auto" if command == Command::Scan => Ok(DatasetKind::Synthetic(SyntheticFn::Sine)),
        "auto" | "mnist" => Ok(DatasetKind::Mnist),
        "binary" => Ok(DatasetKind::Binary),
        other => other
            .parse()
            .map(DatasetKind::Synthetic)
            .map_err(|_| Error::Config(format!("unknown dataset '{other}' (expected mnist|sine|peak|binary)"))),
    }
}

fn output_mode(cfg: &RunConfig, kind: DatasetKind) -> Result<OutputMode, Error> {
    match cfg.raw("output")? {
        "auto" => Ok(match kind {
            DatasetKind::Mnist => OutputMode::SoftmaxCe,
            DatasetKind::Synthetic(_) => OutputMode::IdentitySquared,
            DatasetKind::Binary => OutputMode::SigmoidBinaryCe,
        }),
        _ => cfg.get("output"),
    }
}

pub fn load_splits(cfg: &RunConfig, command: Command) -> Result<Splits, Error> {
    let seed: u64 = cfg.get("seed")?;
    match dataset_kind(cfg, command)? {
        DatasetKind::Mnist => {
            let dir = cfg.data_dir()?;
            let mnist = Mnist::load(&dir).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!(
                    "MNIST not found in {} ({io}); run `convexlab fetch` first",
                    dir.display()
                )),
                other => other,
            })?;
            split(
                &mnist.train,
                &mnist.test,
                &SplitSpec {
                    train_count: cfg.get("train_count")?,
                    val_count: cfg.get("val_count")?,
                    test_count: cfg.get("test_count")?,
                    shuffle_seed: seed,
                },
            )
        }
        kind => {
            let m: usize = cfg.get("synthetic_count")?;
            let seeds = derived_seeds(seed, 3);
            let make = |s: u64| -> Result<SampleBatch, Error> {
                match kind {
                    DatasetKind::Synthetic(f) => synthetic_regression(f, m, cfg.get("noise_sd")?, s),
                    _ => synthetic_binary(m, cfg.get("margin")?, s),
                }
            };
            Ok(Splits {
                train: make(seeds[0])?,
                val: make(seeds[1])?,
                test: make(seeds[2])?,
            })
        }
    }
}

pub struct Architecture {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub output: OutputMode,
}

pub fn architecture(cfg: &RunConfig, command: Command) -> Result<Architecture, Error> {
    let kind = dataset_kind(cfg, command)?;
    Ok(Architecture {
        dims: cfg.get_list("net")?,
        activation: cfg.get("activation")?,
        output: output_mode(cfg, kind)?,
    })
}

fn check_fits(model: &MlpModel, data: &SampleBatch) -> Result<(), Error> {
    if model.dims()[0] != data.width() {
        return Err(Error::Config(format!(
            "net input width {} does not match the data width {}",
            model.dims()[0],
            data.width()
        )));
    }
    if let Targets::Classes { num_classes, .. } = &data.targets {
        if model.output_mode() == OutputMode::SoftmaxCe && model.output_width() != *num_classes {
            return Err(Error::Config(format!(
                "net output width {} does not match {num_classes} classes",
                model.output_width()
            )));
        }
    }
    Ok(())
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig, Error> {
    let strategy: Strategy = cfg.get("strategy")?;
    let mut tc = TrainConfig::new(strategy);
    tc.learning_rate = cfg.get("lr")?;
    tc.lambda_lr = cfg.get_or("lambda_lr", "auto")?;
    tc.epochs = cfg.get("epochs")?;
    tc.batch_size = cfg.get("batch_size")?;
    tc.criterion = CriterionParams {
        lambda: cfg.get_or("lambda", "auto")?.unwrap_or(tc.criterion.lambda),
        p: cfg.get("p")?,
        a: cfg.get("a")?,
        q: cfg.get("q")?,
    };
    tc.schedule = (strategy == Strategy::Scheduled)
        .then(|| -> Result<ScheduleParams, Error> {
            Ok(ScheduleParams {
                decay: cfg.get("decay")?,
                switch_cap: cfg.get("switch_cap")?,
                ..ScheduleParams::default()
            })
        })
        .transpose()?;
    tc.stagnancy = StagnancyParams {
        window: cfg.get("stagnancy_window")?,
        min_rel_improvement: cfg.get("stagnancy_min_rel")?,
    };
    tc.seed = cfg.get("seed")?;
    tc.validate()?;
    Ok(tc)
}

struct Outputs {
    dir: PathBuf,
    run: String,
}

impl Outputs {
    fn new(cfg: &RunConfig) -> Result<Self, Error> {
        let dir = PathBuf::from(cfg.raw("out_dir")?);
        fs::create_dir_all(&dir)?;
        Ok(Outputs {
            dir,
            run: cfg.raw("run_name")?.to_string(),
        })
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}.{suffix}", self.run))
    }

    fn write(&self, suffix: &str, text: &str) -> Result<PathBuf, Error> {
        let path = self.path(suffix);
        fs::write(&path, text)?;
        Ok(path)
    }
}

fn report_test(label: &str, e: &Evaluation) {
    println!("{label}: test_ce={:.6} test_error={:.6}", e.mean_ce, e.error_rate);
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    match command {
        Command::Fetch => cmd_fetch(cfg),
        Command::Train => cmd_train(cfg),
        Command::Gridsearch => cmd_gridsearch(cfg),
        Command::Gradcheck => cmd_gradcheck(cfg),
        Command::Scan => cmd_scan(cfg),
        Command::Eval => cmd_eval(cfg),
    }
}

fn cmd_fetch(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg.data_dir()?;
    let outcome = fetch_mnist(cfg.raw("mnist_base_url")?, &dir)?;
    let p = &outcome.paths;
    for path in [&p.train_images, &p.train_labels, &p.test_images, &p.test_labels] {
        println!("{}", path.display());
    }
    if outcome.downloaded == 0 {
        println!("cached: all 4 files already present in {}", dir.display());
    } else {
        println!("downloaded {} file(s) into {}", outcome.downloaded, dir.display());
    }
    Ok(())
}

fn initial_model(cfg: &RunConfig, command: Command, splits: &Splits) -> Result<MlpModel, Error> {
    let arch = architecture(cfg, command)?;
    let model = MlpModel::init(&arch.dims, arch.activation, arch.output, cfg.get("seed")?)?;
    check_fits(&model, &splits.train)?;
    Ok(model)
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = train_config(cfg)?;
    let splits = load_splits(cfg, Command::Train)?;
    let model = initial_model(cfg, Command::Train, &splits)?;
    let out = Outputs::new(cfg)?;
    out.write("resolved.cfg", &cfg.resolved_text())?;
    let report = train(&tc, &model, &splits.train, &splits.val)?;
    let metrics = out.write("metrics.csv", &report.metrics_csv())?;
    let model_path = out.write("model", &report.best_model.serialize())?;
    let best = report.best_record();
    println!(
        "strategy={} best_epoch={} val_ce={:.6} val_error={:.6} lambda={}",
        tc.strategy, report.best_epoch, best.val_ce, best.val_error_rate, report.best_lambda
    );
    if let Some(e) = report.stagnant_epoch {
        println!("stagnant: validation CE stalled by epoch {e}");
    }
    if let Some(e) = report.switch_epoch {
        println!(
            "switched to RAE after epoch {e} (gradient cosine {})",
            report.switch_cosine.map_or("n/a".into(), |c| format!("{c:.12}"))
        );
    }
    report_test("best model", &evaluate(&report.best_model, &splits.test)?);
    println!("wrote {} and {}", metrics.display(), model_path.display());
    Ok(())
}

fn cmd_gridsearch(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = train_config(cfg)?;
    let grid = GridSpec {
        learning_rates: cfg.get_list("grid_lr")?,
        penalty_weights: cfg.get_list("grid_a")?,
    };
    let splits = load_splits(cfg, Command::Gridsearch)?;
    let model = initial_model(cfg, Command::Gridsearch, &splits)?;
    let out = Outputs::new(cfg)?;
    out.write("resolved.cfg", &cfg.resolved_text())?;
    let result = grid_search(&tc, &grid, &model, &splits.train, &splits.val)?;
    let summary = out.write("grid.csv", &result.summary_csv())?;
    let best = result.best();
    let report = result.best_report();
    out.write("metrics.csv", &report.metrics_csv())?;
    out.write("model", &report.best_model.serialize())?;
    println!(
        "best: lr={} a={} val_ce={:.6} ({} of {} runs viable)",
        best.learning_rate,
        best.a,
        report.best_record().val_ce,
        result.runs.iter().filter(|r| r.report.is_some()).count(),
        result.runs.len()
    );
    report_test("best model", &evaluate(&report.best_model, &splits.test)?);
    println!("wrote {}", summary.display());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let opts = GradcheckOptions {
        configs: cfg.get("configs")?,
        seed: cfg.get("seed")?,
        lambda: cfg.get_or("check_lambda", "random")?,
        p: cfg.get_or("check_p", "random")?,
        ..GradcheckOptions::default()
    };
    let tol: f64 = cfg.get("tolerance")?;
    let lambda_tol: f64 = cfg.get("lambda_tolerance")?;
    let out = Outputs::new(cfg)?;
    out.write("resolved.cfg", &cfg.resolved_text())?;
    let report = gradcheck(&opts)?;
    print!("{}", report.summary());
    println!(
        "{} configurations, {} RAE checks skipped (overflow cap), {} ms",
        report.cases.len(),
        report.rae_skipped,
        report.elapsed_ms
    );
    let failures: Vec<_> = report
        .results
        .iter()
        .filter(|r| !(r.weight_error < tol) || r.lambda_error.is_some_and(|e| !(e < lambda_tol)))
        .collect();
    if failures.is_empty() {
        println!("all criteria within tolerance (weights {tol:e}, lambda {lambda_tol:e})");
        return Ok(());
    }
    for f in failures.iter().take(10) {
        let case = &report.cases[f.case_index];
        eprintln!(
            "FAIL {} config {}: net {:?} {} {} lambda={} p={} a={} q={} batch={} weight_err={:.3e} lambda_err={}",
            f.kind.name(),
            f.case_index,
            case.dims,
            case.activation,
            case.output_mode,
            case.params.lambda,
            case.params.p,
            case.params.a,
            case.params.q,
            case.batch_size,
            f.weight_error,
            f.lambda_error.map_or("-".into(), |e| format!("{e:.3e}"))
        );
    }
    Err(CliError::Verification(format!(
        "{} of {} gradient checks exceed tolerance",
        failures.len(),
        report.results.len()
    )))
}

fn cmd_scan(cfg: &RunConfig) -> Result<(), CliError> {
    let arch = architecture(cfg, Command::Scan)?;
    let template = MlpModel::zeros(&arch.dims, arch.activation, arch.output)?;
    let opts = ScanOptions {
        lambdas: cfg.get_list("lambdas")?,
        num_points: cfg.get("points")?,
        box_radius: cfg.get("box_radius")?,
        seed: cfg.get("seed")?,
        p: cfg.get("p")?,
        fd_step: cfg.get("fd_step")?,
        allow_nrae_fallback: cfg.get("nrae_fallback")?,
    };
    // Cheap checks first so a bad request fails before any data work.
    if opts.lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("scan lambdas must be strictly ascending, got {:?}", opts.lambdas)).into());
    }
    let data = load_splits(cfg, Command::Scan)?.train;
    check_fits(&template, &data)?;
    let out = Outputs::new(cfg)?;
    out.write("resolved.cfg", &cfg.resolved_text())?;
    let scan = scan_convexity(&template, &data, &opts)?;
    out.write("scan_points.csv", &scan.points_csv())?;
    let summary = out.write("scan_summary.csv", &scan.summary_csv()?)?;
    for (lambda, f) in scan.lambdas.iter().zip(scan.psd_fraction()?) {
        println!("lambda={lambda} psd_fraction={f:.4}");
    }
    let base = scan.base_psd.iter().filter(|&&b| b).count();
    println!(
        "base-loss PSD points: {base} of {}; criterion-not-PSD violations: {} ({:.2}%)",
        scan.points.len(),
        scan.base_psd_violations().len(),
        100.0 * scan.base_psd_violation_rate()
    );
    println!("wrote {}", summary.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let path = PathBuf::from(cfg.raw("model")?);
    let model = load_model(&path)?;
    let splits = load_splits(cfg, Command::Eval)?;
    check_fits(&model, &splits.test)?;
    report_test(&path.display().to_string(), &evaluate(&model, &splits.test)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<MlpModel, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read model {}: {e}", path.display())))?;
    MlpModel::deserialize(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
