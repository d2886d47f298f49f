//! Batch SGD with four criterion strategies, hold-out model selection and
//! grid search.
//!
//! - `ce`: plain mean cross-entropy (uniform sample weights).
//! - `nrae-fixed`: NRAE at a constant λ.
//! - `scheduled`: NRAE from a large λ that decays every epoch; switches for
//!   good to raw RAE once `λ^p · max c` fits under the overflow cap, after
//!   which λ is frozen.
//! - `anrat`: λ is a trained parameter of `NRAE + a λ^(-q)`.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::criteria::{
    self, check_rae_feasible, rae, rae_grad_weights, CriterionKind, CriterionParams, LossReport, PerSampleLosses,
    EXP_CAP, LAMBDA_MIN,
};
use crate::data::{batch_indices, SampleBatch, Targets};
use crate::error::{Error, Result};
use crate::network::{GradientBundle, MlpModel, OutputMode};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Ce,
    NraeFixed,
    Scheduled,
    Anrat,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ce => "ce",
            Strategy::NraeFixed => "nrae-fixed",
            Strategy::Scheduled => "scheduled",
            Strategy::Anrat => "anrat",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Strategy::Ce),
            "nrae-fixed" => Ok(Strategy::NraeFixed),
            "scheduled" => Ok(Strategy::Scheduled),
            "anrat" => Ok(Strategy::Anrat),
            other => Err(Error::invalid(format!(
                "unknown strategy '{other}' (expected ce|nrae-fixed|scheduled|anrat)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    /// Per-epoch multiplicative decay ρ ∈ (0, 1).
    pub decay: f64,
    /// Largest `λ^p · max c` at which raw RAE is used.
    pub switch_cap: f64,
    pub floor: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            decay: 0.8,
            switch_cap: EXP_CAP,
            floor: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagnancyParams {
    pub window: usize,
    pub min_rel_improvement: f64,
}

impl Default for StagnancyParams {
    fn default() -> Self {
        StagnancyParams {
            window: 5,
            min_rel_improvement: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub learning_rate: f64,
    /// λ step size; `None` means `0.01 · learning_rate`.
    pub lambda_lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial λ with p, a, q.
    pub criterion: CriterionParams,
    /// Present exactly when the strategy is `scheduled`.
    pub schedule: Option<ScheduleParams>,
    pub stagnancy: StagnancyParams,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(strategy: Strategy) -> Self {
        let lambda0 = if strategy == Strategy::Scheduled { 100.0 } else { 10.0 };
        TrainConfig {
            strategy,
            learning_rate: 0.1,
            lambda_lr: None,
            epochs: 20,
            batch_size: 100,
            criterion: CriterionParams {
                lambda: lambda0,
                p: 1,
                a: 0.1,
                q: 1,
            },
            schedule: (strategy == Strategy::Scheduled).then(ScheduleParams::default),
            stagnancy: StagnancyParams::default(),
            seed: 1,
        }
    }

    pub fn effective_lambda_lr(&self) -> f64 {
        self.lambda_lr.unwrap_or(0.01 * self.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        self.criterion.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(l) = self.lambda_lr {
            positive("lambda_lr", l)?;
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        match (self.strategy, &self.schedule) {
            (Strategy::Scheduled, Some(s)) => {
                if !(s.decay > 0.0 && s.decay < 1.0) {
                    return Err(Error::Config(format!("decay must lie in (0, 1), got {}", s.decay)));
                }
                positive("switch_cap", s.switch_cap)?;
                if !(s.floor >= LAMBDA_MIN) {
                    return Err(Error::Config(format!("lambda floor must be >= {LAMBDA_MIN}")));
                }
            }
            (Strategy::Scheduled, None) => return Err(Error::Config("scheduled strategy needs schedule parameters".into())),
            (_, Some(_)) => {
                return Err(Error::Config(format!(
                    "schedule parameters only apply to the scheduled strategy, not {}",
                    self.strategy
                )))
            }
            (_, None) => {}
        }
        if self.stagnancy.window < 2 {
            return Err(Error::Config("stagnancy window must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_criterion: f64,
    pub train_ce: f64,
    pub val_ce: f64,
    pub val_error_rate: f64,
    pub lambda: f64,
    pub switched_to_rae: bool,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &EpochRecord) -> bool {
        EpochRecord {
            wall_ms: 0,
            ..self.clone()
        } == EpochRecord {
            wall_ms: 0,
            ..other.clone()
        }
    }
}

/// Counters for the λ trajectory of an ANRAT run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LambdaStats {
    pub steps: usize,
    /// Steps where λ moved against `-sign(dl/dλ)` (other than by clamping).
    pub sign_mismatches: usize,
    pub min_lambda: f64,
    pub max_lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Epoch number (1-based) with the lowest validation CE; earliest on ties.
    pub best_epoch: usize,
    pub best_model: MlpModel,
    pub best_lambda: f64,
    pub final_model: MlpModel,
    pub final_lambda: f64,
    pub stagnant: bool,
    pub stagnant_epoch: Option<usize>,
    pub switch_epoch: Option<usize>,
    /// Cosine similarity between the RAE and NRAE weight gradients on the
    /// first training batch, measured when the scheduled run switched.
    pub switch_cosine: Option<f64>,
    /// RAE-phase batches that were over the cap and used NRAE instead.
    pub rae_fallback_batches: usize,
    pub lambda_stats: Option<LambdaStats>,
}

impl TrainReport {
    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_values(b))
            && TrainReport {
                records: vec![],
                ..self.clone()
            } == TrainReport {
                records: vec![],
                ..other.clone()
            }
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.records)
    }
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_criterion,train_ce,val_ce,val_error,lambda,switched,wall_ms\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_criterion,
            r.train_ce,
            r.val_ce,
            r.val_error_rate,
            r.lambda,
            r.switched_to_rae as u8,
            r.wall_ms
        )
        .unwrap();
    }
    out
}

/// Which criterion drives a weight step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActiveCriterion {
    Ce,
    Nrae,
    Rae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepIndex {
    pub epoch: usize,
    pub batch: usize,
}

fn diverged(at: StepIndex, reason: impl Into<String>) -> Error {
    Error::Diverged {
        epoch: at.epoch,
        batch: at.batch,
        reason: reason.into(),
    }
}

fn batch_losses(model: &MlpModel, batch: &SampleBatch, at: StepIndex) -> Result<(crate::network::ForwardPass, PerSampleLosses)> {
    let pass = model.forward(&batch.inputs)?;
    match model.losses(batch, &pass) {
        Ok(c) => Ok((pass, c)),
        Err(Error::NumericDomain(msg)) => Err(diverged(at, msg)),
        Err(e) => Err(e),
    }
}

fn check_step(report: &LossReport, grad: &GradientBundle, at: StepIndex) -> Result<()> {
    if !report.criterion_value.is_finite() {
        return Err(diverged(at, format!("criterion value {}", report.criterion_value)));
    }
    if !grad.is_finite() {
        return Err(diverged(at, "non-finite gradient"));
    }
    Ok(())
}

/// Outcome of one weight update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub max_loss: f64,
    /// True when an RAE step had to fall back to NRAE for this batch.
    pub rae_fallback: bool,
}

/// `W ← W - η Σ_i w_i ∇c_i` with the weights of the active criterion.
///
/// In RAE mode the raw gradient `Σ λ^p e^{λ^p c_i}/m ∇c_i` is used with the
/// step rescaled by `1/(λ^p RAE)`; a batch over the overflow cap falls back
/// to the NRAE step, which has the same direction.
pub fn sgd_step(
    model: &mut MlpModel,
    batch: &SampleBatch,
    criterion: ActiveCriterion,
    params: &CriterionParams,
    learning_rate: f64,
    at: StepIndex,
) -> Result<StepOutcome> {
    let (pass, losses) = batch_losses(model, batch, at)?;
    let max_loss = losses.max();
    let (report, grad, step, rae_fallback) = match criterion {
        ActiveCriterion::Ce | ActiveCriterion::Nrae => {
            let kind = if criterion == ActiveCriterion::Ce {
                CriterionKind::Ce
            } else {
                CriterionKind::Nrae
            };
            let report = criteria::evaluate(kind, &losses, params)?;
            let grad = model.weighted_backward(batch, &pass, &report.sample_weights)?;
            (report, grad, learning_rate, false)
        }
        ActiveCriterion::Rae => match rae_grad_weights(&losses, params) {
            Ok(raw) => {
                let value = rae(&losses, params)?;
                let report = LossReport {
                    criterion_value: value,
                    ce_value: losses.mean(),
                    sample_weights: criteria::sample_weights(&losses, params),
                    lambda_grad: None,
                };
                let grad = model.weighted_backward(batch, &pass, &raw)?;
                (report, grad, learning_rate / (params.scale() * value), false)
            }
            Err(Error::OverflowRisk { .. }) => {
                let report = criteria::evaluate(CriterionKind::Nrae, &losses, params)?;
                let grad = model.weighted_backward(batch, &pass, &report.sample_weights)?;
                (report, grad, learning_rate, true)
            }
            Err(e) => return Err(e),
        },
    };
    check_step(&report, &grad, at)?;
    model.add_scaled(-step, &grad.flat_grad)?;
    if !model.is_finite() {
        return Err(diverged(at, "non-finite parameters after update"));
    }
    Ok(StepOutcome {
        report,
        max_loss,
        rae_fallback,
    })
}

/// Joint update of the weights and λ, both from gradients at the
/// pre-update `(W, λ)`. λ is clamped to `LAMBDA_MIN` from below.
pub fn anrat_step(
    model: &mut MlpModel,
    lambda: &mut f64,
    batch: &SampleBatch,
    params: &CriterionParams,
    learning_rate: f64,
    lambda_lr: f64,
    at: StepIndex,
) -> Result<StepOutcome> {
    let current = CriterionParams {
        lambda: *lambda,
        ..*params
    };
    current.validate()?;
    let (pass, losses) = batch_losses(model, batch, at)?;
    let report = criteria::evaluate(CriterionKind::Anrat, &losses, &current)?;
    let mut grad = model.weighted_backward(batch, &pass, &report.sample_weights)?;
    grad.lambda_grad = report.lambda_grad;
    check_step(&report, &grad, at)?;
    let g_lambda = report.lambda_grad.expect("anrat reports a lambda gradient");
    model.add_scaled(-learning_rate, &grad.flat_grad)?;
    if !model.is_finite() {
        return Err(diverged(at, "non-finite parameters after update"));
    }
    *lambda = (*lambda - lambda_lr * g_lambda).max(LAMBDA_MIN);
    Ok(StepOutcome {
        max_loss: losses.max(),
        report,
        rae_fallback: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub lambda: f64,
    pub switched: bool,
}

/// End-of-epoch rule for the scheduled strategy: switch (and freeze λ) as
/// soon as `λ^p · max c ≤ cap`, otherwise decay λ towards the floor.
pub fn scheduled_update(
    state: ScheduleState,
    max_observed_loss: f64,
    p: u32,
    schedule: &ScheduleParams,
) -> (ScheduleState, ActiveCriterion) {
    if state.switched {
        return (state, ActiveCriterion::Rae);
    }
    if state.lambda.powi(p as i32) * max_observed_loss <= schedule.switch_cap {
        return (
            ScheduleState {
                lambda: state.lambda,
                switched: true,
            },
            ActiveCriterion::Rae,
        );
    }
    let lambda = (state.lambda * schedule.decay).max(schedule.floor);
    (
        ScheduleState {
            lambda,
            switched: false,
        },
        ActiveCriterion::Nrae,
    )
}

/// True when validation CE failed to improve by `min_rel_improvement`
/// (relative) over the last `window` epochs: the best value among the
/// newest `window - 1` records is compared with the oldest record of the
/// window. Fewer than `window` records never count as stagnant.
pub fn detect_stagnancy(records: &[EpochRecord], window: usize, min_rel_improvement: f64) -> bool {
    if window < 2 || records.len() < window {
        return false;
    }
    let tail = &records[records.len() - window..];
    let base = tail[0].val_ce;
    let best_later = tail[1..].iter().map(|r| r.val_ce).fold(f64::INFINITY, f64::min);
    if !base.is_finite() || !best_later.is_finite() {
        return true;
    }
    (base - best_later) / base.abs().max(f64::MIN_POSITIVE) < min_rel_improvement
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_ce: f64,
    /// Misclassification rate for classifiers, mean squared error for
    /// regression.
    pub error_rate: f64,
}

const EVAL_CHUNK: usize = 1000;

/// Mean base loss and error rate; argmax ties go to the lowest class index.
pub fn evaluate(model: &MlpModel, dataset: &SampleBatch) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut loss_sum = 0.0;
    let mut errors = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = dataset.select(chunk);
        let pass = model.forward(&batch.inputs)?;
        let losses = model.losses(&batch, &pass)?;
        loss_sum += losses.as_slice().iter().sum::<f64>();
        if let Targets::Classes { labels, .. } = &batch.targets {
            for (row, &label) in pass.output().outer_iter().zip(labels) {
                let predicted = match model.output_mode() {
                    OutputMode::SigmoidBinaryCe => (row[0] > 0.5) as usize,
                    _ => argmax(row.iter().copied()),
                };
                errors += (predicted != label) as usize;
            }
        }
    }
    let n = dataset.len() as f64;
    let mean_ce = loss_sum / n;
    let error_rate = if model.output_mode().is_classification() {
        errors as f64 / n
    } else {
        mean_ce
    };
    Ok(Evaluation { mean_ce, error_rate })
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Raw RAE gradients can reach 1e200 and beyond, so both vectors are
/// scaled to unit max-norm before any products are formed.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let unit = |v: &[f64]| {
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        v.iter().map(|x| x / scale).collect::<Vec<_>>()
    };
    let (a, b) = (unit(a), unit(b));
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Cosine similarity between the raw RAE gradient and the NRAE gradient on
/// one batch. `None` when RAE is infeasible there or either gradient is zero.
pub fn rae_nrae_gradient_cosine(model: &MlpModel, batch: &SampleBatch, params: &CriterionParams) -> Result<Option<f64>> {
    let pass = model.forward(&batch.inputs)?;
    let losses = model.losses(batch, &pass)?;
    if check_rae_feasible(&losses, params.scale()).is_err() {
        return Ok(None);
    }
    let raw = rae_grad_weights(&losses, params)?;
    let g_rae = model.weighted_backward(batch, &pass, &raw)?.flat_grad;
    let g_nrae = model
        .weighted_backward(batch, &pass, &criteria::sample_weights(&losses, params))?
        .flat_grad;
    let c = cosine(&g_rae, &g_nrae);
    Ok(c.is_finite().then_some(c))
}

/// One full training run. The returned best model is the snapshot at the
/// epoch with the lowest validation CE.
pub fn train(config: &TrainConfig, initial: &MlpModel, train_set: &SampleBatch, val_set: &SampleBatch) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    let mut model = initial.clone();
    let mut lambda = config.criterion.lambda;
    let mut schedule_state = ScheduleState {
        lambda,
        switched: false,
    };
    let mut active = match config.strategy {
        Strategy::Ce => ActiveCriterion::Ce,
        _ => ActiveCriterion::Nrae,
    };
    let lambda_lr = config.effective_lambda_lr();
    let mut shuffle = stream_rng(config.seed, Stream::Shuffle);
    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, MlpModel, f64)> = None;
    let mut stagnant_epoch = None;
    let mut switch_epoch = None;
    let mut switch_cosine = None;
    let mut rae_fallback_batches = 0;
    let mut lambda_stats = (config.strategy == Strategy::Anrat).then(|| LambdaStats {
        min_lambda: lambda,
        max_lambda: lambda,
        ..LambdaStats::default()
    });

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let epoch_seed: u64 = shuffle.random();
        let mut criterion_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut max_loss = 0.0f64;
        for (b, idx) in batch_indices(train_set.len(), config.batch_size, epoch_seed)?.iter().enumerate() {
            let batch = train_set.select(idx);
            let at = StepIndex { epoch, batch: b };
            let params = CriterionParams {
                lambda,
                ..config.criterion
            };
            let outcome = if config.strategy == Strategy::Anrat {
                let before = lambda;
                let out = anrat_step(&mut model, &mut lambda, &batch, &params, config.learning_rate, lambda_lr, at)?;
                if let Some(stats) = lambda_stats.as_mut() {
                    let g = out.report.lambda_grad.unwrap_or(0.0);
                    let moved = lambda - before;
                    let clamped = lambda == LAMBDA_MIN && g > 0.0;
                    if !clamped && moved != 0.0 && moved.signum() == g.signum() {
                        stats.sign_mismatches += 1;
                    }
                    stats.steps += 1;
                    stats.min_lambda = stats.min_lambda.min(lambda);
                    stats.max_lambda = stats.max_lambda.max(lambda);
                }
                out
            } else {
                sgd_step(&mut model, &batch, active, &params, config.learning_rate, at)?
            };
            rae_fallback_batches += outcome.rae_fallback as usize;
            let m = batch.len() as f64;
            criterion_sum += outcome.report.criterion_value * m;
            ce_sum += outcome.report.ce_value * m;
            max_loss = max_loss.max(outcome.max_loss);
        }

        if let (Strategy::Scheduled, Some(schedule)) = (config.strategy, &config.schedule) {
            let (next, next_active) = scheduled_update(schedule_state, max_loss, config.criterion.p, schedule);
            if next.switched && !schedule_state.switched {
                switch_epoch = Some(epoch);
                let probe_len = config.batch_size.min(train_set.len());
                let probe = train_set.select(&(0..probe_len).collect::<Vec<_>>());
                let params = CriterionParams {
                    lambda: next.lambda,
                    ..config.criterion
                };
                switch_cosine = rae_nrae_gradient_cosine(&model, &probe, &params)?;
            }
            schedule_state = next;
            active = next_active;
            lambda = next.lambda;
        }

        let val_at = StepIndex {
            epoch,
            batch: usize::MAX,
        };
        let val = match evaluate(&model, val_set) {
            Ok(v) if v.mean_ce.is_finite() => v,
            Ok(_) => return Err(diverged(val_at, "non-finite validation loss")),
            Err(Error::NumericDomain(msg)) => return Err(diverged(val_at, msg)),
            Err(e) => return Err(e),
        };
        let n = train_set.len() as f64;
        records.push(EpochRecord {
            epoch,
            train_criterion: criterion_sum / n,
            train_ce: ce_sum / n,
            val_ce: val.mean_ce,
            val_error_rate: val.error_rate,
            lambda,
            switched_to_rae: schedule_state.switched,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if best.as_ref().is_none_or(|(_, v, _, _)| val.mean_ce < *v) {
            best = Some((epoch, val.mean_ce, model.clone(), lambda));
        }
        if stagnant_epoch.is_none()
            && detect_stagnancy(&records, config.stagnancy.window, config.stagnancy.min_rel_improvement)
        {
            stagnant_epoch = Some(epoch);
        }
    }

    let (best_epoch, _, best_model, best_lambda) = best.expect("at least one epoch");
    Ok(TrainReport {
        records,
        best_epoch,
        best_model,
        best_lambda,
        final_model: model,
        final_lambda: lambda,
        stagnant: stagnant_epoch.is_some(),
        stagnant_epoch,
        switch_epoch,
        switch_cosine,
        rae_fallback_batches,
        lambda_stats,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub penalty_weights: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            learning_rates: vec![1.0, 0.5, 0.1],
            penalty_weights: vec![1.0, 0.1, 0.001],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Ok,
    Diverged(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRun {
    pub learning_rate: f64,
    pub a: f64,
    pub report: Option<TrainReport>,
    pub status: RunStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    /// Runs in grid order (learning rate major).
    pub runs: Vec<GridRun>,
    /// Indices into `runs`: viable runs by best validation CE (grid order on
    /// ties), then diverged runs in grid order.
    pub ranking: Vec<usize>,
}

impl GridResult {
    pub fn best(&self) -> &GridRun {
        &self.runs[self.ranking[0]]
    }

    pub fn best_report(&self) -> &TrainReport {
        self.best().report.as_ref().expect("best run is viable")
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("lr,a,best_val_ce,best_val_error,status\n");
        for &i in &self.ranking {
            let run = &self.runs[i];
            match (&run.report, &run.status) {
                (Some(r), RunStatus::Ok) => {
                    let best = r.best_record();
                    writeln!(out, "{},{},{},{},ok", run.learning_rate, run.a, best.val_ce, best.val_error_rate).unwrap();
                }
                _ => writeln!(out, "{},{},,,diverged", run.learning_rate, run.a).unwrap(),
            }
        }
        out
    }
}

/// Trains every (learning rate, penalty weight) pair from the same initial
/// model and ranks the runs by their best validation CE. Diverged runs are
/// kept in the result but never ranked ahead of a viable one.
pub fn grid_search(
    base: &TrainConfig,
    grid: &GridSpec,
    initial: &MlpModel,
    train_set: &SampleBatch,
    val_set: &SampleBatch,
) -> Result<GridResult> {
    if grid.learning_rates.is_empty() || grid.penalty_weights.is_empty() {
        return Err(Error::Config("grid search needs non-empty learning-rate and penalty grids".into()));
    }
    let mut runs = Vec::with_capacity(grid.learning_rates.len() * grid.penalty_weights.len());
    for &lr in &grid.learning_rates {
        for &a in &grid.penalty_weights {
            let mut config = base.clone();
            config.learning_rate = lr;
            config.criterion.a = a;
            let run = match train(&config, initial, train_set, val_set) {
                Ok(report) => GridRun {
                    learning_rate: lr,
                    a,
                    report: Some(report),
                    status: RunStatus::Ok,
                },
                Err(e @ Error::Diverged { .. }) => GridRun {
                    learning_rate: lr,
                    a,
                    report: None,
                    status: RunStatus::Diverged(e.to_string()),
                },
                Err(e) => return Err(e),
            };
            runs.push(run);
        }
    }
    let score = |run: &GridRun| run.report.as_ref().map(|r| r.best_record().val_ce);
    let mut ranking: Vec<usize> = (0..runs.len()).filter(|&i| score(&runs[i]).is_some()).collect();
    if ranking.is_empty() {
        return Err(Error::NoViableModel { runs: runs.len() });
    }
    ranking.sort_by(|&i, &j| score(&runs[i]).unwrap().total_cmp(&score(&runs[j]).unwrap()));
    ranking.extend((0..runs.len()).filter(|&i| score(&runs[i]).is_none()));
    Ok(GridResult { runs, ranking })
}
