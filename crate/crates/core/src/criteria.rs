//! Loss criteria over per-sample losses.
//!
//! Every criterion here is a function of the vector of per-sample base losses
//! `c_i >= 0` (cross-entropy or squared error) and the convexity index `λ`:
//!
//! ```text
//! RAE   = (1/m) Σ exp(λ^p c_i)
//! NRAE  = (1/λ^p) log RAE
//! ANRAT = NRAE + a λ^(-q)
//! ```
//!
//! The gradient of NRAE with respect to the losses is the softmax of
//! `λ^p c`, so the gradient with respect to the network weights is
//! `Σ_i w_i ∇c_i`. The network only ever needs those weights.
//!
//! NRAE is evaluated through a shifted log-mean-exp so it is finite for any
//! magnitude of `λ^p c_i`, and accurate as `λ^p → 0` where it tends to the
//! plain mean.

use crate::error::{Error, Result};

/// Lower clamp for the convexity index.
pub const LAMBDA_MIN: f64 = 1e-3;

/// Largest `λ^p · max c_i` for which raw RAE may be evaluated.
pub const EXP_CAP: f64 = 500.0;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriterionParams {
    pub lambda: f64,
    pub p: u32,
    pub a: f64,
    pub q: u32,
}

impl CriterionParams {
    pub fn new(lambda: f64, p: u32, a: f64, q: u32) -> Result<Self> {
        let params = CriterionParams { lambda, p, a, q };
        params.validate()?;
        Ok(params)
    }

    /// NRAE-only parameters (no penalty).
    pub fn with_lambda(lambda: f64, p: u32) -> Result<Self> {
        Self::new(lambda, p, 0.0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= LAMBDA_MIN) {
            return Err(Error::invalid(format!(
                "lambda must be finite and >= {LAMBDA_MIN}, got {}",
                self.lambda
            )));
        }
        if self.p == 0 || self.q == 0 {
            return Err(Error::invalid("p and q must be >= 1"));
        }
        if !(self.a.is_finite() && self.a >= 0.0) {
            return Err(Error::invalid(format!("penalty weight a must be >= 0, got {}", self.a)));
        }
        Ok(())
    }

    /// `λ^p`, the factor applied to every per-sample loss.
    pub fn scale(&self) -> f64 {
        self.lambda.powi(self.p as i32)
    }
}

/// Non-empty vector of finite, nonnegative per-sample losses.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleLosses(Vec<f64>);

impl PerSampleLosses {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("loss vector must be non-empty"));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::NumericDomain(format!(
                "per-sample loss {i} is {v}, expected finite and >= 0"
            )));
        }
        Ok(PerSampleLosses(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    BinaryCe,
    CategoricalCe,
    Squared,
}

#[derive(Clone, Copy, Debug)]
pub enum Prediction<'a> {
    Probabilities(&'a [f64]),
    Scalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Label(f64),
    Real(f64),
}

fn clamp_prob(f: f64) -> f64 {
    f.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Base loss `c_i` for a single sample.
pub fn per_sample_loss(prediction: Prediction<'_>, target: Target, mode: LossMode) -> Result<f64> {
    match (mode, prediction, target) {
        (LossMode::BinaryCe, Prediction::Scalar(f), Target::Label(y)) => {
            if !f.is_finite() {
                return Err(Error::NumericDomain(format!("prediction {f} is not finite")));
            }
            if !(0.0..=1.0).contains(&f) || !(0.0..=1.0).contains(&y) {
                return Err(Error::invalid("binary prediction and label must lie in [0, 1]"));
            }
            let f = clamp_prob(f);
            Ok((-(y * f.ln() + (1.0 - y) * (1.0 - f).ln())).max(0.0))
        }
        (LossMode::CategoricalCe, Prediction::Probabilities(probs), Target::Class(k)) => {
            if probs.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericDomain("prediction contains non-finite values".into()));
            }
            if k >= probs.len() {
                return Err(Error::invalid(format!(
                    "class {k} out of range for {} outputs",
                    probs.len()
                )));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-6 || probs.iter().any(|v| *v < 0.0) {
                return Err(Error::invalid(format!(
                    "categorical prediction must be a probability vector (sum {total})"
                )));
            }
            Ok(-clamp_prob(probs[k]).ln())
        }
        (LossMode::Squared, Prediction::Scalar(f), Target::Real(y)) => {
            if !f.is_finite() || !y.is_finite() {
                return Err(Error::NumericDomain(format!("non-finite regression pair ({f}, {y})")));
            }
            Ok((f - y) * (f - y))
        }
        (mode, _, target) => Err(Error::invalid(format!(
            "target {target:?} / prediction kind do not match mode {mode:?}"
        ))),
    }
}

/// `(max, log mean exp(s (c_i - max)))`, accurate for tiny and huge `s`.
fn shifted_log_mean_exp(c: &[f64], s: f64) -> (f64, f64) {
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m = c.len() as f64;
    let (mut sum, mut sum_m1) = (0.0, 0.0);
    for &ci in c {
        let t = s * (ci - max);
        sum += t.exp();
        sum_m1 += t.exp_m1();
    }
    // log1p keeps full precision when every term is near exp(0); the plain
    // log is better once the mean has collapsed towards 1/m.
    let mean_m1 = sum_m1 / m;
    let log_mean = if mean_m1 > -0.5 {
        mean_m1.ln_1p()
    } else {
        sum.ln() - m.ln()
    };
    (max, log_mean)
}

/// Raw risk-averting error `(1/m) Σ exp(λ^p c_i)`.
pub fn rae(losses: &PerSampleLosses, params: &CriterionParams) -> Result<f64> {
    let s = params.scale();
    check_rae_feasible(losses, s)?;
    let c = losses.as_slice();
    Ok(c.iter().map(|ci| (s * ci).exp()).sum::<f64>() / c.len() as f64)
}

pub fn check_rae_feasible(losses: &PerSampleLosses, scale: f64) -> Result<()> {
    let scaled = scale * losses.max();
    if scaled > EXP_CAP || !scaled.is_finite() {
        return Err(Error::OverflowRisk { scaled, cap: EXP_CAP });
    }
    Ok(())
}

/// Normalized RAE `(1/λ^p) log RAE`, always finite.
pub fn nrae(losses: &PerSampleLosses, params: &CriterionParams) -> f64 {
    let s = params.scale();
    let (max, log_mean) = shifted_log_mean_exp(losses.as_slice(), s);
    // mean(c) <= NRAE <= max(c) holds exactly; clamp away round-off.
    (max + log_mean / s).clamp(losses.mean().min(max), max)
}

/// Softmax of `λ^p c`: the per-sample gradient weights of NRAE.
pub fn sample_weights(losses: &PerSampleLosses, params: &CriterionParams) -> Vec<f64> {
    softmax_scaled(losses.as_slice(), params.scale())
}

fn softmax_scaled(c: &[f64], s: f64) -> Vec<f64> {
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = c.iter().map(|ci| (s * (ci - max)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Per-sample weights of the raw RAE gradient, `λ^p exp(λ^p c_i) / m`.
///
/// These are unnormalized and scale with RAE itself; the sum equals
/// `λ^p · RAE`.
pub fn rae_grad_weights(losses: &PerSampleLosses, params: &CriterionParams) -> Result<Vec<f64>> {
    let s = params.scale();
    check_rae_feasible(losses, s)?;
    let m = losses.len() as f64;
    Ok(losses.as_slice().iter().map(|ci| s * (s * ci).exp() / m).collect())
}

/// ANRAT objective `NRAE + a λ^(-q)`.
pub fn anrat_loss(losses: &PerSampleLosses, params: &CriterionParams) -> f64 {
    nrae(losses, params) + penalty(params)
}

fn penalty(params: &CriterionParams) -> f64 {
    params.a * params.lambda.powi(-(params.q as i32))
}

/// Exact `∂/∂λ` of [`anrat_loss`].
///
/// `(p/λ)(Σ w_i c_i - NRAE) - a q λ^(-q-1)`; the first term is the gap
/// between the exponentially weighted mean loss and NRAE, never negative.
pub fn anrat_grad_lambda(losses: &PerSampleLosses, params: &CriterionParams) -> f64 {
    let s = params.scale();
    let c = losses.as_slice();
    let (max, log_mean) = shifted_log_mean_exp(c, s);
    let w = softmax_scaled(c, s);
    // Both terms relative to max so the difference does not cancel against it.
    let weighted: f64 = w.iter().zip(c).map(|(wi, ci)| wi * (ci - max)).sum();
    let spread = (weighted - log_mean / s).max(0.0);
    let p = params.p as f64;
    let q = params.q as i32;
    p / params.lambda * spread - params.a * params.q as f64 * params.lambda.powi(-q - 1)
}

/// Cheap λ-gradient surrogate `(p/λ)(mean c - NRAE)`.
///
/// Diagnostic only: it is never positive and disagrees in sign with the
/// exact gradient's loss-spread term, so training always uses
/// [`anrat_grad_lambda`].
pub fn approx_grad_lambda(losses: &PerSampleLosses, params: &CriterionParams) -> f64 {
    params.p as f64 / params.lambda * (losses.mean() - nrae(losses, params))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CriterionKind {
    Ce,
    Rae,
    Nrae,
    Anrat,
}

impl CriterionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CriterionKind::Ce => "ce",
            CriterionKind::Rae => "rae",
            CriterionKind::Nrae => "nrae",
            CriterionKind::Anrat => "anrat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub criterion_value: f64,
    pub ce_value: f64,
    pub sample_weights: Vec<f64>,
    pub lambda_grad: Option<f64>,
}

/// Evaluates one criterion and the normalized weights of its weight gradient.
pub fn evaluate(kind: CriterionKind, losses: &PerSampleLosses, params: &CriterionParams) -> Result<LossReport> {
    let ce_value = losses.mean();
    let m = losses.len();
    let report = match kind {
        CriterionKind::Ce => LossReport {
            criterion_value: ce_value,
            ce_value,
            sample_weights: vec![1.0 / m as f64; m],
            lambda_grad: None,
        },
        CriterionKind::Rae => LossReport {
            criterion_value: rae(losses, params)?,
            ce_value,
            sample_weights: sample_weights(losses, params),
            lambda_grad: None,
        },
        CriterionKind::Nrae => LossReport {
            criterion_value: nrae(losses, params),
            ce_value,
            sample_weights: sample_weights(losses, params),
            lambda_grad: None,
        },
        CriterionKind::Anrat => LossReport {
            criterion_value: anrat_loss(losses, params),
            ce_value,
            sample_weights: sample_weights(losses, params),
            lambda_grad: Some(anrat_grad_lambda(losses, params)),
        },
    };
    Ok(report)
}
