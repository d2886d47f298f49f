//! Analytic gradients of each criterion composed with the network, checked
//! against central finite differences on random configurations.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::criteria::{self, check_rae_feasible, rae_grad_weights, CriterionKind, CriterionParams};
use crate::data::{SampleBatch, Targets};
use crate::error::{Error, Result};
use crate::network::{Activation, MlpModel, OutputMode};
use crate::rng::{stream_rng, Stream};

pub const WEIGHT_TOLERANCE: f64 = 1e-5;
pub const LAMBDA_TOLERANCE: f64 = 1e-6;

const LAMBDAS: [f64; 4] = [1e-3, 1.0, 10.0, 100.0];
const KINDS: [CriterionKind; 4] = [
    CriterionKind::Ce,
    CriterionKind::Rae,
    CriterionKind::Nrae,
    CriterionKind::Anrat,
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub configs: usize,
    pub seed: u64,
    /// Finite-difference step for the weights.
    pub step: f64,
    /// Fixes λ instead of drawing it from {1e-3, 1, 10, 100}.
    pub lambda: Option<f64>,
    /// Fixes p instead of drawing it from {1, 2}.
    pub p: Option<u32>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            configs: 100,
            seed: 1,
            step: 1e-6,
            lambda: None,
            p: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCase {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub output_mode: OutputMode,
    pub params: CriterionParams,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case_index: usize,
    pub kind: CriterionKind,
    /// `‖g - g_fd‖ / max(‖g‖, ‖g_fd‖)`.
    pub weight_error: f64,
    pub lambda_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub results: Vec<CaseResult>,
    /// Cases where raw RAE was over the overflow cap and was not checked.
    pub rae_skipped: usize,
    pub elapsed_ms: u128,
}

impl GradcheckReport {
    pub fn max_weight_error(&self, kind: CriterionKind) -> Option<f64> {
        self.results
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.weight_error)
            .reduce(f64::max)
    }

    pub fn max_lambda_error(&self) -> Option<f64> {
        self.results.iter().filter_map(|r| r.lambda_error).reduce(f64::max)
    }

    pub fn passes(&self, weight_tol: f64, lambda_tol: f64) -> bool {
        self.results.iter().all(|r| {
            r.weight_error < weight_tol && r.lambda_error.is_none_or(|e| e < lambda_tol)
        })
    }

    pub fn summary(&self) -> String {
        let mut out = String::from("criterion,checked,max_weight_rel_error,max_lambda_rel_error\n");
        for kind in KINDS {
            let n = self.results.iter().filter(|r| r.kind == kind).count();
            let w = self.max_weight_error(kind).map_or(String::new(), |v| format!("{v:.3e}"));
            let l = self
                .results
                .iter()
                .filter(|r| r.kind == kind)
                .filter_map(|r| r.lambda_error)
                .reduce(f64::max)
                .map_or(String::new(), |v| format!("{v:.3e}"));
            writeln!(out, "{},{n},{w},{l}", kind.name()).unwrap();
        }
        out
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_case(rng: &mut impl Rng) -> GradcheckCase {
    let output_mode = *[OutputMode::SoftmaxCe, OutputMode::SigmoidBinaryCe, OutputMode::IdentitySquared]
        .choose(rng)
        .unwrap();
    let activation = *[Activation::Sigmoid, Activation::Tanh, Activation::Relu].choose(rng).unwrap();
    let mut dims = vec![rng.random_range(1..=8)];
    let hidden = rng.random_range(1..=2);
    dims.push(rng.random_range(1..=16));
    if hidden == 2 {
        dims.push(rng.random_range(1..=8));
    }
    dims.push(if output_mode == OutputMode::SoftmaxCe {
        rng.random_range(2..=3)
    } else {
        1
    });
    let params = CriterionParams {
        lambda: *LAMBDAS.choose(rng).unwrap(),
        p: rng.random_range(1..=2),
        a: *[0.0, 0.1, 1.0].choose(rng).unwrap(),
        q: rng.random_range(1..=2),
    };
    GradcheckCase {
        dims,
        activation,
        output_mode,
        params,
        batch_size: rng.random_range(1..=12),
    }
}

fn random_batch(case: &GradcheckCase, rng: &mut impl Rng) -> Result<SampleBatch> {
    let m = case.batch_size;
    let inputs = Array2::from_shape_fn((m, case.dims[0]), |_| rng.sample::<f64, _>(StandardNormal));
    let targets = match case.output_mode {
        OutputMode::SoftmaxCe => {
            let k = *case.dims.last().unwrap();
            Targets::Classes {
                labels: (0..m).map(|_| rng.random_range(0..k)).collect(),
                num_classes: k,
            }
        }
        OutputMode::SigmoidBinaryCe => Targets::Classes {
            labels: (0..m).map(|_| rng.random_range(0..2)).collect(),
            num_classes: 2,
        },
        OutputMode::IdentitySquared => Targets::Real((0..m).map(|_| rng.sample(StandardNormal)).collect()),
    };
    SampleBatch::new(inputs, targets)
}

/// The criterion up to an additive constant in the weights: RAE is taken
/// as `RAE - 1` and ANRAT without its penalty. At small `λ^p` or large
/// `a λ^(-q)` those constants would swamp the difference quotient.
fn objective(kind: CriterionKind, model: &MlpModel, batch: &SampleBatch, params: &CriterionParams) -> Result<f64> {
    let pass = model.forward(&batch.inputs)?;
    let losses = model.losses(batch, &pass)?;
    match kind {
        CriterionKind::Rae => {
            check_rae_feasible(&losses, params.scale())?;
            let s = params.scale();
            Ok(losses.as_slice().iter().map(|c| (s * c).exp_m1()).sum::<f64>() / losses.len() as f64)
        }
        CriterionKind::Anrat => Ok(criteria::nrae(&losses, params)),
        _ => Ok(criteria::evaluate(kind, &losses, params)?.criterion_value),
    }
}

/// Richardson-extrapolated central difference of `f` at `x`.
fn extrapolated_derivative(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h0: f64) -> Result<f64> {
    const LEVELS: usize = 4;
    let mut table = [[0.0f64; LEVELS]; LEVELS];
    let mut h = h0;
    for i in 0..LEVELS {
        table[i][0] = (f(x + h)? - f(x - h)?) / (2.0 * h);
        let mut factor = 4.0;
        for j in 1..=i {
            table[i][j] = table[i][j - 1] + (table[i][j - 1] - table[i - 1][j - 1]) / (factor - 1.0);
            factor *= 4.0;
        }
        h /= 2.0;
    }
    Ok(table[LEVELS - 1][LEVELS - 1])
}

/// Checks one criterion on one model/batch. `None` when raw RAE is over the
/// overflow cap for this configuration.
pub fn check_criterion(
    kind: CriterionKind,
    model: &MlpModel,
    batch: &SampleBatch,
    params: &CriterionParams,
    step: f64,
) -> Result<Option<(f64, Option<f64>)>> {
    let pass = model.forward(&batch.inputs)?;
    let losses = model.losses(batch, &pass)?;
    let weights = match kind {
        CriterionKind::Rae => {
            if check_rae_feasible(&losses, params.scale()).is_err() {
                return Ok(None);
            }
            rae_grad_weights(&losses, params)?
        }
        _ => criteria::evaluate(kind, &losses, params)?.sample_weights,
    };
    let analytic = model.weighted_backward(batch, &pass, &weights)?.flat_grad;

    let theta = model.flatten();
    let mut probe = model.clone();
    let mut fd = Vec::with_capacity(theta.len());
    let mut point = theta.clone();
    for i in 0..theta.len() {
        point[i] = theta[i] + step;
        probe.set_params(&point)?;
        let plus = objective(kind, &probe, batch, params)?;
        point[i] = theta[i] - step;
        probe.set_params(&point)?;
        let minus = objective(kind, &probe, batch, params)?;
        point[i] = theta[i];
        fd.push((plus - minus) / (2.0 * step));
    }
    let weight_error = relative_error(&analytic, &fd);

    let lambda_error = if kind == CriterionKind::Anrat {
        let analytic = criteria::anrat_grad_lambda(&losses, params);
        let numeric = extrapolated_derivative(
            |lambda| {
                let shifted = CriterionParams { lambda, ..*params };
                Ok(criteria::anrat_loss(&losses, &shifted))
            },
            params.lambda,
            1e-2 * params.lambda,
        )?;
        Some(relative_error(&[analytic], &[numeric]))
    } else {
        None
    };
    if !weight_error.is_finite() || lambda_error.is_some_and(|e| !e.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient check for {}", kind.name())));
    }
    Ok(Some((weight_error, lambda_error)))
}

/// Runs `configs` random configurations, each checked under every criterion.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.configs == 0 || !(opts.step > 0.0) {
        return Err(Error::invalid("gradcheck needs at least one configuration and a positive step"));
    }
    let started = Instant::now();
    let mut rng = stream_rng(opts.seed, Stream::Check);
    let mut cases = Vec::with_capacity(opts.configs);
    let mut results = Vec::with_capacity(opts.configs * KINDS.len());
    let mut rae_skipped = 0;
    for case_index in 0..opts.configs {
        let mut case = random_case(&mut rng);
        if let Some(lambda) = opts.lambda {
            case.params.lambda = lambda;
        }
        if let Some(p) = opts.p {
            case.params.p = p;
        }
        case.params.validate()?;
        let model = MlpModel::init(&case.dims, case.activation, case.output_mode, rng.random())?;
        let batch = random_batch(&case, &mut rng)?;
        for kind in KINDS {
            match check_criterion(kind, &model, &batch, &case.params, opts.step)? {
                Some((weight_error, lambda_error)) => results.push(CaseResult {
                    case_index,
                    kind,
                    weight_error,
                    lambda_error,
                }),
                None => rae_skipped += 1,
            }
        }
        cases.push(case);
    }
    Ok(GradcheckReport {
        cases,
        results,
        rae_skipped,
        elapsed_ms: started.elapsed().as_millis(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extrapolation_is_exact_for_polynomials() {
        let d = extrapolated_derivative(|x| Ok(x.powi(5) - 3.0 * x), 1.3, 0.1).unwrap();
        assert!((d - (5.0 * 1.3f64.powi(4) - 3.0)).abs() < 1e-10);
        let d = extrapolated_derivative(|x| Ok(1.0 / x), 1e-3, 1e-5).unwrap();
        assert!((d + 1e6).abs() / 1e6 < 1e-9);
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0], &[1.0]), 0.0);
        assert!((relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Doubling the sample weights doubles the analytic gradient.
        let mut rng = stream_rng(4, Stream::Check);
        let case = GradcheckCase {
            dims: vec![3, 4, 2],
            activation: Activation::Tanh,
            output_mode: OutputMode::SoftmaxCe,
            params: CriterionParams::with_lambda(1.0, 1).unwrap(),
            batch_size: 5,
        };
        let model = MlpModel::init(&case.dims, case.activation, case.output_mode, 9).unwrap();
        let batch = random_batch(&case, &mut rng).unwrap();
        let pass = model.forward(&batch.inputs).unwrap();
        let doubled = model.weighted_backward(&batch, &pass, &[0.4; 5]).unwrap().flat_grad;
        let right = model.weighted_backward(&batch, &pass, &[0.2; 5]).unwrap().flat_grad;
        assert!((relative_error(&doubled, &right) - 0.5).abs() < 1e-12);
        let (w, l) = check_criterion(CriterionKind::Ce, &model, &batch, &case.params, 1e-6)
            .unwrap()
            .unwrap();
        assert!(w < WEIGHT_TOLERANCE && l.is_none());
    }

    #[test]
    fn small_run_passes() {
        let report = gradcheck(&GradcheckOptions {
            configs: 12,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(report.cases.len(), 12);
        assert_eq!(report.results.len() + report.rae_skipped, 48);
        assert!(report.passes(WEIGHT_TOLERANCE, LAMBDA_TOLERANCE), "{}", report.summary());
        assert_eq!(report.summary().lines().count(), 5);
    }

    #[test]
    fn fixed_large_lambda_passes() {
        let report = gradcheck(&GradcheckOptions {
            configs: 10,
            lambda: Some(100.0),
            p: Some(2),
            ..Default::default()
        })
        .unwrap();
        assert!(report.cases.iter().all(|c| c.params.lambda == 100.0 && c.params.p == 2));
        assert!(report.passes(WEIGHT_TOLERANCE, LAMBDA_TOLERANCE), "{}", report.summary());
    }

    #[test]
    fn rejects_empty_run() {
        assert!(gradcheck(&GradcheckOptions {
            configs: 0,
            ..Default::default()
        })
        .is_err());
    }
}
