//! Empirical convexity probes for tiny models.
//!
//! A point in weight space is in the convexity region of a criterion when the
//! criterion's Hessian there is positive semidefinite. Hessians come from
//! central second differences over the flat parameter vector and their
//! spectra from cyclic Jacobi rotations, so nothing here depends on the
//! backprop code it is used to examine.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;

use crate::criteria::{nrae, rae, CriterionParams, PerSampleLosses};
use crate::data::SampleBatch;
use crate::error::{Error, Result};
use crate::network::MlpModel;
use crate::rng::{stream_rng, Stream};

/// Largest parameter vector `fd_hessian` accepts.
pub const MAX_HESSIAN_DIM: usize = 200;
/// Largest model `scan_convexity` accepts.
pub const MAX_SCAN_PARAMS: usize = 60;
/// Default base step; coordinate `i` uses `h · (1 + |x_i|)`.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

/// Central second differences with the four-point cross stencil, before
/// symmetrization.
pub fn fd_hessian_raw<F>(mut objective: F, point: &[f64], h: f64) -> Result<Array2<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = point.len();
    if n > MAX_HESSIAN_DIM {
        return Err(Error::invalid(format!(
            "finite-difference Hessian limited to {MAX_HESSIAN_DIM} parameters, got {n}"
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let steps: Vec<f64> = point.iter().map(|x| h * (1.0 + x.abs())).collect();
    let mut probe = point.to_vec();
    let mut eval = |probe: &[f64]| -> Result<f64> {
        let v = objective(probe)?;
        if !v.is_finite() {
            return Err(Error::NumericDomain(format!("objective is {v} at probe point {probe:?}")));
        }
        Ok(v)
    };
    let mut hess = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                probe.copy_from_slice(point);
                probe[i] += si * steps[i];
                probe[j] += sj * steps[j];
                eval(&probe)
            };
            let pp = corner(1.0, 1.0)?;
            let pm = corner(1.0, -1.0)?;
            let mp = corner(-1.0, 1.0)?;
            let mm = corner(-1.0, -1.0)?;
            hess[[i, j]] = (pp - pm - mp + mm) / (4.0 * steps[i] * steps[j]);
        }
    }
    Ok(hess)
}

/// Symmetrized finite-difference Hessian `(H + Hᵀ)/2`.
pub fn fd_hessian<F>(objective: F, point: &[f64], h: f64) -> Result<Array2<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let raw = fd_hessian_raw(objective, point, h)?;
    Ok((&raw + &raw.t()) * 0.5)
}

fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[[i, j]] * a[[i, j]];
            }
        }
    }
    s.sqrt()
}

/// Eigenvalues (ascending) and the accumulated rotation matrix whose columns
/// are the matching eigenvectors.
pub fn jacobi_eigen(matrix: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let (n, cols) = matrix.dim();
    if n != cols {
        return Err(Error::invalid(format!("matrix must be square, got {n}x{cols}")));
    }
    let scale = max_abs(matrix);
    for i in 0..n {
        for j in i + 1..n {
            if (matrix[[i, j]] - matrix[[j, i]]).abs() > 1e-8 * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric: |H[{i},{j}] - H[{j},{i}]| = {:e}",
                    (matrix[[i, j]] - matrix[[j, i]]).abs()
                )));
            }
        }
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("matrix contains non-finite entries".into()));
    }
    let mut a = matrix.clone();
    let mut v = Array2::eye(n);
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = off_diagonal_norm(&a) <= JACOBI_TOL * frob;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi eigensolver did not converge after {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_diagonal_norm(&a) <= JACOBI_TOL * frob;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[i, i]].total_cmp(&a[[j, j]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    Ok((values, vectors))
}

pub fn jacobi_eigenvalues(matrix: &Array2<f64>) -> Result<Vec<f64>> {
    jacobi_eigen(matrix).map(|(values, _)| values)
}

/// `1e-6 · (1 + max |H_ii|)`
pub fn psd_tolerance(hessian: &Array2<f64>) -> f64 {
    let max_diag = hessian.diag().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    1e-6 * (1.0 + max_diag)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianReport {
    pub lambda: f64,
    pub point: Vec<f64>,
    pub min_eigenvalue: f64,
    pub psd: bool,
}

impl HessianReport {
    pub fn from_hessian(lambda: f64, point: Vec<f64>, hessian: &Array2<f64>) -> Result<Self> {
        let eigs = jacobi_eigenvalues(hessian)?;
        let min_eigenvalue = eigs.first().copied().unwrap_or(0.0);
        Ok(HessianReport {
            lambda,
            point,
            min_eigenvalue,
            psd: min_eigenvalue >= -psd_tolerance(hessian),
        })
    }
}

/// Which criterion a Hessian was taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbedCriterion {
    Rae,
    /// RAE was infeasible at this point; NRAE was used instead.
    NraeFallback,
}

fn losses_at(template: &MlpModel, data: &SampleBatch, theta: &[f64]) -> Result<PerSampleLosses> {
    let model = template.unflatten(theta)?;
    let pass = model.forward(&data.inputs)?;
    model.losses(data, &pass)
}

/// Hessian of the plain mean loss at `theta`.
pub fn base_hessian(template: &MlpModel, data: &SampleBatch, theta: &[f64], h: f64) -> Result<HessianReport> {
    let hess = fd_hessian(|t| Ok(losses_at(template, data, t)?.mean()), theta, h)?;
    HessianReport::from_hessian(0.0, theta.to_vec(), &hess)
}

/// Hessian of RAE at `theta`, or of NRAE when RAE would overflow and the
/// fallback is allowed.
pub fn criterion_hessian(
    template: &MlpModel,
    data: &SampleBatch,
    theta: &[f64],
    params: &CriterionParams,
    h: f64,
    allow_nrae_fallback: bool,
) -> Result<(HessianReport, ProbedCriterion)> {
    let rae_hess = fd_hessian(|t| rae(&losses_at(template, data, t)?, params), theta, h);
    match rae_hess {
        Ok(hess) => Ok((HessianReport::from_hessian(params.lambda, theta.to_vec(), &hess)?, ProbedCriterion::Rae)),
        Err(Error::OverflowRisk { .. }) if allow_nrae_fallback => {
            let hess = fd_hessian(|t| Ok(nrae(&losses_at(template, data, t)?, params)), theta, h)?;
            Ok((
                HessianReport::from_hessian(params.lambda, theta.to_vec(), &hess)?,
                ProbedCriterion::NraeFallback,
            ))
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOptions {
    pub lambdas: Vec<f64>,
    pub num_points: usize,
    pub box_radius: f64,
    pub seed: u64,
    pub p: u32,
    pub fd_step: f64,
    pub allow_nrae_fallback: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            lambdas: vec![1.0, 2.0, 4.0, 8.0],
            num_points: 200,
            box_radius: 4.0,
            seed: 1,
            p: 1,
            fd_step: DEFAULT_FD_STEP,
            allow_nrae_fallback: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionScan {
    pub lambdas: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// `min_eigs[l][k]`: smallest eigenvalue at `lambdas[l]`, `points[k]`.
    pub min_eigs: Vec<Vec<f64>>,
    pub psd: Vec<Vec<bool>>,
    pub probed: Vec<Vec<ProbedCriterion>>,
    /// PSD flags of the plain mean-loss Hessian at each point.
    pub base_psd: Vec<bool>,
    pub base_min_eigs: Vec<f64>,
}

impl RegionScan {
    /// Fraction of points whose Hessian is PSD, per λ.
    pub fn psd_fraction(&self) -> Result<Vec<f64>> {
        if self.points.is_empty() {
            return Err(Error::invalid("psd fraction is undefined for an empty scan"));
        }
        let n = self.points.len() as f64;
        Ok(self
            .psd
            .iter()
            .map(|row| row.iter().filter(|&&b| b).count() as f64 / n)
            .collect())
    }

    /// `(lambda index, point index)` pairs where the mean-loss Hessian is PSD
    /// but the criterion Hessian is not.
    pub fn base_psd_violations(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (l, row) in self.psd.iter().enumerate() {
            for (k, &psd) in row.iter().enumerate() {
                if self.base_psd[k] && !psd {
                    out.push((l, k));
                }
            }
        }
        out
    }

    /// Violations as a fraction of all (λ, base-PSD point) pairs; zero when
    /// no point has a PSD base Hessian.
    pub fn base_psd_violation_rate(&self) -> f64 {
        let base = self.base_psd.iter().filter(|&&b| b).count() * self.lambdas.len();
        if base == 0 {
            0.0
        } else {
            self.base_psd_violations().len() as f64 / base as f64
        }
    }

    /// Largest drop of the PSD fraction between consecutive λ values.
    pub fn max_fraction_drop(&self) -> Result<f64> {
        let f = self.psd_fraction()?;
        Ok(f.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max))
    }

    pub fn points_csv(&self) -> String {
        let mut out = String::from("lambda,point_index,min_eig,psd\n");
        for (l, lambda) in self.lambdas.iter().enumerate() {
            for k in 0..self.points.len() {
                writeln!(out, "{lambda},{k},{},{}", self.min_eigs[l][k], self.psd[l][k] as u8).unwrap();
            }
        }
        out
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut out = String::from("lambda,psd_fraction\n");
        for (lambda, f) in self.lambdas.iter().zip(self.psd_fraction()?) {
            writeln!(out, "{lambda},{f}").unwrap();
        }
        Ok(out)
    }
}

/// Samples `num_points` parameter vectors uniformly from the box
/// `[-r, r]^n` and records the criterion Hessian's smallest eigenvalue at
/// every point for every λ. The same point set is used for every λ.
pub fn scan_convexity(template: &MlpModel, data: &SampleBatch, opts: &ScanOptions) -> Result<RegionScan> {
    let n = template.param_count();
    if n > MAX_SCAN_PARAMS {
        return Err(Error::invalid(format!(
            "convexity scans are limited to {MAX_SCAN_PARAMS} parameters; this model has {n}"
        )));
    }
    if opts.lambdas.is_empty() {
        return Err(Error::invalid("scan needs at least one lambda"));
    }
    if opts.lambdas.iter().any(|&l| !(l >= 1.0 && l.is_finite())) {
        return Err(Error::invalid("scan lambdas must be finite and >= 1"));
    }
    if opts.lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("scan lambdas must be strictly ascending, got {:?}", opts.lambdas)));
    }
    if !(opts.box_radius > 0.0 && opts.box_radius.is_finite()) {
        return Err(Error::invalid("box radius must be positive"));
    }
    let mut rng = stream_rng(opts.seed, Stream::Scan);
    let points: Vec<Vec<f64>> = (0..opts.num_points)
        .map(|_| (0..n).map(|_| rng.random_range(-opts.box_radius..=opts.box_radius)).collect())
        .collect();

    let mut base_psd = Vec::with_capacity(points.len());
    let mut base_min_eigs = Vec::with_capacity(points.len());
    for theta in &points {
        let report = base_hessian(template, data, theta, opts.fd_step)?;
        base_psd.push(report.psd);
        base_min_eigs.push(report.min_eigenvalue);
    }

    let mut min_eigs = Vec::with_capacity(opts.lambdas.len());
    let mut psd = Vec::with_capacity(opts.lambdas.len());
    let mut probed = Vec::with_capacity(opts.lambdas.len());
    for &lambda in &opts.lambdas {
        let params = CriterionParams::with_lambda(lambda, opts.p)?;
        let mut eig_row = Vec::with_capacity(points.len());
        let mut psd_row = Vec::with_capacity(points.len());
        let mut probed_row = Vec::with_capacity(points.len());
        for theta in &points {
            let (report, which) =
                criterion_hessian(template, data, theta, &params, opts.fd_step, opts.allow_nrae_fallback)?;
            eig_row.push(report.min_eigenvalue);
            psd_row.push(report.psd);
            probed_row.push(which);
        }
        min_eigs.push(eig_row);
        psd.push(psd_row);
        probed.push(probed_row);
    }
    Ok(RegionScan {
        lambdas: opts.lambdas.clone(),
        points,
        min_eigs,
        psd,
        probed,
        base_psd,
        base_min_eigs,
    })
}
