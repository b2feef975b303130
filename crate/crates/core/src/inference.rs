//! Per-node inference from the auxiliary variables: residual recovery, kernel
//! Hessian and Gram estimates, sandwich and density-based covariances, and
//! Wald intervals.
//!
//! Intervals are valid only when features on different nodes are
//! uncorrelated; this is assumed, not checked. [`max_cross_block_correlation`]
//! gives a rough diagnostic.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::node::{factor_with_jitter, NodeState};
use crate::normal;
use crate::smoothing::QuantileSpec;

/// Relative ridge added on a failed factorization of `Ĥ` or `Σ̂`.
pub const HESSIAN_JITTER: f64 = 1e-8;
/// Smallest admissible density estimate at zero.
pub const DENSITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Sandwich form, robust to heteroscedasticity.
    Hr,
    /// Density-at-zero form, valid under homoscedastic errors.
    Hs,
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Hr => "hr",
            InferenceMode::Hs => "hs",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hr" => Ok(InferenceMode::Hr),
            "hs" => Ok(InferenceMode::Hs),
            other => Err(Error::Domain(format!(
                "unknown inference mode '{other}' (expected hr or hs)"
            ))),
        }
    }
}

/// `ε̂_i = y_i − m z_ij`.
pub fn estimate_residuals(node: &NodeState, m: usize) -> DVector<f64> {
    node.y() - node.z() * m as f64
}

/// `(1/(n h)) Σ_i K(ε̂_i / h) x_i x_iᵀ`.
pub fn powell_hessian(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    spec: &QuantileSpec,
) -> Result<DMatrix<f64>> {
    check_rows(x, residuals)?;
    let h = spec.h();
    let scale = 1.0 / (x.nrows() as f64 * h);
    let weights = residuals.map(|e| (scale * spec.kernel().density(e / h)).sqrt());
    let weighted = DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| weights[i] * x[(i, k)]);
    Ok(symmetrize(weighted.tr_mul(&weighted)))
}

/// `(1/n) XᵀX`.
pub fn local_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(x.tr_mul(x) / x.nrows().max(1) as f64)
}

/// Kernel density estimate of the error density at zero.
pub fn density_at_zero(residuals: &DVector<f64>, spec: &QuantileSpec) -> f64 {
    let h = spec.h();
    residuals
        .iter()
        .map(|e| spec.kernel().density(e / h))
        .sum::<f64>()
        / (residuals.len() as f64 * h)
}

/// `τ(1−τ) Ĥ⁻¹ Σ̂ Ĥ⁻¹`.
pub fn hr_covariance(
    h_hat: &DMatrix<f64>,
    sigma_hat: &DMatrix<f64>,
    tau: f64,
) -> Result<DMatrix<f64>> {
    check_square(h_hat, sigma_hat)?;
    let chol = factor_with_jitter(h_hat.clone(), HESSIAN_JITTER).ok_or_else(|| {
        Error::Numerical("kernel Hessian estimate is singular; increase the inference bandwidth or the sample size".into())
    })?;
    // Ĥ⁻¹ (Σ̂ Ĥ⁻¹) with Σ̂ Ĥ⁻¹ = (Ĥ⁻¹ Σ̂)ᵀ.
    let left = chol.solve(sigma_hat);
    let cov = chol.solve(&left.transpose());
    Ok(symmetrize(cov * (tau * (1.0 - tau))))
}

/// `τ(1−τ) f̂(0)⁻² Σ̂⁻¹`.
pub fn hs_covariance(
    residuals: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    spec: &QuantileSpec,
) -> Result<DMatrix<f64>> {
    let f0 = density_at_zero(residuals, spec);
    if !(f0 > DENSITY_FLOOR) {
        return Err(Error::Numerical(format!(
            "residual density at zero is {f0:e}; the inference bandwidth is too small"
        )));
    }
    let chol = factor_with_jitter(sigma_hat.clone(), HESSIAN_JITTER).ok_or_else(|| {
        Error::Numerical("local Gram matrix is singular; drop collinear columns".into())
    })?;
    let tau = spec.tau();
    Ok(symmetrize(chol.inverse() * (tau * (1.0 - tau) / (f0 * f0))))
}

/// `β̂_k ± Φ⁻¹((1+level)/2) √(cov_kk / n)` for every coordinate.
pub fn wald_intervals(
    beta: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if cov.nrows() != beta.len() || cov.ncols() != beta.len() {
        return Err(Error::Structural(format!(
            "covariance is {}x{} for {} coefficients",
            cov.nrows(),
            cov.ncols(),
            beta.len()
        )));
    }
    if n == 0 {
        return Err(Error::Domain("sample size must be positive".into()));
    }
    let z = normal::quantile(0.5 * (1.0 + level));
    beta.iter()
        .enumerate()
        .map(|(k, &b)| {
            let v = cov[(k, k)];
            if !(v >= 0.0) {
                return Err(Error::Numerical(format!(
                    "covariance diagonal entry {k} is {v}"
                )));
            }
            let half = z * (v / n as f64).sqrt();
            Ok((b - half, b + half))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub node: usize,
    pub mode: InferenceMode,
    pub level: f64,
    pub estimate: DVector<f64>,
    pub residuals: DVector<f64>,
    pub h_hat: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub density_at_zero: f64,
    pub cov: DMatrix<f64>,
    pub intervals: Vec<(f64, f64)>,
}

impl InferenceReport {
    /// Whether `truth[k]` lies in the k-th interval.
    pub fn covers(&self, k: usize, truth: f64) -> bool {
        let (lo, hi) = self.intervals[k];
        lo <= truth && truth <= hi
    }

    pub fn width(&self, k: usize) -> f64 {
        self.intervals[k].1 - self.intervals[k].0
    }
}

/// Full per-node report from the node's own post-fit state. `spec` carries the
/// inference bandwidth, which may differ from the fitting one.
pub fn infer_node(
    node: &NodeState,
    m: usize,
    spec: &QuantileSpec,
    mode: InferenceMode,
    level: f64,
) -> Result<InferenceReport> {
    let residuals = estimate_residuals(node, m);
    let h_hat = powell_hessian(node.x(), &residuals, spec)?;
    let sigma_hat = local_gram(node.x());
    let cov = match mode {
        InferenceMode::Hr => hr_covariance(&h_hat, &sigma_hat, spec.tau())?,
        InferenceMode::Hs => hs_covariance(&residuals, &sigma_hat, spec)?,
    };
    let intervals = wald_intervals(node.beta(), &cov, node.n(), level)?;
    Ok(InferenceReport {
        node: node.index(),
        mode,
        level,
        estimate: node.beta().clone(),
        density_at_zero: density_at_zero(&residuals, spec),
        residuals,
        h_hat,
        sigma_hat,
        cov,
        intervals,
    })
}

/// `max_i (max_j ε̂_ij − min_j ε̂_ij)`: how far nodes disagree on residuals.
pub fn residual_spread(nodes: &[NodeState], m: usize) -> f64 {
    let all: Vec<DVector<f64>> = nodes.iter().map(|n| estimate_residuals(n, m)).collect();
    let Some(first) = all.first() else { return 0.0 };
    (0..first.len())
        .map(|i| {
            let (lo, hi) = all
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[i]), hi.max(r[i]))
                });
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Mean and maximum absolute Pearson correlation over column pairs held by
/// different nodes.
pub fn max_cross_block_correlation(x: &DMatrix<f64>, partition: &[Range<usize>]) -> (f64, f64) {
    let n = x.nrows() as f64;
    let cols: Vec<DVector<f64>> = (0..x.ncols())
        .map(|k| {
            let c = x.column(k);
            let centred = c.add_scalar(-c.sum() / n);
            let norm = centred.norm();
            if norm > 0.0 {
                centred / norm
            } else {
                centred
            }
        })
        .collect();
    let (mut total, mut count, mut max) = (0.0, 0usize, 0.0f64);
    for (a, ra) in partition.iter().enumerate() {
        for rb in &partition[a + 1..] {
            for i in ra.clone() {
                for k in rb.clone() {
                    let r = cols[i].dot(&cols[k]).abs();
                    total += r;
                    count += 1;
                    max = max.max(r);
                }
            }
        }
    }
    (if count > 0 { total / count as f64 } else { 0.0 }, max)
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

fn check_rows(x: &DMatrix<f64>, residuals: &DVector<f64>) -> Result<()> {
    if x.nrows() != residuals.len() || x.nrows() == 0 {
        return Err(Error::Structural(format!(
            "{} residuals for a design with {} rows",
            residuals.len(),
            x.nrows()
        )));
    }
    Ok(())
}

fn check_square(h: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<()> {
    if !h.is_square() || h.shape() != s.shape() {
        return Err(Error::Structural(format!(
            "Hessian {:?} and Gram {:?} shapes disagree",
            h.shape(),
            s.shape()
        )));
    }
    Ok(())
}
