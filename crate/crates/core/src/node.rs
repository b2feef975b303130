//! One machine's local state and its per-iteration work.
//!
//! A node holds its column block `X_j` (all `n` rows, `p_j` columns), the
//! shared response, its coefficients `β_j` and an auxiliary vector `z_j`
//! tracking `(1/m) Σ_k X_k β_k`. The surrogate gradient replaces the global
//! fitted value by `m·z_j`, so no node ever needs another node's columns.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::smoothing::{score_weight, QuantileSpec};

/// Lower bound on the empirical sensitivity so a vanishing gradient or zero
/// start never turns the mechanism into a no-op.
pub const SENSITIVITY_FLOOR: f64 = 1e-12;

const GRAM_JITTER: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct NodeState {
    index: usize,
    x: DMatrix<f64>,
    y: Arc<DVector<f64>>,
    beta: DVector<f64>,
    z: DVector<f64>,
    beta_init: DVector<f64>,
    max_row_norm: f64,
    /// `F` with `F Fᵀ = (X_jᵀ X_j)^{-1}`, built on first noise draw.
    noise_factor: Option<DMatrix<f64>>,
    rng: ChaCha8Rng,
}

impl NodeState {
    /// Creates node `index` with `z_j = X_j β_j^{(0)}`. `beta0` defaults to zero.
    pub fn new(
        index: usize,
        x: DMatrix<f64>,
        y: Arc<DVector<f64>>,
        beta0: Option<DVector<f64>>,
        seed: u64,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 {
            return Err(Error::Structural(format!("node {index} has no rows")));
        }
        if p == 0 {
            return Err(Error::Structural(format!("node {index} has no columns")));
        }
        if y.len() != n {
            return Err(Error::Structural(format!(
                "node {index} holds {n} rows but the response has {} entries",
                y.len()
            )));
        }
        let beta = beta0.unwrap_or_else(|| DVector::zeros(p));
        if beta.len() != p {
            return Err(Error::Structural(format!(
                "node {index}: initial coefficients have length {}, expected {p}",
                beta.len()
            )));
        }
        let z = &x * &beta;
        let max_row_norm = x.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
        Ok(NodeState {
            index,
            beta_init: beta.clone(),
            x,
            y,
            beta,
            z,
            max_row_norm,
            noise_factor: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub(crate) fn shared_y(&self) -> &Arc<DVector<f64>> {
        &self.y
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub(crate) fn z_mut(&mut self) -> &mut DVector<f64> {
        &mut self.z
    }

    pub fn beta_init(&self) -> &DVector<f64> {
        &self.beta_init
    }

    /// `max_i ‖x_ij‖₂`.
    pub fn max_row_norm(&self) -> f64 {
        self.max_row_norm
    }

    /// `X_j β_j`, this node's share of the fitted values.
    pub fn local_fit(&self) -> DVector<f64> {
        &self.x * &self.beta
    }

    /// Restarts this node's noise stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Replaces the auxiliary vector, e.g. to restore a checkpoint.
    pub fn set_z(&mut self, z: DVector<f64>) -> Result<()> {
        if z.len() != self.n() {
            return Err(Error::Structural(format!(
                "auxiliary vector has length {}, expected {}",
                z.len(),
                self.n()
            )));
        }
        self.z = z;
        Ok(())
    }

    fn noise_factor(&mut self) -> Result<&DMatrix<f64>> {
        if self.noise_factor.is_none() {
            let gram = self.x.tr_mul(&self.x);
            let chol = factor_with_jitter(gram, GRAM_JITTER).ok_or_else(|| {
                Error::Numerical(format!(
                    "local Gram matrix of node {} is singular; drop collinear columns",
                    self.index
                ))
            })?;
            // (L Lᵀ)^{-1} = L^{-T} L^{-1}, so F = L^{-T}.
            let l_inv = chol
                .l()
                .solve_lower_triangular(&DMatrix::identity(self.p(), self.p()))
                .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
            self.noise_factor = Some(l_inv.transpose());
        }
        Ok(self.noise_factor.as_ref().expect("just set"))
    }
}

/// Cholesky of a symmetric matrix, retrying once with a ridge of
/// `rel_jitter · trace / p` on the diagonal.
pub(crate) fn factor_with_jitter(
    mut a: DMatrix<f64>,
    rel_jitter: f64,
) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    if a.is_empty() {
        return None;
    }
    if let Some(c) = Cholesky::new(a.clone()) {
        return Some(c);
    }
    let trace = a.trace();
    if !(trace > 0.0) {
        return None;
    }
    let ridge = rel_jitter * trace / a.nrows() as f64;
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    Cholesky::new(a)
}

/// `(1/n) Σ_i (K̄((m z_ij − y_i)/h) − τ) x_ij`.
pub fn surrogate_gradient(node: &NodeState, spec: &QuantileSpec, m: usize) -> DVector<f64> {
    let mf = m as f64;
    let weights = DVector::from_iterator(
        node.n(),
        node.z
            .iter()
            .zip(node.y.iter())
            .map(|(z, y)| score_weight(mf * z - y, spec)),
    );
    node.x.tr_mul(&weights) / node.n() as f64
}

/// Gradient step on `β_j` and the matching tracking step on `z_j`, both with
/// the same `grad`.
pub fn local_update(node: &mut NodeState, grad: &DVector<f64>, eta: f64) {
    node.beta.axpy(-eta, grad, 1.0);
    node.z.gemv(-eta, &node.x, grad, 1.0);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SensitivityMode {
    /// Time-varying estimate from the start point and the previous gradient.
    Empirical,
    Fixed(f64),
}

/// Gaussian-mechanism settings. The draw covariance is
/// `s² Δ² (X_jᵀ X_j)^{-1}` with noise multiplier `s = ε^{-1} √(2 ln(1.25/δ))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    enabled: bool,
    epsilon: f64,
    delta: f64,
    multiplier: f64,
    sensitivity: SensitivityMode,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self::disabled()
    }
}

impl PrivacyParams {
    pub fn disabled() -> Self {
        PrivacyParams {
            enabled: false,
            epsilon: 1.0,
            delta: 0.5,
            multiplier: 0.0,
            sensitivity: SensitivityMode::Empirical,
        }
    }

    /// Per-iteration `(ε, δ)` with `ε ∈ (0, 1]`, `δ ∈ (0, 1)`.
    pub fn gaussian(epsilon: f64, delta: f64, sensitivity: SensitivityMode) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Domain(format!(
                "per-iteration ε must lie in (0,1], got {epsilon}"
            )));
        }
        check_delta(delta)?;
        check_sensitivity(sensitivity)?;
        Ok(PrivacyParams {
            enabled: true,
            epsilon,
            delta,
            multiplier: (2.0 * (1.25 / delta).ln()).sqrt() / epsilon,
            sensitivity,
        })
    }

    /// Calibration from an overall level `ε̄`: the noise multiplier is
    /// `√((q + ln n)/(q ln n)) / (2ε̄)`, which equals the bare recipe value at
    /// `ε̄ = 1/2` and scales like `1/ε̄` otherwise. The per-iteration `ε`
    /// implied by `δ` is recorded and may exceed one.
    pub fn from_overall_budget(
        eps_bar: f64,
        delta: f64,
        q: usize,
        n: usize,
        sensitivity: SensitivityMode,
    ) -> Result<Self> {
        if !(eps_bar > 0.0 && eps_bar.is_finite()) {
            return Err(Error::Domain(format!(
                "overall privacy level must be positive, got {eps_bar}"
            )));
        }
        if q == 0 || n < 2 {
            return Err(Error::Domain(format!(
                "need q ≥ 1 and n ≥ 2, got q={q}, n={n}"
            )));
        }
        check_delta(delta)?;
        check_sensitivity(sensitivity)?;
        let (qf, ln_n) = (q as f64, (n as f64).ln());
        let multiplier = ((qf + ln_n) / (qf * ln_n)).sqrt() / (2.0 * eps_bar);
        Ok(PrivacyParams {
            enabled: true,
            epsilon: (2.0 * (1.25 / delta).ln()).sqrt() / multiplier,
            delta,
            multiplier,
            sensitivity,
        })
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `ε^{-1} √(2 ln(1.25/δ))`; zero when disabled.
    pub fn noise_multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn sensitivity(&self) -> SensitivityMode {
        self.sensitivity
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("δ must lie in (0,1), got {delta}")))
    }
}

fn check_sensitivity(mode: SensitivityMode) -> Result<()> {
    match mode {
        SensitivityMode::Fixed(d) if !(d >= 0.0 && d.is_finite()) => Err(Error::Domain(format!(
            "fixed sensitivity must be non-negative, got {d}"
        ))),
        _ => Ok(()),
    }
}

/// `2 ĉ ‖β_j^{(0)}‖` at `t = 1`, `2 ĉ ‖grad_prev‖` afterwards, floored at
/// [`SENSITIVITY_FLOOR`].
pub fn empirical_sensitivity(
    node: &NodeState,
    t: usize,
    grad_prev: Option<&DVector<f64>>,
) -> Result<f64> {
    let base = match (t, grad_prev) {
        (0, _) => return Err(Error::Domain("iterations are counted from 1".into())),
        (1, None) => node.beta_init.norm(),
        (1, Some(_)) => return Err(Error::Domain("no previous gradient exists at t = 1".into())),
        (_, Some(g)) => g.norm(),
        (_, None) => {
            return Err(Error::Domain(format!(
                "previous gradient required at t = {t}"
            )))
        }
    };
    Ok((2.0 * node.max_row_norm * base).max(SENSITIVITY_FLOOR))
}

/// One draw from `N(0, s² Δ² (X_jᵀX_j)^{-1})` using the node's own stream.
pub fn dp_noise(
    node: &mut NodeState,
    privacy: &PrivacyParams,
    sensitivity: f64,
) -> Result<DVector<f64>> {
    if !privacy.enabled {
        return Err(Error::Domain(
            "noise requested with privacy disabled".into(),
        ));
    }
    if !(sensitivity >= 0.0) {
        return Err(Error::Domain(format!(
            "sensitivity must be non-negative, got {sensitivity}"
        )));
    }
    let p = node.p();
    if sensitivity == 0.0 {
        return Ok(DVector::zeros(p));
    }
    let scale = privacy.multiplier * sensitivity;
    let xi = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut node.rng)));
    let factor = node.noise_factor()?;
    Ok(factor * xi * scale)
}

/// Gradients of one private step: the clean surrogate, and what was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub clean: DVector<f64>,
    pub applied: DVector<f64>,
}

/// Surrogate gradient plus (optional) calibrated noise, applied to both `β_j`
/// and `z_j`. Sensitivity at `t > 1` uses the previous step's clean gradient.
#[allow(clippy::too_many_arguments)]
pub fn private_local_update(
    node: &mut NodeState,
    spec: &QuantileSpec,
    m: usize,
    eta: f64,
    privacy: &PrivacyParams,
    t: usize,
    clean_prev: Option<&DVector<f64>>,
) -> Result<StepGradients> {
    let clean = surrogate_gradient(node, spec, m);
    let applied = if privacy.enabled {
        let sens = match privacy.sensitivity {
            SensitivityMode::Empirical => empirical_sensitivity(node, t, clean_prev)?,
            SensitivityMode::Fixed(d) => d,
        };
        let noise = dp_noise(node, privacy, sens)?;
        &clean + noise
    } else {
        clean.clone()
    };
    local_update(node, &applied, eta);
    Ok(StepGradients { clean, applied })
}
