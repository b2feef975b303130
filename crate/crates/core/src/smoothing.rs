//! Check loss, its kernel-convolution smoothing, and a centralized
//! gradient-descent reference solver.
//!
//! With residual `u = y − xᵀβ`, the smoothed loss is
//! `ρ_{τ,h}(u) = E[ρ_τ(u + hV)]`, `V ~ K`. Writing `G(a) = ∫_{-∞}^a K̄(v) dv`
//! this has the closed form `τu + h·G(−u/h)` for every kernel supported here,
//! and its derivative in β is `(K̄((xᵀβ − y)/h) − τ)·x`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::normal;

/// Smoothing kernel. All are symmetric, non-negative and integrate to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernel {
    #[default]
    Gaussian,
    /// `1/2` on `[-1, 1]`.
    Uniform,
    /// `3/4 (1 − v²)` on `[-1, 1]`.
    Epanechnikov,
}

impl Kernel {
    pub fn density(self, v: f64) -> f64 {
        match self {
            Kernel::Gaussian => normal::pdf(v),
            Kernel::Uniform => {
                if v.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            Kernel::Epanechnikov => {
                if v.abs() <= 1.0 {
                    0.75 * (1.0 - v * v)
                } else {
                    0.0
                }
            }
        }
    }

    /// `K̄(v) = ∫_{-∞}^v K`.
    pub fn cdf(self, v: f64) -> f64 {
        match self {
            Kernel::Gaussian => normal::cdf(v),
            Kernel::Uniform => (0.5 * (v + 1.0)).clamp(0.0, 1.0),
            Kernel::Epanechnikov => {
                if v <= -1.0 {
                    0.0
                } else if v >= 1.0 {
                    1.0
                } else {
                    0.5 + 0.75 * v - 0.25 * v * v * v
                }
            }
        }
    }

    /// `G(a) = ∫_{-∞}^a K̄(v) dv = E[(a − V)_+]`.
    fn integrated_cdf(self, a: f64) -> f64 {
        match self {
            Kernel::Gaussian => a * normal::cdf(a) + normal::pdf(a),
            Kernel::Uniform => {
                if a <= -1.0 {
                    0.0
                } else if a >= 1.0 {
                    a
                } else {
                    0.25 * (a + 1.0) * (a + 1.0)
                }
            }
            Kernel::Epanechnikov => {
                if a <= -1.0 {
                    0.0
                } else if a >= 1.0 {
                    a
                } else {
                    let a2 = a * a;
                    0.1875 + 0.5 * a + 0.375 * a2 - 0.0625 * a2 * a2
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Gaussian => "gaussian",
            Kernel::Uniform => "uniform",
            Kernel::Epanechnikov => "epanechnikov",
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Kernel::Gaussian),
            "uniform" => Ok(Kernel::Uniform),
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            other => Err(Error::Domain(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Quantile level, bandwidth and kernel of one smoothed problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileSpec {
    tau: f64,
    h: f64,
    kernel: Kernel,
}

impl QuantileSpec {
    pub fn new(tau: f64, h: f64, kernel: Kernel) -> Result<Self> {
        check_tau(tau)?;
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Domain(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
        Ok(QuantileSpec { tau, h, kernel })
    }

    pub fn gaussian(tau: f64, h: f64) -> Result<Self> {
        Self::new(tau, h, Kernel::Gaussian)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn with_bandwidth(&self, h: f64) -> Result<Self> {
        Self::new(self.tau, h, self.kernel)
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "quantile level must lie in (0,1), got {tau}"
        )))
    }
}

/// `ρ_τ(t) = t (τ − 1{t<0})`.
pub fn quantile_loss(t: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(check_loss(t, tau))
}

#[inline]
pub(crate) fn check_loss(t: f64, tau: f64) -> f64 {
    if t < 0.0 {
        t * (tau - 1.0)
    } else {
        t * tau
    }
}

pub fn smoothed_loss(u: f64, spec: &QuantileSpec) -> f64 {
    let h = spec.h;
    spec.tau * u + h * spec.kernel.integrated_cdf(-u / h)
}

/// `K̄(arg/h) − τ`, the per-observation factor of the smoothed score.
#[inline]
pub fn score_weight(arg: f64, spec: &QuantileSpec) -> f64 {
    spec.kernel.cdf(arg / spec.h) - spec.tau
}

fn check_design(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Structural("design has no rows".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Structural(format!(
            "design has {} rows but response has {} entries",
            x.nrows(),
            y.len()
        )));
    }
    if x.ncols() != beta.len() {
        return Err(Error::Structural(format!(
            "design has {} columns but coefficient vector has {} entries",
            x.ncols(),
            beta.len()
        )));
    }
    Ok(())
}

/// Gradient of the mean smoothed loss at `beta`.
pub fn global_gradient(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    spec: &QuantileSpec,
) -> Result<DVector<f64>> {
    check_design(x, y, beta)?;
    Ok(gradient_unchecked(x, y, beta, spec))
}

fn gradient_unchecked(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    spec: &QuantileSpec,
) -> DVector<f64> {
    let fitted = x * beta;
    let weights = DVector::from_iterator(
        y.len(),
        fitted
            .iter()
            .zip(y.iter())
            .map(|(f, yi)| score_weight(f - yi, spec)),
    );
    x.tr_mul(&weights) / y.len() as f64
}

/// Mean smoothed loss of the residuals `y − Xβ`.
pub fn smoothed_empirical_loss(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    spec: &QuantileSpec,
) -> Result<f64> {
    check_design(x, y, beta)?;
    let fitted = x * beta;
    let total: f64 = y
        .iter()
        .zip(fitted.iter())
        .map(|(yi, f)| smoothed_loss(yi - f, spec))
        .sum();
    Ok(total / y.len() as f64)
}

/// Mean unsmoothed check loss of the residuals `y − Xβ`.
pub fn empirical_check_loss(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_design(x, y, beta)?;
    let fitted = x * beta;
    Ok(mean_check_loss(
        y.iter().zip(fitted.iter()).map(|(a, b)| a - b),
        tau,
    ))
}

pub(crate) fn mean_check_loss(residuals: impl Iterator<Item = f64>, tau: f64) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for r in residuals {
        total += check_loss(r, tau);
        count += 1;
    }
    total / count as f64
}

/// Norm beyond which an iterate is treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Relative parameter change `‖new − old‖ / (1 + ‖old‖)`.
pub fn relative_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    (new - old).norm() / (1.0 + old.norm())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOptions {
    pub eta: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub record_history: bool,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            eta: 1.0,
            max_iter: 1000,
            tol: 1e-8,
            record_history: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CentralizedFit {
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `β^{(1)}, …, β^{(T)}` when history recording is on.
    pub history: Vec<DVector<f64>>,
}

/// Plain gradient descent on the smoothed empirical loss, from `β = 0`.
pub fn centralized_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &QuantileSpec,
    opts: &DescentOptions,
) -> Result<CentralizedFit> {
    centralized_fit_from(x, y, spec, opts, DVector::zeros(x.ncols()))
}

pub fn centralized_fit_from(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &QuantileSpec,
    opts: &DescentOptions,
    beta0: DVector<f64>,
) -> Result<CentralizedFit> {
    check_design(x, y, &beta0)?;
    if !(opts.eta > 0.0) {
        return Err(Error::Domain(format!(
            "step size must be positive, got {}",
            opts.eta
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::Domain("iteration cap must be at least 1".into()));
    }
    let mut beta = beta0;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=opts.max_iter {
        let grad = gradient_unchecked(x, y, &beta, spec);
        let next = &beta - opts.eta * grad;
        let norm = next.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { iteration: t, norm });
        }
        let change = relative_change(&next, &beta);
        beta = next;
        iterations = t;
        if opts.record_history {
            history.push(beta.clone());
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(CentralizedFit {
        beta,
        iterations,
        converged,
        history,
    })
}

/// Rule-of-thumb bandwidth
/// `c·((p + ln n)·1.5 φ(z_τ)² / (n (2 z_τ² + 1)))^{1/3}` with `z_τ = Φ⁻¹(τ)`.
pub fn rule_of_thumb_bandwidth(p: usize, n: usize, tau: f64, c: f64) -> Result<f64> {
    check_tau(tau)?;
    if n < 2 || p == 0 {
        return Err(Error::Domain(format!(
            "need n > 1 and p ≥ 1, got n={n}, p={p}"
        )));
    }
    if !(c > 0.0) {
        return Err(Error::Domain(format!(
            "bandwidth multiplier must be positive, got {c}"
        )));
    }
    let z = normal::quantile(tau);
    let phi = normal::pdf(z);
    let n = n as f64;
    let base = (p as f64 + n.ln()) * (1.5 * phi * phi) / (n * (2.0 * z * z + 1.0));
    Ok(c * base.cbrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gauss(tau: f64, h: f64) -> QuantileSpec {
        QuantileSpec::gaussian(tau, h).unwrap()
    }

    /// Composite Simpson on `[a, b]` with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let step = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * step);
        }
        acc * step / 3.0
    }

    /// `∫ρ_τ(v) K_h(v − u) dv` by quadrature, split at the kink.
    fn convolution_by_quadrature(u: f64, spec: &QuantileSpec) -> f64 {
        let f = |v: f64| {
            check_loss(v, spec.tau()) * spec.kernel().density((v - u) / spec.h()) / spec.h()
        };
        let lo = u - 12.0 * spec.h();
        let hi = u + 12.0 * spec.h();
        if lo < 0.0 && hi > 0.0 {
            simpson(f, lo, 0.0, 20_000) + simpson(f, 0.0, hi, 20_000)
        } else {
            simpson(f, lo, hi, 40_000)
        }
    }

    #[test]
    fn check_loss_examples() {
        assert_eq!(quantile_loss(1.0, 0.25).unwrap(), 0.25);
        assert_eq!(quantile_loss(-1.0, 0.25).unwrap(), 0.75);
        assert_eq!(quantile_loss(0.0, 0.5).unwrap(), 0.0);
        assert!(matches!(quantile_loss(1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(quantile_loss(1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(QuantileSpec::gaussian(0.5, 0.0).is_err());
        assert!(QuantileSpec::gaussian(0.5, -1.0).is_err());
        assert!(QuantileSpec::gaussian(1.5, 1.0).is_err());
        assert!(QuantileSpec::gaussian(0.5, f64::NAN).is_err());
    }

    #[test]
    fn smoothed_loss_far_from_kink() {
        let v = smoothed_loss(10.0, &gauss(0.5, 0.01));
        assert!((v - 5.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_closed_form_matches_quadrature() {
        // Reference at u = 0, τ = 0.5, h = 1: E|Z|/2 = φ(0).
        let spec = gauss(0.5, 1.0);
        let quad = convolution_by_quadrature(0.0, &spec);
        assert!((quad - normal::INV_SQRT_2PI).abs() < 1e-9);
        assert!((smoothed_loss(0.0, &spec) - quad).abs() < 1e-8);
        for &(u, tau, h) in &[
            (0.3, 0.25, 0.5),
            (-2.0, 0.9, 1.5),
            (1.0, 0.1, 0.05),
            (-0.02, 0.6, 0.2),
        ] {
            let spec = gauss(tau, h);
            let quad = convolution_by_quadrature(u, &spec);
            assert!(
                (smoothed_loss(u, &spec) - quad).abs() < 1e-8,
                "u={u} tau={tau} h={h}"
            );
        }
    }

    #[test]
    fn compact_kernels_match_quadrature() {
        for kernel in [Kernel::Uniform, Kernel::Epanechnikov] {
            for &(u, tau, h) in &[
                (0.0, 0.5, 1.0),
                (0.3, 0.25, 0.5),
                (-0.7, 0.8, 2.0),
                (3.0, 0.4, 1.0),
            ] {
                let spec = QuantileSpec::new(tau, h, kernel).unwrap();
                // Kernel support is [-1, 1]; integrate with breakpoints at the
                // support edges and at the kink.
                let f = |v: f64| check_loss(v, tau) * kernel.density((v - u) / h) / h;
                let mut pts = vec![u - h, u + h];
                if u - h < 0.0 && u + h > 0.0 {
                    pts.insert(1, 0.0);
                }
                let quad: f64 = pts.windows(2).map(|w| simpson(f, w[0], w[1], 20_000)).sum();
                assert!(
                    (smoothed_loss(u, &spec) - quad).abs() < 1e-9,
                    "{kernel:?} u={u}"
                );
            }
        }
    }

    #[test]
    fn smoothing_dominates_and_vanishes() {
        for &tau in &[0.25, 0.5, 0.9] {
            for &u in &[-10.0, -1.0, -0.1, 0.1, 1.0, 10.0] {
                let raw = check_loss(u, tau);
                let mut prev_gap = f64::INFINITY;
                for &h in &[1.0, 0.1, 0.01] {
                    let gap = smoothed_loss(u, &gauss(tau, h)) - raw;
                    assert!(gap >= -1e-15);
                    assert!(gap <= prev_gap);
                    prev_gap = gap;
                }
                assert!(prev_gap < 1e-12 || u.abs() < 1.0);
            }
        }
    }

    #[test]
    fn score_weight_examples() {
        assert_eq!(score_weight(0.0, &gauss(0.5, 1.0)), 0.0);
        assert!((score_weight(1e6, &gauss(0.25, 1.0)) - 0.75).abs() < 1e-15);
        assert!((score_weight(1.0, &gauss(0.5, 1.0)) - 0.341_344_746_068_542_9).abs() < 1e-14);
    }

    #[test]
    fn single_observation_gradient() {
        let x = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_element(1, -1.0);
        let g = global_gradient(&x, &y, &DVector::zeros(1), &gauss(0.5, 1.0)).unwrap();
        assert!((g[0] - 0.341_344_746_068_542_9).abs() < 1e-14);
    }

    #[test]
    fn gradient_rejects_bad_shapes() {
        let x = DMatrix::zeros(3, 2);
        let spec = gauss(0.5, 1.0);
        assert!(global_gradient(&x, &DVector::zeros(2), &DVector::zeros(2), &spec).is_err());
        assert!(global_gradient(&x, &DVector::zeros(3), &DVector::zeros(3), &spec).is_err());
        assert!(global_gradient(
            &DMatrix::zeros(0, 2),
            &DVector::zeros(0),
            &DVector::zeros(2),
            &spec
        )
        .is_err());
    }

    #[test]
    fn zero_response_stops_immediately() {
        let x = DMatrix::from_fn(10, 3, |i, j| (i as f64 - 4.0) * (j as f64 + 1.0));
        let y = DVector::zeros(10);
        let fit = centralized_fit(&x, &y, &gauss(0.5, 0.7), &DescentOptions::default()).unwrap();
        assert_eq!(fit.iterations, 1);
        assert!(fit.converged);
        assert_eq!(fit.beta, DVector::zeros(3));
    }

    #[test]
    fn gradient_descent_reaches_stationary_point() {
        let n = 50;
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let y = DVector::from_fn(n, |i, _| {
            0.5 * x[(i, 0)] - x[(i, 1)] + ((i % 5) as f64 - 2.0) * 0.3
        });
        let spec = gauss(0.3, 0.5);
        let opts = DescentOptions {
            eta: 1.0,
            max_iter: 20_000,
            tol: 1e-14,
            record_history: false,
        };
        let fit = centralized_fit(&x, &y, &spec, &opts).unwrap();
        let start = smoothed_empirical_loss(&x, &y, &DVector::zeros(2), &spec).unwrap();
        let end = smoothed_empirical_loss(&x, &y, &fit.beta, &spec).unwrap();
        assert!(end <= start);
        let g = global_gradient(&x, &y, &fit.beta, &spec).unwrap();
        assert!(g.norm() < 1e-8, "{}", g.norm());
    }

    #[test]
    fn divergence_is_reported() {
        let x = DMatrix::from_element(4, 1, 1e7);
        let y = DVector::from_element(4, 1.0);
        let opts = DescentOptions {
            eta: 1e9,
            ..DescentOptions::default()
        };
        let err = centralized_fit(&x, &y, &gauss(0.5, 1.0), &opts).unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration: 1, .. }));
    }

    #[test]
    fn bandwidth_reference_value() {
        let h = rule_of_thumb_bandwidth(60, 5000, 0.5, 1.5).unwrap();
        // (60 + ln 5000)·1.5·φ(0)² / 5000, cube root, times 1.5.
        let expected =
            1.5 * ((60.0 + 5000f64.ln()) * 1.5 * 0.159_154_943_091_895_34 / 5000.0).cbrt();
        assert!((h - expected).abs() < 1e-14);
        assert!((h - 0.2228).abs() < 2e-4);
        assert!(rule_of_thumb_bandwidth(60, 1, 0.5, 1.5).is_err());
        assert!(rule_of_thumb_bandwidth(60, 100, 0.5, 0.0).is_err());
    }

    #[test]
    fn inference_bandwidth_value() {
        // p = 30, n = 20000, τ = 0.25, c = 0.5.
        let z = -0.674_489_750_196_081_7f64;
        let phi = (-0.5 * z * z).exp() * normal::INV_SQRT_2PI;
        let expected = 0.5
            * ((30.0 + 20000f64.ln()) * 1.5 * phi * phi / (20000.0 * (2.0 * z * z + 1.0))).cbrt();
        let h = rule_of_thumb_bandwidth(30, 20_000, 0.25, 0.5).unwrap();
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_decreases_in_n() {
        let mut prev = f64::INFINITY;
        for n in [10, 100, 1000, 10_000, 100_000] {
            let h = rule_of_thumb_bandwidth(20, n, 0.3, 1.0).unwrap();
            assert!(h < prev);
            prev = h;
        }
    }

    proptest! {
        #[test]
        fn smoothed_loss_is_convex(u1 in -20.0..20.0f64, u2 in -20.0..20.0f64, lam in 0.0..1.0f64,
                                   tau in 0.01..0.99f64, h in 0.01..3.0f64) {
            let spec = gauss(tau, h);
            let mid = smoothed_loss(lam * u1 + (1.0 - lam) * u2, &spec);
            let chord = lam * smoothed_loss(u1, &spec) + (1.0 - lam) * smoothed_loss(u2, &spec);
            prop_assert!(mid <= chord + 1e-12);
        }

        #[test]
        fn smoothed_loss_dominates_check_loss(u in -50.0..50.0f64, tau in 0.01..0.99f64, h in 0.001..5.0f64) {
            for kernel in [Kernel::Gaussian, Kernel::Uniform, Kernel::Epanechnikov] {
                let spec = QuantileSpec::new(tau, h, kernel).unwrap();
                prop_assert!(smoothed_loss(u, &spec) >= check_loss(u, tau) - 1e-12);
            }
        }

        #[test]
        fn score_weight_bounded_monotone(a in -30.0..30.0f64, d in 0.0..5.0f64, tau in 0.01..0.99f64, h in 0.01..3.0f64) {
            for kernel in [Kernel::Gaussian, Kernel::Uniform, Kernel::Epanechnikov] {
                let spec = QuantileSpec::new(tau, h, kernel).unwrap();
                let w = score_weight(a, &spec);
                prop_assert!(w >= -tau && w <= 1.0 - tau);
                prop_assert!(score_weight(a + d, &spec) >= w);
            }
        }
    }
}
