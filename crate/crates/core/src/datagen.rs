//! Synthetic designs: correlated uniform covariates, signed-uniform
//! coefficients, homoscedastic or heteroscedastic errors, feature partitions
//! and train/test splits.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::normal;
use crate::seed::{derive_seed, domain};
use crate::smoothing::check_tau;

const SQRT3: f64 = 1.732_050_807_568_877_2;
/// Degrees of freedom of the heavy-tailed innovation.
pub const T_DF: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Homoscedastic,
    Heteroscedastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Innovation {
    Normal,
    /// Student t(5) scaled by √(3/5) to unit variance.
    T5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    /// One AR chain over all columns.
    Ar,
    /// Independent AR chains per machine block.
    BlockAr,
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Domain(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

named_enum!(ErrorKind { Homoscedastic => "homoscedastic", Heteroscedastic => "heteroscedastic" });
named_enum!(Innovation { Normal => "normal", T5 => "t5" });
named_enum!(CovarianceKind { Ar => "ar", BlockAr => "block_ar" });

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub error_kind: ErrorKind,
    pub innovation: Innovation,
    pub tau: f64,
    pub covariance: CovarianceKind,
    /// Lag-one correlation of the latent AR chain.
    pub rho: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n: 5000,
            p: 60,
            m: 15,
            error_kind: ErrorKind::Homoscedastic,
            innovation: Innovation::Normal,
            tau: 0.5,
            covariance: CovarianceKind::Ar,
            rho: 0.5,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 samples, got {}",
                self.n
            )));
        }
        if self.m == 0 || self.p < self.m {
            return Err(Error::Domain(format!(
                "cannot split {} features over {} machines",
                self.p, self.m
            )));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::Domain(format!(
                "AR correlation must lie in (-1, 1), got {}",
                self.rho
            )));
        }
        check_tau(self.tau)
    }

    pub fn partition(&self) -> Result<Vec<Range<usize>>> {
        partition_features(self.p, self.m)
    }

    /// Copy with a new seed, for Monte-Carlo replications.
    pub fn with_seed(&self, seed: u64) -> Self {
        Scenario {
            seed,
            ..self.clone()
        }
    }
}

/// Correlation between two uniforms obtained from a Gaussian pair with
/// correlation `r` via `√3(2Φ(z) − 1)`.
pub fn implied_uniform_correlation(r: f64) -> f64 {
    6.0 / std::f64::consts::PI * (r / 2.0).asin()
}

pub fn gen_covariates(s: &Scenario) -> Result<DMatrix<f64>> {
    s.validate()?;
    let blocks = match s.covariance {
        CovarianceKind::Ar => vec![0..s.p],
        CovarianceKind::BlockAr => s.partition()?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, domain::COVARIATES, 0));
    let innov = (1.0 - s.rho * s.rho).sqrt();
    let mut x = DMatrix::zeros(s.n, s.p);
    for i in 0..s.n {
        for block in &blocks {
            let mut z = 0.0;
            for k in block.clone() {
                let e: f64 = rng.sample(StandardNormal);
                z = if k == block.start {
                    e
                } else {
                    s.rho * z + innov * e
                };
                x[(i, k)] = SQRT3 * (2.0 * normal::cdf(z) - 1.0);
            }
        }
    }
    Ok(x)
}

/// `β₀ = b₁ ∘ b₂` with Rademacher `b₁` and `U(1, 2)` entries `b₂`.
pub fn gen_beta0(p: usize, seed: u64) -> Result<DVector<f64>> {
    if p == 0 {
        return Err(Error::Domain("coefficient vector must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::COEFFICIENTS, 0));
    Ok(DVector::from_fn(p, |_, _| {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        sign * rng.random_range(1.0..=2.0)
    }))
}

/// Closed-form CDF of Student t with 5 degrees of freedom.
fn t5_cdf(t: f64) -> f64 {
    let theta = (t / T_DF.sqrt()).atan();
    let (sin, cos) = theta.sin_cos();
    0.5 + (theta + sin * cos * (1.0 + 2.0 / 3.0 * cos * cos)) / std::f64::consts::PI
}

/// τ-quantile of the unit-variance innovation distribution.
pub fn innovation_quantile(innovation: Innovation, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    match innovation {
        Innovation::Normal => Ok(normal::quantile(tau)),
        Innovation::T5 => {
            let scale = (3.0 / 5.0f64).sqrt();
            let (mut lo, mut hi) = (-50.0, 50.0);
            while hi - lo > 1e-12 {
                let mid = 0.5 * (lo + hi);
                if t5_cdf(mid / scale) < tau {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(0.5 * (lo + hi))
        }
    }
}

fn draw_innovation(rng: &mut ChaCha8Rng, innovation: Innovation, chi: &ChiSquared<f64>) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    match innovation {
        Innovation::Normal => z,
        Innovation::T5 => {
            let v = chi.sample(rng);
            z / (v / T_DF).sqrt() * (3.0 / 5.0f64).sqrt()
        }
    }
}

/// Errors centred so that their conditional τ-quantile is zero.
pub fn gen_errors(s: &Scenario, x_col1: &[f64]) -> Result<DVector<f64>> {
    s.validate()?;
    if s.error_kind == ErrorKind::Heteroscedastic && x_col1.len() != s.n {
        return Err(Error::Structural(format!(
            "first covariate has {} values, expected {}",
            x_col1.len(),
            s.n
        )));
    }
    let q = innovation_quantile(s.innovation, s.tau)?;
    let chi = ChiSquared::new(T_DF).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, domain::ERRORS, 0));
    Ok(DVector::from_fn(s.n, |i, _| {
        let e = draw_innovation(&mut rng, s.innovation, &chi) - q;
        match s.error_kind {
            ErrorKind::Homoscedastic => e,
            ErrorKind::Heteroscedastic => (1.0 + 0.25 * x_col1[i]) * e,
        }
    }))
}

/// Contiguous column ranges; the first `p mod m` machines get one extra column.
pub fn partition_features(p: usize, m: usize) -> Result<Vec<Range<usize>>> {
    if m == 0 || p < m {
        return Err(Error::Domain(format!(
            "cannot split {p} features over {m} machines"
        )));
    }
    let (base, extra) = (p / m, p % m);
    let mut start = 0;
    Ok((0..m)
        .map(|j| {
            let width = base + usize::from(j < extra);
            let r = start..start + width;
            start += width;
            r
        })
        .collect())
}

/// Uniform random split; both parts are returned in increasing order.
pub fn train_test_split(n: usize, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Domain(format!(
            "training fraction must lie in (0, 1), got {frac}"
        )));
    }
    if n < 2 {
        return Err(Error::Domain(format!("cannot split {n} samples")));
    }
    let n_train = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        domain::SPLIT,
        0,
    )));
    let mut test = idx.split_off(n_train);
    idx.sort_unstable();
    test.sort_unstable();
    Ok((idx, test))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub beta0: DVector<f64>,
    pub errors: DVector<f64>,
    pub partition: Vec<Range<usize>>,
}

impl Dataset {
    pub fn generate(s: &Scenario) -> Result<Self> {
        let x = gen_covariates(s)?;
        let beta0 = gen_beta0(s.p, s.seed)?;
        let col1: Vec<f64> = x.column(0).iter().copied().collect();
        let errors = gen_errors(s, &col1)?;
        let y = &x * &beta0 + &errors;
        Ok(Dataset {
            x,
            y,
            beta0,
            errors,
            partition: s.partition()?,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn m(&self) -> usize {
        self.partition.len()
    }

    /// Rows `rows` of the design and response; `errors` follow the rows.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            beta0: self.beta0.clone(),
            errors: self.errors.select_rows(rows),
            partition: self.partition.clone(),
        }
    }

    pub fn block(&self, j: usize) -> DMatrix<f64> {
        let r = &self.partition[j];
        self.x.columns(r.start, r.len()).into_owned()
    }
}
