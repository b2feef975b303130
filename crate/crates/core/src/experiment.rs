//! Monte-Carlo experiments: held-out quantile loss and interval coverage for
//! the decentralized, private, global and isolated estimators.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::datagen::{train_test_split, Dataset, Scenario};
use crate::error::{Error, Result};
use crate::inference::{infer_node, InferenceMode};
use crate::node::{NodeState, PrivacyParams, SensitivityMode};
use crate::protocol::{build_nodes, run_dsg_cqr, FitConfig};
use crate::seed::{derive_seed, domain};
use crate::smoothing::{
    centralized_fit, empirical_check_loss, rule_of_thumb_bandwidth, DescentOptions, Kernel,
    QuantileSpec,
};
use crate::topology::{named_topology, MixingMatrix, TopologyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    DsgCqr,
    DsgCqrPp,
    GlbCqr,
    IsoCqr,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::DsgCqr,
        Method::DsgCqrPp,
        Method::GlbCqr,
        Method::IsoCqr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DsgCqr => "dsg_cqr",
            Method::DsgCqrPp => "dsg_cqr_pp",
            Method::GlbCqr => "glb_cqr",
            Method::IsoCqr => "iso_cqr",
        }
    }

    fn needs_network(self) -> bool {
        matches!(self, Method::DsgCqr | Method::DsgCqrPp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Domain(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub topology: TopologyKind,
    pub pi_w: f64,
    pub eta: f64,
    pub kappa0: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub kernel: Kernel,
    /// Fixed fitting bandwidth; the rule of thumb with `h_mult` otherwise.
    pub h: Option<f64>,
    pub h_mult: f64,
    /// Overall privacy level for the private method.
    pub privacy_eps_bar: f64,
    pub privacy_delta: f64,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub train_frac: f64,
    pub master_seed: u64,
    /// Step size for the centralized baselines.
    pub central_eta: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::default(),
            topology: TopologyKind::Random,
            pi_w: 0.5,
            eta: 0.3,
            kappa0: 3,
            max_iter: 2000,
            tol: 1e-7,
            kernel: Kernel::Gaussian,
            h: None,
            h_mult: 1.5,
            privacy_eps_bar: 0.5,
            privacy_delta: 1e-5,
            replications: 100,
            methods: vec![
                Method::DsgCqr,
                Method::DsgCqrPp,
                Method::GlbCqr,
                Method::IsoCqr,
            ],
            train_frac: 0.9,
            master_seed: 0,
            central_eta: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.replications == 0 {
            return Err(Error::Domain("replication count must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Domain("no methods requested".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Domain(format!(
                "training fraction must lie in (0, 1), got {}",
                self.train_frac
            )));
        }
        Ok(())
    }

    pub fn bandwidth(&self, n: usize, mult: f64) -> Result<f64> {
        match self.h {
            Some(h) => Ok(h),
            None => rule_of_thumb_bandwidth(self.scenario.p, n, self.scenario.tau, mult),
        }
    }

    /// The mixing matrix shared by all replications, or `None` when no
    /// requested method runs on the network.
    pub fn network(&self) -> Result<Option<MixingMatrix>> {
        if !self.methods.iter().any(|m| m.needs_network()) {
            return Ok(None);
        }
        let seed = derive_seed(self.master_seed, domain::TOPOLOGY, 0);
        let g = named_topology(self.topology, self.scenario.m, self.pi_w, seed)?;
        Ok(Some(MixingMatrix::metropolis_hastings(&g)))
    }

    pub fn privacy(&self, n: usize) -> Result<PrivacyParams> {
        let q = self
            .scenario
            .partition()?
            .iter()
            .map(|r| r.len())
            .max()
            .unwrap_or(1);
        PrivacyParams::from_overall_budget(
            self.privacy_eps_bar,
            self.privacy_delta,
            q,
            n,
            SensitivityMode::Empirical,
        )
    }

    fn fit_config(&self, spec: &QuantileSpec, privacy: PrivacyParams, seed: u64) -> FitConfig {
        let mut cfg = FitConfig::new(spec.clone());
        cfg.eta = self.eta;
        cfg.kappa0 = self.kappa0;
        cfg.max_iter = self.max_iter;
        cfg.tol = self.tol;
        cfg.privacy = privacy;
        cfg.master_seed = seed;
        cfg
    }

    fn central_options(&self) -> DescentOptions {
        DescentOptions {
            eta: self.central_eta,
            max_iter: self.max_iter.max(1),
            tol: self.tol,
            record_history: false,
        }
    }

    fn replication_scenario(&self, r: usize) -> Scenario {
        self.scenario
            .with_seed(derive_seed(self.master_seed, domain::REPLICATION, r as u64))
    }
}

/// One fitted method: the full coefficient vector (zero outside machine 1 for
/// the isolated estimator) and its solver diagnostics.
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Post-fit nodes, for the networked methods.
    pub nodes: Option<Vec<NodeState>>,
}

/// Fits one method on a training set.
pub fn fit_method(
    method: Method,
    cfg: &ExperimentConfig,
    train: &Dataset,
    spec: &QuantileSpec,
    network: Option<&MixingMatrix>,
    seed: u64,
) -> Result<MethodFit> {
    match method {
        Method::DsgCqr | Method::DsgCqrPp => {
            let w = network
                .ok_or_else(|| Error::Structural("networked method without a network".into()))?;
            let privacy = if method == Method::DsgCqrPp {
                cfg.privacy(train.n())?
            } else {
                PrivacyParams::disabled()
            };
            let fit_cfg = cfg.fit_config(spec, privacy, seed);
            let mut nodes = build_nodes(&train.x, &train.y, &train.partition, seed, None)?;
            let fit = run_dsg_cqr(&mut nodes, w, &fit_cfg)?;
            Ok(MethodFit {
                beta: fit.beta(),
                iterations: fit.iterations_run,
                converged: fit.converged,
                nodes: Some(nodes),
            })
        }
        Method::GlbCqr => {
            let fit = centralized_fit(&train.x, &train.y, spec, &cfg.central_options())?;
            Ok(MethodFit {
                beta: fit.beta,
                iterations: fit.iterations,
                converged: fit.converged,
                nodes: None,
            })
        }
        Method::IsoCqr => {
            let fit = centralized_fit(&train.block(0), &train.y, spec, &cfg.central_options())?;
            let mut beta = DVector::zeros(train.x.ncols());
            beta.rows_mut(0, fit.beta.len()).copy_from(&fit.beta);
            Ok(MethodFit {
                beta,
                iterations: fit.iterations,
                converged: fit.converged,
                nodes: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestingErrorRow {
    pub replication: usize,
    pub method: Method,
    /// Mean unsmoothed quantile loss per test observation.
    pub test_loss: f64,
    pub est_err: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: f64,
    pub sd: f64,
    pub mean_est_err: f64,
    pub replications: usize,
    pub failures: usize,
}

impl MethodSummary {
    /// `mean(sd)` with three decimals.
    pub fn formatted(&self) -> String {
        format!("{:.3}({:.3})", self.mean, self.sd)
    }
}

#[derive(Debug, Clone)]
pub struct TestingErrorResult {
    pub rows: Vec<TestingErrorRow>,
    pub failures: BTreeMap<Method, usize>,
    pub h: f64,
}

impl TestingErrorResult {
    pub fn summary(&self, methods: &[Method]) -> Vec<MethodSummary> {
        methods
            .iter()
            .map(|&method| {
                let rows: Vec<&TestingErrorRow> =
                    self.rows.iter().filter(|r| r.method == method).collect();
                let losses: Vec<f64> = rows.iter().map(|r| r.test_loss).collect();
                let (mean, sd) = mean_sd(&losses);
                MethodSummary {
                    method,
                    mean,
                    sd,
                    mean_est_err: mean_sd(&rows.iter().map(|r| r.est_err).collect::<Vec<_>>()).0,
                    replications: rows.len(),
                    failures: self.failures.get(&method).copied().unwrap_or(0),
                }
            })
            .collect()
    }

    pub fn mean_loss(&self, method: Method) -> f64 {
        self.summary(&[method])[0].mean
    }
}

/// Sample mean and standard deviation (`n − 1` denominator).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Generate, split, fit every method on the training part and score the
/// held-out quantile loss, for each replication.
pub fn run_testing_error(cfg: &ExperimentConfig) -> Result<TestingErrorResult> {
    cfg.validate()?;
    let network = cfg.network()?;
    let n_train =
        ((cfg.train_frac * cfg.scenario.n as f64).round() as usize).clamp(1, cfg.scenario.n - 1);
    let h = cfg.bandwidth(n_train, cfg.h_mult)?;
    let spec = QuantileSpec::new(cfg.scenario.tau, h, cfg.kernel)?;

    let outcomes: Vec<Vec<(Method, Result<TestingErrorRow>)>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let scenario = cfg.replication_scenario(r);
            let prepared = Dataset::generate(&scenario).and_then(|data| {
                let (train_idx, test_idx) =
                    train_test_split(data.n(), cfg.train_frac, scenario.seed)?;
                Ok((data.select_rows(&train_idx), data.select_rows(&test_idx)))
            });
            cfg.methods
                .iter()
                .map(|&method| {
                    let row = prepared
                        .as_ref()
                        .map_err(clone_error)
                        .and_then(|(train, test)| {
                            let fit = fit_method(
                                method,
                                cfg,
                                train,
                                &spec,
                                network.as_ref(),
                                scenario.seed,
                            )?;
                            Ok(TestingErrorRow {
                                replication: r,
                                method,
                                test_loss: empirical_check_loss(
                                    &test.x,
                                    &test.y,
                                    &fit.beta,
                                    spec.tau(),
                                )?,
                                est_err: (&fit.beta - &train.beta0).norm(),
                                iterations: fit.iterations,
                                converged: fit.converged,
                            })
                        });
                    (method, row)
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = BTreeMap::new();
    for (method, outcome) in outcomes.into_iter().flatten() {
        match outcome {
            Ok(row) => rows.push(row),
            Err(_) => *failures.entry(method).or_insert(0) += 1,
        }
    }
    Ok(TestingErrorResult { rows, failures, h })
}

fn clone_error(e: &Error) -> Error {
    Error::Numerical(format!("data generation failed: {e}"))
}

#[derive(Debug, Clone)]
pub struct CoverageConfig {
    pub modes: Vec<InferenceMode>,
    pub level: f64,
    /// Inference bandwidth multiplier (rule of thumb at the fitting `n`).
    pub infer_h_mult: f64,
    /// `(node, coefficient)` pairs, 0-indexed within the node's block.
    pub targets: Vec<(usize, usize)>,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            modes: vec![InferenceMode::Hr, InferenceMode::Hs],
            level: 0.95,
            infer_h_mult: 0.5,
            targets: vec![(0, 0), (1, 0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub replication: usize,
    pub method: Method,
    pub mode: InferenceMode,
    pub node: usize,
    pub coef: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageSummary {
    pub method: Method,
    pub mode: InferenceMode,
    pub node: usize,
    pub coef: usize,
    /// Average empirical coverage probability.
    pub aecp: f64,
    /// Average interval width.
    pub aw: f64,
    pub replications: usize,
}

#[derive(Debug, Clone)]
pub struct CoverageResult {
    pub rows: Vec<CoverageRow>,
    pub failures: BTreeMap<Method, usize>,
    pub fit_h: f64,
    pub infer_h: f64,
}

impl CoverageResult {
    pub fn summary(&self) -> Vec<CoverageSummary> {
        let mut groups: BTreeMap<
            (Method, &'static str, usize, usize),
            (InferenceMode, Vec<&CoverageRow>),
        > = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.method, r.mode.name(), r.node, r.coef))
                .or_insert((r.mode, Vec::new()))
                .1
                .push(r);
        }
        groups
            .into_iter()
            .map(|((method, _, node, coef), (mode, rows))| {
                let k = rows.len() as f64;
                CoverageSummary {
                    method,
                    mode,
                    node,
                    coef,
                    aecp: rows.iter().filter(|r| r.covered).count() as f64 / k,
                    aw: rows.iter().map(|r| r.upper - r.lower).sum::<f64>() / k,
                    replications: rows.len(),
                }
            })
            .collect()
    }

    pub fn aecp(
        &self,
        method: Method,
        mode: InferenceMode,
        node: usize,
        coef: usize,
    ) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.method == method && s.mode == mode && s.node == node && s.coef == coef)
            .map(|s| s.aecp)
    }
}

/// Builds a single node holding `cols` of `x` with coefficients `beta`,
/// already at its own fitted values.
fn single_node(x: DMatrix<f64>, y: &DVector<f64>, beta: DVector<f64>) -> Result<NodeState> {
    NodeState::new(0, x, std::sync::Arc::new(y.clone()), Some(beta), 0)
}

/// Coverage of Wald intervals for selected coefficients. The whole sample is
/// used for fitting. The isolated estimator fits each target's machine alone.
pub fn run_coverage(cfg: &ExperimentConfig, cov: &CoverageConfig) -> Result<CoverageResult> {
    cfg.validate()?;
    let partition = cfg.scenario.partition()?;
    for &(node, coef) in &cov.targets {
        if node >= partition.len() || coef >= partition[node].len() {
            return Err(Error::Domain(format!(
                "target ({node}, {coef}) is outside the partition"
            )));
        }
    }
    let network = cfg.network()?;
    let n = cfg.scenario.n;
    let fit_h = cfg.bandwidth(n, cfg.h_mult)?;
    let infer_h = rule_of_thumb_bandwidth(cfg.scenario.p, n, cfg.scenario.tau, cov.infer_h_mult)?;
    let spec = QuantileSpec::new(cfg.scenario.tau, fit_h, cfg.kernel)?;
    let infer_spec = spec.with_bandwidth(infer_h)?;
    let m = partition.len();

    let outcomes: Vec<Vec<(Method, Result<Vec<CoverageRow>>)>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let scenario = cfg.replication_scenario(r);
            let data = Dataset::generate(&scenario);
            cfg.methods
                .iter()
                .map(|&method| {
                    let rows = data.as_ref().map_err(clone_error).and_then(|data| {
                        let mut rows = Vec::new();
                        let mut push = |mode,
                                        node: usize,
                                        coef: usize,
                                        report: &crate::inference::InferenceReport,
                                        k: usize| {
                            let truth = data.beta0[partition[node].start + coef];
                            let (lower, upper) = report.intervals[k];
                            rows.push(CoverageRow {
                                replication: r,
                                method,
                                mode,
                                node,
                                coef,
                                estimate: report.estimate[k],
                                lower,
                                upper,
                                covered: report.covers(k, truth),
                            });
                        };
                        match method {
                            Method::DsgCqr | Method::DsgCqrPp => {
                                let fit = fit_method(
                                    method,
                                    cfg,
                                    data,
                                    &spec,
                                    network.as_ref(),
                                    scenario.seed,
                                )?;
                                let nodes = fit.nodes.expect("networked fits keep their nodes");
                                for &mode in &cov.modes {
                                    for &(node, coef) in &cov.targets {
                                        let report = infer_node(
                                            &nodes[node],
                                            m,
                                            &infer_spec,
                                            mode,
                                            cov.level,
                                        )?;
                                        push(mode, node, coef, &report, coef);
                                    }
                                }
                            }
                            Method::GlbCqr => {
                                let fit = centralized_fit(
                                    &data.x,
                                    &data.y,
                                    &spec,
                                    &cfg.central_options(),
                                )?;
                                let node = single_node(data.x.clone(), &data.y, fit.beta)?;
                                for &mode in &cov.modes {
                                    let report =
                                        infer_node(&node, 1, &infer_spec, mode, cov.level)?;
                                    for &(j, coef) in &cov.targets {
                                        push(mode, j, coef, &report, partition[j].start + coef);
                                    }
                                }
                            }
                            Method::IsoCqr => {
                                for &(j, coef) in &cov.targets {
                                    let block = data.block(j);
                                    let fit = centralized_fit(
                                        &block,
                                        &data.y,
                                        &spec,
                                        &cfg.central_options(),
                                    )?;
                                    let node = single_node(block, &data.y, fit.beta)?;
                                    for &mode in &cov.modes {
                                        let report =
                                            infer_node(&node, 1, &infer_spec, mode, cov.level)?;
                                        push(mode, j, coef, &report, coef);
                                    }
                                }
                            }
                        }
                        Ok(rows)
                    });
                    (method, rows)
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = BTreeMap::new();
    for (method, outcome) in outcomes.into_iter().flatten() {
        match outcome {
            Ok(r) => rows.extend(r),
            Err(_) => *failures.entry(method).or_insert(0) += 1,
        }
    }
    Ok(CoverageResult {
        rows,
        failures,
        fit_h,
        infer_h,
    })
}
