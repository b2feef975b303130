//! The synchronous decentralized fitting loop.
//!
//! Every iteration has two phases separated by a barrier:
//!
//! 1. each node takes a (possibly noisy) surrogate-gradient step on `β_j` and
//!    the matching tracking step on `z_j`;
//! 2. all nodes run `κ₀` gossip rounds on their `z` vectors, each round reading
//!    a frozen snapshot of the previous round.
//!
//! Node updates run in parallel; each node draws noise from its own stream so
//! the result does not depend on scheduling.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::node::{private_local_update, NodeState, PrivacyParams};
use crate::seed::{derive_seed, domain};
use crate::smoothing::{mean_check_loss, relative_change, QuantileSpec, DIVERGENCE_NORM};
use crate::topology::{self, MixingMatrix};

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub spec: QuantileSpec,
    pub eta: f64,
    pub kappa0: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub privacy: PrivacyParams,
    pub master_seed: u64,
    pub record_traces: bool,
    /// Keep the stacked coefficient vector of every iteration.
    pub record_iterates: bool,
    /// True coefficients, for estimation-error traces.
    pub beta_truth: Option<DVector<f64>>,
    /// Centralized reference solution, for loss-gap and algorithm-error traces.
    pub beta_star: Option<DVector<f64>>,
}

impl FitConfig {
    pub fn new(spec: QuantileSpec) -> Self {
        FitConfig {
            spec,
            eta: 1.0,
            kappa0: 1,
            max_iter: 1000,
            tol: 1e-8,
            privacy: PrivacyParams::disabled(),
            master_seed: 0,
            record_traces: false,
            record_iterates: false,
            beta_truth: None,
            beta_star: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Domain(format!(
                "step size must be positive, got {}",
                self.eta
            )));
        }
        if self.kappa0 == 0 {
            return Err(Error::Domain(
                "at least one mixing round is required".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::Domain("iteration cap must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Domain(format!(
                "tolerance must be non-negative, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Diagnostics recorded after iteration `iter`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    /// `|Q̂_τ(β^{(t)}) − Q̂_τ(β*)|` with the unsmoothed loss.
    pub dql: Option<f64>,
    /// `‖β^{(t)} − β₀‖₂`.
    pub est_err: Option<f64>,
    /// `‖β^{(t)} − β*‖₂`.
    pub alg_err: Option<f64>,
    /// `max_j ‖z_j − z̄‖₂` after mixing.
    pub consensus_dev: f64,
    /// Same quantity before this iteration's mixing phase.
    pub consensus_dev_pre_mix: f64,
    /// `‖Σ z_j − Σ X_j β_j‖₂ / (1 + ‖Σ X_j β_j‖₂)`.
    pub tracking_gap: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: Vec<DVector<f64>>,
    pub z_final: Vec<DVector<f64>>,
    pub iterations_run: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
    /// `β^{(1)}, …, β^{(T)}` stacked, when iterate recording is on.
    pub iterates: Vec<DVector<f64>>,
}

impl FitResult {
    /// Node coefficient blocks stacked in node order.
    pub fn beta(&self) -> DVector<f64> {
        concat(&self.beta_hat)
    }
}

pub(crate) fn concat(blocks: &[DVector<f64>]) -> DVector<f64> {
    let total = blocks.iter().map(|b| b.len()).sum();
    DVector::from_iterator(total, blocks.iter().flat_map(|b| b.iter().copied()))
}

/// Splits `x` into column blocks and builds one node per block, with noise
/// streams derived from `master_seed`.
pub fn build_nodes(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    partition: &[Range<usize>],
    master_seed: u64,
    init: Option<&[DVector<f64>]>,
) -> Result<Vec<NodeState>> {
    if let Some(init) = init {
        if init.len() != partition.len() {
            return Err(Error::Structural(format!(
                "{} initial vectors for {} nodes",
                init.len(),
                partition.len()
            )));
        }
    }
    let y = Arc::new(y.clone());
    partition
        .iter()
        .enumerate()
        .map(|(j, cols)| {
            if cols.end > x.ncols() || cols.start >= cols.end {
                return Err(Error::Structural(format!(
                    "column range {cols:?} invalid for a {}-column design",
                    x.ncols()
                )));
            }
            let block = x.columns(cols.start, cols.len()).into_owned();
            let beta0 = init.map(|v| v[j].clone());
            NodeState::new(
                j,
                block,
                y.clone(),
                beta0,
                derive_seed(master_seed, domain::NODE_NOISE, j as u64),
            )
        })
        .collect()
}

/// `max_j ‖z_j − z̄‖₂`.
pub fn consensus_deviation(nodes: &[NodeState]) -> f64 {
    let zs: Vec<DVector<f64>> = nodes.iter().map(|n| n.z().clone()).collect();
    topology::max_deviation(&zs)
}

fn check_nodes(nodes: &[NodeState], w: &MixingMatrix, cfg: &FitConfig) -> Result<()> {
    let first = nodes
        .first()
        .ok_or_else(|| Error::Structural("no nodes to fit".into()))?;
    if w.m() != nodes.len() {
        return Err(Error::Structural(format!(
            "mixing matrix has {} nodes, network has {}",
            w.m(),
            nodes.len()
        )));
    }
    for node in nodes {
        if node.n() != first.n() {
            return Err(Error::Structural(
                "nodes hold different sample sizes".into(),
            ));
        }
        if !Arc::ptr_eq(node.shared_y(), first.shared_y()) && node.y() != first.y() {
            return Err(Error::Structural(format!(
                "node {} holds a different response",
                node.index()
            )));
        }
    }
    let p: usize = nodes.iter().map(|n| n.p()).sum();
    for (name, v) in [
        ("beta_truth", &cfg.beta_truth),
        ("beta_star", &cfg.beta_star),
    ] {
        if let Some(v) = v {
            if v.len() != p {
                return Err(Error::Structural(format!(
                    "{name} has length {}, expected {p}",
                    v.len()
                )));
            }
        }
    }
    Ok(())
}

/// Precomputed reference quantities for traces.
struct TraceContext {
    loss_star: Option<f64>,
}

impl TraceContext {
    fn new(nodes: &[NodeState], cfg: &FitConfig) -> Self {
        let loss_star = cfg.beta_star.as_ref().map(|b| {
            let fitted = blockwise_fit(nodes, b);
            mean_check_loss(
                nodes[0].y().iter().zip(fitted.iter()).map(|(y, f)| y - f),
                cfg.spec.tau(),
            )
        });
        TraceContext { loss_star }
    }
}

/// `Σ_j X_j b_j` for a stacked coefficient vector `b`.
fn blockwise_fit(nodes: &[NodeState], b: &DVector<f64>) -> DVector<f64> {
    let mut fitted = DVector::zeros(nodes[0].n());
    let mut start = 0;
    for node in nodes {
        fitted.gemv(1.0, node.x(), &b.rows(start, node.p()), 1.0);
        start += node.p();
    }
    fitted
}

/// Records the loss gap and error metrics allowed by the references in `cfg`.
pub fn trace_metrics(nodes: &[NodeState], cfg: &FitConfig, iter: usize) -> TraceRecord {
    let ctx = TraceContext::new(nodes, cfg);
    record(nodes, cfg, &ctx, iter, consensus_deviation(nodes))
}

fn record(
    nodes: &[NodeState],
    cfg: &FitConfig,
    ctx: &TraceContext,
    iter: usize,
    pre_mix: f64,
) -> TraceRecord {
    let beta = concat(&nodes.iter().map(|n| n.beta().clone()).collect::<Vec<_>>());
    let mut fitted = DVector::zeros(nodes[0].n());
    let mut z_sum = DVector::zeros(nodes[0].n());
    for node in nodes {
        fitted.gemv(1.0, node.x(), node.beta(), 1.0);
        z_sum += node.z();
    }
    let tracking_gap = (&z_sum - &fitted).norm() / (1.0 + fitted.norm());
    let dql = ctx.loss_star.map(|star| {
        let loss = mean_check_loss(
            nodes[0].y().iter().zip(fitted.iter()).map(|(y, f)| y - f),
            cfg.spec.tau(),
        );
        (loss - star).abs()
    });
    TraceRecord {
        iter,
        dql,
        est_err: cfg.beta_truth.as_ref().map(|b| (&beta - b).norm()),
        alg_err: cfg.beta_star.as_ref().map(|b| (&beta - b).norm()),
        consensus_dev: consensus_deviation(nodes),
        consensus_dev_pre_mix: pre_mix,
        tracking_gap,
    }
}

/// Runs the decentralized fit in place; `nodes` hold the final state on return.
pub fn run_dsg_cqr(
    nodes: &mut [NodeState],
    w: &MixingMatrix,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_nodes(nodes, w, cfg)?;
    let m = nodes.len();
    for node in nodes.iter_mut() {
        node.reseed(derive_seed(
            cfg.master_seed,
            domain::NODE_NOISE,
            node.index() as u64,
        ));
    }
    let ctx = cfg.record_traces.then(|| TraceContext::new(nodes, cfg));
    let mut trace = Vec::new();
    let mut iterates = Vec::new();
    let mut clean_prev: Vec<Option<DVector<f64>>> = vec![None; m];
    let mut previous: Vec<DVector<f64>> = nodes.iter().map(|n| n.beta().clone()).collect();
    let mut z_buf: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut z_scratch: Vec<DVector<f64>> = nodes.iter().map(|n| n.z().clone()).collect();
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=cfg.max_iter {
        // Phase A: local steps.
        let steps: Vec<Result<DVector<f64>>> = nodes
            .par_iter_mut()
            .zip(clean_prev.par_iter())
            .map(|(node, prev)| {
                private_local_update(node, &cfg.spec, m, cfg.eta, &cfg.privacy, t, prev.as_ref())
                    .map(|s| s.clean)
            })
            .collect();
        for (slot, step) in clean_prev.iter_mut().zip(steps) {
            *slot = Some(step?);
        }

        // Phase B: gossip on the auxiliary vectors, double-buffered.
        let pre_mix = if cfg.record_traces {
            consensus_deviation(nodes)
        } else {
            0.0
        };
        z_buf.clear();
        z_buf.extend(
            nodes
                .iter_mut()
                .map(|n| std::mem::replace(n.z_mut(), DVector::zeros(0))),
        );
        for _ in 0..cfg.kappa0 {
            z_scratch.par_iter_mut().enumerate().for_each(|(j, out)| {
                out.fill(0.0);
                for &(i, weight) in w.neighborhood(j) {
                    out.axpy(weight, &z_buf[i], 1.0);
                }
            });
            std::mem::swap(&mut z_buf, &mut z_scratch);
        }
        for (node, z) in nodes.iter_mut().zip(z_buf.drain(..)) {
            *node.z_mut() = z;
        }

        iterations = t;
        let mut max_change = 0.0f64;
        for (node, prev) in nodes.iter().zip(previous.iter_mut()) {
            let norm = node.beta().norm();
            if !(norm <= DIVERGENCE_NORM) {
                return Err(Error::Divergence { iteration: t, norm });
            }
            max_change = max_change.max(relative_change(node.beta(), prev));
            prev.copy_from(node.beta());
        }
        if let Some(ctx) = &ctx {
            trace.push(record(nodes, cfg, ctx, t, pre_mix));
        }
        if cfg.record_iterates {
            iterates.push(concat(&previous));
        }
        if max_change < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        beta_hat: nodes.iter().map(|n| n.beta().clone()).collect(),
        z_final: nodes.iter().map(|n| n.z().clone()).collect(),
        iterations_run: iterations,
        converged,
        trace,
        iterates,
    })
}
