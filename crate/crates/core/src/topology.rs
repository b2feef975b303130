//! Communication graphs, doubly stochastic mixing matrices and the gossip
//! averaging step.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Undirected, connected graph on nodes `0..m`. Edges are stored as `(i, j)`
/// with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    m: usize,
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Star,
    Line,
    Circle,
    Complete,
    /// Uniformly drawn edge subset of size `⌊m(m−1)π/2⌋`.
    Random,
}

impl std::str::FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "star" => Ok(TopologyKind::Star),
            "line" => Ok(TopologyKind::Line),
            "circle" | "ring" => Ok(TopologyKind::Circle),
            "complete" | "full" => Ok(TopologyKind::Complete),
            "random" | "mh" => Ok(TopologyKind::Random),
            other => Err(Error::Domain(format!("unknown topology `{other}`"))),
        }
    }
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Star => "star",
            TopologyKind::Line => "line",
            TopologyKind::Circle => "circle",
            TopologyKind::Complete => "complete",
            TopologyKind::Random => "random",
        }
    }
}

/// Rejection-sampling cap for connected random graphs.
pub const RANDOM_GRAPH_RETRIES: usize = 1000;

impl Graph {
    /// Builds a graph, rejecting self loops, out-of-range endpoints and
    /// disconnected edge sets.
    pub fn new(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Construction("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= m || b >= m {
                return Err(Error::Construction(format!(
                    "edge ({a},{b}) out of range for m={m}"
                )));
            }
            if a == b {
                return Err(Error::Construction(format!("self loop at node {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let g = Graph { m, edges: set };
        if !g.is_connected() {
            return Err(Error::Construction(format!(
                "graph on {m} nodes is disconnected"
            )));
        }
        Ok(g)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.m];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    fn is_connected(&self) -> bool {
        let adj = self.adjacency();
        let mut seen = vec![false; self.m];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.m
    }

    /// Parses the edge-list format: first non-comment line `m`, then one
    /// 1-indexed `i j` pair per line. Blank lines and `#` comments are skipped.
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut m = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            match m {
                None => {
                    let value: usize = fields
                        .next()
                        .and_then(|f| f.parse().ok())
                        .ok_or_else(|| Error::parse(line_no, "expected node count"))?;
                    if fields.next().is_some() {
                        return Err(Error::parse(line_no, "node count line has extra fields"));
                    }
                    if value == 0 {
                        return Err(Error::parse(line_no, "node count must be positive"));
                    }
                    m = Some(value);
                }
                Some(count) => {
                    let mut endpoint = || -> Result<usize> {
                        let v: usize = fields
                            .next()
                            .and_then(|f| f.parse().ok())
                            .ok_or_else(|| Error::parse(line_no, "expected `i j` edge"))?;
                        if v == 0 || v > count {
                            return Err(Error::parse(
                                line_no,
                                format!("node {v} outside 1..={count}"),
                            ));
                        }
                        Ok(v - 1)
                    };
                    let a = endpoint()?;
                    let b = endpoint()?;
                    if fields.next().is_some() {
                        return Err(Error::parse(line_no, "edge line has extra fields"));
                    }
                    edges.push((a, b));
                }
            }
        }
        let m = m.ok_or_else(|| Error::parse(1, "empty edge list"))?;
        Graph::new(m, edges)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.m);
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "{} {}", a + 1, b + 1);
        }
        out
    }
}

/// Builds one of the named structures. Node 0 is the hub of the star.
pub fn named_topology(kind: TopologyKind, m: usize, pi_w: f64, seed: u64) -> Result<Graph> {
    if m < 2 {
        return Err(Error::Domain(format!("topologies need m ≥ 2, got {m}")));
    }
    match kind {
        TopologyKind::Star => Graph::new(m, (1..m).map(|j| (0, j))),
        TopologyKind::Line => Graph::new(m, (1..m).map(|j| (j - 1, j))),
        TopologyKind::Circle => Graph::new(m, (0..m).map(|j| (j, (j + 1) % m))),
        TopologyKind::Complete => Graph::new(m, all_pairs(m)),
        TopologyKind::Random => random_graph(m, pi_w, seed),
    }
}

fn all_pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |a| (a + 1..m).map(move |b| (a, b)))
}

fn random_graph(m: usize, pi_w: f64, seed: u64) -> Result<Graph> {
    if !(pi_w > 0.0 && pi_w <= 1.0) {
        return Err(Error::Domain(format!(
            "edge fraction must lie in (0,1], got {pi_w}"
        )));
    }
    let pairs: Vec<(usize, usize)> = all_pairs(m).collect();
    let count = (0.5 * (m * (m - 1)) as f64 * pi_w).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if count >= m - 1 {
        for _ in 0..RANDOM_GRAPH_RETRIES {
            let chosen = sample(&mut rng, pairs.len(), count);
            if let Ok(g) = Graph::new(m, chosen.iter().map(|k| pairs[k])) {
                return Ok(g);
            }
        }
    }
    Err(Error::Construction(format!(
        "no connected graph with {count} edges on {m} nodes after {RANDOM_GRAPH_RETRIES} draws"
    )))
}

/// Doubly stochastic, graph-sparse weights together with `α = ‖W − 11ᵀ/m‖₂`.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    alpha: f64,
    /// Per node: `(neighbor, weight)` pairs with non-zero weight, self included,
    /// in ascending neighbor order.
    neighbors: Vec<Vec<(usize, f64)>>,
}

const STOCHASTIC_TOL: f64 = 1e-12;

impl MixingMatrix {
    /// Metropolis–Hastings weights `w_ij = 1/(max(deg i, deg j) + 1)` on edges,
    /// with the diagonal absorbing the remainder.
    pub fn metropolis_hastings(g: &Graph) -> Self {
        let m = g.m();
        let deg = g.degrees();
        let mut w = DMatrix::zeros(m, m);
        for (a, b) in g.edges() {
            let v = 1.0 / (deg[a].max(deg[b]) + 1) as f64;
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
        for i in 0..m {
            let off: f64 = (0..m).filter(|&k| k != i).map(|k| w[(i, k)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        Self::assemble(w)
    }

    /// Exact averaging `11ᵀ/m` (Metropolis–Hastings on the complete graph).
    pub fn uniform(m: usize) -> Self {
        Self::assemble(DMatrix::from_element(m, m, 1.0 / m as f64))
    }

    /// Validates user-supplied weights against `g`.
    pub fn from_weights(g: &Graph, w: DMatrix<f64>) -> Result<Self> {
        let m = g.m();
        if w.nrows() != m || w.ncols() != m {
            return Err(Error::Structural(format!(
                "mixing matrix is {}x{}, graph has {m} nodes",
                w.nrows(),
                w.ncols()
            )));
        }
        for i in 0..m {
            for k in 0..m {
                let v = w[(i, k)];
                if !(v >= 0.0) {
                    return Err(Error::Construction(format!("negative weight at ({i},{k})")));
                }
                if i != k && v != 0.0 && !g.has_edge(i, k) {
                    return Err(Error::Construction(format!("weight on non-edge ({i},{k})")));
                }
            }
            let row: f64 = w.row(i).sum();
            let col: f64 = w.column(i).sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Construction(format!(
                    "row/column {i} does not sum to one"
                )));
            }
        }
        let mm = Self::assemble(w);
        if mm.alpha >= 1.0 - 1e-12 {
            return Err(Error::Construction(format!(
                "mixing matrix does not contract (α = {})",
                mm.alpha
            )));
        }
        Ok(mm)
    }

    fn assemble(w: DMatrix<f64>) -> Self {
        let m = w.nrows();
        let neighbors = (0..m)
            .map(|j| {
                (0..m)
                    .filter(|&i| w[(j, i)] != 0.0)
                    .map(|i| (i, w[(j, i)]))
                    .collect()
            })
            .collect();
        let alpha = spectral_alpha_of(&w);
        MixingMatrix {
            w,
            alpha,
            neighbors,
        }
    }

    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Nodes whose values node `j` averages, with their weights.
    pub fn neighborhood(&self, j: usize) -> &[(usize, f64)] {
        &self.neighbors[j]
    }
}

/// `‖W − 11ᵀ/m‖₂` of a validated mixing matrix.
pub fn spectral_alpha(w: &MixingMatrix) -> f64 {
    w.alpha
}

fn spectral_alpha_of(w: &DMatrix<f64>) -> f64 {
    let m = w.nrows();
    let centered = w - DMatrix::from_element(m, m, 1.0 / m as f64);
    centered
        .singular_values()
        .iter()
        .fold(0.0f64, |acc, &s| acc.max(s))
}

/// Population constants entering the step-size bound and decay factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceConstants {
    /// Smallest Hessian eigenvalue bound.
    pub a_l: f64,
    /// Largest Hessian eigenvalue bound.
    pub a_u: f64,
    /// Upper bound on the conditional error density.
    pub f_bar: f64,
    /// Largest eigenvalue of the covariate second-moment matrix.
    pub sigma_u: f64,
}

impl ConvergenceConstants {
    /// `(a_u / (a_l + a_u))^{1/2}`.
    pub fn a_ul(&self) -> f64 {
        (self.a_u / (self.a_l + self.a_u)).sqrt()
    }

    /// Largest admissible step size for `κ₀` mixing rounds.
    pub fn step_size_bound(&self, alpha: f64, kappa0: u32, m: usize) -> f64 {
        let a_ul = self.a_ul();
        let ak = alpha.powi(kappa0 as i32);
        let mixing = if ak == 0.0 {
            f64::INFINITY
        } else {
            (1.0 - ak) / ak * a_ul / (self.f_bar * m as f64 * self.sigma_u)
        };
        mixing.min(a_ul / self.a_l).min(1.0 / self.a_u)
    }

    /// Linear-rate decay factor `max{1 − η a_ul a_l, α^κ₀ (1 + η a_ul f̄ m σ_u)}`.
    pub fn decay_factor(&self, alpha: f64, kappa0: u32, eta: f64, m: usize) -> f64 {
        let a_ul = self.a_ul();
        let optimization = 1.0 - eta * a_ul * self.a_l;
        let consensus =
            alpha.powi(kappa0 as i32) * (1.0 + eta * a_ul * self.f_bar * m as f64 * self.sigma_u);
        optimization.max(consensus)
    }

    pub fn kappa_opt(&self, alpha: f64, eta: f64, m: usize) -> Result<u32> {
        kappa_opt(
            alpha,
            eta,
            self.a_ul(),
            self.a_l,
            self.f_bar,
            m,
            self.sigma_u,
        )
    }
}

/// Communication-optimal mixing rounds
/// `⌊log_α((1 − η a_ul a_l) / (1 + η a_ul f̄ m σ_u))⌋ ∨ 1`.
pub fn kappa_opt(
    alpha: f64,
    eta: f64,
    a_ul: f64,
    a_l: f64,
    f_bar: f64,
    m: usize,
    sigma_u: f64,
) -> Result<u32> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!("α must lie in [0,1), got {alpha}")));
    }
    for (name, v) in [
        ("eta", eta),
        ("a_ul", a_ul),
        ("a_l", a_l),
        ("f_bar", f_bar),
        ("sigma_u", sigma_u),
    ] {
        if !(v > 0.0) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    if m == 0 {
        return Err(Error::Domain("m must be positive".into()));
    }
    let ratio = (1.0 - eta * a_ul * a_l) / (1.0 + eta * a_ul * f_bar * m as f64 * sigma_u);
    if !(ratio > 0.0) {
        return Err(Error::Domain(format!(
            "log argument {ratio} is not positive; the step size is too large"
        )));
    }
    if alpha == 0.0 || ratio >= 1.0 {
        return Ok(1);
    }
    let rounds = (ratio.ln() / alpha.ln()).floor();
    Ok(if rounds >= 1.0 {
        rounds.min(u32::MAX as f64) as u32
    } else {
        1
    })
}

/// Synchronous gossip: `rounds` times, every node replaces its vector with the
/// weighted average of its neighborhood's previous vectors.
pub fn mix(values: &mut Vec<DVector<f64>>, w: &MixingMatrix, rounds: usize) -> Result<()> {
    if values.len() != w.m() {
        return Err(Error::Structural(format!(
            "{} value vectors for a {}-node mixing matrix",
            values.len(),
            w.m()
        )));
    }
    if let Some(first) = values.first() {
        let n = first.len();
        if values.iter().any(|v| v.len() != n) {
            return Err(Error::Structural("value vectors differ in length".into()));
        }
    }
    let mut scratch = values.clone();
    for _ in 0..rounds {
        mix_round(values, &mut scratch, w);
        std::mem::swap(values, &mut scratch);
    }
    Ok(())
}

/// One round: reads `current`, writes `next`. No node sees a partially
/// updated neighbor.
pub(crate) fn mix_round(current: &[DVector<f64>], next: &mut [DVector<f64>], w: &MixingMatrix) {
    for (j, out) in next.iter_mut().enumerate() {
        out.fill(0.0);
        for &(i, weight) in w.neighborhood(j) {
            out.axpy(weight, &current[i], 1.0);
        }
    }
}

/// `max_j ‖v_j − v̄‖₂`.
pub fn max_deviation(values: &[DVector<f64>]) -> f64 {
    let mean = mean_vector(values);
    values
        .iter()
        .map(|v| (v - &mean).norm())
        .fold(0.0, f64::max)
}

/// `(Σ_j ‖v_j − v̄‖₂²)^{1/2}`, the norm contracted by `α` each round.
pub fn deviation_norm(values: &[DVector<f64>]) -> f64 {
    let mean = mean_vector(values);
    values
        .iter()
        .map(|v| (v - &mean).norm_squared())
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn mean_vector(values: &[DVector<f64>]) -> DVector<f64> {
    let n = values.first().map_or(0, |v| v.len());
    let mut mean = DVector::zeros(n);
    for v in values {
        mean += v;
    }
    mean / values.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn edges(g: &Graph) -> Vec<(usize, usize)> {
        g.edges().collect()
    }

    #[test]
    fn named_shapes() {
        assert_eq!(
            edges(&named_topology(TopologyKind::Line, 3, 0.0, 0).unwrap()),
            vec![(0, 1), (1, 2)]
        );
        assert_eq!(
            edges(&named_topology(TopologyKind::Circle, 3, 0.0, 0).unwrap()),
            vec![(0, 1), (0, 2), (1, 2)]
        );
        assert_eq!(
            edges(&named_topology(TopologyKind::Star, 4, 0.0, 0).unwrap()),
            vec![(0, 1), (0, 2), (0, 3)]
        );
        assert_eq!(
            named_topology(TopologyKind::Complete, 5, 0.0, 0)
                .unwrap()
                .edge_count(),
            10
        );
        assert!(named_topology(TopologyKind::Line, 1, 0.0, 0).is_err());
    }

    #[test]
    fn random_graph_edge_count_and_connectivity() {
        for seed in 0..20 {
            let g = named_topology(TopologyKind::Random, 15, 0.5, seed).unwrap();
            assert_eq!(g.edge_count(), 52);
        }
        let a = named_topology(TopologyKind::Random, 10, 0.4, 7).unwrap();
        let b = named_topology(TopologyKind::Random, 10, 0.4, 7).unwrap();
        assert_eq!(a, b);
        // Fewer than m − 1 edges can never connect the graph.
        assert!(matches!(
            named_topology(TopologyKind::Random, 10, 0.1, 0),
            Err(Error::Construction(_))
        ));
        assert!(matches!(
            named_topology(TopologyKind::Random, 10, 0.0, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn disconnected_graph_rejected() {
        assert!(Graph::new(4, [(0, 1), (2, 3)]).is_err());
        assert!(Graph::new(3, [(0, 0), (1, 2)]).is_err());
        assert!(Graph::new(3, [(0, 5)]).is_err());
    }

    #[test]
    fn metropolis_hastings_small_cases() {
        let third = 1.0 / 3.0;
        let line = MixingMatrix::metropolis_hastings(
            &named_topology(TopologyKind::Line, 3, 0.0, 0).unwrap(),
        );
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                2.0 * third,
                third,
                0.0,
                third,
                third,
                third,
                0.0,
                third,
                2.0 * third,
            ],
        );
        assert!((line.weights() - &expected).abs().max() < 1e-15);
        assert!((line.alpha() - 2.0 / 3.0).abs() < 1e-12);

        let star = MixingMatrix::metropolis_hastings(
            &named_topology(TopologyKind::Star, 3, 0.0, 0).unwrap(),
        );
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                third,
                third,
                third,
                third,
                2.0 * third,
                0.0,
                third,
                0.0,
                2.0 * third,
            ],
        );
        assert!((star.weights() - &expected).abs().max() < 1e-15);
        assert!((star.alpha() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_has_zero_alpha_and_matches_complete_mh() {
        let u = MixingMatrix::uniform(5);
        assert!(u.alpha() < 1e-14);
        let mh = MixingMatrix::metropolis_hastings(
            &named_topology(TopologyKind::Complete, 5, 0.0, 0).unwrap(),
        );
        assert!((mh.weights() - u.weights()).abs().max() < 1e-15);
    }

    #[test]
    fn constructed_matrices_are_doubly_stochastic_and_symmetric() {
        let mut graphs = Vec::new();
        for m in [2, 3, 6, 15] {
            for kind in [
                TopologyKind::Star,
                TopologyKind::Line,
                TopologyKind::Circle,
                TopologyKind::Complete,
            ] {
                graphs.push(named_topology(kind, m, 0.0, 0).unwrap());
            }
        }
        for seed in 0..10 {
            graphs.push(named_topology(TopologyKind::Random, 12, 0.4, seed).unwrap());
        }
        for g in &graphs {
            let w = MixingMatrix::metropolis_hastings(g);
            let wm = w.weights();
            for i in 0..g.m() {
                assert!((wm.row(i).sum() - 1.0).abs() < 1e-12);
                assert!((wm.column(i).sum() - 1.0).abs() < 1e-12);
                for k in 0..g.m() {
                    assert!(wm[(i, k)] >= 0.0);
                    assert_eq!(wm[(i, k)], wm[(k, i)]);
                    if i != k && !g.has_edge(i, k) {
                        assert_eq!(wm[(i, k)], 0.0);
                    }
                }
            }
            assert!(w.alpha() < 1.0);
            assert!(MixingMatrix::from_weights(g, wm.clone()).is_ok());
        }
    }

    #[test]
    fn from_weights_rejects_invalid() {
        let g = named_topology(TopologyKind::Line, 3, 0.0, 0).unwrap();
        let bad = DMatrix::from_element(3, 3, 1.0 / 3.0);
        assert!(MixingMatrix::from_weights(&g, bad).is_err());
        assert!(MixingMatrix::from_weights(&g, DMatrix::identity(3, 3)).is_err());
        assert!(MixingMatrix::from_weights(&g, DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn alpha_matches_symmetric_eigenvalues() {
        for kind in [TopologyKind::Star, TopologyKind::Line, TopologyKind::Circle] {
            let w = MixingMatrix::metropolis_hastings(&named_topology(kind, 7, 0.0, 0).unwrap());
            let mut eig: Vec<f64> = w
                .weights()
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .map(|v| v.abs())
                .collect();
            eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!((eig[0] - 1.0).abs() < 1e-12);
            assert!((w.alpha() - eig[1]).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn kappa_opt_examples() {
        // 1 − η a_ul a_l = 0.8 and η a_ul f̄ σ_u = 0.01 reproduce
        // log_α(0.8/(1 + 0.01 m)) ∨ 1; at α = 0.9, m = 20 that is ⌊3.848⌋.
        let (eta, a_ul, a_l, f_bar, sigma_u) = (0.4, 0.5, 1.0, 0.05, 1.0);
        assert_eq!(
            kappa_opt(0.9, eta, a_ul, a_l, f_bar, 20, sigma_u).unwrap(),
            3
        );
        let direct = ((0.8f64 / 1.2).ln() / 0.9f64.ln()).floor() as u32;
        assert_eq!(direct, 3);
        assert_eq!(
            kappa_opt(0.0, eta, a_ul, a_l, f_bar, 20, sigma_u).unwrap(),
            1
        );
        assert_eq!(
            kappa_opt(0.1, eta, a_ul, a_l, f_bar, 20, sigma_u).unwrap(),
            1
        );
        assert!(kappa_opt(0.5, 10.0, 1.0, 1.0, 1.0, 2, 1.0).is_err());
        assert!(kappa_opt(1.0, eta, a_ul, a_l, f_bar, 20, sigma_u).is_err());
        let mut prev = 0;
        for alpha in [0.1, 0.5, 0.8, 0.9, 0.95, 0.99, 0.999] {
            let k = kappa_opt(alpha, eta, a_ul, a_l, f_bar, 20, sigma_u).unwrap();
            assert!(k >= prev);
            prev = k;
        }
    }

    #[test]
    fn convergence_constants() {
        let c = ConvergenceConstants {
            a_l: 1.0,
            a_u: 3.0,
            f_bar: 0.4,
            sigma_u: 2.0,
        };
        assert!((c.a_ul() - 0.75f64.sqrt()).abs() < 1e-15);
        let eta = c.step_size_bound(0.5, 2, 4);
        let rho = c.decay_factor(0.5, 2, eta, 4);
        assert!(rho > 0.0 && rho < 1.0);
        assert!(c.step_size_bound(0.5, 8, 4) >= eta);
    }

    fn random_values(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<DVector<f64>> {
        (0..m)
            .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0)))
            .collect()
    }

    #[test]
    fn mix_basic_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals = random_values(&mut rng, 4, 6);
        let w = MixingMatrix::metropolis_hastings(
            &named_topology(TopologyKind::Line, 4, 0.0, 0).unwrap(),
        );
        let mut same = vals.clone();
        mix(&mut same, &w, 0).unwrap();
        assert_eq!(same, vals);

        let mut avg = vals.clone();
        mix(&mut avg, &MixingMatrix::uniform(4), 1).unwrap();
        let mean = mean_vector(&vals);
        for v in &avg {
            assert!((v - &mean).amax() < 1e-14);
        }

        let mut short = vals[..3].to_vec();
        assert!(mix(&mut short, &w, 1).is_err());
    }

    #[test]
    fn mix_matches_dense_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [TopologyKind::Star, TopologyKind::Line, TopologyKind::Circle] {
            let w = MixingMatrix::metropolis_hastings(&named_topology(kind, 6, 0.0, 0).unwrap());
            let vals = random_values(&mut rng, 6, 5);
            for rounds in [1, 2, 7] {
                let mut mixed = vals.clone();
                mix(&mut mixed, &w, rounds).unwrap();
                // Columns are nodes: V ← V Wᵀ per round, i.e. V·(W^κ)ᵀ.
                let v = DMatrix::from_columns(&vals);
                let mut power = DMatrix::identity(6, 6);
                for _ in 0..rounds {
                    power = w.weights() * power;
                }
                let dense = v * power.transpose();
                for (j, col) in mixed.iter().enumerate() {
                    assert!((col - dense.column(j)).amax() < 1e-12);
                }
                let before: DVector<f64> = vals.iter().fold(DVector::zeros(5), |a, b| a + b);
                let after: DVector<f64> = mixed.iter().fold(DVector::zeros(5), |a, b| a + b);
                assert!((before - &after).norm() <= 1e-10 * (1.0 + after.norm()));
                let dev0 = deviation_norm(&vals);
                assert!(deviation_norm(&mixed) <= w.alpha().powi(rounds as i32) * dev0 + 1e-9);
                assert!(max_deviation(&mixed) <= max_deviation(&vals) + 1e-12);
            }
        }
    }

    #[test]
    fn edge_list_parsing() {
        let g = Graph::from_edge_list("3\n1 2\n2 3\n").unwrap();
        assert_eq!(edges(&g), vec![(0, 1), (1, 2)]);
        let g2 = Graph::from_edge_list(&g.to_edge_list()).unwrap();
        assert_eq!(g, g2);
        let commented = Graph::from_edge_list("# header\n\n3  # nodes\n1 2\n3 2\n").unwrap();
        assert_eq!(commented, g);
        for bad in [
            "",
            "x",
            "3\n1",
            "3\n1 4",
            "3\n0 1\n1 2",
            "3\n1 2 3",
            "3\n1 2",
            "0",
            "3 4\n1 2",
        ] {
            assert!(Graph::from_edge_list(bad).is_err(), "{bad:?}");
        }
        let err = Graph::from_edge_list("3\n1 2\n2 x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }
}
