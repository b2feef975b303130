use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use dsgcqr::config::KeyValues;
use dsgcqr::datagen::{Dataset, Scenario};
use dsgcqr::experiment::{
    run_coverage, run_testing_error, CoverageConfig, ExperimentConfig, Method,
};
use dsgcqr::inference::{infer_node, max_cross_block_correlation, residual_spread, InferenceMode};
use dsgcqr::io::{self, Manifest};
use dsgcqr::seed::{derive_seed, domain};
use dsgcqr::smoothing::{centralized_fit, rule_of_thumb_bandwidth, DescentOptions};
use dsgcqr::topology::{named_topology, ConvergenceConstants};
use dsgcqr::{
    build_nodes, run_dsg_cqr, Error, FitConfig, Graph, Kernel, MixingMatrix, NodeState,
    PrivacyParams, QuantileSpec, Result, SensitivityMode, TopologyKind,
};

use crate::settings::Settings;
use crate::{
    ExperimentArgs, FitArgs, GenerateArgs, InferArgs, PrivacyArgs, ScenarioArgs, TopologyArgs,
    TopologyInfoArgs,
};

const DEFAULT_ETA: f64 = 0.3;
const DEFAULT_KAPPA0: usize = 3;
const DEFAULT_MAX_ITER: usize = 2000;
const DEFAULT_TOL: f64 = 1e-8;
const DEFAULT_H_MULT: f64 = 1.5;
const DEFAULT_INFER_H_MULT: f64 = 0.5;
const DEFAULT_PI_W: f64 = 0.5;
const DEFAULT_DELTA: f64 = 1e-5;
const DEFAULT_LEVEL: f64 = 0.95;

/// Tolerance of the centralized reference fit recorded in the trace.
const REFERENCE_TOL: f64 = 1e-10;
const REFERENCE_MAX_ITER: usize = 100_000;

fn scenario(s: &Settings, a: &ScenarioArgs, seed: Option<u64>) -> Result<Scenario> {
    let d = Scenario::default();
    let sc = Scenario {
        n: s.pick(a.n, "scenario.n", d.n)?,
        p: s.pick(a.p, "scenario.p", d.p)?,
        m: s.pick(a.m, "scenario.m", d.m)?,
        error_kind: s.pick(a.error_kind, "scenario.error_kind", d.error_kind)?,
        innovation: s.pick(a.innovation, "scenario.innovation", d.innovation)?,
        tau: s.pick(a.tau, "scenario.tau", d.tau)?,
        covariance: s.pick(a.covariance, "scenario.covariance", d.covariance)?,
        rho: s.pick(a.rho, "scenario.rho", d.rho)?,
        seed: s.pick(seed, "scenario.seed", d.seed)?,
    };
    sc.validate()?;
    Ok(sc)
}

fn graph(s: &Settings, t: &TopologyArgs, m: usize, master_seed: u64) -> Result<Graph> {
    if let Some(path) = s.pick_opt(t.edge_list.clone(), "topology.edge_list")? {
        let text = fs::read_to_string(&path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let g = Graph::from_edge_list(&text)?;
        if g.m() != m {
            return Err(Error::Structural(format!(
                "{} describes {} nodes, the data has {m} machines",
                path.display(),
                g.m()
            )));
        }
        return Ok(g);
    }
    let kind = s.pick(t.topology, "topology.kind", TopologyKind::Random)?;
    let pi_w = s.pick(t.pi_w, "topology.pi_w", DEFAULT_PI_W)?;
    let seed = s.pick(
        t.topology_seed,
        "topology.seed",
        derive_seed(master_seed, domain::TOPOLOGY, 0),
    )?;
    named_topology(kind, m, pi_w, seed)
}

fn sensitivity(raw: &str) -> Result<SensitivityMode> {
    if raw.eq_ignore_ascii_case("empirical") {
        return Ok(SensitivityMode::Empirical);
    }
    raw.parse().map(SensitivityMode::Fixed).map_err(|_| {
        Error::Domain(format!(
            "sensitivity must be 'empirical' or a number, got '{raw}'"
        ))
    })
}

fn privacy(s: &Settings, a: &PrivacyArgs, q: usize, n: usize) -> Result<PrivacyParams> {
    let delta = s.pick(a.privacy_delta, "privacy.delta", DEFAULT_DELTA)?;
    let mode = sensitivity(&s.pick(
        a.privacy_sensitivity.clone(),
        "privacy.sensitivity",
        "empirical".into(),
    )?)?;
    if let Some(eps) = s.pick_opt(a.privacy_epsilon, "privacy.epsilon")? {
        return PrivacyParams::gaussian(eps, delta, mode);
    }
    match s.pick_opt(a.privacy_eps_bar, "privacy.eps_bar")? {
        Some(eps_bar) => PrivacyParams::from_overall_budget(eps_bar, delta, q, n, mode),
        None => Ok(PrivacyParams::disabled()),
    }
}

fn modes(raw: &str) -> Result<Vec<InferenceMode>> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "both" => Ok(vec![InferenceMode::Hr, InferenceMode::Hs]),
        other => Ok(vec![other.parse()?]),
    }
}

/// `1:1,2:1` to 0-indexed `(node, coef)` pairs.
fn targets(raw: &str) -> Result<Vec<(usize, usize)>> {
    raw.split(',')
        .map(|t| {
            let bad = || {
                Error::Domain(format!(
                    "target '{}' should look like node:coef, both from 1",
                    t.trim()
                ))
            };
            let (a, b) = t.trim().split_once(':').ok_or_else(bad)?;
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a == 0 || b == 0 {
                return Err(bad());
            }
            Ok((a - 1, b - 1))
        })
        .collect()
}

fn manifest_param<T: std::str::FromStr>(m: &Manifest, key: &str) -> Result<Option<T>> {
    match m.params.iter().find(|(k, _)| k == key) {
        None => Ok(None),
        Some((_, v)) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Domain(format!("manifest value '{v}' for '{key}' is invalid"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.into(),
        source,
    })
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref())?;
    let sc = scenario(&s, &a.scenario, a.seed)?;
    let data = Dataset::generate(&sc)?;
    create_dir(&a.out)?;
    let manifest = io::write_dataset(&a.out, &data, &sc)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn fit(a: FitArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref())?;
    let data = io::read_dataset(&a.data)?;
    let (n, p, m) = (data.x.nrows(), data.x.ncols(), data.partition.len());
    let tau = match s.pick_opt(a.tau, "scenario.tau")? {
        Some(t) => t,
        None => manifest_param(&data.manifest, "scenario.tau")?.unwrap_or(0.5),
    };
    let seed = s.pick(a.seed, "fit.seed", 0)?;
    let kernel = s.pick(a.fit.kernel, "fit.kernel", Kernel::Gaussian)?;
    let h = match s.pick_opt(a.fit.h, "fit.h")? {
        Some(h) => h,
        None => rule_of_thumb_bandwidth(
            p,
            n,
            tau,
            s.pick(a.fit.h_mult, "fit.h_mult", DEFAULT_H_MULT)?,
        )?,
    };
    let spec = QuantileSpec::new(tau, h, kernel)?;
    let g = graph(&s, &a.topology, m, seed)?;
    let w = MixingMatrix::metropolis_hastings(&g);
    let q = data.partition.iter().map(|r| r.len()).max().unwrap_or(1);
    let privacy = privacy(&s, &a.privacy, q, n)?;

    let mut cfg = FitConfig::new(spec.clone());
    cfg.eta = s.pick(a.fit.eta, "fit.eta", DEFAULT_ETA)?;
    cfg.kappa0 = s.pick(a.fit.kappa0, "fit.kappa0", DEFAULT_KAPPA0)?;
    cfg.max_iter = s.pick(a.fit.max_iter, "fit.max_iter", DEFAULT_MAX_ITER)?;
    cfg.tol = s.pick(a.fit.tol, "fit.tol", DEFAULT_TOL)?;
    cfg.privacy = privacy;
    cfg.master_seed = seed;
    cfg.record_traces = true;
    cfg.beta_truth = data.beta0.clone();
    let reference = DescentOptions {
        eta: 1.0,
        max_iter: REFERENCE_MAX_ITER,
        tol: REFERENCE_TOL,
        record_history: false,
    };
    cfg.beta_star = match centralized_fit(&data.x, &data.y, &spec, &reference) {
        Ok(f) => Some(f.beta),
        Err(e) => {
            eprintln!("warning: centralized reference fit failed ({e}); alg_err left empty");
            None
        }
    };

    let mut nodes = build_nodes(&data.x, &data.y, &data.partition, seed, None)?;
    let start = Instant::now();
    let result = run_dsg_cqr(&mut nodes, &w, &cfg)?;
    let wall = start.elapsed().as_secs_f64();

    create_dir(&a.out)?;
    io::write_beta_hat(&a.out.join(io::BETA_HAT_FILE), &result.beta_hat)?;
    io::write_z_final(&a.out.join(io::Z_FINAL_FILE), &result.z_final)?;
    io::write_trace(&a.out.join(io::TRACE_FILE), &result.trace)?;
    let privacy_line = if cfg.privacy.enabled() {
        format!(
            "privacy_epsilon = {}\nprivacy_delta = {}\nprivacy_multiplier = {}\n",
            cfg.privacy.epsilon(),
            cfg.privacy.delta(),
            cfg.privacy.noise_multiplier()
        )
    } else {
        String::new()
    };
    let summary = format!(
        "iterations = {}\nconverged = {}\nn = {n}\np = {p}\nm = {m}\ntau = {tau}\nkernel = {}\nh = {h}\neta = {}\nkappa0 = {}\n\
         tol = {}\nedges = {}\nalpha = {}\nseed = {seed}\nprivacy = {}\n{privacy_line}",
        result.iterations_run,
        result.converged,
        kernel.name(),
        cfg.eta,
        cfg.kappa0,
        cfg.tol,
        g.edge_count(),
        w.alpha(),
        cfg.privacy.enabled(),
    );
    io::write_text(&a.out.join(io::SUMMARY_FILE), &summary)?;
    println!(
        "iterations = {}, converged = {}, wall_time_s = {wall:.3}, output = {}",
        result.iterations_run,
        result.converged,
        a.out.display()
    );
    if !result.converged {
        eprintln!("warning: stopped at the iteration cap before the tolerance was met");
    }
    Ok(())
}

fn summary_value<T: std::str::FromStr>(kv: &KeyValues, key: &str, path: &Path) -> Result<T> {
    kv.get(key)?
        .ok_or_else(|| Error::Structural(format!("{} lacks '{key}'; rerun `fit`", path.display())))
}

pub fn infer(a: InferArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref())?;
    let data = io::read_dataset(&a.data)?;
    let (n, p, m) = (data.x.nrows(), data.x.ncols(), data.partition.len());
    let summary_path = a.fit.join(io::SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path).map_err(|source| Error::Io {
        path: summary_path.clone(),
        source,
    })?;
    let summary = KeyValues::parse(&text)?;
    let tau: f64 = summary_value(&summary, "tau", &summary_path)?;
    let kernel: Kernel = summary_value(&summary, "kernel", &summary_path)?;
    let fit_m: usize = summary_value(&summary, "m", &summary_path)?;
    if fit_m != m {
        return Err(Error::Structural(format!(
            "fit used {fit_m} machines, the dataset has {m}"
        )));
    }
    let beta = io::read_beta_hat(&a.fit.join(io::BETA_HAT_FILE))?;
    let z = io::read_z_final(&a.fit.join(io::Z_FINAL_FILE))?;
    if beta.len() != m || z.len() != m {
        return Err(Error::Structural(format!(
            "fit output holds {} coefficient blocks and {} fitted columns for {m} machines",
            beta.len(),
            z.len()
        )));
    }
    let y = Arc::new(data.y.clone());
    let nodes = data
        .partition
        .iter()
        .enumerate()
        .map(|(j, cols)| {
            let block = data.x.columns(cols.start, cols.len()).into_owned();
            let mut node = NodeState::new(j, block, y.clone(), Some(beta[j].clone()), 0)?;
            node.set_z(z[j].clone())?;
            Ok(node)
        })
        .collect::<Result<Vec<_>>>()?;

    let level = s.pick(a.level, "infer.level", DEFAULT_LEVEL)?;
    let h = match s.pick_opt(a.h_infer, "infer.h")? {
        Some(h) => h,
        None => rule_of_thumb_bandwidth(
            p,
            n,
            tau,
            s.pick(a.h_mult_infer, "infer.h_mult", DEFAULT_INFER_H_MULT)?,
        )?,
    };
    let spec = QuantileSpec::new(tau, h, kernel)?;
    let out = a.out.unwrap_or_else(|| a.fit.clone());
    create_dir(&out)?;
    for mode in modes(&s.pick(a.mode, "infer.mode", "both".to_string())?)? {
        let reports = nodes
            .par_iter()
            .map(|node| infer_node(node, m, &spec, mode, level))
            .collect::<Result<Vec<_>>>()?;
        let path = out.join(io::interval_file(mode));
        io::write_intervals(&path, &reports)?;
        println!("{}", path.display());
    }
    let (mean_corr, max_corr) = max_cross_block_correlation(&data.x, &data.partition);
    println!("residual_spread = {}", residual_spread(&nodes, m));
    println!("cross_block_correlation_mean = {mean_corr}");
    println!("cross_block_correlation_max = {max_corr}");
    Ok(())
}

fn experiment_config(s: &Settings, a: &ExperimentArgs) -> Result<ExperimentConfig> {
    if a.topology.edge_list.is_some()
        || s.pick_opt::<PathBuf>(None, "topology.edge_list")?.is_some()
    {
        return Err(Error::Domain(
            "experiments draw their own topology; edge lists are not supported".into(),
        ));
    }
    if a.topology.topology_seed.is_some() || s.pick_opt::<u64>(None, "topology.seed")?.is_some() {
        return Err(Error::Domain(
            "experiments derive the topology seed from --seed".into(),
        ));
    }
    if a.privacy.privacy_epsilon.is_some() || a.privacy.privacy_sensitivity.is_some() {
        return Err(Error::Domain(
            "experiments calibrate privacy from --privacy-eps-bar only".into(),
        ));
    }
    let d = ExperimentConfig::default();
    let cfg = ExperimentConfig {
        scenario: scenario(s, &a.scenario, None)?,
        topology: s.pick(a.topology.topology, "topology.kind", d.topology)?,
        pi_w: s.pick(a.topology.pi_w, "topology.pi_w", d.pi_w)?,
        eta: s.pick(a.fit.eta, "fit.eta", d.eta)?,
        kappa0: s.pick(a.fit.kappa0, "fit.kappa0", d.kappa0)?,
        max_iter: s.pick(a.fit.max_iter, "fit.max_iter", d.max_iter)?,
        tol: s.pick(a.fit.tol, "fit.tol", d.tol)?,
        kernel: s.pick(a.fit.kernel, "fit.kernel", d.kernel)?,
        h: s.pick_opt(a.fit.h, "fit.h")?,
        h_mult: s.pick(a.fit.h_mult, "fit.h_mult", d.h_mult)?,
        privacy_eps_bar: s.pick(
            a.privacy.privacy_eps_bar,
            "privacy.eps_bar",
            d.privacy_eps_bar,
        )?,
        privacy_delta: s.pick(a.privacy.privacy_delta, "privacy.delta", d.privacy_delta)?,
        replications: s.pick(a.replications, "experiment.replications", d.replications)?,
        methods: s
            .pick_list(a.methods.clone(), "experiment.methods")?
            .unwrap_or(d.methods),
        train_frac: s.pick(a.train_frac, "experiment.train_frac", d.train_frac)?,
        master_seed: s.pick(a.seed, "experiment.seed", d.master_seed)?,
        central_eta: s.pick(a.central_eta, "experiment.central_eta", d.central_eta)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn warn_failures(failures: &std::collections::BTreeMap<Method, usize>, total: usize) {
    for (method, count) in failures {
        if *count > 0 {
            eprintln!("warning: {method} failed in {count} of {total} replications; those runs are excluded");
        }
    }
}

pub fn experiment(a: ExperimentArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref())?;
    let cfg = experiment_config(&s, &a)?;
    let kind = s.pick(
        a.kind.clone(),
        "experiment.kind",
        "testing-error".to_string(),
    )?;
    create_dir(&a.out)?;
    match kind.as_str() {
        "testing-error" => testing_error(&cfg, &a.out),
        "coverage" => {
            let d = CoverageConfig::default();
            let cov = CoverageConfig {
                modes: modes(&s.pick(a.mode.clone(), "infer.mode", "both".to_string())?)?,
                level: s.pick(a.level, "infer.level", d.level)?,
                infer_h_mult: s.pick(a.h_mult_infer, "infer.h_mult", d.infer_h_mult)?,
                targets: match s.pick_opt(a.targets.clone(), "experiment.targets")? {
                    Some(t) => targets(&t)?,
                    None => d.targets,
                },
            };
            coverage(&cfg, &cov, &a.out)
        }
        other => Err(Error::Domain(format!(
            "unknown experiment kind '{other}' (expected testing-error or coverage)"
        ))),
    }
}

fn testing_error(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let result = run_testing_error(cfg)?;
    warn_failures(&result.failures, cfg.replications);
    io::write_rows(
        &out.join("replications.csv"),
        &[
            "replication",
            "method",
            "test_loss",
            "est_err",
            "iterations",
            "converged",
        ],
        result.rows.iter().map(|r| {
            vec![
                (r.replication + 1).to_string(),
                r.method.to_string(),
                r.test_loss.to_string(),
                r.est_err.to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
            ]
        }),
    )?;
    let summary = result.summary(&cfg.methods);
    let sc = &cfg.scenario;
    let mut header = vec!["n", "p", "m", "tau"];
    header.extend(summary.iter().map(|m| m.method.name()));
    let mut row = vec![
        sc.n.to_string(),
        sc.p.to_string(),
        sc.m.to_string(),
        sc.tau.to_string(),
    ];
    row.extend(summary.iter().map(|m| m.formatted()));
    io::write_rows(&out.join("summary.csv"), &header, [row])?;
    io::write_rows(
        &out.join("methods.csv"),
        &[
            "method",
            "mean",
            "sd",
            "mean_est_err",
            "replications",
            "failures",
        ],
        summary.iter().map(|m| {
            vec![
                m.method.to_string(),
                m.mean.to_string(),
                m.sd.to_string(),
                m.mean_est_err.to_string(),
                m.replications.to_string(),
                m.failures.to_string(),
            ]
        }),
    )?;
    for m in &summary {
        println!(
            "{:<12} {}  est_err = {:.4}",
            m.method.name(),
            m.formatted(),
            m.mean_est_err
        );
    }
    Ok(())
}

fn coverage(cfg: &ExperimentConfig, cov: &CoverageConfig, out: &Path) -> Result<()> {
    let result = run_coverage(cfg, cov)?;
    warn_failures(&result.failures, cfg.replications);
    io::write_rows(
        &out.join("coverage.csv"),
        &[
            "replication",
            "method",
            "mode",
            "node",
            "coef",
            "estimate",
            "lower",
            "upper",
            "covered",
        ],
        result.rows.iter().map(|r| {
            vec![
                (r.replication + 1).to_string(),
                r.method.to_string(),
                r.mode.name().to_owned(),
                (r.node + 1).to_string(),
                (r.coef + 1).to_string(),
                r.estimate.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
                r.covered.to_string(),
            ]
        }),
    )?;
    let summary = result.summary();
    io::write_rows(
        &out.join("coverage_summary.csv"),
        &[
            "method",
            "mode",
            "node",
            "coef",
            "aecp",
            "aw",
            "replications",
        ],
        summary.iter().map(|c| {
            vec![
                c.method.to_string(),
                c.mode.name().to_owned(),
                (c.node + 1).to_string(),
                (c.coef + 1).to_string(),
                c.aecp.to_string(),
                c.aw.to_string(),
                c.replications.to_string(),
            ]
        }),
    )?;
    for c in &summary {
        println!(
            "{:<12} {} node {} coef {}: aecp = {:.3}, aw = {:.4}",
            c.method.name(),
            c.mode.name(),
            c.node + 1,
            c.coef + 1,
            c.aecp,
            c.aw
        );
    }
    Ok(())
}

pub fn topology_info(a: TopologyInfoArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref())?;
    let m = s.pick(a.m, "scenario.m", Scenario::default().m)?;
    let seed = s.pick(None, "fit.seed", 0)?;
    let g = graph(&s, &a.topology, m, seed)?;
    let w = MixingMatrix::metropolis_hastings(&g);
    println!("m = {m}");
    println!("edges = {}", g.edge_count());
    println!("W =");
    for row in w.weights().row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        println!("  {}", cells.join(" "));
    }
    println!("alpha = {}", w.alpha());

    let constants = [
        s.pick_opt(a.a_l, "constants.a_l")?,
        s.pick_opt(a.a_u, "constants.a_u")?,
        s.pick_opt(a.f_bar, "constants.f_bar")?,
        s.pick_opt(a.sigma_u, "constants.sigma_u")?,
    ];
    let [Some(a_l), Some(a_u), Some(f_bar), Some(sigma_u)] = constants else {
        println!("kappa0_opt needs --a-l, --a-u, --f-bar and --sigma-u");
        return Ok(());
    };
    let c = ConvergenceConstants {
        a_l,
        a_u,
        f_bar,
        sigma_u,
    };
    let eta = s.pick(a.eta, "fit.eta", DEFAULT_ETA)?;
    let k = c.kappa_opt(w.alpha(), eta, m)?;
    println!("eta = {eta}");
    println!("kappa0_opt = {k}");
    println!("step_size_bound = {}", c.step_size_bound(w.alpha(), k, m));
    println!("decay_factor = {}", c.decay_factor(w.alpha(), k, eta, m));
    Ok(())
}
