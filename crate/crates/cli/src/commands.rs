//! The four subcommands.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ldgrad::diffusion::{
    discretize_generator, entropy_refinement, GridConfig, Potential, RefinementReport, WassersteinStructure,
};
use ldgrad::evolution::{
    compare_trajectories, error_against, exact_trajectory, integrate_gradient_flow, integrate_linear, time_grid,
    Trajectory, TrajectoryGap,
};
use ldgrad::gradient::{
    diagnostics, family_normalization, DissipationFamily, GradientStructure, NormalizationReport,
    StructureDiagnostics, DIAGNOSTIC_TOL,
};
use ldgrad::ldp::{
    deterministic_assignment, empirical_measure_path, girsanov_log_density, mollify, path_rate_functional,
    path_rate_pairing, rate_vs_probability_experiment, simulate as simulate_paths, tightness_stats,
    ExperimentConfig, ExperimentReport, GirsanovValue, PairingValue, TargetPath, TightnessStats, TiltField,
    DEFAULT_MOLLIFY_WINDOW, QUADRATURE_WARN, RATE_ESTIMATE_TOL,
};
use ldgrad::markov::{analyze_balance, BalanceReport, GeneratorMatrix, SimplexPoint, BALANCE_TOL};
use ldgrad::sampling::{random_interior_point, random_zero_sum, stream_rng};

use crate::output::{config_hash, Outputs};
use crate::{AnalyzeArgs, CliError, DiffusionArgs, EvolveArgs, SimulateArgs};

/// Flow-equivalence tolerance for trajectory gaps.
const FLOW_GAP_TOL: f64 = 1e-6;
/// Decomposition residual bound for the diffusion structure.
const DIFFUSION_RESIDUAL_TOL: f64 = 1e-12;
/// Relaxation tolerance (sup norm of densities) for the diffusion run.
const RELAXATION_TOL: f64 = 1e-3;

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read_bytes(path)?).map_err(|_| CliError::input(format!("{} is not UTF-8", path.display())))
}

fn load_generator(path: &Path) -> Result<(GeneratorMatrix, Vec<u8>), CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::input("generator file is not UTF-8"))?;
    Ok((GeneratorMatrix::from_json(&text)?, bytes))
}

/// JSON for `.json` files, TOML otherwise.
fn load_config<T: DeserializeOwned>(path: &Path) -> Result<(T, Vec<u8>), CliError> {
    let text = read_text(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed
        .map(|c| (c, text.into_bytes()))
        .map_err(|e| CliError::input(format!("config {}: {e}", path.display())))
}

fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn args_bytes<T: Serialize>(args: &T) -> Vec<u8> {
    serde_json::to_vec(args).expect("arguments serialize")
}

fn tolerances(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
    entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    verdict: &'static str,
    detailed_balance: bool,
    /// All sampled defects within tolerance.
    defects_within_tolerance: bool,
    driving_functional: Option<&'static str>,
    invariant_measure: Vec<f64>,
    seed: u64,
    samples: usize,
    tolerance: f64,
    balance_tolerance: f64,
    diagnostics: StructureDiagnostics,
}

pub fn analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (q, bytes) = load_generator(&a.generator)?;
    let d = diagnostics(&q, a.samples, a.seed)?;
    let db = d.balance.detailed_balance;
    let report = AnalyzeReport {
        verdict: if db { "gradient system (detailed balance)" } else { "covector system only" },
        detailed_balance: db,
        defects_within_tolerance: d.gradient_system,
        driving_functional: db.then_some("S = E_pi / 2"),
        invariant_measure: d.balance.invariant_measure.to_vec(),
        seed: a.seed,
        samples: a.samples,
        tolerance: d.options.tolerance,
        balance_tolerance: d.balance.tolerance,
        diagnostics: d,
    };
    let mut out = Outputs::resolve(a.out.as_deref())?;
    out.write_json("analyze.json", &report)?;

    let d = &report.diagnostics;
    println!("verdict: {}", report.verdict);
    if let Some(s) = report.driving_functional {
        println!("driving functional: {s}");
    }
    println!("invariant measure: {:?}", report.invariant_measure);
    println!("detailed-balance violation: {:.3e} (tol {:.0e})", d.balance.max_violation, d.balance.tolerance);
    println!("time-symmetry defect:      {:.3e} (tol {:.0e})", d.time_symmetry_defect_max, report.tolerance);
    println!("integrability defect:      {:.3e} (tol {:.0e})", d.integrability_defect, report.tolerance);
    println!("Psi* symmetry defect:      {:.3e}", d.psi_star_symmetry_defect);
    println!("Jacobian asymmetry:        {:.3e}", d.jacobian_asymmetry);
    println!("V_L vs DE_pi/2 gap:        {:.3e}", d.half_entropy_gap);
    println!("decomposition residual:    {:.3e}", d.decomposition_residual_max);
    println!("samples {} seed {} -> {}", a.samples, a.seed, out.dir().display());
    if report.defects_within_tolerance != db {
        println!("warning: sampled defects disagree with the detailed-balance check");
    }
    let hash = config_hash(&[("args", &args_bytes(a)), ("generator", &bytes)]);
    out.finish(
        "analyze",
        hash,
        vec![a.seed],
        tolerances(&[("defect", report.tolerance), ("detailed_balance", report.balance_tolerance)]),
        started,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tag {
    Linear,
    Flow(DissipationFamily),
}

impl Tag {
    fn name(&self) -> String {
        match self {
            Tag::Linear => "linear".into(),
            Tag::Flow(f) => f.to_string(),
        }
    }
}

fn parse_tags(s: &str) -> Result<Vec<Tag>, CliError> {
    let mut tags = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let tag = if part == "linear" {
            Tag::Linear
        } else {
            Tag::Flow(part.parse().map_err(|e: ldgrad::Error| CliError::input(e.to_string()))?)
        };
        if !tags.contains(&tag) {
            tags.push(tag);
        }
    }
    if tags.is_empty() {
        return Err(CliError::input("no structure tag given"));
    }
    Ok(tags)
}

fn parse_rho0(s: &str, balance: &BalanceReport) -> Result<SimplexPoint, CliError> {
    if s.trim() == "pi" {
        return Ok(balance.invariant_measure.clone());
    }
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::input(format!("--rho0: {e}")))?;
    Ok(SimplexPoint::new(values)?)
}

#[derive(Debug, Serialize)]
struct TagReport {
    tag: String,
    method: String,
    entropy_scale: f64,
    normalization: Option<NormalizationReport>,
    csv: String,
    final_state: Vec<f64>,
    entropy_initial: f64,
    entropy_final: f64,
    entropy_nonincreasing: bool,
    /// `max_t |rho(t) - exp(t Q^T) rho0|_inf`.
    error_vs_exact: f64,
}

#[derive(Debug, Serialize)]
struct GapReport {
    a: String,
    b: String,
    gap: TrajectoryGap,
    tolerance: f64,
    within_tolerance: bool,
}

#[derive(Debug, Serialize)]
struct EvolveReport {
    rho0: Vec<f64>,
    horizon: f64,
    dt: f64,
    detailed_balance: bool,
    seed: u64,
    trajectories: Vec<TagReport>,
    gaps: Vec<GapReport>,
}

pub fn evolve(a: &EvolveArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (q, bytes) = load_generator(&a.generator)?;
    let tags = parse_tags(&a.structure)?;
    let balance = analyze_balance(&q, None)?;
    let rho0 = parse_rho0(&a.rho0, &balance)?;
    if rho0.len() != q.dim() {
        return Err(CliError::input(format!("--rho0 has {} entries for {} states", rho0.len(), q.dim())));
    }
    if !balance.detailed_balance && tags.iter().any(|t| matches!(t, Tag::Flow(_))) {
        return Err(ldgrad::Error::NotGradientSystem { max_violation: balance.max_violation }.into());
    }
    let times = time_grid(a.t_end, a.dt)?;
    let exact = exact_trajectory(&rho0, &q, &times)?;

    let mut out = Outputs::resolve(a.out.as_deref())?;
    let mut trajectories: Vec<(Tag, Trajectory)> = Vec::new();
    let mut reports = Vec::new();
    for &tag in &tags {
        let (traj, scale, normalization) = match tag {
            Tag::Linear => (integrate_linear(&rho0, &q, a.t_end, a.dt)?, 1.0, None),
            Tag::Flow(DissipationFamily::LdpExact) => {
                let gs = GradientStructure::ldp(&q)?;
                (integrate_gradient_flow(&rho0, &gs, a.t_end, a.dt)?, gs.entropy_scale, None)
            }
            Tag::Flow(family) => {
                let norm = family_normalization(&q, family, &[0.5, 1.0], 20, a.seed)?;
                let scale = norm.selected.unwrap_or(norm.best);
                let gs = GradientStructure::new(&q, family, scale)?;
                (integrate_gradient_flow(&rho0, &gs, a.t_end, a.dt)?, scale, Some(norm))
            }
        };
        let csv = format!("trajectory_{}.csv", tag.name());
        out.write(&csv, &traj.to_csv())?;
        let e = &traj.entropy_values;
        reports.push(TagReport {
            tag: tag.name(),
            method: traj.integrator_meta.method.clone(),
            entropy_scale: scale,
            normalization,
            csv,
            final_state: traj.final_state().to_vec(),
            entropy_initial: e[0],
            entropy_final: e[e.len() - 1],
            entropy_nonincreasing: e.windows(2).all(|w| w[1] <= w[0] + 1e-12),
            error_vs_exact: error_against(&traj, &exact),
        });
        trajectories.push((tag, traj));
    }
    let mut gaps = Vec::new();
    for i in 0..trajectories.len() {
        for j in i + 1..trajectories.len() {
            let gap = compare_trajectories(&trajectories[i].1, &trajectories[j].1)?;
            gaps.push(GapReport {
                a: trajectories[i].0.name(),
                b: trajectories[j].0.name(),
                within_tolerance: gap.sup_norm_gap <= FLOW_GAP_TOL,
                gap,
                tolerance: FLOW_GAP_TOL,
            });
        }
    }
    let report = EvolveReport {
        rho0: rho0.to_vec(),
        horizon: a.t_end,
        dt: a.dt,
        detailed_balance: balance.detailed_balance,
        seed: a.seed,
        trajectories: reports,
        gaps,
    };
    out.write_json("evolve.json", &report)?;
    out.write("evolve.gp", &evolve_plot(&report, q.dim()))?;

    for t in &report.trajectories {
        println!(
            "{:<17} entropy {:.6e} -> {:.6e}  error vs exact {:.3e}  ({})",
            t.tag, t.entropy_initial, t.entropy_final, t.error_vs_exact, t.csv
        );
    }
    for g in &report.gaps {
        println!(
            "gap {} vs {}: {:.3e} at t = {} (tol {:.0e})",
            g.a, g.b, g.gap.sup_norm_gap, g.gap.at_time, g.tolerance
        );
    }
    let hash = config_hash(&[("args", &args_bytes(a)), ("generator", &bytes)]);
    out.finish("evolve", hash, vec![a.seed], tolerances(&[("trajectory_gap", FLOW_GAP_TOL)]), started)
}

fn evolve_plot(report: &EvolveReport, dim: usize) -> String {
    let mut s = String::from("set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\n");
    s.push_str("set terminal pngcairo size 900,600\nset output 'evolve.png'\nplot ");
    let mut first = true;
    for t in &report.trajectories {
        for c in 0..dim {
            if !first {
                s.push_str(", \\\n     ");
            }
            first = false;
            let _ = write!(s, "'{}' using 1:{} with lines title '{} rho_{}'", t.csv, c + 2, t.tag, c + 1);
        }
    }
    s.push_str("\nset output 'evolve_entropy.png'\nset ylabel 'entropy'\nplot ");
    for (k, t) in report.trajectories.iter().enumerate() {
        if k > 0 {
            s.push_str(", \\\n     ");
        }
        let _ = write!(s, "'{}' using 1:{} with lines title '{}'", t.csv, dim + 2, t.tag);
    }
    s.push('\n');
    s
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    /// Generator JSON, relative to the config file.
    generator: PathBuf,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    experiment: Option<ExperimentSection>,
    #[serde(default)]
    paths: Option<PathsSection>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    /// Target path held constant at this distribution.
    hold: Vec<f64>,
    #[serde(rename = "T")]
    horizon: f64,
    dt: f64,
    n_list: Vec<usize>,
    replicas: usize,
    tube_radius: f64,
    #[serde(default = "yes")]
    plain_mc: bool,
    #[serde(default)]
    variance_threshold: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PathsSection {
    n: usize,
    #[serde(rename = "T")]
    horizon: f64,
    rho0: Vec<f64>,
    #[serde(default)]
    tilt: Option<TiltField>,
    #[serde(default = "default_grid_dt")]
    grid_dt: f64,
    #[serde(default)]
    tightness_m: Option<f64>,
    #[serde(default = "default_window")]
    mollify_window: usize,
}

fn yes() -> bool {
    true
}
fn default_grid_dt() -> f64 {
    0.01
}
fn default_window() -> usize {
    DEFAULT_MOLLIFY_WINDOW
}

#[derive(Debug, Serialize)]
struct PathsReport {
    n: usize,
    horizon: f64,
    seed: u64,
    jumps: usize,
    tilt: TiltField,
    tilt_smoothness: &'static str,
    girsanov: GirsanovValue,
    pairing: PairingValue,
    girsanov_discrepancy: f64,
    girsanov_tolerance: f64,
    quadrature_warning_threshold: f64,
    tightness: TightnessStats,
    mollify_window: usize,
    /// `I_T` of the mollified empirical path, or why it is undefined.
    mollified_rate: Option<f64>,
    mollified_rate_error: Option<String>,
}

#[derive(Debug, Serialize)]
struct SimulateReport {
    seed: u64,
    paths: Option<PathsReport>,
    experiment: Option<ExperimentReport>,
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (cfg, cfg_bytes): (SimulateConfig, _) = load_config(&a.config)?;
    if cfg.experiment.is_none() && cfg.paths.is_none() {
        return Err(CliError::input("config needs an [experiment] or a [paths] section"));
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    let (q, gen_bytes) = load_generator(&relative_to(&a.config, &cfg.generator))?;
    let mut out = Outputs::resolve(a.out.as_deref())?;

    let paths = match &cfg.paths {
        None => None,
        Some(p) => {
            let tilt = p.tilt.clone().unwrap_or_else(|| TiltField::zero(q.dim()));
            let init = deterministic_assignment(&p.rho0, p.n)?;
            let path = simulate_paths(&q, Some(&tilt), &init, p.horizon, seed)?;
            let girsanov = girsanov_log_density(&path, &tilt, &q)?;
            let pairing = path_rate_pairing(&path, &tilt, &q)?;
            let grid = time_grid(p.horizon, p.grid_dt)?;
            let emp = empirical_measure_path(&path, &grid)?;
            let mut csv = String::from("t");
            for i in 1..=q.dim() {
                let _ = write!(csv, ",rho_{i}");
            }
            csv.push('\n');
            for (t, r) in grid.iter().zip(&emp) {
                let _ = write!(csv, "{t}");
                for v in r.iter() {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
            out.write("empirical_path.csv", &csv)?;
            let smooth = mollify(&emp, p.mollify_window)?;
            let rate = path_rate_functional(&grid, &smooth, &q);
            let m = p
                .tightness_m
                .unwrap_or(2.0 * q.gamma() * p.horizon * (std::f64::consts::E - 1.0) + 1.0);
            Some(PathsReport {
                n: p.n,
                horizon: p.horizon,
                seed,
                jumps: path.jumps.len(),
                tilt_smoothness: tilt.smoothness(),
                tilt,
                girsanov_discrepancy: (girsanov.value - pairing.value).abs(),
                girsanov,
                pairing,
                girsanov_tolerance: 1e-10,
                quadrature_warning_threshold: QUADRATURE_WARN,
                tightness: tightness_stats(&path, &q, m),
                mollify_window: p.mollify_window,
                mollified_rate: rate.as_ref().ok().map(|r| r.value),
                mollified_rate_error: rate.err().map(|e| e.to_string()),
            })
        }
    };

    let experiment = match &cfg.experiment {
        None => None,
        Some(e) => {
            let target = TargetPath::constant(&e.hold, e.horizon, e.dt)?;
            let config = ExperimentConfig {
                n_list: e.n_list.clone(),
                replicas: e.replicas,
                tube_radius: e.tube_radius,
                seed,
                plain_mc: e.plain_mc,
                variance_threshold: e.variance_threshold.unwrap_or(RATE_ESTIMATE_TOL / 3.0),
            };
            let mut report = rate_vs_probability_experiment(&q, &target, &config)?;
            out.write("replicas.csv", &report.replicas_csv())?;
            report.replicas.clear();
            Some(report)
        }
    };

    let report = SimulateReport { seed, paths, experiment };
    out.write_json("simulate.json", &report)?;

    if let Some(p) = &report.paths {
        println!(
            "paths: n {} T {} jumps {}  G (Girsanov) {:.12e}  G (pairing) {:.12e}  |diff| {:.2e}",
            p.n, p.horizon, p.jumps, p.girsanov.value, p.pairing.value, p.girsanov_discrepancy
        );
        println!(
            "tightness: mean jumps {:.4}  max {}  bound at M={} : {:.3e}",
            p.tightness.mean_jumps, p.tightness.max_jumps, p.tightness.m, p.tightness.chernoff_bound_rhs
        );
        match (&p.mollified_rate, &p.mollified_rate_error) {
            (Some(v), _) => println!("I_T of mollified empirical path (window {}): {v:.6e}", p.mollify_window),
            (_, Some(e)) => println!("I_T of mollified empirical path undefined: {e}"),
            _ => {}
        }
    }
    if let Some(e) = &report.experiment {
        println!("I_T(target) = {:.6e}  (tube: {})", e.rate_functional, e.tube_metric);
        println!("{:>6} {:>6} {:>12} {:>10} {:>9} {:>5} {:>6}", "n", "hits", "estimate", "se", "rel.err", "ok", "flag");
        for r in &e.rows {
            println!(
                "{:>6} {:>6} {:>12} {:>10} {:>9} {:>5} {:>6}",
                r.n,
                r.tilted_hits,
                r.estimate.map_or("inf".into(), |v| format!("{v:.5e}")),
                r.standard_error.map_or("-".into(), |v| format!("{v:.2e}")),
                r.relative_error.map_or("-".into(), |v| format!("{v:+.3}")),
                r.within_tolerance.map_or("-", |b| if b { "yes" } else { "no" }),
                if r.variance_flag { "var" } else if r.inf_estimate { "inf" } else { "" }
            );
        }
    }
    let hash = config_hash(&[
        ("args", &args_bytes(a)),
        ("config", &cfg_bytes),
        ("generator", &gen_bytes),
    ]);
    out.finish(
        "simulate",
        hash,
        vec![seed],
        tolerances(&[
            ("girsanov_consistency", 1e-10),
            ("quadrature_warning", QUADRATURE_WARN),
            ("rate_estimate_relative", RATE_ESTIMATE_TOL),
        ]),
        started,
    )
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct InitialDensity {
    mean: f64,
    variance: f64,
}

impl Default for InitialDensity {
    fn default() -> Self {
        Self { mean: 1.0, variance: 2.0 }
    }
}

impl InitialDensity {
    fn at(&self, x: f64) -> f64 {
        (-(x - self.mean).powi(2) / (2.0 * self.variance)).exp()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct DiffusionConfig {
    #[serde(flatten)]
    grid: GridConfig,
    #[serde(default)]
    initial: InitialDensity,
    #[serde(rename = "T", default)]
    horizon: Option<f64>,
    #[serde(default)]
    dt: Option<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_decomposition_samples")]
    decomposition_samples: usize,
    #[serde(default = "yes")]
    refine: bool,
    #[serde(default = "default_snapshots")]
    snapshots: usize,
}

fn default_decomposition_samples() -> usize {
    100
}
fn default_snapshots() -> usize {
    11
}

#[derive(Debug, Serialize)]
struct DiffusionReport {
    a: f64,
    b: f64,
    nodes: usize,
    h: f64,
    potential: Potential,
    initial: InitialDensity,
    horizon: f64,
    dt: f64,
    seed: u64,
    entropy_initial: f64,
    entropy_final: f64,
    entropy_nonincreasing: bool,
    /// `max_i |u_T(x_i) - pi(x_i)|` on densities.
    relaxation_gap: f64,
    relaxation_tolerance: f64,
    decomposition_samples: usize,
    /// Largest residual relative to the largest term of its identity.
    decomposition_residual_max: f64,
    decomposition_residual_abs_max: f64,
    decomposition_tolerance: f64,
    /// `max |flux_drift - Q_h^T rho|` along the run, divided by `h^2`.
    chain_vs_wasserstein_drift_over_h2: f64,
    refinement: Option<RefinementReport>,
    /// Gaussian mass outside `[a, b]` (quadratic potential only).
    truncated_tail_mass: Option<f64>,
}

pub fn diffusion(a: &DiffusionArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (cfg, cfg_bytes): (DiffusionConfig, _) = load_config(&a.config)?;
    let grid = cfg.grid.build()?;
    let horizon = a.t_end.or(cfg.horizon).unwrap_or(10.0);
    let dt = a.dt.or(cfg.dt).unwrap_or(1e-3);
    let seed = a.seed.unwrap_or(cfg.seed);
    if cfg.initial.variance <= 0.0 || !cfg.initial.mean.is_finite() {
        return Err(CliError::input("initial density needs a finite mean and positive variance"));
    }
    let q = discretize_generator(&grid)?;
    let gs = GradientStructure::ldp(&q)?;
    let w = WassersteinStructure::new(grid.clone());
    let u0: Vec<f64> = grid.nodes.iter().map(|&x| cfg.initial.at(x)).collect();
    let rho0 = grid.from_density(&u0)?;
    let traj = integrate_gradient_flow(&rho0, &gs, horizon, dt)?;
    let entropy: Vec<f64> = traj.states.iter().map(|r| w.entropy(r)).collect::<Result<_, _>>()?;

    let pi_density = grid.density(&w.pi);
    let relaxation_gap = grid
        .density(traj.final_state())
        .iter()
        .zip(&pi_density)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let (mut residual, mut residual_abs): (f64, f64) = (0.0, 0.0);
    for k in 0..cfg.decomposition_samples {
        let mut rng = stream_rng(seed, k as u64);
        let rho = random_interior_point(&mut rng, grid.n, 1e-3)?;
        let s = random_zero_sum(&mut rng, grid.n, 0.1);
        let d = w.decompose(&rho, &s)?;
        residual = residual.max(d.relative_residual());
        residual_abs = residual_abs.max(d.residual.abs());
    }

    let mut drift_gap: f64 = 0.0;
    let stride = (traj.states.len() / 50).max(1);
    for rho in traj.states.iter().step_by(stride) {
        let a = w.flux_drift(rho)?;
        let b = q.transpose_apply(rho);
        drift_gap = drift_gap.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }

    let refinement = if cfg.refine && !matches!(grid.potential_kind, Potential::Tabulated { .. }) {
        let init = cfg.initial.clone();
        Some(entropy_refinement(&grid, move |x| init.at(x), horizon.min(5.0), 51)?)
    } else {
        None
    };

    let mut out = Outputs::resolve(a.out.as_deref())?;
    let snaps = cfg.snapshots.max(2);
    let picks: Vec<usize> = (0..snaps).map(|k| k * (traj.times.len() - 1) / (snaps - 1)).collect();
    let mut csv = String::from("x,pi");
    for &k in &picks {
        let _ = write!(csv, ",rho@t={}", traj.times[k]);
    }
    csv.push('\n');
    let densities: Vec<Vec<f64>> = picks.iter().map(|&k| grid.density(&traj.states[k])).collect();
    for i in 0..grid.n {
        let _ = write!(csv, "{},{}", grid.nodes[i], pi_density[i]);
        for d in &densities {
            let _ = write!(csv, ",{}", d[i]);
        }
        csv.push('\n');
    }
    out.write("profiles.csv", &csv)?;
    out.write("profile_final.csv", &w.profile_csv(traj.final_state())?)?;
    let mut ecsv = String::from("t,entropy\n");
    for (t, e) in traj.times.iter().zip(&entropy) {
        let _ = writeln!(ecsv, "{t},{e}");
    }
    out.write("entropy.csv", &ecsv)?;

    let report = DiffusionReport {
        a: grid.a,
        b: grid.b,
        nodes: grid.n,
        h: grid.h,
        potential: grid.potential_kind.clone(),
        initial: cfg.initial.clone(),
        horizon,
        dt,
        seed,
        entropy_initial: entropy[0],
        entropy_final: entropy[entropy.len() - 1],
        entropy_nonincreasing: entropy.windows(2).all(|w| w[1] <= w[0] + 1e-15),
        relaxation_gap,
        relaxation_tolerance: RELAXATION_TOL,
        decomposition_samples: cfg.decomposition_samples,
        decomposition_residual_max: residual,
        decomposition_residual_abs_max: residual_abs,
        decomposition_tolerance: DIFFUSION_RESIDUAL_TOL,
        chain_vs_wasserstein_drift_over_h2: drift_gap / (grid.h * grid.h),
        refinement,
        truncated_tail_mass: grid.gaussian_tail_mass(),
    };
    out.write_json("diffusion.json", &report)?;
    out.write("diffusion.gp", &diffusion_plot(picks.len()))?;

    println!("grid [{}, {}] N {} h {}", report.a, report.b, report.nodes, report.h);
    println!(
        "entropy {:.6e} -> {:.6e} (non-increasing: {})",
        report.entropy_initial, report.entropy_final, report.entropy_nonincreasing
    );
    println!("relaxation gap at T={}: {:.3e} (tol {:.0e})", horizon, relaxation_gap, RELAXATION_TOL);
    println!(
        "decomposition residual max over {} samples: {:.3e} relative (tol {:.0e}), {:.3e} absolute",
        report.decomposition_samples, residual, DIFFUSION_RESIDUAL_TOL, residual_abs
    );
    println!("chain vs Wasserstein drift / h^2: {:.3e}", report.chain_vs_wasserstein_drift_over_h2);
    if let Some(r) = &report.refinement {
        println!(
            "refinement N={} vs N={}: entropy gap {:.3e} (C = gap / h^2 = {:.3e})",
            r.n_coarse, r.n_fine, r.sup_gap, r.fitted_constant
        );
    }
    if let Some(m) = report.truncated_tail_mass {
        println!("Gaussian mass outside the domain: {m:.3e}");
    }
    let hash = config_hash(&[("args", &args_bytes(a)), ("config", &cfg_bytes)]);
    out.finish(
        "diffusion",
        hash,
        vec![seed],
        tolerances(&[
            ("decomposition_residual", DIFFUSION_RESIDUAL_TOL),
            ("relaxation", RELAXATION_TOL),
            ("structure_diagnostics", DIAGNOSTIC_TOL),
            ("detailed_balance", BALANCE_TOL),
        ]),
        started,
    )
}

fn diffusion_plot(snapshots: usize) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n\
         set output 'profiles.png'\nset xlabel 'x'\nset ylabel 'density'\n",
    );
    let _ = writeln!(
        s,
        "plot 'profiles.csv' using 1:2 with lines lw 2, for [c=3:{}] 'profiles.csv' using 1:c with lines",
        snapshots + 2
    );
    s.push_str("set output 'entropy.png'\nset xlabel 't'\nset ylabel 'S'\nset logscale y\n");
    s.push_str("plot 'entropy.csv' using 1:2 with lines\n");
    s
}
