//! Experiment configuration and the staged pipeline behind the command line.
//!
//! Config files are TOML with dotted keys:
//!
//! ```toml
//! domain.dim = 1
//! domain.lower = [0.0]
//! domain.upper = [1.0]
//! domain.horizon = 1.0
//! coeff.l = "0"
//! coeff.V = "0"
//! coeff.phi = "1"
//! coeff.psi = "2 + cos(pi*x)"
//! grid.nx = 128
//! grid.nt = 1000
//! grid.theta = 0.5
//! mc.n_paths = 100000
//! mc.dt = 1e-3
//! mc.seed = 1
//! run.stages = ["all"]
//! run.out = "out"
//! run.ladder = [[0.015625, 4e-3], [0.011, 2e-3], [0.0078125, 1e-3]]
//! ```
//!
//! Expressions are quoted strings in `x` (or `x1`, `x2`), `t`, `pi`, with
//! `+ - * / ^`, `sin cos exp ln sqrt tanh`, and `preset:name` references.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bernstein_sim::{bin_probabilities, build_drifts, Drifts, Simulator};
use crate::chain_oracle::{self, bernstein_law, build_chain, chain_solve};
use crate::coefficients::{validate_hypotheses, MonteCarloParams, ProblemSpec, Status, SpecBuilder};
use crate::error::{LabError, Result};
use crate::fbsde_verifier::{
    bernstein_property_check, bernstein_sweep, drift_pde_defect, stream_verification, uniqueness_in_law,
    Construction, StreamOptions, StreamReport,
};
use crate::grid::{Axis, Grid, ScalarField};
use crate::io;
use crate::pde_engine::{
    duality_defect, initial_values, marginal_masses, propagate_adjoint, propagate_forward, solve_normalized,
    terminal_values, SolvedProblem,
};
use crate::report::{
    write_report, Check, Failure, LadderRow, OracleSummary, RunReport, SimulationSummary, SolveSummary, TimedTest,
    VerificationSummary,
};
use crate::stats::{chi_square_gof, chi_square_two_sample, Histogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Validate,
    Solve,
    Simulate,
    Verify,
    Oracle,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Solve => "solve",
            Stage::Simulate => "simulate",
            Stage::Verify => "verify",
            Stage::Oracle => "oracle",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    pub dim: Option<usize>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoeffSection {
    pub l: Option<String>,
    #[serde(rename = "V")]
    pub v: Option<String>,
    pub phi: Option<String>,
    pub psi: Option<String>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeCount {
    Uniform(usize),
    PerAxis(Vec<usize>),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub nx: Option<NodeCount>,
    pub nt: Option<usize>,
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub n_paths: Option<usize>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageList {
    One(Stage),
    Many(Vec<Stage>),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub stages: Option<StageList>,
    pub out: Option<PathBuf>,
    /// `[[h, dt], ...]`
    pub ladder: Option<Vec<[f64; 2]>>,
    pub workers: Option<usize>,
    /// Histogram bins of the χ² tests.
    pub bins: Option<usize>,
    /// Number of paths written to the ensemble dumps.
    pub export_paths: Option<usize>,
    /// Time levels per field CSV.
    pub csv_levels: Option<usize>,
    /// Build the dense Green kernel during the solve stage.
    pub kernel: Option<bool>,
    /// Nodes per axis of the coarse oracle grid.
    pub oracle_nodes: Option<usize>,
    /// Time step of the coarse oracle comparison.
    pub oracle_dt: Option<f64>,
    /// Paths of the uniqueness-in-law comparison; 0 disables it.
    pub uniqueness_paths: Option<usize>,
}

/// File-level configuration, kept verbatim for the report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawConfig {
    pub domain: DomainSection,
    pub coeff: CoeffSection,
    pub grid: GridSection,
    pub mc: McSection,
    pub run: RunSection,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub spec: ProblemSpec,
    pub stages: Vec<Stage>,
    pub out: PathBuf,
    /// `(h, Δt)` rungs.
    pub ladder: Vec<(f64, f64)>,
    pub workers: Option<usize>,
    pub bins: usize,
    pub export_paths: usize,
    pub csv_levels: usize,
    pub kernel: Option<bool>,
    pub oracle_nodes: Option<usize>,
    pub oracle_dt: f64,
    pub uniqueness_paths: usize,
}

pub fn parse_ladder(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(';')
        .filter(|r| !r.trim().is_empty())
        .map(|rung| {
            let parts: Vec<&str> = rung.split(',').map(str::trim).collect();
            let bad = || LabError::Config(format!("ladder rung '{rung}' is not 'h,dt'"));
            if parts.len() != 2 {
                return Err(bad());
            }
            let h: f64 = parts[0].parse().map_err(|_| bad())?;
            let dt: f64 = parts[1].parse().map_err(|_| bad())?;
            if !(h > 0.0 && dt > 0.0) {
                return Err(bad());
            }
            Ok((h, dt))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let d = &raw.domain;
        let dim = d.dim.or(d.lower.as_ref().map(Vec::len)).unwrap_or(1);
        let lower = d.lower.clone().unwrap_or_else(|| vec![0.0; dim]);
        let upper = d.upper.clone().unwrap_or_else(|| vec![1.0; dim]);
        if lower.len() != dim || upper.len() != dim {
            return Err(LabError::Config(format!("domain bounds must have {dim} entries")));
        }
        let mut b: SpecBuilder = ProblemSpec::builder().domain(&lower, &upper);
        if let Some(t) = d.horizon {
            b = b.horizon(t);
        }
        let c = &raw.coeff;
        if let Some(s) = &c.l {
            b = b.drift(s);
        } else if dim > 1 {
            b = b.drift(&format!("[{}]", vec!["0"; dim].join(", ")));
        }
        if let Some(s) = &c.v {
            b = b.potential(s);
        }
        if let Some(s) = &c.phi {
            b = b.initial(s);
        }
        if let Some(s) = &c.psi {
            b = b.terminal(s);
        }
        if let Some(a) = c.alpha {
            b = b.alpha(a);
        }
        let g = &raw.grid;
        match &g.nx {
            Some(NodeCount::Uniform(n)) => b = b.nodes(*n),
            Some(NodeCount::PerAxis(v)) => b = b.nodes_per_axis(v.clone()),
            None if dim == 2 => b = b.nodes(64),
            None => {}
        }
        if let Some(n) = g.nt {
            b = b.steps(n);
        }
        if let Some(t) = g.theta {
            b = b.theta(t);
        }
        let m = &raw.mc;
        if let Some(n) = m.n_paths {
            b = b.paths(n);
        }
        if let Some(dt) = m.dt {
            b = b.dt(dt);
        }
        if let Some(s) = m.seed {
            b = b.seed(s);
        }
        let spec = b.build()?;
        let r = &raw.run;
        let stages = match &r.stages {
            None => vec![Stage::All],
            Some(StageList::One(s)) => vec![*s],
            Some(StageList::Many(v)) if v.is_empty() => vec![Stage::All],
            Some(StageList::Many(v)) => v.clone(),
        };
        let ladder = r
            .ladder
            .as_ref()
            .map(|v| v.iter().map(|p| (p[0], p[1])).collect())
            .unwrap_or_default();
        let bins = r.bins.unwrap_or(32);
        if bins < 2 {
            return Err(LabError::Config("run.bins must be at least 2".into()));
        }
        Ok(Self {
            spec,
            stages,
            out: r.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            ladder,
            workers: r.workers,
            bins,
            export_paths: r.export_paths.unwrap_or(100),
            csv_levels: r.csv_levels.unwrap_or(101).max(2),
            kernel: r.kernel,
            oracle_nodes: r.oracle_nodes,
            oracle_dt: r.oracle_dt.unwrap_or(1e-5),
            uniqueness_paths: r.uniqueness_paths.unwrap_or(20_000),
            raw,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        let mc = MonteCarloParams {
            seed,
            ..self.spec.mc.clone()
        };
        self.spec = self.spec.with_mc(mc)?;
        self.raw.mc.seed = Some(seed);
        Ok(self)
    }

    fn wants(&self, s: Stage) -> bool {
        self.stages.contains(&Stage::All) || self.stages.contains(&s)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub report: RunReport,
}

/// Exit code of an error raised inside a stage.
pub fn exit_code_of(e: &LabError) -> i32 {
    match e {
        LabError::Parse { .. } | LabError::InvalidSpec(_) | LabError::Config(_) | LabError::Io(_) | LabError::Json(_) => {
            4
        }
        LabError::Verification(_) | LabError::Mismatch(_) => 3,
        LabError::Domain { .. }
        | LabError::Evaluation(_)
        | LabError::Solver(_)
        | LabError::Simulation(_)
        | LabError::SizeLimit(_) => 2,
    }
}

/// Runs the requested stages, writes every artifact into `config.out`, and
/// returns the exit code: 0 when all hard checks pass, 1 validation,
/// 2 solver, 3 verification, 4 I/O or configuration.
pub fn run(config: &ExperimentConfig) -> RunOutcome {
    let body = || {
        let mut report = RunReport {
            config: serde_json::to_value(&config.raw).unwrap_or_default(),
            seed: config.spec.mc.seed,
            stages: config.stages.iter().map(|s| s.name().to_string()).collect(),
            ..Default::default()
        };
        let code = match execute(config, &mut report) {
            Ok(code) => code,
            Err(e) => {
                let code = exit_code_of(&e);
                report.failure = Some(Failure {
                    exit_code: code,
                    message: e.to_string(),
                });
                code
            }
        };
        report.pass = code == 0;
        let code = match write_report(&config.out, &report) {
            Ok(()) => code,
            Err(e) => {
                report.failure = Some(Failure {
                    exit_code: 4,
                    message: e.to_string(),
                });
                4
            }
        };
        RunOutcome { exit_code: code, report }
    };
    match config.workers.map(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build()) {
        Some(Ok(pool)) => pool.install(body),
        _ => body(),
    }
}

fn fail_verification(report: &mut RunReport) -> i32 {
    let failed: Vec<String> = report.failed_checks().map(|c| c.name.clone()).collect();
    if failed.is_empty() {
        return 0;
    }
    report.failure = Some(Failure {
        exit_code: 3,
        message: format!("hard checks failed: {}", failed.join(", ")),
    });
    3
}

fn execute(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<i32> {
    let spec = &cfg.spec;
    std::fs::create_dir_all(&cfg.out)?;

    let validation = validate_hypotheses(spec);
    for c in &validation.checks {
        let mut check = Check::flag(c.hypothesis.label(), "coefficients::validate_hypotheses", c.status != Status::Fail);
        check.value = c.measured;
        check.threshold = c.tolerance;
        if !c.hypothesis.is_hard() {
            check = check.advisory();
            check.pass = c.status == Status::Pass;
        }
        report.checks.push(check);
    }
    let hard_pass = validation.hard_pass();
    if !hard_pass {
        let mut msg = Vec::new();
        for f in validation.failures() {
            let w = f
                .witnesses
                .first()
                .map(|w| format!(" at {:?} (value {:e})", w.coords, w.value))
                .unwrap_or_default();
            msg.push(format!("hypothesis {} violated{w}", f.hypothesis.label()));
        }
        report.validation = Some(validation);
        report.failure = Some(Failure {
            exit_code: 1,
            message: msg.join("; "),
        });
        return Ok(1);
    }
    report.validation = Some(validation);

    let needs_solve = [Stage::Solve, Stage::Simulate, Stage::Verify, Stage::Oracle]
        .iter()
        .any(|s| cfg.wants(*s));
    if needs_solve {
        let sol = solve_stage(cfg, report)?;
        if cfg.wants(Stage::Simulate) || cfg.wants(Stage::Verify) {
            let drifts = build_drifts(&sol.u, &sol.v, &sol.spec)?;
            simulate_and_verify(cfg, &sol, &drifts, report)?;
        }
        if cfg.wants(Stage::Verify) && !cfg.ladder.is_empty() {
            ladder_stage(cfg, report)?;
        }
    }
    if cfg.wants(Stage::Oracle) {
        oracle_stage(cfg, report)?;
    }
    Ok(fail_verification(report))
}

fn solve_stage(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<SolvedProblem> {
    let spec = &cfg.spec;
    let nodes: usize = spec.grid.nodes.iter().product();
    let with_kernel = cfg.kernel.unwrap_or(nodes <= 256);
    let sol = solve_normalized(spec, with_kernel)?;
    let defect = duality_defect(&sol.u, &sol.v)?;
    let masses = marginal_masses(&sol.u, &sol.v)?;
    let mass_defect = masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let min_u = sol.u.min_value();
    let min_v = sol.v.min_value();
    let (kmass, kmin) = match (&sol.kernel, &sol.mu) {
        (Some(k), Some(mu)) => (Some(mu.total_mass()), Some(k.min_entry())),
        _ => (None, None),
    };
    report.checks.push(Check::at_most("duality_defect", "pde_engine::duality_defect", defect, 1e-10));
    report.checks.push(Check::at_most("mass_consistency", "pde_engine::marginal_masses", mass_defect, 1e-8));
    report.checks.push(Check::flag("positivity", "pde_engine::solve_pair", min_u > 0.0 && min_v > 0.0));
    if let (Some(m), Some(k)) = (kmass, kmin) {
        report.checks.push(Check::at_most("green_normalization", "pde_engine::normalize_mu", (m - 1.0).abs(), 1e-12));
        report.checks.push(Check::flag("green_positivity", "pde_engine::green_kernel", k > 0.0));
    }
    report.solve = Some(SolveSummary {
        theta: sol.theta,
        c_mu: sol.c_mu,
        duality_defect: defect,
        max_mass_defect: mass_defect,
        min_u,
        min_v,
        kernel_total_mass: kmass,
        kernel_min_entry: kmin,
    });
    let levels = export_levels(sol.u.grid.levels(), cfg.csv_levels);
    for (name, f) in [("u", &sol.u), ("v", &sol.v), ("density", &sol.density())] {
        io::write_field_bin(&cfg.out.join(format!("{name}.bin")), f)?;
        io::write_field_csv_levels(&cfg.out.join(format!("{name}.csv")), f, &levels)?;
    }
    Ok(sol)
}

fn export_levels(levels: usize, wanted: usize) -> Vec<usize> {
    if wanted >= levels {
        return (0..levels).collect();
    }
    let mut v: Vec<usize> = (0..wanted)
        .map(|i| ((i as f64) * (levels - 1) as f64 / (wanted - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

/// Bin probabilities of the first coordinate of `ρ(·, t)`.
fn marginal_probabilities(sol: &SolvedProblem, t: f64, bins: usize) -> Result<Vec<f64>> {
    let rho = sol.density();
    let grid = &rho.grid;
    let steps = grid.levels() - 1;
    let level = ((t / sol.spec.horizon) * steps as f64).round() as usize;
    let values = rho.level(level.min(steps));
    if grid.dim() == 1 {
        return Ok(bin_probabilities(grid, values, bins));
    }
    let a0 = grid.axis(0).clone();
    let a1 = grid.axis(1);
    let mut m = vec![0.0; a0.nodes];
    for node in 0..grid.node_count() {
        let idx = grid.multi_index(node);
        m[idx[0]] += a1.weight(idx[1]) * values[node];
    }
    let line = Grid::new(vec![a0], vec![0.0])?;
    Ok(bin_probabilities(&line, &m, bins))
}

fn hist_name(prefix: &str, t: f64) -> String {
    format!("{prefix}_t{:.4}.csv", t)
}

fn simulate_and_verify(cfg: &ExperimentConfig, sol: &SolvedProblem, dr: &Drifts, report: &mut RunReport) -> Result<()> {
    let spec = &sol.spec;
    let (n, dt, seed) = (spec.mc.n_paths, spec.mc.dt, spec.mc.seed);
    let horizon = spec.horizon;
    let verify = cfg.wants(Stage::Verify);
    let marginal_times: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|f| f * horizon).collect();
    let fwd = Simulator::forward(sol, dr, dt, seed)?;
    let opts = StreamOptions {
        histogram_times: marginal_times.clone(),
        bins: cfg.bins,
        residual: verify,
        wiener: verify,
    };
    let stream = stream_verification(&fwd, &dr.grad_c_star, n, &opts)?;
    if cfg.export_paths > 0 {
        let ens = fwd.collect(cfg.export_paths.min(n))?;
        io::write_ensemble_csv(&cfg.out.join("ensemble_forward.csv"), &ens)?;
        io::write_ensemble_bin(&cfg.out.join("ensemble_forward.bin"), &ens)?;
    }
    let mut marginal_tests = Vec::new();
    for (t, h) in &stream.histograms {
        io::write_histogram_csv(&cfg.out.join(hist_name("hist_forward", *t)), h)?;
        let test = chi_square_gof(h, &marginal_probabilities(sol, *t, cfg.bins)?, 0.01)?;
        report.checks.push(Check::at_most(
            &format!("marginal_chi2_t{t}"),
            "bernstein_sim::simulate_forward",
            test.statistic,
            test.critical,
        ));
        marginal_tests.push(TimedTest { t: *t, test });
    }
    report.simulation = Some(SimulationSummary {
        n_paths: n,
        dt,
        seed,
        marginal_tests,
    });
    if verify {
        verify_stage(cfg, sol, dr, &stream, report)?;
    }
    Ok(())
}

fn max_spacing(spec: &ProblemSpec) -> f64 {
    spec.space_axes().iter().map(Axis::spacing).fold(0.0, f64::max)
}

fn verify_stage(
    cfg: &ExperimentConfig,
    sol: &SolvedProblem,
    dr: &Drifts,
    fwd: &StreamReport,
    report: &mut RunReport,
) -> Result<()> {
    let spec = &sol.spec;
    let (n, dt, seed) = (spec.mc.n_paths, spec.mc.dt, spec.mc.seed);
    let horizon = spec.horizon;
    let h = max_spacing(spec);
    let interior: Vec<f64> = [0.25, 0.5, 0.75].iter().map(|f| f * horizon).collect();

    let bwd = Simulator::backward(sol, dr, dt, seed)?;
    let dual = stream_verification(
        &bwd,
        &dr.grad_c,
        n,
        &StreamOptions {
            histogram_times: interior.clone(),
            bins: cfg.bins,
            residual: true,
            wiener: false,
        },
    )?;
    if cfg.export_paths > 0 {
        let ens = bwd.collect(cfg.export_paths.min(n))?;
        io::write_ensemble_csv(&cfg.out.join("ensemble_backward.csv"), &ens)?;
        io::write_ensemble_bin(&cfg.out.join("ensemble_backward.bin"), &ens)?;
    }
    let reseeded = Simulator::forward(sol, dr, dt, seed.wrapping_add(1))?;
    let reseeded = stream_verification(
        &reseeded,
        &dr.grad_c_star,
        n,
        &StreamOptions {
            residual: false,
            wiener: false,
            ..Default::default()
        },
    )?;

    let forward = fwd.residual.clone().ok_or_else(|| LabError::Verification("forward residual missing".into()))?;
    let dual_res = dual.residual.clone().ok_or_else(|| LabError::Verification("dual residual missing".into()))?;
    let wiener = fwd.wiener.clone().ok_or_else(|| LabError::Verification("Wiener statistics missing".into()))?;
    io::write_residual_profile_csv(&cfg.out.join("residual_forward.csv"), &forward)?;
    io::write_residual_profile_csv(&cfg.out.join("residual_dual.csv"), &dual_res)?;

    let src = "fbsde_verifier::backward_residual";
    report.checks.push(Check::at_most("terminal_defect_forward", src, forward.terminal_rms, 10.0 * h * h));
    report.checks.push(Check::at_most("terminal_defect_dual", src, dual_res.terminal_rms, 10.0 * h * h));
    report.checks.push(Check::flag("residual_finite", src, forward.mse.is_finite() && dual_res.mse.is_finite()));
    report.checks.push(
        Check::at_most("residual_mean_band_forward", src, forward.levels_outside_band as f64, 0.0).advisory(),
    );
    report.checks.push(Check::flag("wiener_statistics", "fbsde_verifier::wiener_statistics", wiener.pass()));
    report.checks.push(Check::at_most(
        "wiener_reconstruction",
        "bernstein_sim::reconstruct_wiener",
        fwd.reconstruction_mismatch,
        1e-9,
    ));
    let sq_src = "fbsde_verifier::square_integrability";
    report.checks.push(Check::flag(
        "square_integrability_finite",
        sq_src,
        fwd.square.estimate.is_finite() && dual.square.estimate.is_finite(),
    ));
    report.checks.push(Check::flag("square_integrability_seed_stable", sq_src, fwd.square.agrees_with(&reseeded.square, 4.0)));

    let mut drift_defect = None;
    let mut dual_drift_defect = None;
    if sol.u.grid.levels() >= 3 && spec.grid.nodes.iter().all(|&k| k >= 5) {
        drift_defect = Some(drift_pde_defect(spec, dr, Construction::Forward)?.max);
        dual_drift_defect = Some(drift_pde_defect(spec, dr, Construction::Dual)?.max);
    }

    let mut reversibility = Vec::new();
    let fwd_hists: Vec<&(f64, Histogram)> = fwd.histograms.iter().filter(|(t, _)| interior.contains(t)).collect();
    for ((t, hb), (_, hf)) in dual.histograms.iter().zip(fwd_hists) {
        io::write_histogram_csv(&cfg.out.join(hist_name("hist_backward", *t)), hb)?;
        let test = chi_square_two_sample(hf, hb, 0.01)?;
        report.checks.push(Check::at_most(
            &format!("reversibility_chi2_t{t}"),
            "bernstein_sim::simulate_backward",
            test.statistic,
            test.critical,
        ));
        reversibility.push(TimedTest { t: *t, test });
    }

    let uniqueness = if cfg.uniqueness_paths > 0 {
        let a = Simulator::forward(sol, dr, dt, seed.wrapping_add(2))?;
        let b = Simulator::forward(sol, dr, 2.0 * dt, seed.wrapping_add(3))?;
        let u = uniqueness_in_law(&a, &b, cfg.uniqueness_paths, 0.5 * horizon, cfg.bins)?;
        report.checks.push(Check::flag("uniqueness_in_law", "fbsde_verifier::uniqueness_in_law", u.pass()));
        Some(u)
    } else {
        None
    };

    report.verification = Some(VerificationSummary {
        forward,
        dual: dual_res,
        dual_identity: "derived: d_t c_i - (1/2) Lap c_i + (b . grad) c_i + (c, grad l_i) - d_i V = 0".into(),
        forward_square: fwd.square,
        dual_square: dual.square,
        reseeded_square: reseeded.square,
        wiener,
        reconstruction_mismatch: fwd.reconstruction_mismatch,
        drift_defect,
        dual_drift_defect,
        reversibility_tests: reversibility,
        uniqueness,
    });
    Ok(())
}

fn ladder_stage(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let base = &cfg.spec;
    let mut rows = Vec::new();
    for &(h, dt) in &cfg.ladder {
        let nodes: Vec<usize> = base
            .domain
            .lower
            .iter()
            .zip(&base.domain.upper)
            .map(|(lo, hi)| ((hi - lo) / h).round() as usize + 1)
            .collect();
        let steps = (base.horizon / dt).round().max(1.0) as usize;
        let spec = base.with_resolution(nodes.clone(), steps)?.with_mc(MonteCarloParams {
            dt,
            ..base.mc.clone()
        })?;
        let sol = solve_normalized(&spec, false)?;
        let dr = build_drifts(&sol.u, &sol.v, &sol.spec)?;
        let sim = Simulator::forward(&sol, &dr, dt, spec.mc.seed)?;
        let st = stream_verification(
            &sim,
            &dr.grad_c_star,
            spec.mc.n_paths,
            &StreamOptions {
                wiener: false,
                ..Default::default()
            },
        )?;
        let r = st.residual.ok_or_else(|| LabError::Verification("ladder residual missing".into()))?;
        let defect = drift_pde_defect(&sol.spec, &dr, Construction::Forward).ok().map(|d| d.max);
        let hh = max_spacing(&spec);
        report.checks.push(Check::at_most(
            &format!("ladder_terminal_defect_h{hh:.5}"),
            "fbsde_verifier::backward_residual",
            r.terminal_rms,
            10.0 * hh * hh,
        ));
        rows.push(LadderRow {
            h: hh,
            dt,
            nodes: nodes[0],
            steps,
            n_paths: spec.mc.n_paths,
            mse: r.mse,
            mse_sem: r.mse_sem,
            terminal_rms: r.terminal_rms,
            drift_defect: defect,
        });
    }
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            vec![
                r.h,
                r.dt,
                r.nodes as f64,
                r.steps as f64,
                r.n_paths as f64,
                r.mse,
                r.mse_sem,
                r.terminal_rms,
                r.drift_defect.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    io::write_table_csv(
        &cfg.out.join("convergence.csv"),
        &["h", "dt", "nodes", "steps", "n_paths", "mse", "mse_sem", "terminal_rms", "drift_defect"],
        &table,
    )?;
    if rows.len() >= 2 {
        let ratio = rows.windows(2).map(|w| w[0].mse / w[1].mse).fold(f64::INFINITY, f64::min);
        report.checks.push(Check::at_least("ladder_mse_ratio", "fbsde_verifier::backward_residual", ratio, 1.5));
    }
    report.ladder = rows;
    Ok(())
}

fn oracle_stage(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let base = &cfg.spec;
    let d = base.dim();
    let per_axis = cfg.oracle_nodes.unwrap_or(if d == 1 { 9 } else { 8 });
    let states = per_axis.pow(d as u32);
    if states > chain_oracle::MAX_STATES {
        return Err(LabError::SizeLimit(format!("oracle grid of {states} states exceeds the chain limit")));
    }
    let steps = (base.horizon / cfg.oracle_dt).ceil() as usize;
    let coarse = base.with_resolution(vec![per_axis; d], steps)?;
    let chain = build_chain(&coarse, states)?;
    let grid = coarse.pde_grid();
    let phi = initial_values(&coarse, &grid);
    let psi = terminal_values(&coarse, &grid);
    let pde_u = propagate_forward(&coarse, coarse.grid.theta, &phi)?;
    let pde_v = propagate_adjoint(&coarse, coarse.grid.theta, &psi)?;
    let ch_u = chain_solve(&chain, &phi, chain_oracle::Direction::Forward)?;
    let ch_v = chain_solve(&chain, &psi, chain_oracle::Direction::Backward)?;
    let diff = |a: &ScalarField, b: &ScalarField| a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let fwd_diff = diff(&pde_u, &ch_u);
    let bwd_diff = diff(&pde_v, &ch_v);
    report.checks.push(Check::at_most("oracle_forward", "chain_oracle::chain_solve", fwd_diff, 1e-8));
    report.checks.push(Check::at_most("oracle_backward", "chain_oracle::chain_solve", bwd_diff, 1e-8));

    // reciprocal property on a small chain
    let (bm, bsteps) = if d == 1 { (3, 4) } else { (4, 3) };
    let small = base.with_resolution(vec![8; d], 12)?;
    let small_chain = build_chain(&small, bm)?;
    let pts: Vec<Vec<f64>> = (0..bm).map(|z| small_chain.grid.coord(z)[..d].to_vec()).collect();
    let sphi: Vec<f64> = pts.iter().map(|x| small.phi_at(x)).collect();
    let spsi: Vec<f64> = pts.iter().map(|x| small.psi_at(x)).collect();
    let law = bernstein_law(&small_chain, &sphi, &spsi, bsteps)?;
    let h = |z: usize| (z as f64 + 1.0).sin();
    let defect = bernstein_sweep(&law, h)?;
    let bent = law.reweighted(|z| if z[0] == z[2] { 3.0 } else { 1.0 })?;
    let control = bernstein_property_check(&bent, 2, 1, 3, |z| z as f64)?;
    report.checks.push(Check::at_most("bernstein_property", "fbsde_verifier::bernstein_property_check", defect, 1e-12));
    report.checks.push(Check::at_least(
        "bernstein_negative_control",
        "fbsde_verifier::bernstein_property_check",
        control,
        1e-3,
    ));
    report.oracle = Some(OracleSummary {
        states,
        steps,
        forward_max_diff: fwd_diff,
        backward_max_diff: bwd_diff,
        bernstein_states: bm,
        bernstein_steps: bsteps,
        bernstein_defect: defect,
        non_markov_control_defect: control,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_strings() {
        assert_eq!(parse_ladder("0.1,1e-3;0.05,5e-4").unwrap(), vec![(0.1, 1e-3), (0.05, 5e-4)]);
        assert!(parse_ladder("0.1").is_err());
        assert!(parse_ladder("a,b").is_err());
    }

    #[test]
    fn dotted_keys_and_defaults() {
        let c = ExperimentConfig::from_toml_str(
            "domain.dim = 1\ncoeff.psi = \"2 + cos(pi*x)\"\ncoeff.V = \"x^2\"\ngrid.nx = 32\nmc.seed = 9\nrun.stages = \"solve\"\n",
        )
        .unwrap();
        assert_eq!(c.spec.grid.nodes, vec![32]);
        assert_eq!(c.spec.mc.seed, 9);
        assert_eq!(c.stages, vec![Stage::Solve]);
        assert!(c.wants(Stage::Solve) && !c.wants(Stage::Verify));
        assert!(ExperimentConfig::from_toml_str("coeff.q = \"1\"").is_err());
        assert!(ExperimentConfig::from_toml_str("grid.nx = 2").is_err());
    }

    #[test]
    fn export_level_selection() {
        assert_eq!(export_levels(5, 10), vec![0, 1, 2, 3, 4]);
        assert_eq!(export_levels(1001, 3), vec![0, 500, 1000]);
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code_of(&LabError::Solver("x".into())), 2);
        assert_eq!(exit_code_of(&LabError::Verification("x".into())), 3);
        assert_eq!(exit_code_of(&LabError::Config("x".into())), 4);
    }
}
