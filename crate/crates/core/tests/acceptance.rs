//! Desk-scale acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use bernstein_lab::bernstein_sim::{
    bin_probabilities, build_drifts, reconstruct_wiener, simulate_forward, Simulator,
};
use bernstein_lab::chain_oracle::{self, bernstein_law, build_chain, chain_solve};
use bernstein_lab::cli::{run, ExperimentConfig};
use bernstein_lab::coefficients::ProblemSpec;
use bernstein_lab::fbsde_verifier::{
    assemble_triple, backward_residual, bernstein_property_check, bernstein_sweep, clock_steps, drift_pde_defect,
    stream_verification, terminal_kappa, wiener_statistics, Construction, StreamOptions,
};
use bernstein_lab::pde_engine::{
    duality_defect, green_kernel, initial_values, normalize_mu, propagate_adjoint, propagate_forward, solve_adjoint,
    solve_adjoint_independent, solve_forward, solve_normalized, terminal_values,
};
use bernstein_lab::stats::{chi_square_gof, chi_square_two_sample};
use bernstein_lab::Result;

const SEED: u64 = 1;
const PATHS: usize = 100_000;
const BINS: usize = 32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn spec(l: &str, v: &str, phi: &str, psi: &str, nodes: usize, steps: usize) -> Result<ProblemSpec> {
    ProblemSpec::builder()
        .drift(l)
        .potential(v)
        .initial(phi)
        .terminal(psi)
        .nodes(nodes)
        .steps(steps)
        .paths(PATHS)
        .dt(1.0 / steps as f64)
        .seed(SEED)
        .build()
}

/// Positive benchmark terminal datum of the residual studies.
const BENCH_PSI: &str = "2 + cos(pi*x)";
const GENERIC_L: &str = "0.5*sin(pi*x)";
const GENERIC_V: &str = "x^2/2";
const GENERIC_PHI: &str = "2 + cos(pi*x)";
const GENERIC_PSI: &str = "1.5 + cos(pi*x)";

fn trivial_exactness() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let text = format!(
        "coeff.l = \"0\"\ncoeff.V = \"0\"\ncoeff.phi = \"1\"\ncoeff.psi = \"1\"\ngrid.nx = 128\ngrid.nt = 1000\n\
         mc.n_paths = {PATHS}\nmc.dt = 1e-3\nmc.seed = {SEED}\nrun.out = {:?}\n",
        dir.path().display().to_string()
    );
    let cfg = ExperimentConfig::from_toml_str(&text)?;
    let out = run(&cfg);
    let s = &cfg.spec;
    let sol = solve_normalized(s, false)?;
    let spread = |f: &bernstein_lab::grid::ScalarField| {
        let (lo, hi) = f.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        hi - lo
    };
    let dr = build_drifts(&sol.u, &sol.v, &sol.spec)?;
    let drift_max = dr.b_star.max_abs().max(dr.c.max_abs()).max(dr.c_star.max_abs());
    let ens = simulate_forward(&sol, &dr, 2000, 1e-3, SEED)?;
    let tri = assemble_triple(&ens, &sol.spec, &dr.c_star, &dr.grad_c_star)?;
    let bc = tri.b.iter().chain(&tri.c).fold(0.0f64, |m, v| m.max(v.abs()));
    let (kappa, _) = terminal_kappa(&tri, &sol.spec)?;
    let kmax = kappa.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let res = backward_residual(&tri, &sol.spec)?;
    let rmax = res.levels.iter().map(|l| l.max_abs).fold(0.0, f64::max);
    let report_rmax = out
        .report
        .verification
        .as_ref()
        .map(|v| v.forward.levels.iter().map(|l| l.max_abs).fold(0.0, f64::max))
        .unwrap_or(f64::NAN);
    let pass = spread(&sol.u) <= 1e-12
        && spread(&sol.v) <= 1e-12
        && drift_max <= 1e-12
        && bc == 0.0
        && kmax == 0.0
        && rmax <= 1e-12
        && report_rmax <= 1e-12
        && out.exit_code == 0;
    outcome(
        pass,
        format!(
            "exit={} spread(u)={:.1e} spread(v)={:.1e} max|b*,c*,c|={:.1e} max|B,C|={bc:.1e} max|κ|={kmax:.1e} residual={rmax:.1e} report residual={report_rmax:.1e}{}",
            out.exit_code,
            spread(&sol.u),
            spread(&sol.v),
            drift_max,
            out.report.failure.map(|f| format!(" ({})", f.message)).unwrap_or_default()
        ),
    )
}

fn eigenseries_error(nodes: usize, steps: usize) -> Result<f64> {
    let s = spec("0", "0", "1", "1 + cos(pi*x)", nodes, steps)?;
    let grid = s.pde_grid();
    let v = propagate_adjoint(&s, 0.5, &terminal_values(&s, &grid))?;
    let mut err: f64 = 0.0;
    for (n, &t) in grid.times().iter().enumerate() {
        for i in 0..grid.node_count() {
            let x = grid.coord(i)[0];
            let exact = 1.0 + (-PI * PI * (1.0 - t) / 2.0).exp() * (PI * x).cos();
            err = err.max((v.at(n, i) - exact).abs());
        }
    }
    Ok(err)
}

fn eigenseries_oracle() -> Result<Outcome> {
    let coarse = eigenseries_error(128, 1000)?;
    // h and √k halved
    let fine = eigenseries_error(255, 4000)?;
    let ratio = coarse / fine;
    outcome(
        coarse <= 5e-4 && (3.0..=5.5).contains(&ratio),
        format!("max error {coarse:.3e} at 128/1000, {fine:.3e} refined, ratio {ratio:.2}"),
    )
}

fn green_normalization() -> Result<Outcome> {
    let s = spec(GENERIC_L, GENERIC_V, GENERIC_PHI, GENERIC_PSI, 64, 500)?;
    let g = green_kernel(&s)?;
    let mu = normalize_mu(&s, &g)?;
    let mass = mu.total_mass();
    let min = g.min_entry();
    outcome(
        (mass - 1.0).abs() <= 1e-12 && min > 0.0,
        format!("|mass - 1| = {:.2e}, min G = {min:.3e}", (mass - 1.0).abs()),
    )
}

fn duality() -> Result<Outcome> {
    let coarse = spec(GENERIC_L, GENERIC_V, GENERIC_PHI, GENERIC_PSI, 128, 1000)?;
    let u = solve_forward(&coarse)?;
    let v = solve_adjoint(&coarse)?;
    let structural = duality_defect(&u, &v)?;
    let mut indep = Vec::new();
    for (nodes, steps) in [(33, 100), (65, 200), (129, 400)] {
        let s = spec(GENERIC_L, GENERIC_V, GENERIC_PHI, GENERIC_PSI, nodes, steps)?;
        let u = solve_forward(&s)?;
        let v = solve_adjoint_independent(&s, 0.5)?;
        let h = 1.0 / (nodes - 1) as f64;
        let k = 1.0 / steps as f64;
        indep.push((duality_defect(&u, &v)?, h * h + k));
    }
    let bounded = indep.iter().all(|(d, b)| d <= b);
    let shrinking = indep.windows(2).all(|w| w[1].0 < w[0].0);
    outcome(
        structural <= 1e-10 && bounded && shrinking,
        format!(
            "structural {structural:.2e}; independent {}",
            indep.iter().map(|(d, b)| format!("{d:.2e} (h²+k = {b:.2e})")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn marginal_and_reversibility() -> Result<(Outcome, Outcome)> {
    let s = spec(GENERIC_L, GENERIC_V, GENERIC_PHI, GENERIC_PSI, 128, 1000)?;
    let sol = solve_normalized(&s, false)?;
    let dr = build_drifts(&sol.u, &sol.v, &sol.spec)?;
    let times = [0.0, 0.25, 0.5, 0.75, 1.0];
    let fwd = Simulator::forward(&sol, &dr, 1e-3, SEED)?;
    let f = stream_verification(
        &fwd,
        &dr.grad_c_star,
        PATHS,
        &StreamOptions {
            histogram_times: times.to_vec(),
            bins: BINS,
            residual: false,
            wiener: false,
        },
    )?;
    let rho = sol.density();
    let mut marginal = Vec::new();
    for (t, h) in &f.histograms {
        let level = (t * 1000.0).round() as usize;
        let p = bin_probabilities(&rho.grid, rho.level(level), BINS);
        marginal.push((*t, chi_square_gof(h, &p, 0.01)?));
    }
    let bwd = Simulator::backward(&sol, &dr, 1e-3, SEED)?;
    let b = stream_verification(
        &bwd,
        &dr.grad_c,
        PATHS,
        &StreamOptions {
            histogram_times: vec![0.25, 0.5, 0.75],
            bins: BINS,
            residual: false,
            wiener: false,
        },
    )?;
    let mut rev = Vec::new();
    for (t, hb) in &b.histograms {
        let hf = &f.histograms.iter().find(|(s, _)| s == t).expect("shared time").1;
        rev.push((*t, chi_square_two_sample(hf, hb, 0.01)?));
    }
    let fmt = |v: &[(f64, bernstein_lab::stats::ChiSquareTest)]| {
        v.iter()
            .map(|(t, c)| format!("t={t}: {:.1}/{:.1}", c.statistic, c.critical))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Ok((
        Outcome {
            pass: marginal.iter().all(|(_, c)| c.pass),
            detail: fmt(&marginal),
        },
        Outcome {
            pass: rev.iter().all(|(_, c)| c.pass),
            detail: fmt(&rev),
        },
    ))
}

struct Rung {
    h: f64,
    mse: f64,
    terminal: f64,
    square: bernstein_lab::fbsde_verifier::SquareIntegrability,
    wiener: Option<bernstein_lab::fbsde_verifier::WienerReport>,
}

fn residual_rung(nodes: usize, dt: f64, seed: u64, wiener: bool) -> Result<Rung> {
    let steps = (1.0f64 / dt).round() as usize;
    let s = spec("0", "0", "1", BENCH_PSI, nodes, steps)?;
    let sol = solve_normalized(&s, false)?;
    let dr = build_drifts(&sol.u, &sol.v, &sol.spec)?;
    let sim = Simulator::forward(&sol, &dr, dt, seed)?;
    let st = stream_verification(
        &sim,
        &dr.grad_c_star,
        PATHS,
        &StreamOptions {
            wiener,
            ..Default::default()
        },
    )?;
    let r = st.residual.expect("residual requested");
    Ok(Rung {
        h: 1.0 / (nodes - 1) as f64,
        mse: r.mse,
        terminal: r.terminal_rms,
        square: st.square,
        wiener: st.wiener,
    })
}

fn residual_convergence(rungs: &[Rung]) -> Result<Outcome> {
    let ratios: Vec<f64> = rungs.windows(2).map(|w| w[0].mse / w[1].mse).collect();
    let terminal_ok = rungs.iter().all(|r| r.terminal <= 10.0 * r.h * r.h);
    outcome(
        ratios.iter().all(|r| *r >= 1.5) && terminal_ok,
        format!(
            "MSE {} ratios {}; terminal RMS / 10h² = {}",
            rungs.iter().map(|r| format!("{:.3e}", r.mse)).collect::<Vec<_>>().join(" → "),
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", "),
            rungs
                .iter()
                .map(|r| format!("{:.2}", r.terminal / (10.0 * r.h * r.h)))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn drift_identity() -> Result<Outcome> {
    let mut defects = Vec::new();
    for (nodes, steps) in [(33, 250), (65, 1000), (129, 4000)] {
        let s = spec("0", "0", "1", BENCH_PSI, nodes, steps)?;
        let sol = solve_normalized(&s, false)?;
        let dr = build_drifts(&sol.u, &sol.v, &sol.spec)?;
        defects.push(drift_pde_defect(&sol.spec, &dr, Construction::Forward)?.max);
    }
    let ratios: Vec<f64> = defects.windows(2).map(|w| w[0] / w[1]).collect();
    let t = spec("0", "0", "1", "1", 33, 250)?;
    let sol = solve_normalized(&t, false)?;
    let dr = build_drifts(&sol.u, &sol.v, &sol.spec)?;
    let trivial = drift_pde_defect(&sol.spec, &dr, Construction::Forward)?.max;
    outcome(
        ratios.iter().all(|r| (3.0..=5.0).contains(r)) && trivial == 0.0,
        format!(
            "max defect {} ratios {}; trivial {trivial:e}",
            defects.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>().join(" → "),
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn wiener(finest: &Rung) -> Result<Outcome> {
    let w = finest.wiener.as_ref().expect("wiener requested");
    let s = spec("0", "0", "1", BENCH_PSI, 128, 1000)?;
    let sol = solve_normalized(&s, false)?;
    let dr = build_drifts(&sol.u, &sol.v, &sol.spec)?;
    let sim = Simulator::forward(&sol, &dr, 1e-3, SEED + 10)?;
    let ens = sim.collect(15_000)?;
    let rec = reconstruct_wiener(&sim, &ens)?;
    let dts = clock_steps(&sim.clock);
    let clean = wiener_statistics(&rec.folded, 1, &dts)?;
    let mut dirty = rec.folded.clone();
    for (i, v) in dirty.iter_mut().enumerate() {
        *v += 0.5 * dts[i % dts.len()];
    }
    let dirty = wiener_statistics(&dirty, 1, &dts)?;
    let control_fails = !dirty.check("mean").map(|c| c.pass).unwrap_or(true);
    let summary = |r: &bernstein_lab::fbsde_verifier::WienerReport| {
        r.checks
            .iter()
            .map(|c| format!("{}:{:+.2}", c.name, c.pooled_z))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        w.pass() && clean.pass() && control_fails,
        format!(
            "1e5 paths [{}]; 1.5e4 materialized pass={}; contaminated mean z={:+.1}",
            summary(w),
            clean.pass(),
            dirty.check("mean").map(|c| c.pooled_z).unwrap_or(f64::NAN)
        ),
    )
}

fn bernstein_property() -> Result<Outcome> {
    let s = spec(GENERIC_L, "x", GENERIC_PHI, GENERIC_PSI, 8, 60)?;
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for m in 2..=5 {
        let chain = build_chain(&s, m)?;
        let pts: Vec<f64> = (0..m).map(|z| chain.grid.coord(z)[0]).collect();
        let phi: Vec<f64> = pts.iter().map(|x| s.phi_at(&[*x])).collect();
        let psi: Vec<f64> = pts.iter().map(|x| s.psi_at(&[*x])).collect();
        for steps in 2..=5 {
            let law = bernstein_law(&chain, &phi, &psi, steps)?;
            worst = worst.max(bernstein_sweep(&law, |z| (z as f64 * 1.3 + 0.2).sin())?);
            worst = worst.max(bernstein_sweep(&law, |z| if z == 0 { 1.0 } else { 0.0 })?);
            instances += 1;
        }
    }
    let chain = build_chain(&s, 3)?;
    let law = bernstein_law(&chain, &[1.0, 2.0, 1.0], &[1.0, 1.0, 2.0], 4)?;
    let bent = law.reweighted(|z| if z[0] == z[2] { 3.0 } else { 1.0 })?;
    let control = bernstein_property_check(&bent, 2, 1, 3, |z| z as f64)?;
    outcome(
        worst <= 1e-12 && control > 1e-3,
        format!("{instances} instances, worst defect {worst:.2e}; non-Markov control {control:.3e}"),
    )
}

fn oracle_equivalence() -> Result<Outcome> {
    let mut lines = Vec::new();
    let mut pass = true;
    let cases = [
        ("1d", ProblemSpec::builder()
            .drift(GENERIC_L)
            .potential(GENERIC_V)
            .initial(GENERIC_PHI)
            .terminal(GENERIC_PSI)
            .nodes(9)
            .steps(100_000)
            .build()?),
        ("1d time-dependent", ProblemSpec::builder()
            .drift("0.5*sin(pi*x)*(1 + t)")
            .potential("x*t")
            .initial(GENERIC_PHI)
            .terminal(GENERIC_PSI)
            .nodes(9)
            .steps(20_000)
            .build()?),
        ("2d", ProblemSpec::builder()
            .domain(&[0.0, 0.0], &[1.0, 1.0])
            .drift("[0.3*x1, 0.2*x2]")
            .potential("x1*x2")
            .initial("2 + cos(pi*x1)")
            .terminal("2 + cos(pi*x2)")
            .nodes(8)
            .steps(100_000)
            .build()?),
    ];
    for (name, s) in cases {
        let g = s.pde_grid();
        let m = g.node_count();
        let chain = build_chain(&s, m)?;
        let u = propagate_forward(&s, 0.5, &initial_values(&s, &g))?;
        let v = propagate_adjoint(&s, 0.5, &terminal_values(&s, &g))?;
        let cu = chain_solve(&chain, &initial_values(&s, &g), chain_oracle::Direction::Forward)?;
        let cv = chain_solve(&chain, &terminal_values(&s, &g), chain_oracle::Direction::Backward)?;
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let (du, dv) = (d(&u.values, &cu.values), d(&v.values, &cv.values));
        pass &= du <= 1e-8 && dv <= 1e-8;
        lines.push(format!("{name} ({m} states): {du:.1e}/{dv:.1e}"));
    }
    outcome(pass, lines.join(", "))
}

fn square_integrability(rungs: &[Rung]) -> Result<Outcome> {
    let first = &rungs[0];
    let reseeded = residual_rung(64, 4e-3, SEED + 1, false)?;
    let stable = first.square.agrees_with(&reseeded.square, 4.0);
    let s = spec("0", "0", "1", "1", 32, 100)?;
    let sol = solve_normalized(&s, false)?;
    let dr = build_drifts(&sol.u, &sol.v, &sol.spec)?;
    let sim = Simulator::forward(&sol, &dr, 1e-2, SEED)?;
    let st = stream_verification(
        &sim,
        &dr.grad_c_star,
        PATHS,
        &StreamOptions {
            residual: false,
            wiener: false,
            ..Default::default()
        },
    )?;
    let third = (st.square.estimate - 1.0 / 3.0).abs() <= 4.0 * st.square.sem;
    outcome(
        first.square.estimate.is_finite() && stable && third,
        format!(
            "benchmark {:.4}±{:.1e} vs reseeded {:.4}±{:.1e}; trivial {:.5}±{:.1e} (T/3 = 0.33333)",
            first.square.estimate, first.square.sem, reseeded.square.estimate, reseeded.square.sem, st.square.estimate, st.square.sem
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(&str, Result<Outcome>)> = Vec::new();
    results.push(("trivial-configuration exactness", trivial_exactness()));
    results.push(("eigenseries oracle", eigenseries_oracle()));
    results.push(("Green kernel normalization", green_normalization()));
    results.push(("duality", duality()));
    match marginal_and_reversibility() {
        Ok((m, r)) => {
            results.push(("marginal law", Ok(m)));
            results.push(("reversibility", Ok(r)));
        }
        Err(e) => {
            results.push(("marginal law", Err(e)));
            results.push(("reversibility", Ok(Outcome { pass: false, detail: "not reached".into() })));
        }
    }
    let rungs: Result<Vec<Rung>> = [(64, 4e-3, false), (91, 2e-3, false), (128, 1e-3, true)]
        .iter()
        .map(|&(n, dt, w)| residual_rung(n, dt, SEED, w))
        .collect();
    match rungs {
        Ok(rungs) => {
            results.push(("FBSDE residual convergence", residual_convergence(&rungs)));
            results.push(("drift identity", drift_identity()));
            results.push(("Wiener statistics", wiener(&rungs[2])));
            results.push(("Bernstein property", bernstein_property()));
            results.push(("oracle equivalence", oracle_equivalence()));
            results.push(("square integrability", square_integrability(&rungs)));
        }
        Err(e) => {
            let msg = e.to_string();
            results.push(("FBSDE residual convergence", Err(e)));
            results.push(("drift identity", drift_identity()));
            results.push(("Wiener statistics", Ok(Outcome { pass: false, detail: msg.clone() })));
            results.push(("Bernstein property", bernstein_property()));
            results.push(("oracle equivalence", oracle_equivalence()));
            results.push(("square integrability", Ok(Outcome { pass: false, detail: msg })));
        }
    }
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("[{}] {:>2}. {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1?}",
        results.len() - failed,
        results.len(),
        start.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
