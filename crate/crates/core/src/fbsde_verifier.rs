//! Numerical verification of the forward-backward system attached to the
//! diffusion: triple assembly `(A, B, C) = (Z, c*(Z,·), ∇c*(Z,·))`, backward
//! residuals, the pointwise drift identity, square integrability, Wiener
//! statistics, and the reciprocal property on the chain oracle.

use serde::{Deserialize, Serialize};

use crate::bernstein_sim::{Clock, Direction, Drifts, PathBuf, PathEnsemble, Simulator};
use crate::chain_oracle::{chain_conditional, PathLaw};
use crate::coefficients::{check_conservative, ProblemSpec};
use crate::error::{LabError, Result};
use crate::grid::{DriftKind, FieldKind, ScalarField, TensorField, VectorField, MAX_DIM};
use crate::stats::{chi_square_two_sample, ChiSquareTest, Histogram, Moments};

/// Which of the two mirrored constructions a triple belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Construction {
    /// Forward ensemble, `B = c*`, `g` with `∂(V - div l)`, `κ = ∇ ln ψ(A_T)`.
    Forward,
    /// Reversed-time ensemble, `B = c`, `g̃ = (y, ∇l_i) - ∂_i V`,
    /// `κ̃ = -∇ ln φ` at the end of the reversed clock. Derived identity.
    Dual,
}

impl Construction {
    pub fn of(direction: Direction) -> Self {
        match direction {
            Direction::Forward => Construction::Forward,
            Direction::Backward => Construction::Dual,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Construction::Forward => 1.0,
            Construction::Dual => -1.0,
        }
    }

    fn field_kind(self) -> DriftKind {
        match self {
            Construction::Forward => DriftKind::CStar,
            Construction::Dual => DriftKind::C,
        }
    }

    #[inline]
    fn g_into(self, spec: &ProblemSpec, x: &[f64], y: &[f64], t: f64, out: &mut [f64]) {
        match self {
            Construction::Forward => spec.g_into(x, y, t, out),
            Construction::Dual => spec.dual_g_into(x, y, t, out),
        }
    }

    #[inline]
    fn kappa_into(self, spec: &ProblemSpec, x: &[f64], out: &mut [f64]) {
        match self {
            Construction::Forward => spec.grad_ln_psi_into(x, out),
            Construction::Dual => {
                spec.grad_ln_phi_into(x, out);
                out.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
}

/// Realized `(A, B, C)` in clock order, with the increments needed by the
/// residual.
#[derive(Debug, Clone)]
pub struct TripleProcess {
    pub construction: Construction,
    pub clock: Clock,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// `[path][j][d]`
    pub a: Vec<f64>,
    /// `[path][j][d]`
    pub b: Vec<f64>,
    /// `[path][j][d*d]`, row `i` is the gradient of `B_i`.
    pub c: Vec<f64>,
    /// `ΔA - f Δt`, `[path][j][d]`.
    pub dw_raw: Vec<f64>,
    /// Gaussian increments drawn by the simulator.
    pub dw_gauss: Vec<f64>,
    pub reflection_steps: usize,
}

impl TripleProcess {
    pub fn steps(&self) -> usize {
        self.clock.steps()
    }

    fn slices(&self, p: usize) -> PathSlices<'_> {
        let (n, d) = (self.steps(), self.dim);
        let sv = (n + 1) * d;
        let sm = (n + 1) * d * d;
        let si = n * d;
        PathSlices {
            a: &self.a[p * sv..(p + 1) * sv],
            b: &self.b[p * sv..(p + 1) * sv],
            c: &self.c[p * sm..(p + 1) * sm],
            raw: &self.dw_raw[p * si..(p + 1) * si],
            gauss: &self.dw_gauss[p * si..(p + 1) * si],
        }
    }

    /// `η = A_0` of every path.
    pub fn eta(&self) -> Vec<f64> {
        let (n, d) = (self.steps(), self.dim);
        (0..self.n_paths)
            .flat_map(|p| self.a[p * (n + 1) * d..p * (n + 1) * d + d].to_vec())
            .collect()
    }
}

struct PathSlices<'a> {
    a: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    raw: &'a [f64],
    gauss: &'a [f64],
}

/// Field evaluations along a path, shared by the materialized and
/// streaming paths.
struct Evaluator<'a> {
    spec: &'a ProblemSpec,
    field: &'a VectorField,
    grad: &'a TensorField,
    clock: &'a Clock,
    construction: Construction,
    autonomous_l: bool,
}

impl<'a> Evaluator<'a> {
    fn new(
        spec: &'a ProblemSpec,
        field: &'a VectorField,
        grad: &'a TensorField,
        clock: &'a Clock,
    ) -> Result<Self> {
        let construction = Construction::of(clock.direction);
        if field.kind != construction.field_kind() || grad.kind != construction.field_kind() {
            return Err(LabError::Mismatch(format!(
                "{:?} construction needs the {:?} field, got {:?}",
                construction,
                construction.field_kind(),
                field.kind
            )));
        }
        if field.grid != grad.grid || field.dim() != spec.dim() {
            return Err(LabError::Mismatch("field, gradient and spec disagree".into()));
        }
        Ok(Self {
            spec,
            field,
            grad,
            clock,
            construction,
            autonomous_l: !spec.drift.depends_on(crate::expr::Var::T),
        })
    }

    /// Fills `b`, `c` and `raw` from the states `a`.
    fn evaluate(&self, a: &[f64], b: &mut [f64], c: &mut [f64], raw: &mut [f64]) {
        let d = self.spec.dim();
        let n = self.clock.steps();
        let sign = self.construction.sign();
        let mut f = [0.0; MAX_DIM];
        for j in 0..=n {
            let x = &a[j * d..(j + 1) * d];
            let level = self.clock.levels[j];
            self.field.interp_into(level, x, &mut b[j * d..(j + 1) * d]);
            self.grad.interp_into(level, x, &mut c[j * d * d..(j + 1) * d * d]);
            if j < n {
                let t = if self.autonomous_l { 0.0 } else { self.clock.original(j) };
                self.spec.l_into(x, t, &mut f[..d]);
                let dt = self.clock.step(j);
                for i in 0..d {
                    let fi = sign * (f[i] + b[j * d + i]);
                    raw[j * d + i] = (a[(j + 1) * d + i] - x[i]) - fi * dt;
                }
            }
        }
    }
}

pub fn assemble_triple(
    ensemble: &PathEnsemble,
    spec: &ProblemSpec,
    field: &VectorField,
    grad: &TensorField,
) -> Result<TripleProcess> {
    let clock = &ensemble.clock;
    let eval = Evaluator::new(spec, field, grad, clock)?;
    let (n, d) = (clock.steps(), ensemble.dim);
    let np = ensemble.n_paths;
    let mut t = TripleProcess {
        construction: eval.construction,
        clock: clock.clone(),
        dim: d,
        n_paths: np,
        seed: ensemble.seed,
        a: Vec::with_capacity(np * (n + 1) * d),
        b: vec![0.0; np * (n + 1) * d],
        c: vec![0.0; np * (n + 1) * d * d],
        dw_raw: vec![0.0; np * n * d],
        dw_gauss: Vec::with_capacity(np * n * d),
        reflection_steps: ensemble.reflection_steps(),
    };
    for p in 0..np {
        let buf = ensemble.path_buf(p);
        t.a.extend_from_slice(&buf.states);
        t.dw_gauss.extend_from_slice(&buf.dw);
        let sv = (n + 1) * d;
        eval.evaluate(
            &buf.states,
            &mut t.b[p * sv..(p + 1) * sv],
            &mut t.c[p * sv * d..(p + 1) * sv * d],
            &mut t.dw_raw[p * n * d..(p + 1) * n * d],
        );
    }
    Ok(t)
}

/// `κ[p] = ∇ ln ψ(A_T)` (forward) or `-∇ ln φ(A_0)` (dual), with the
/// second-moment estimate.
pub fn terminal_kappa(triple: &TripleProcess, spec: &ProblemSpec) -> Result<(Vec<f64>, f64)> {
    let (n, d) = (triple.steps(), triple.dim);
    let mut out = vec![0.0; triple.n_paths * d];
    for p in 0..triple.n_paths {
        let x = &triple.a[(p * (n + 1) + n) * d..(p * (n + 1) + n + 1) * d];
        triple.construction.kappa_into(spec, x, &mut out[p * d..(p + 1) * d]);
    }
    let second = out.iter().map(|v| v * v).sum::<f64>() / triple.n_paths as f64;
    if !second.is_finite() {
        return Err(LabError::Verification("E|κ|² is not finite".into()));
    }
    Ok((out, second))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResidual {
    pub t: f64,
    pub mean: Vec<f64>,
    /// Standard error of each mean component.
    pub sem: Vec<f64>,
    pub mean_square: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub construction: Construction,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub levels: Vec<LevelResidual>,
    /// Mean of `|R|²` over paths and clock levels.
    pub mse: f64,
    pub mse_sem: f64,
    /// The same with the stochastic sum taken against the Gaussian draws.
    pub mse_gaussian: f64,
    /// RMS of `|B_T - κ|`.
    pub terminal_rms: f64,
    /// Fraction of steps on which a reflection occurred.
    pub reflection_fraction: f64,
    /// Levels whose mean lies outside the 4σ band around 0.
    pub levels_outside_band: usize,
}

#[derive(Debug, Clone)]
struct ResidualAcc {
    d: usize,
    n: usize,
    paths: u64,
    sum: Vec<f64>,
    sum_sq_comp: Vec<f64>,
    sum_sq: Vec<f64>,
    max: Vec<f64>,
    path_mse: Moments,
    gauss_total: f64,
    terminal_sq: f64,
    reflections: u64,
}

impl ResidualAcc {
    fn new(n: usize, d: usize) -> Self {
        Self {
            d,
            n,
            paths: 0,
            sum: vec![0.0; (n + 1) * d],
            sum_sq_comp: vec![0.0; (n + 1) * d],
            sum_sq: vec![0.0; n + 1],
            max: vec![0.0; n + 1],
            path_mse: Moments::default(),
            gauss_total: 0.0,
            terminal_sq: 0.0,
            reflections: 0,
        }
    }

    fn merge(&mut self, o: ResidualAcc) {
        self.paths += o.paths;
        for (a, b) in self.sum.iter_mut().zip(&o.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq_comp.iter_mut().zip(&o.sum_sq_comp) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&o.sum_sq) {
            *a += b;
        }
        for (a, b) in self.max.iter_mut().zip(&o.max) {
            *a = a.max(*b);
        }
        self.path_mse.merge(&o.path_mse);
        self.gauss_total += o.gauss_total;
        self.terminal_sq += o.terminal_sq;
        self.reflections += o.reflections;
    }

    fn add_path(&mut self, spec: &ProblemSpec, clock: &Clock, construction: Construction, s: &PathSlices) {
        let (n, d) = (self.n, self.d);
        let mut kappa = [0.0; MAX_DIM];
        construction.kappa_into(spec, &s.a[n * d..(n + 1) * d], &mut kappa[..d]);
        let mut tail = [0.0; MAX_DIM];
        let mut tail_g = [0.0; MAX_DIM];
        let mut g = [0.0; MAX_DIM];
        let mut path_sq = 0.0;
        let mut gauss_sq = 0.0;
        let mut record = |k: usize, tail: &[f64], tail_g: &[f64], acc: &mut Self| {
            let mut sq = 0.0;
            let mut sq_g = 0.0;
            for i in 0..d {
                let base = s.b[k * d + i] - kappa[i];
                let r = base + tail[i];
                let rg = base + tail_g[i];
                acc.sum[k * d + i] += r;
                acc.sum_sq_comp[k * d + i] += r * r;
                sq += r * r;
                sq_g += rg * rg;
            }
            acc.sum_sq[k] += sq;
            acc.max[k] = acc.max[k].max(sq.sqrt());
            path_sq += sq;
            gauss_sq += sq_g;
            sq
        };
        let terminal = record(n, &tail[..d], &tail_g[..d], self);
        self.terminal_sq += terminal;
        for k in (0..n).rev() {
            let dt = clock.step(k);
            let x = &s.a[k * d..(k + 1) * d];
            let y = &s.b[k * d..(k + 1) * d];
            construction.g_into(spec, x, y, clock.original(k), &mut g[..d]);
            let raw = &s.raw[k * d..(k + 1) * d];
            let gauss = &s.gauss[k * d..(k + 1) * d];
            if raw.iter().zip(gauss).any(|(r, w)| (r - w).abs() > 1e-9) {
                self.reflections += 1;
            }
            for i in 0..d {
                let row = &s.c[(k * d + i) * d..(k * d + i + 1) * d];
                let mut st = 0.0;
                let mut sg = 0.0;
                for j in 0..d {
                    st += row[j] * raw[j];
                    sg += row[j] * gauss[j];
                }
                tail[i] += g[i] * dt + st;
                tail_g[i] += g[i] * dt + sg;
            }
            record(k, &tail[..d], &tail_g[..d], self);
        }
        self.paths += 1;
        self.path_mse.add(path_sq / (n + 1) as f64);
        self.gauss_total += gauss_sq / (n + 1) as f64;
    }

    fn report(&self, clock: &Clock, construction: Construction, seed: u64) -> ResidualReport {
        let (n, d) = (self.n, self.d);
        let np = self.paths as f64;
        let mut outside = 0;
        let levels = (0..=n)
            .map(|k| {
                let mean: Vec<f64> = (0..d).map(|i| self.sum[k * d + i] / np).collect();
                let sem: Vec<f64> = (0..d)
                    .map(|i| {
                        let m = mean[i];
                        let var = (self.sum_sq_comp[k * d + i] / np - m * m).max(0.0) * np / (np - 1.0).max(1.0);
                        (var / np).sqrt()
                    })
                    .collect();
                if mean.iter().zip(&sem).any(|(m, s)| m.abs() > 4.0 * s && m.abs() > 1e-14) {
                    outside += 1;
                }
                LevelResidual {
                    t: clock.original(k),
                    mean,
                    sem,
                    mean_square: self.sum_sq[k] / np,
                    max_abs: self.max[k],
                }
            })
            .collect();
        ResidualReport {
            construction,
            n_paths: self.paths as usize,
            dt: clock.step(0),
            seed,
            levels,
            mse: self.path_mse.mean(),
            mse_sem: if self.paths > 1 { self.path_mse.sem() } else { 0.0 },
            mse_gaussian: self.gauss_total / np,
            terminal_rms: (self.terminal_sq / np).sqrt(),
            reflection_fraction: self.reflections as f64 / (np * n as f64),
            levels_outside_band: outside,
        }
    }
}

/// `R_i(t_k) = B_i(t_k) - κ_i + Σ_{j≥k} g_i Δt + Σ_{j≥k} (C_i(t_j), ΔW_j)`
/// with left-endpoint sums and `ΔW = ΔA - f Δt`.
pub fn backward_residual(triple: &TripleProcess, spec: &ProblemSpec) -> Result<ResidualReport> {
    if triple.dw_raw.len() != triple.n_paths * triple.steps() * triple.dim {
        return Err(LabError::Verification("triple carries no increments".into()));
    }
    let mut acc = ResidualAcc::new(triple.steps(), triple.dim);
    for p in 0..triple.n_paths {
        acc.add_path(spec, &triple.clock, triple.construction, &triple.slices(p));
    }
    let r = acc.report(&triple.clock, triple.construction, triple.seed);
    check_finite_report(&r)?;
    Ok(r)
}

fn check_finite_report(r: &ResidualReport) -> Result<()> {
    if !r.mse.is_finite() || !r.terminal_rms.is_finite() {
        return Err(LabError::Verification("residual statistics are not finite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareIntegrability {
    /// Estimate of `E ∫ (|A|² + |B|² + |C|²) dt`.
    pub estimate: f64,
    pub sem: f64,
}

impl SquareIntegrability {
    /// Agreement with another estimate within `k` combined standard errors.
    pub fn agrees_with(&self, other: &SquareIntegrability, k: f64) -> bool {
        (self.estimate - other.estimate).abs() <= k * (self.sem.powi(2) + other.sem.powi(2)).sqrt()
    }
}

fn square_integral_path(clock: &Clock, d: usize, a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..clock.steps() {
        let sq: f64 = a[j * d..(j + 1) * d].iter().map(|v| v * v).sum::<f64>()
            + b[j * d..(j + 1) * d].iter().map(|v| v * v).sum::<f64>()
            + c[j * d * d..(j + 1) * d * d].iter().map(|v| v * v).sum::<f64>();
        s += sq * clock.step(j);
    }
    s
}

pub fn square_integrability(triple: &TripleProcess) -> Result<SquareIntegrability> {
    let mut m = Moments::default();
    for p in 0..triple.n_paths {
        let s = triple.slices(p);
        m.add(square_integral_path(&triple.clock, triple.dim, s.a, s.b, s.c));
    }
    let r = SquareIntegrability {
        estimate: m.mean(),
        sem: m.sem(),
    };
    if !r.estimate.is_finite() {
        return Err(LabError::Verification("square-integrability estimate is not finite".into()));
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Wiener statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatCheck {
    pub name: String,
    /// Pooled z-score over all steps.
    pub pooled_z: f64,
    /// Steps whose own z-score exceeds 4.
    pub exceedances: usize,
    pub allowed_exceedances: usize,
    pub worst_step_z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WienerReport {
    pub n_paths: usize,
    pub steps: usize,
    pub checks: Vec<StatCheck>,
}

impl WienerReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&StatCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Per-step sums of normalized increments `x = ΔW / √Δt`.
#[derive(Debug, Clone)]
pub struct WienerAcc {
    d: usize,
    n: usize,
    paths: u64,
    /// Σ x, Σ (x² - 1), Σ (x⁴ - 3) per step and axis.
    mean: Vec<f64>,
    var: Vec<f64>,
    kurt: Vec<f64>,
    /// Σ x_j x_{j+1} per step and axis.
    lag: Vec<f64>,
    /// Σ x_1 x_2 per step.
    cross: Vec<f64>,
}

/// `P(|N(0,1)| > 4)`.
const TAIL4: f64 = 6.334e-5;

impl WienerAcc {
    pub fn new(steps: usize, d: usize) -> Self {
        Self {
            d,
            n: steps,
            paths: 0,
            mean: vec![0.0; steps * d],
            var: vec![0.0; steps * d],
            kurt: vec![0.0; steps * d],
            lag: vec![0.0; steps.saturating_sub(1) * d],
            cross: vec![0.0; steps],
        }
    }

    /// Adds one path of raw increments `[j][d]` with step sizes `dts`.
    pub fn add_path(&mut self, dw: &[f64], dts: &[f64]) {
        let d = self.d;
        let mut prev = [0.0; MAX_DIM];
        for j in 0..self.n {
            let s = dts[j].sqrt();
            let mut x = [0.0; MAX_DIM];
            for a in 0..d {
                let v = dw[j * d + a] / s;
                x[a] = v;
                let v2 = v * v;
                self.mean[j * d + a] += v;
                self.var[j * d + a] += v2 - 1.0;
                self.kurt[j * d + a] += v2 * v2 - 3.0;
                if j > 0 {
                    self.lag[(j - 1) * d + a] += prev[a] * v;
                }
            }
            if d == 2 {
                self.cross[j] += x[0] * x[1];
            }
            prev = x;
        }
        self.paths += 1;
    }

    pub fn merge(&mut self, o: WienerAcc) {
        self.paths += o.paths;
        for (a, b) in [
            (&mut self.mean, &o.mean),
            (&mut self.var, &o.var),
            (&mut self.kurt, &o.kurt),
            (&mut self.lag, &o.lag),
            (&mut self.cross, &o.cross),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn check(&self, name: &str, sums: &[f64], sd: f64) -> StatCheck {
        let np = self.paths as f64;
        let per_step_sd = sd * np.sqrt();
        let mut exceed = 0;
        let mut worst: f64 = 0.0;
        for s in sums {
            let z = s / per_step_sd;
            worst = worst.max(z.abs());
            if z.abs() > 4.0 {
                exceed += 1;
            }
        }
        let m = sums.len() as f64;
        let pooled = sums.iter().sum::<f64>() / (per_step_sd * m.sqrt());
        let expect = m * TAIL4;
        let allowed = ((expect + 4.0 * (expect * (1.0 - TAIL4)).sqrt()).floor() as usize).max(1);
        StatCheck {
            name: name.to_string(),
            pooled_z: pooled,
            exceedances: exceed,
            allowed_exceedances: allowed,
            worst_step_z: worst,
            pass: pooled.abs() <= 4.0 && exceed <= allowed,
        }
    }

    pub fn report(&self) -> WienerReport {
        let mut checks = vec![
            self.check("mean", &self.mean, 1.0),
            self.check("variance", &self.var, 2.0f64.sqrt()),
            self.check("kurtosis", &self.kurt, 96.0f64.sqrt()),
        ];
        if self.n > 1 {
            checks.push(self.check("lag1_autocorrelation", &self.lag, 1.0));
        }
        if self.d == 2 {
            checks.push(self.check("cross_covariance", &self.cross, 1.0));
        }
        WienerReport {
            n_paths: self.paths as usize,
            steps: self.n,
            checks,
        }
    }
}

/// Statistical suite on increments laid out `[path][j][d]`.
pub fn wiener_statistics(increments: &[f64], dim: usize, dts: &[f64]) -> Result<WienerReport> {
    let steps = dts.len();
    if steps == 0 || increments.len() % (steps * dim) != 0 {
        return Err(LabError::Mismatch("increment array does not match the step count".into()));
    }
    let mut acc = WienerAcc::new(steps, dim);
    for path in increments.chunks(steps * dim) {
        acc.add_path(path, dts);
    }
    Ok(acc.report())
}

pub fn clock_steps(clock: &Clock) -> Vec<f64> {
    (0..clock.steps()).map(|j| clock.step(j)).collect()
}

// ---------------------------------------------------------------------------
// Streaming verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StreamOptions {
    /// Original times at which marginal histograms of the first coordinate are kept.
    pub histogram_times: Vec<f64>,
    pub bins: usize,
    pub residual: bool,
    pub wiener: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            histogram_times: Vec::new(),
            bins: 32,
            residual: true,
            wiener: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamReport {
    pub residual: Option<ResidualReport>,
    pub square: SquareIntegrability,
    pub wiener: Option<WienerReport>,
    /// `(original time, histogram)`
    pub histograms: Vec<(f64, Histogram)>,
    /// `max |reconstructed - stored|` over all increments.
    pub reconstruction_mismatch: f64,
}

struct StreamAcc {
    residual: ResidualAcc,
    square: Moments,
    wiener: WienerAcc,
    hists: Vec<Histogram>,
    mismatch: f64,
}

/// One simulation pass computing residuals, square integrability, Wiener
/// statistics on the reconstructed increments and marginal histograms,
/// without materializing the ensemble.
pub fn stream_verification(sim: &Simulator, grad: &TensorField, n_paths: usize, opts: &StreamOptions) -> Result<StreamReport> {
    let clock = &sim.clock;
    let eval = Evaluator::new(sim.spec, sim.field, grad, clock)?;
    let (n, d) = (clock.steps(), sim.dim());
    let dts = clock_steps(clock);
    let hist_idx: Vec<usize> = opts.histogram_times.iter().map(|&t| clock.index_of_original(t)).collect();
    let dom = &sim.spec.domain;
    let init = || StreamAcc {
        residual: ResidualAcc::new(n, d),
        square: Moments::default(),
        wiener: WienerAcc::new(if opts.wiener { n } else { 0 }, d),
        hists: hist_idx.iter().map(|_| Histogram::new(dom.lower[0], dom.upper[0], opts.bins)).collect(),
        mismatch: 0.0,
    };
    let acc = sim.fold_paths(
        n_paths,
        init,
        |acc, _, buf: &PathBuf| {
            let mut b = vec![0.0; (n + 1) * d];
            let mut c = vec![0.0; (n + 1) * d * d];
            let mut raw = vec![0.0; n * d];
            eval.evaluate(&buf.states, &mut b, &mut c, &mut raw);
            let mut worst: f64 = 0.0;
            let mut folded = vec![0.0; n * d];
            for i in 0..n * d {
                folded[i] = raw[i] - buf.reflection[i];
                worst = worst.max((folded[i] - buf.dw[i]).abs());
            }
            acc.mismatch = acc.mismatch.max(worst);
            let slices = PathSlices {
                a: &buf.states,
                b: &b,
                c: &c,
                raw: &raw,
                gauss: &buf.dw,
            };
            if opts.residual {
                acc.residual.add_path(sim.spec, clock, eval.construction, &slices);
            }
            acc.square.add(square_integral_path(clock, d, &buf.states, &b, &c));
            if opts.wiener {
                acc.wiener.add_path(&folded, &dts);
            }
            for (h, &k) in acc.hists.iter_mut().zip(&hist_idx) {
                h.add(buf.state(k)[0]);
            }
            Ok(())
        },
        |a, b| {
            a.residual.merge(b.residual);
            a.square.merge(&b.square);
            a.wiener.merge(b.wiener);
            for (x, y) in a.hists.iter_mut().zip(&b.hists) {
                x.merge(y);
            }
            a.mismatch = a.mismatch.max(b.mismatch);
        },
    )?;
    let residual = if opts.residual {
        let r = acc.residual.report(clock, eval.construction, sim.seed);
        check_finite_report(&r)?;
        Some(r)
    } else {
        None
    };
    let square = SquareIntegrability {
        estimate: acc.square.mean(),
        sem: acc.square.sem(),
    };
    if !square.estimate.is_finite() {
        return Err(LabError::Verification("square-integrability estimate is not finite".into()));
    }
    Ok(StreamReport {
        residual,
        square,
        wiener: if opts.wiener { Some(acc.wiener.report()) } else { None },
        histograms: opts.histogram_times.iter().copied().zip(acc.hists).collect(),
        reconstruction_mismatch: acc.mismatch,
    })
}

// ---------------------------------------------------------------------------
// Pointwise drift identity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DefectReport {
    pub construction: Construction,
    /// `max_i |identity_i|` at checked nodes; zero elsewhere.
    pub field: ScalarField,
    pub max: f64,
    /// Where the maximum is attained: `(coords, t)`.
    pub argmax: (Vec<f64>, f64),
}

/// Evaluates, on nodes at least two cells from the boundary and on interior
/// time levels,
/// `∂_t c*_i + ½Δc*_i + (b*·∇)c*_i - ∂_i(V - div l) + (c*, ∇l_i)` (forward) or
/// `∂_t c_i - ½Δc_i + (b·∇)c_i + (c, ∇l_i) - ∂_i V` (dual), by finite
/// differences of the computed fields.
pub fn drift_pde_defect(spec: &ProblemSpec, drifts: &Drifts, construction: Construction) -> Result<DefectReport> {
    for t in [0.0, 0.5 * spec.horizon, spec.horizon] {
        let c = check_conservative(spec, t);
        if !c.is_conservative {
            return Err(LabError::Verification(format!(
                "l is not conservative (curl defect {:e} at t={t}): the drift identity does not apply",
                c.max_curl_defect
            )));
        }
    }
    let (field, grad, total) = match construction {
        Construction::Forward => (&drifts.c_star, &drifts.grad_c_star, &drifts.b_star),
        Construction::Dual => (&drifts.c, &drifts.grad_c, &drifts.b),
    };
    let grid = field.grid.clone();
    let d = grid.dim();
    let times = grid.times();
    let mut out = ScalarField::zeros(grid.clone(), FieldKind::Defect);
    let mut best = (0.0f64, 0usize, 0usize);
    let mut src = [0.0; MAX_DIM];
    let mut jac = [0.0; MAX_DIM * MAX_DIM];
    let lap_sign = match construction {
        Construction::Forward => 0.5,
        Construction::Dual => -0.5,
    };
    for level in 1..grid.levels() - 1 {
        let t = times[level];
        let dt2 = times[level + 1] - times[level - 1];
        for node in 0..grid.node_count() {
            if !grid.is_interior(node, 2) {
                continue;
            }
            let p = grid.coord(node);
            let x = &p[..d];
            match construction {
                Construction::Forward => spec.grad_source_into(x, t, &mut src[..d]),
                Construction::Dual => spec.grad_v_into(x, t, &mut src[..d]),
            }
            spec.jac_l_into(x, t, &mut jac[..d * d]);
            let c_here = field.get(level, node);
            let b_here = total.get(level, node);
            let g_here = grad.get(level, node);
            let mut worst: f64 = 0.0;
            for i in 0..d {
                let dt_c = (field.get(level + 1, node)[i] - field.get(level - 1, node)[i]) / dt2;
                let mut lap = 0.0;
                for a in 0..d {
                    let h = grid.axis(a).spacing();
                    let s = grid.stride(a);
                    lap += (field.get(level, node + s)[i] - 2.0 * c_here[i] + field.get(level, node - s)[i]) / (h * h);
                }
                let adv: f64 = (0..d).map(|j| b_here[j] * g_here[i * d + j]).sum();
                let coupling: f64 = (0..d).map(|j| c_here[j] * jac[i * d + j]).sum();
                let r = dt_c + lap_sign * lap + adv - src[i] + coupling;
                worst = worst.max(r.abs());
            }
            out.level_mut(level)[node] = worst;
            if worst > best.0 {
                best = (worst, level, node);
            }
        }
    }
    let p = grid.coord(best.2);
    Ok(DefectReport {
        construction,
        max: best.0,
        argmax: (p[..d].to_vec(), times[best.1]),
        field: out,
    })
}

// ---------------------------------------------------------------------------
// Reciprocal property and uniqueness in law
// ---------------------------------------------------------------------------

/// `max |E(h(Z_r) | past up to s, future from t) - E(h(Z_r) | Z_s, Z_t)|`.
pub fn bernstein_property_check(law: &PathLaw, r: usize, s: usize, t: usize, h: impl Fn(usize) -> f64) -> Result<f64> {
    Ok(chain_conditional(law, s, r, t, h)?.defect)
}

/// Largest defect over every admissible `(s, r, t)`.
pub fn bernstein_sweep(law: &PathLaw, h: impl Fn(usize) -> f64 + Copy) -> Result<f64> {
    let n = law.steps;
    let mut worst: f64 = 0.0;
    for s in 0..n {
        for r in s + 1..n {
            for t in r + 1..=n {
                worst = worst.max(chain_conditional(law, s, r, t, h)?.defect);
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub t: f64,
    pub state_test: ChiSquareTest,
    pub drift_test: ChiSquareTest,
}

impl UniquenessReport {
    pub fn pass(&self) -> bool {
        self.state_test.pass && self.drift_test.pass
    }
}

/// Compares the `(A_t, B_t)` marginals of two forward runs (different seeds
/// and step sizes) by two-sample χ² tests on the first coordinate.
pub fn uniqueness_in_law(
    first: &Simulator,
    second: &Simulator,
    n_paths: usize,
    t: f64,
    bins: usize,
) -> Result<UniquenessReport> {
    let collect = |sim: &Simulator| -> Result<(Vec<f64>, Vec<f64>)> {
        let k = sim.clock.index_of_original(t);
        let d = sim.dim();
        sim.fold_paths(
            n_paths,
            || (Vec::new(), Vec::new()),
            |acc, _, buf| {
                let x = buf.state(k);
                let mut b = [0.0; MAX_DIM];
                sim.field_into(k, x, &mut b[..d]);
                acc.0.push(x[0]);
                acc.1.push(b[0]);
                Ok(())
            },
            |a, mut b| {
                a.0.append(&mut b.0);
                a.1.append(&mut b.1);
            },
        )
    };
    let (a1, b1) = collect(first)?;
    let (a2, b2) = collect(second)?;
    let dom = &first.spec.domain;
    let hist = |xs: &[f64], lo: f64, hi: f64| {
        let mut h = Histogram::new(lo, hi, bins);
        xs.iter().for_each(|x| h.add(*x));
        h
    };
    let state_test = chi_square_two_sample(
        &hist(&a1, dom.lower[0], dom.upper[0]),
        &hist(&a2, dom.lower[0], dom.upper[0]),
        0.01,
    )?;
    let (lo, hi) = b1
        .iter()
        .chain(&b2)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let drift_test = chi_square_two_sample(&hist(&b1, lo, hi), &hist(&b2, lo, hi), 0.01)?;
    Ok(UniquenessReport {
        t,
        state_test,
        drift_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bernstein_sim::{build_drifts, simulate_backward, simulate_forward};
    use crate::pde_engine::{solve_normalized, SolvedProblem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn solved(l: &str, v: &str, phi: &str, psi: &str, nodes: usize, steps: usize) -> SolvedProblem {
        let s = ProblemSpec::builder()
            .drift(l)
            .potential(v)
            .initial(phi)
            .terminal(psi)
            .nodes(nodes)
            .steps(steps)
            .build()
            .unwrap();
        solve_normalized(&s, false).unwrap()
    }

    #[test]
    fn trivial_configuration_vanishes_identically() {
        let sol = solved("0", "0", "1", "1", 32, 100);
        let dr = build_drifts(&sol.u, &sol.v, &sol.spec).unwrap();
        let ens = simulate_forward(&sol, &dr, 500, 1e-2, 1).unwrap();
        let tri = assemble_triple(&ens, &sol.spec, &dr.c_star, &dr.grad_c_star).unwrap();
        assert!(tri.b.iter().all(|v| *v == 0.0) && tri.c.iter().all(|v| *v == 0.0));
        let (kappa, m2) = terminal_kappa(&tri, &sol.spec).unwrap();
        assert!(kappa.iter().all(|v| *v == 0.0) && m2 == 0.0);
        let r = backward_residual(&tri, &sol.spec).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!(r.levels.iter().all(|l| l.max_abs == 0.0));
        let def = drift_pde_defect(&sol.spec, &dr, Construction::Forward).unwrap();
        assert_eq!(def.max, 0.0);
        let def = drift_pde_defect(&sol.spec, &dr, Construction::Dual).unwrap();
        assert_eq!(def.max, 0.0);
    }

    #[test]
    fn recomputing_b_reproduces_stored_values() {
        let sol = solved("0.5*sin(pi*x)", "x^2", "2 + cos(pi*x)", "1.5 + cos(pi*x)", 32, 64);
        let dr = build_drifts(&sol.u, &sol.v, &sol.spec).unwrap();
        let ens = simulate_forward(&sol, &dr, 50, 1e-2, 4).unwrap();
        let t1 = assemble_triple(&ens, &sol.spec, &dr.c_star, &dr.grad_c_star).unwrap();
        let t2 = assemble_triple(&ens, &sol.spec, &dr.c_star, &dr.grad_c_star).unwrap();
        assert_eq!(t1.b, t2.b);
        assert_eq!(t1.eta(), ens.coordinate_at(0, 0));
        assert!(assemble_triple(&ens, &sol.spec, &dr.c, &dr.grad_c).is_err());
    }

    #[test]
    fn kappa_direct_formula() {
        let s = ProblemSpec::builder().terminal("1 + cos(pi*x)").nodes(16).steps(16).build().unwrap();
        let mut k = [0.0];
        s.grad_ln_psi_into(&[0.5], &mut k);
        assert!((k[0] + std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn residual_of_benchmark_is_small_and_terminal_consistent() {
        let sol = solved("0", "0", "1", "2 + cos(pi*x)", 64, 250);
        let dr = build_drifts(&sol.u, &sol.v, &sol.spec).unwrap();
        let ens = simulate_forward(&sol, &dr, 2000, 4e-3, 8).unwrap();
        let tri = assemble_triple(&ens, &sol.spec, &dr.c_star, &dr.grad_c_star).unwrap();
        let r = backward_residual(&tri, &sol.spec).unwrap();
        let h = 1.0 / 63.0;
        assert!(r.terminal_rms <= 10.0 * h * h, "{}", r.terminal_rms);
        assert!(r.mse < 0.05, "{}", r.mse);
        // streaming path gives the same numbers
        let sim = Simulator::forward(&sol, &dr, 4e-3, 8).unwrap();
        let st = stream_verification(&sim, &dr.grad_c_star, 2000, &StreamOptions::default()).unwrap();
        let sr = st.residual.unwrap();
        assert!((sr.mse - r.mse).abs() <= 1e-12 * r.mse);
        assert!(st.reconstruction_mismatch < 1e-12);
        let sq = square_integrability(&tri).unwrap();
        assert!((sq.estimate - st.square.estimate).abs() <= 1e-12 * sq.estimate);
    }

    #[test]
    fn dual_construction_runs_on_backward_ensemble() {
        let sol = solved("0.5*sin(pi*x)", "x^2", "2 + cos(pi*x)", "1.5 + cos(pi*x)", 64, 250);
        let dr = build_drifts(&sol.u, &sol.v, &sol.spec).unwrap();
        let ens = simulate_backward(&sol, &dr, 2000, 4e-3, 8).unwrap();
        let tri = assemble_triple(&ens, &sol.spec, &dr.c, &dr.grad_c).unwrap();
        assert_eq!(tri.construction, Construction::Dual);
        let r = backward_residual(&tri, &sol.spec).unwrap();
        assert!(r.terminal_rms < 1e-2, "{}", r.terminal_rms);
        assert!(r.mse < 0.05, "{}", r.mse);
        assert!(square_integrability(&tri).unwrap().estimate.is_finite());
    }

    #[test]
    fn drift_identity_errors_for_rotational_fields() {
        let s = ProblemSpec::builder()
            .domain(&[0.0, 0.0], &[1.0, 1.0])
            .drift("[-0.2*x2, 0.2*x1]")
            .initial("2 + cos(pi*x1)")
            .terminal("2 + cos(pi*x2)")
            .nodes(10)
            .steps(20)
            .build()
            .unwrap();
        let sol = solve_normalized(&s, false).unwrap();
        let dr = build_drifts(&sol.u, &sol.v, &sol.spec).unwrap();
        assert!(matches!(
            drift_pde_defect(&sol.spec, &dr, Construction::Forward),
            Err(LabError::Verification(_))
        ));
    }

    fn gaussian(n: usize, steps: usize, dt: f64, seed: u64, drift: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * steps)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * dt.sqrt() + drift * dt
            })
            .collect()
    }

    #[test]
    fn wiener_suite_and_negative_controls() {
        let (n, steps, dt) = (20_000, 50, 1e-3);
        let dts = vec![dt; steps];
        let clean = gaussian(n, steps, dt, 1, 0.0);
        let r = wiener_statistics(&clean, 1, &dts).unwrap();
        assert!(r.pass(), "{r:?}");
        let dirty = gaussian(n, steps, dt, 1, 0.5);
        let r = wiener_statistics(&dirty, 1, &dts).unwrap();
        assert!(!r.check("mean").unwrap().pass);
        // shuffling steps within each path keeps the marginal stats
        let mut shuffled = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for path in shuffled.chunks_mut(steps) {
            for i in (1..steps).rev() {
                let j = rng.random_range(0..=i);
                path.swap(i, j);
            }
        }
        assert!(wiener_statistics(&shuffled, 1, &dts).unwrap().pass());
        // a lag-correlated stream fails the autocorrelation test
        let mut corr = clean.clone();
        for path in corr.chunks_mut(steps) {
            for j in (1..steps).rev() {
                path[j] = 0.8 * path[j] + 0.6 * path[j - 1];
            }
        }
        assert!(!wiener_statistics(&corr, 1, &dts).unwrap().check("lag1_autocorrelation").unwrap().pass);
    }

    #[test]
    fn two_dimensional_wiener_suite() {
        let (n, steps, dt) = (10_000, 20, 1e-2);
        let inc = gaussian(n, steps * 2, dt, 5, 0.0);
        let r = wiener_statistics(&inc, 2, &vec![dt; steps]).unwrap();
        assert!(r.check("cross_covariance").is_some());
        assert!(r.pass(), "{r:?}");
    }

    #[test]
    fn uniform_square_integrability_is_a_third() {
        let sol = solved("0", "0", "1", "1", 32, 100);
        let dr = build_drifts(&sol.u, &sol.v, &sol.spec).unwrap();
        let sim = Simulator::forward(&sol, &dr, 1e-2, 6).unwrap();
        let opts = StreamOptions {
            residual: false,
            wiener: false,
            ..Default::default()
        };
        let st = stream_verification(&sim, &dr.grad_c_star, 20_000, &opts).unwrap();
        assert!((st.square.estimate - 1.0 / 3.0).abs() < 4.0 * st.square.sem);
    }

    #[test]
    fn chain_reciprocal_sweep() {
        use crate::chain_oracle::{bernstein_law, build_chain};
        let s = ProblemSpec::builder().drift("0.5*sin(pi*x)").potential("x").nodes(8).steps(12).build().unwrap();
        let c = build_chain(&s, 3).unwrap();
        let law = bernstein_law(&c, &[1.0, 2.0, 3.0], &[2.0, 1.0, 1.0], 4).unwrap();
        assert!(bernstein_sweep(&law, |z| (z as f64).sin()).unwrap() < 1e-13);
        assert!(bernstein_property_check(&law, 2, 0, 4, |_| 1.0).unwrap() < 1e-15);
    }
}
