//! Problem data `l, V, φ, ψ`, hypothesis checks, and the FBSDE coefficient
//! fields `f(x,y,t) = l(x,t) + y` and
//! `g_i(x,y,t) = ∂_i(V - div l)(x,t) - (y, ∇l_i(x,t))`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::expr::{Expr, Var, VectorExpr};
use crate::grid::{Axis, FieldKind, Grid, Point, ScalarField, MAX_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || lower.len() > MAX_DIM {
            return Err(LabError::InvalidSpec("box bounds must have matching dimension 1 or 2".into()));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(LabError::InvalidSpec("box must be nonempty on every axis".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|a| x[a] >= self.lower[a] && x[a] <= self.upper[a])
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| b - a).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    /// Node count per axis.
    pub nodes: Vec<usize>,
    /// Number of time steps of the parabolic solver.
    pub steps: usize,
    /// θ of the θ-scheme (½ = Crank–Nicolson).
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloParams {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

/// How derivatives of the coefficients are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeMode {
    Symbolic,
    /// Central differences with the given step.
    Numeric(f64),
}

/// Symbolic derivatives needed downstream, computed once.
#[derive(Debug, Clone)]
struct Derived {
    /// `jac_l[i][j] = ∂_j l_i`
    jac_l: Vec<Vec<Expr>>,
    /// `∂_i (V - div l)`
    grad_source: Vec<Expr>,
    grad_v: Vec<Expr>,
    grad_phi: Vec<Expr>,
    grad_psi: Vec<Expr>,
    autonomous: bool,
}

impl Derived {
    fn new(drift: &VectorExpr, potential: &Expr, initial: &Expr, terminal: &Expr) -> Self {
        let d = drift.dim();
        let jac_l = drift
            .components
            .iter()
            .map(|li| (0..d).map(|j| li.diff(Var::X(j))).collect())
            .collect();
        let source = Expr::sub(potential.clone(), drift.divergence());
        let grad = |e: &Expr| (0..d).map(|i| e.diff(Var::X(i))).collect::<Vec<_>>();
        Self {
            jac_l,
            grad_source: grad(&source),
            grad_v: grad(potential),
            grad_phi: grad(initial),
            grad_psi: grad(terminal),
            autonomous: !drift.depends_on(Var::T) && !potential.depends_on(Var::T),
        }
    }
}

/// Full experiment description. Immutable once built.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub domain: BoxDomain,
    pub horizon: f64,
    pub drift: VectorExpr,
    pub potential: Expr,
    pub initial: Expr,
    pub terminal: Expr,
    pub grid: GridParams,
    pub mc: MonteCarloParams,
    /// Hölder exponent of the smoothness hypotheses; metadata only.
    pub hoelder_alpha: Option<f64>,
    derived: Arc<Derived>,
}

pub const MIN_NODES: usize = 8;
pub const MIN_STEPS: usize = 8;

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        domain: BoxDomain,
        horizon: f64,
        drift: VectorExpr,
        potential: Expr,
        initial: Expr,
        terminal: Expr,
        grid: GridParams,
        mc: MonteCarloParams,
    ) -> Result<Self> {
        let d = domain.dim();
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(LabError::InvalidSpec(format!("horizon must be positive, got {horizon}")));
        }
        if drift.dim() != d {
            return Err(LabError::InvalidSpec(format!(
                "drift has {} components for a {d}-dimensional box",
                drift.dim()
            )));
        }
        let arity = drift
            .arity()
            .max(potential.arity())
            .max(initial.arity())
            .max(terminal.arity());
        if arity > d {
            return Err(LabError::InvalidSpec(format!(
                "coefficients reference x{arity} in a {d}-dimensional box"
            )));
        }
        if grid.nodes.len() != d || grid.nodes.iter().any(|&n| n < MIN_NODES) {
            return Err(LabError::InvalidSpec(format!(
                "need at least {MIN_NODES} nodes on each of {d} axes"
            )));
        }
        if grid.steps < MIN_STEPS {
            return Err(LabError::InvalidSpec(format!("need at least {MIN_STEPS} time steps")));
        }
        if !(grid.theta >= 0.5 && grid.theta <= 1.0) {
            return Err(LabError::InvalidSpec("theta must lie in [1/2, 1]".into()));
        }
        if mc.n_paths < 1 {
            return Err(LabError::InvalidSpec("n_paths must be at least 1".into()));
        }
        if !(mc.dt > 0.0) || mc.dt > horizon {
            return Err(LabError::InvalidSpec(format!(
                "Monte Carlo step {} must lie in (0, T]",
                mc.dt
            )));
        }
        let derived = Arc::new(Derived::new(&drift, &potential, &initial, &terminal));
        Ok(Self {
            domain,
            horizon,
            drift,
            potential,
            initial,
            terminal,
            grid,
            mc,
            hoelder_alpha: None,
            derived,
        })
    }

    pub fn builder() -> SpecBuilder {
        SpecBuilder::default()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn space_axes(&self) -> Vec<Axis> {
        (0..self.dim())
            .map(|a| Axis {
                lower: self.domain.lower[a],
                upper: self.domain.upper[a],
                nodes: self.grid.nodes[a],
            })
            .collect()
    }

    /// Space-time grid of the parabolic solver.
    pub fn pde_grid(&self) -> Arc<Grid> {
        Arc::new(
            Grid::uniform(self.space_axes(), self.horizon, self.grid.steps)
                .expect("validated spec yields a valid grid"),
        )
    }

    /// Monte Carlo time points `0, Δt, 2Δt, ..., T` with a final short step.
    pub fn mc_times(&self) -> Vec<f64> {
        mc_times(self.horizon, self.mc.dt)
    }

    /// True when neither `l` nor `V` depends on time.
    pub fn is_autonomous(&self) -> bool {
        self.derived.autonomous
    }

    /// Copy with a different spatial resolution and time step count.
    pub fn with_resolution(&self, nodes: Vec<usize>, steps: usize) -> Result<Self> {
        let mut grid = self.grid.clone();
        grid.nodes = nodes;
        grid.steps = steps;
        let mut s = Self::new(
            self.domain.clone(),
            self.horizon,
            self.drift.clone(),
            self.potential.clone(),
            self.initial.clone(),
            self.terminal.clone(),
            grid,
            self.mc.clone(),
        )?;
        s.hoelder_alpha = self.hoelder_alpha;
        Ok(s)
    }

    pub fn with_mc(&self, mc: MonteCarloParams) -> Result<Self> {
        let mut s = Self::new(
            self.domain.clone(),
            self.horizon,
            self.drift.clone(),
            self.potential.clone(),
            self.initial.clone(),
            self.terminal.clone(),
            self.grid.clone(),
            mc,
        )?;
        s.hoelder_alpha = self.hoelder_alpha;
        Ok(s)
    }

    pub fn with_potential(&self, potential: Expr) -> Result<Self> {
        let mut s = Self::new(
            self.domain.clone(),
            self.horizon,
            self.drift.clone(),
            potential,
            self.initial.clone(),
            self.terminal.clone(),
            self.grid.clone(),
            self.mc.clone(),
        )?;
        s.hoelder_alpha = self.hoelder_alpha;
        Ok(s)
    }

    /// Copy whose terminal function is `scale * ψ`.
    pub fn with_terminal_scale(&self, scale: f64) -> Result<Self> {
        let mut s = Self::new(
            self.domain.clone(),
            self.horizon,
            self.drift.clone(),
            self.potential.clone(),
            self.initial.clone(),
            Expr::mul(Expr::Const(scale), self.terminal.clone()),
            self.grid.clone(),
            self.mc.clone(),
        )?;
        s.hoelder_alpha = self.hoelder_alpha;
        Ok(s)
    }

    #[inline]
    pub fn l_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.drift.eval_into(x, t, out);
    }

    #[inline]
    pub fn v_at(&self, x: &[f64], t: f64) -> f64 {
        self.potential.eval(x, t)
    }

    #[inline]
    pub fn phi_at(&self, x: &[f64]) -> f64 {
        self.initial.eval(x, 0.0)
    }

    #[inline]
    pub fn psi_at(&self, x: &[f64]) -> f64 {
        self.terminal.eval(x, self.horizon)
    }

    /// `∇ ln ψ(x)` from the symbolic gradient.
    pub fn grad_ln_psi_into(&self, x: &[f64], out: &mut [f64]) {
        let psi = self.psi_at(x);
        for (o, g) in out.iter_mut().zip(&self.derived.grad_psi) {
            *o = g.eval(x, self.horizon) / psi;
        }
    }

    /// `∇ ln φ(x)` from the symbolic gradient.
    pub fn grad_ln_phi_into(&self, x: &[f64], out: &mut [f64]) {
        let phi = self.phi_at(x);
        for (o, g) in out.iter_mut().zip(&self.derived.grad_phi) {
            *o = g.eval(x, 0.0) / phi;
        }
    }

    /// `∂_j l_i(x,t)` as a row-major `d x d` block.
    pub fn jac_l_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = self.derived.jac_l[i][j].eval(x, t);
            }
        }
    }

    /// `∂_i (V - div l)(x,t)`.
    pub fn grad_source_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.derived.grad_source) {
            *o = g.eval(x, t);
        }
    }

    pub fn grad_v_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.derived.grad_v) {
            *o = g.eval(x, t);
        }
    }

    pub(crate) fn grad_phi_exprs(&self) -> &[Expr] {
        &self.derived.grad_phi
    }

    pub(crate) fn grad_psi_exprs(&self) -> &[Expr] {
        &self.derived.grad_psi
    }

    /// `g(x,y,t)` without the domain check.
    #[inline]
    pub fn g_into(&self, x: &[f64], y: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut acc = self.derived.grad_source[i].eval(x, t);
            for j in 0..d {
                let dl = &self.derived.jac_l[i][j];
                if !dl.is_zero() {
                    acc -= y[j] * dl.eval(x, t);
                }
            }
            out[i] = acc;
        }
    }

    /// Mirrored coefficient of the dual construction: `g̃_i(x,y,t) = (y, ∇l_i(x,t)) - ∂_i V(x,t)`.
    #[inline]
    pub fn dual_g_into(&self, x: &[f64], y: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut acc = -self.derived.grad_v[i].eval(x, t);
            for j in 0..d {
                let dl = &self.derived.jac_l[i][j];
                if !dl.is_zero() {
                    acc += y[j] * dl.eval(x, t);
                }
            }
            out[i] = acc;
        }
    }

    fn check_in_box(&self, x: &[f64]) -> Result<()> {
        if x.len() < self.dim() || !self.domain.contains(x) {
            return Err(LabError::Domain {
                point: x.to_vec(),
            });
        }
        Ok(())
    }
}

pub fn mc_times(horizon: f64, dt: f64) -> Vec<f64> {
    let full = (horizon / dt * (1.0 - 1e-12)).floor() as usize;
    let mut times: Vec<f64> = (0..=full).map(|j| j as f64 * dt).collect();
    if horizon - times[full] > 1e-12 * horizon {
        times.push(horizon);
    } else {
        times[full] = horizon;
    }
    times
}

/// `f(x,y,t) = l(x,t) + y`.
pub fn eval_f(x: &[f64], y: &[f64], t: f64, spec: &ProblemSpec) -> Result<Vec<f64>> {
    spec.check_in_box(x)?;
    let d = spec.dim();
    let mut out = vec![0.0; d];
    spec.l_into(x, t, &mut out);
    for (o, yi) in out.iter_mut().zip(y) {
        *o += yi;
    }
    Ok(out)
}

/// `g_i(x,y,t) = ∂_i(V - div l)(x,t) - (y, ∇_x l_i(x,t))`, symbolic derivatives.
pub fn eval_g(x: &[f64], y: &[f64], t: f64, spec: &ProblemSpec) -> Result<Vec<f64>> {
    eval_g_with(x, y, t, spec, DerivativeMode::Symbolic)
}

pub fn eval_g_with(
    x: &[f64],
    y: &[f64],
    t: f64,
    spec: &ProblemSpec,
    mode: DerivativeMode,
) -> Result<Vec<f64>> {
    spec.check_in_box(x)?;
    let d = spec.dim();
    let mut out = vec![0.0; d];
    match mode {
        DerivativeMode::Symbolic => spec.g_into(x, y, t, &mut out),
        DerivativeMode::Numeric(h) => {
            let jac = numeric_jacobian(spec, x, t, h);
            let source = |p: &[f64]| spec.v_at(p, t) - numeric_divergence(spec, p, t, h);
            for i in 0..d {
                let mut acc = central(&source, x, i, h);
                for j in 0..d {
                    acc -= y[j] * jac[i * d + j];
                }
                out[i] = acc;
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Evaluation(format!("g at {x:?}, t={t}")));
    }
    Ok(out)
}

fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], axis: usize, h: f64) -> f64 {
    let mut p: Point = [0.0; MAX_DIM];
    p[..x.len()].copy_from_slice(x);
    let mut m = p;
    p[axis] += h;
    m[axis] -= h;
    (f(&p[..x.len()]) - f(&m[..x.len()])) / (2.0 * h)
}

fn numeric_jacobian(spec: &ProblemSpec, x: &[f64], t: f64, h: f64) -> Vec<f64> {
    let d = spec.dim();
    let mut jac = vec![0.0; d * d];
    for i in 0..d {
        let li = |p: &[f64]| spec.drift.components[i].eval(p, t);
        for j in 0..d {
            jac[i * d + j] = central(&li, x, j, h);
        }
    }
    jac
}

fn numeric_divergence(spec: &ProblemSpec, x: &[f64], t: f64, h: f64) -> f64 {
    (0..spec.dim())
        .map(|i| {
            let li = |p: &[f64]| spec.drift.components[i].eval(p, t);
            central(&li, x, i, h)
        })
        .sum()
}

/// Named coefficient presets, referenced as `preset:NAME`.
pub fn scalar_preset(name: &str) -> Option<&'static str> {
    Some(match name {
        "zero" => "0",
        "one" => "1",
        "cos_bump" => "1 + cos(pi*x1)",
        "cos_bump_positive" => "2 + cos(pi*x1)",
        "harmonic" => "x1^2/2",
        "cos_bump_2d" => "2 + cos(pi*x1)*cos(pi*x2)",
        _ => return None,
    })
}

pub fn vector_preset(name: &str) -> Option<&'static str> {
    Some(match name {
        "zero" => "[0]",
        "zero2" => "[0, 0]",
        "radial" => "[x1, x2]",
        "rotational" => "[-x2, x1]",
        "sine" => "[0.5*sin(pi*x1)]",
        _ => return None,
    })
}

pub fn parse_scalar(src: &str) -> Result<Expr> {
    match src.trim().strip_prefix("preset:") {
        Some(name) => {
            let body = scalar_preset(name.trim())
                .ok_or_else(|| LabError::Config(format!("unknown scalar preset '{name}'")))?;
            Expr::parse(body)
        }
        None => Expr::parse(src),
    }
}

pub fn parse_vector(src: &str, dim: usize) -> Result<VectorExpr> {
    let v = match src.trim().strip_prefix("preset:") {
        Some(name) => {
            let body = vector_preset(name.trim())
                .ok_or_else(|| LabError::Config(format!("unknown vector preset '{name}'")))?;
            VectorExpr::parse(body)?
        }
        None => VectorExpr::parse(src)?,
    };
    // a lone zero stands for the zero field in any dimension
    if v.dim() == 1 && dim > 1 && v.components[0].is_zero() {
        return Ok(VectorExpr::zero(dim));
    }
    Ok(v)
}

/// Builder with unit-interval defaults.
#[derive(Debug, Clone)]
pub struct SpecBuilder {
    lower: Vec<f64>,
    upper: Vec<f64>,
    horizon: f64,
    drift: String,
    potential: String,
    initial: String,
    terminal: String,
    nodes: Option<Vec<usize>>,
    steps: usize,
    theta: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
    alpha: Option<f64>,
}

impl Default for SpecBuilder {
    fn default() -> Self {
        Self {
            lower: vec![0.0],
            upper: vec![1.0],
            horizon: 1.0,
            drift: "0".into(),
            potential: "0".into(),
            initial: "1".into(),
            terminal: "1".into(),
            nodes: None,
            steps: 1000,
            theta: 0.5,
            n_paths: 100_000,
            dt: 1e-3,
            seed: 1,
            alpha: None,
        }
    }
}

impl SpecBuilder {
    pub fn domain(mut self, lower: &[f64], upper: &[f64]) -> Self {
        self.lower = lower.to_vec();
        self.upper = upper.to_vec();
        self
    }
    pub fn horizon(mut self, t: f64) -> Self {
        self.horizon = t;
        self
    }
    pub fn drift(mut self, s: &str) -> Self {
        self.drift = s.into();
        self
    }
    pub fn potential(mut self, s: &str) -> Self {
        self.potential = s.into();
        self
    }
    pub fn initial(mut self, s: &str) -> Self {
        self.initial = s.into();
        self
    }
    pub fn terminal(mut self, s: &str) -> Self {
        self.terminal = s.into();
        self
    }
    /// Same node count on every axis.
    pub fn nodes(mut self, n: usize) -> Self {
        self.nodes = Some(vec![n; self.lower.len()]);
        self
    }
    pub fn nodes_per_axis(mut self, n: Vec<usize>) -> Self {
        self.nodes = Some(n);
        self
    }
    pub fn steps(mut self, n: usize) -> Self {
        self.steps = n;
        self
    }
    pub fn theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }
    pub fn paths(mut self, n: usize) -> Self {
        self.n_paths = n;
        self
    }
    pub fn dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }
    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
    pub fn alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let domain = BoxDomain::new(self.lower, self.upper)?;
        let d = domain.dim();
        let nodes = self.nodes.unwrap_or_else(|| vec![128; d]);
        let mut spec = ProblemSpec::new(
            domain,
            self.horizon,
            parse_vector(&self.drift, d)?,
            parse_scalar(&self.potential)?,
            parse_scalar(&self.initial)?,
            parse_scalar(&self.terminal)?,
            GridParams {
                nodes,
                steps: self.steps,
                theta: self.theta,
            },
            MonteCarloParams {
                n_paths: self.n_paths,
                dt: self.dt,
                seed: self.seed,
            },
        )?;
        spec.hoelder_alpha = self.alpha;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Hypothesis validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hypothesis {
    /// (IF): φ > 0 at grid nodes.
    PositivityPhi,
    /// (IF): ψ > 0 at grid nodes.
    PositivityPsi,
    /// (IF): ∂φ/∂n = 0 on the boundary.
    NeumannPhi,
    /// (IF): ∂ψ/∂n = 0 on the boundary.
    NeumannPsi,
    /// (L): sampled derivatives of l up to second order bounded.
    RegularityL,
    /// (V): sampled derivatives of V up to first order bounded.
    RegularityV,
    /// l conservative in D.
    Conservative,
    /// |l| h < 1 so the discrete generator keeps nonnegative off-diagonals.
    DiscreteMaximumPrinciple,
}

impl Hypothesis {
    pub fn label(self) -> &'static str {
        match self {
            Hypothesis::PositivityPhi => "(IF) positivity of phi",
            Hypothesis::PositivityPsi => "(IF) positivity of psi",
            Hypothesis::NeumannPhi => "(IF) Neumann condition of phi",
            Hypothesis::NeumannPsi => "(IF) Neumann condition of psi",
            Hypothesis::RegularityL => "(L) regularity of l",
            Hypothesis::RegularityV => "(V) regularity of V",
            Hypothesis::Conservative => "l conservative",
            Hypothesis::DiscreteMaximumPrinciple => "discrete maximum principle |l|h < 1",
        }
    }

    pub fn is_hard(self) -> bool {
        !matches!(
            self,
            Hypothesis::RegularityL | Hypothesis::RegularityV | Hypothesis::DiscreteMaximumPrinciple
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Pass,
    Fail,
    Advisory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub coords: Vec<f64>,
    pub time: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub hypothesis: Hypothesis,
    pub status: Status,
    /// Worst measured defect (or worst sampled magnitude for regularity checks).
    pub measured: f64,
    pub tolerance: f64,
    pub witnesses: Vec<Witness>,
}

const MAX_WITNESSES: usize = 8;

impl HypothesisCheck {
    fn new(hypothesis: Hypothesis, failed: bool, measured: f64, tolerance: f64, witnesses: Vec<Witness>) -> Self {
        let status = match (failed, hypothesis.is_hard()) {
            (false, _) => Status::Pass,
            (true, true) => Status::Fail,
            (true, false) => Status::Advisory,
        };
        debug_assert!(status == Status::Pass || !witnesses.is_empty());
        Self {
            hypothesis,
            status,
            measured,
            tolerance,
            witnesses,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<HypothesisCheck>,
}

impl ValidationReport {
    pub fn hard_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn get(&self, h: Hypothesis) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.hypothesis == h)
    }

    pub fn failures(&self) -> impl Iterator<Item = &HypothesisCheck> {
        self.checks.iter().filter(|c| c.status == Status::Fail)
    }
}

fn witness(grid: &Grid, node: usize, time: Option<f64>, value: f64) -> Witness {
    let p = grid.coord(node);
    Witness {
        coords: p[..grid.dim()].to_vec(),
        time,
        value,
    }
}

fn positivity_check(h: Hypothesis, grid: &Grid, f: impl Fn(&[f64]) -> f64) -> HypothesisCheck {
    let d = grid.dim();
    let mut worst = f64::INFINITY;
    let mut witnesses = Vec::new();
    for n in 0..grid.node_count() {
        let p = grid.coord(n);
        let v = f(&p[..d]);
        worst = worst.min(v);
        if !(v > 0.0) && witnesses.len() < MAX_WITNESSES {
            witnesses.push(witness(grid, n, None, v));
        }
    }
    let failed = !witnesses.is_empty();
    HypothesisCheck::new(h, failed, worst, 0.0, witnesses)
}

fn neumann_check(h: Hypothesis, grid: &Grid, value: &Expr, gradient: &[Expr], t: f64) -> HypothesisCheck {
    let d = grid.dim();
    let spacing = grid.max_spacing();
    let mut max_grad: f64 = 0.0;
    for n in 0..grid.node_count() {
        let p = grid.coord(n);
        let g2: f64 = gradient.iter().map(|g| g.eval(&p[..d], t).powi(2)).sum();
        max_grad = max_grad.max(g2.sqrt());
    }
    let tol = 10.0 * spacing * max_grad;
    let mut worst: f64 = 0.0;
    let mut witnesses = Vec::new();
    for n in 0..grid.node_count() {
        if !grid.is_boundary(n) {
            continue;
        }
        let idx = grid.multi_index(n);
        let p = grid.coord(n);
        for (a, ax) in grid.axes().iter().enumerate() {
            if idx[a] != 0 && idx[a] + 1 != ax.nodes {
                continue;
            }
            let dn = gradient[a].eval(&p[..d], t).abs();
            worst = worst.max(dn);
            if (dn > tol || !dn.is_finite()) && witnesses.len() < MAX_WITNESSES {
                witnesses.push(witness(grid, n, None, dn));
            }
        }
    }
    let _ = value;
    let failed = !witnesses.is_empty();
    HypothesisCheck::new(h, failed, worst, tol, witnesses)
}

/// Sampled time levels for regularity checks.
fn sample_times(horizon: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| horizon * i as f64 / (count - 1) as f64).collect()
}

/// Largest finite-difference derivative magnitude of `f` (space orders up to
/// `space_order`, first order in time) over the grid.
fn regularity_check(
    h: Hypothesis,
    grid: &Grid,
    horizon: f64,
    space_order: usize,
    f: impl Fn(&[f64], f64) -> f64,
) -> HypothesisCheck {
    let d = grid.dim();
    let hs = grid.min_spacing();
    let ht = horizon * 1e-3;
    let mut worst: f64 = 0.0;
    let mut witnesses = Vec::new();
    let bound = 1e12;
    for &t in &sample_times(horizon, 9) {
        for n in 0..grid.node_count() {
            let p = grid.coord(n);
            let x = &p[..d];
            let mut mags = vec![f(x, t)];
            let tp = (t + ht).min(horizon);
            let tm = (t - ht).max(0.0);
            mags.push((f(x, tp) - f(x, tm)) / (tp - tm));
            for a in 0..d {
                let mut xp = p;
                let mut xm = p;
                xp[a] += hs;
                xm[a] -= hs;
                let fp = f(&xp[..d], t);
                let fm = f(&xm[..d], t);
                let f0 = f(x, t);
                mags.push((fp - fm) / (2.0 * hs));
                if space_order >= 2 {
                    mags.push((fp - 2.0 * f0 + fm) / (hs * hs));
                }
            }
            for m in mags {
                let a = m.abs();
                if !a.is_finite() || a > bound {
                    if witnesses.len() < MAX_WITNESSES {
                        witnesses.push(witness(grid, n, Some(t), m));
                    }
                } else {
                    worst = worst.max(a);
                }
            }
        }
    }
    let failed = !witnesses.is_empty();
    HypothesisCheck::new(h, failed, worst, bound, witnesses)
}

/// Checks (IF) as hard gates, (L)/(V) as advisories, and the conservativeness
/// of the drift as a hard gate.
pub fn validate_hypotheses(spec: &ProblemSpec) -> ValidationReport {
    let grid = spec.pde_grid();
    let g = grid.snapshot(0.0);
    let d = spec.dim();
    let mut checks = vec![
        positivity_check(Hypothesis::PositivityPhi, &g, |x| spec.phi_at(x)),
        positivity_check(Hypothesis::PositivityPsi, &g, |x| spec.psi_at(x)),
        neumann_check(Hypothesis::NeumannPhi, &g, &spec.initial, spec.grad_phi_exprs(), 0.0),
        neumann_check(Hypothesis::NeumannPsi, &g, &spec.terminal, spec.grad_psi_exprs(), spec.horizon),
    ];
    for i in 0..d {
        let li = &spec.drift.components[i];
        let mut c = regularity_check(Hypothesis::RegularityL, &g, spec.horizon, 2, |x, t| li.eval(x, t));
        if i > 0 {
            let prev: &mut HypothesisCheck = checks.last_mut().unwrap();
            prev.measured = prev.measured.max(c.measured);
            prev.witnesses.append(&mut c.witnesses);
            if prev.status == Status::Pass {
                prev.status = c.status;
            }
            continue;
        }
        checks.push(c);
    }
    checks.push(regularity_check(Hypothesis::RegularityV, &g, spec.horizon, 1, |x, t| {
        spec.v_at(x, t)
    }));

    let mut curl_worst: f64 = 0.0;
    let mut curl_witnesses = Vec::new();
    let mut curl_tol = 0.0;
    for &t in &sample_times(spec.horizon, 5) {
        let c = check_conservative(spec, t);
        curl_tol = c.tolerance;
        if c.max_curl_defect >= curl_worst {
            curl_worst = c.max_curl_defect;
        }
        if !c.is_conservative && curl_witnesses.len() < MAX_WITNESSES {
            if let Some(w) = c.witness {
                curl_witnesses.push(w);
            }
        }
    }
    let failed = !curl_witnesses.is_empty();
    checks.push(HypothesisCheck::new(
        Hypothesis::Conservative,
        failed,
        curl_worst,
        curl_tol,
        curl_witnesses,
    ));

    let h = g.max_spacing();
    let mut dmp_worst: f64 = 0.0;
    let mut dmp_witnesses = Vec::new();
    let mut l = [0.0; MAX_DIM];
    for &t in &sample_times(spec.horizon, 9) {
        for n in 0..g.node_count() {
            let p = g.coord(n);
            spec.l_into(&p[..d], t, &mut l[..d]);
            let m = l[..d].iter().fold(0.0f64, |m, v| m.max(v.abs())) * h;
            dmp_worst = dmp_worst.max(m);
            if m >= 1.0 && dmp_witnesses.len() < MAX_WITNESSES {
                dmp_witnesses.push(witness(&g, n, Some(t), m));
            }
        }
    }
    let failed = !dmp_witnesses.is_empty();
    checks.push(HypothesisCheck::new(
        Hypothesis::DiscreteMaximumPrinciple,
        failed,
        dmp_worst,
        1.0,
        dmp_witnesses,
    ));
    ValidationReport { checks }
}

#[derive(Debug, Clone)]
pub struct ConservativeCheck {
    pub is_conservative: bool,
    /// Potential `P` with `∇P = l` (zero at the lower corner) when conservative.
    pub potential: Option<ScalarField>,
    pub max_curl_defect: f64,
    pub tolerance: f64,
    pub witness: Option<Witness>,
}

pub fn check_conservative(spec: &ProblemSpec, t: f64) -> ConservativeCheck {
    check_conservative_with(spec, t, DerivativeMode::Symbolic)
}

/// Curl defect `max |∂_1 l_2 - ∂_2 l_1|` over interior nodes, with
/// tolerance `1e-8` (symbolic) or `10 h² max(1, max|l|)` (numeric).
pub fn check_conservative_with(spec: &ProblemSpec, t: f64, mode: DerivativeMode) -> ConservativeCheck {
    let grid = Arc::new(spec.pde_grid().snapshot(t));
    let d = spec.dim();
    let h = grid.max_spacing();
    let tolerance = match mode {
        DerivativeMode::Symbolic => 1e-8,
        DerivativeMode::Numeric(_) => {
            let mut scale: f64 = 1.0;
            let mut l = [0.0; MAX_DIM];
            for n in 0..grid.node_count() {
                spec.l_into(&grid.coord(n)[..d], t, &mut l[..d]);
                scale = l[..d].iter().fold(scale, |m, v| m.max(v.abs()));
            }
            10.0 * h * h * scale
        }
    };
    let mut max_curl: f64 = 0.0;
    let mut witness_node = None;
    if d == 2 {
        let l1 = &spec.drift.components[0];
        let l2 = &spec.drift.components[1];
        let (d1l2, d2l1) = (l2.diff(Var::X(0)), l1.diff(Var::X(1)));
        for n in 0..grid.node_count() {
            if !grid.is_interior(n, 1) {
                continue;
            }
            let p = grid.coord(n);
            let curl = match mode {
                DerivativeMode::Symbolic => d1l2.eval(&p, t) - d2l1.eval(&p, t),
                DerivativeMode::Numeric(_) => {
                    let s0 = grid.stride(0);
                    let s1 = grid.stride(1);
                    let (h0, h1) = (grid.axis(0).spacing(), grid.axis(1).spacing());
                    let at = |m: usize, c: &Expr| c.eval(&grid.coord(m), t);
                    (at(n + s0, l2) - at(n - s0, l2)) / (2.0 * h0)
                        - (at(n + s1, l1) - at(n - s1, l1)) / (2.0 * h1)
                }
            };
            let a = curl.abs();
            if !(a <= max_curl) {
                max_curl = a;
                witness_node = Some((n, curl));
            }
        }
    }
    let is_conservative = max_curl.is_finite() && max_curl < tolerance;
    let potential = if is_conservative {
        Some(line_integral_potential(spec, &grid, t))
    } else {
        None
    };
    let witness = if is_conservative {
        None
    } else {
        witness_node.map(|(n, v)| {
            let mut w = super_witness(&grid, n, v);
            w.time = Some(t);
            w
        })
    };
    ConservativeCheck {
        is_conservative,
        potential,
        max_curl_defect: max_curl,
        tolerance,
        witness,
    }
}

fn super_witness(grid: &Grid, n: usize, v: f64) -> Witness {
    witness(grid, n, None, v)
}

/// Trapezoid line integration along axis-parallel paths from the lower corner.
fn line_integral_potential(spec: &ProblemSpec, grid: &Arc<Grid>, t: f64) -> ScalarField {
    let d = spec.dim();
    let mut field = ScalarField::zeros(grid.clone(), FieldKind::Potential);
    let ax0 = grid.axis(0).clone();
    let eval = |c: usize, x: &[f64]| spec.drift.components[c].eval(x, t);
    // along axis 0 at the lower face of axis 1
    let mut base = vec![0.0; ax0.nodes];
    let y0 = if d == 2 { grid.axis(1).lower } else { 0.0 };
    for i in 1..ax0.nodes {
        let (xa, xb) = (ax0.coord(i - 1), ax0.coord(i));
        base[i] = base[i - 1] + 0.5 * (xb - xa) * (eval(0, &[xa, y0]) + eval(0, &[xb, y0]));
    }
    let values = field.level_mut(0);
    if d == 1 {
        values.copy_from_slice(&base);
        return field;
    }
    let ax1 = grid.axis(1).clone();
    for i in 0..ax0.nodes {
        let x = ax0.coord(i);
        let mut acc = base[i];
        values[i] = acc;
        for j in 1..ax1.nodes {
            let (ya, yb) = (ax1.coord(j - 1), ax1.coord(j));
            acc += 0.5 * (yb - ya) * (eval(1, &[x, ya]) + eval(1, &[x, yb]));
            values[i + ax0.nodes * j] = acc;
        }
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec1(phi: &str, psi: &str, l: &str, v: &str) -> ProblemSpec {
        ProblemSpec::builder()
            .initial(phi)
            .terminal(psi)
            .drift(l)
            .potential(v)
            .nodes(64)
            .steps(16)
            .build()
            .unwrap()
    }

    #[test]
    fn constants_satisfy_every_hypothesis() {
        let r = validate_hypotheses(&spec1("1", "1", "0", "0"));
        assert!(r.hard_pass());
        assert!(r.checks.iter().all(|c| c.status == Status::Pass), "{r:?}");
    }

    #[test]
    fn linear_phi_fails_positivity_and_neumann() {
        let r = validate_hypotheses(&spec1("x", "1", "0", "0"));
        assert!(!r.hard_pass());
        let pos = r.get(Hypothesis::PositivityPhi).unwrap();
        assert_eq!(pos.status, Status::Fail);
        assert_eq!(pos.witnesses[0].coords, vec![0.0]);
        let neu = r.get(Hypothesis::NeumannPhi).unwrap();
        assert_eq!(neu.status, Status::Fail);
        let ends: Vec<f64> = neu.witnesses.iter().map(|w| w.coords[0]).collect();
        assert_eq!(ends, vec![0.0, 1.0]);
        assert!((neu.measured - 1.0).abs() < 1e-15);
        for c in r.failures() {
            assert!(!c.witnesses.is_empty());
        }
    }

    #[test]
    fn shifted_cosine_passes() {
        let r = validate_hypotheses(&spec1("2 + cos(pi*x)", "1", "0", "0"));
        assert!(r.hard_pass(), "{r:?}");
    }

    #[test]
    fn cosine_bump_with_a_zero_fails_positivity() {
        let r = validate_hypotheses(&spec1("1", "1 + cos(pi*x)", "0", "0"));
        let pos = r.get(Hypothesis::PositivityPsi).unwrap();
        assert_eq!(pos.status, Status::Fail);
        assert_eq!(pos.witnesses[0].coords, vec![1.0]);
    }

    #[test]
    fn singular_potential_is_only_advisory() {
        // 1/x blows up at the lower face
        let r = validate_hypotheses(&spec1("1", "1", "0", "1/x"));
        assert_eq!(r.get(Hypothesis::RegularityV).unwrap().status, Status::Advisory);
        assert!(r.hard_pass());
    }

    #[test]
    fn malformed_coefficients_are_parse_errors() {
        let e = ProblemSpec::builder().initial("2 + cos(pi*").build().unwrap_err();
        assert!(matches!(e, LabError::Parse { .. }));
        let e = ProblemSpec::builder().drift("sin x").build().unwrap_err();
        assert!(matches!(e, LabError::Parse { .. }));
    }

    #[test]
    fn spec_invariants_enforced() {
        assert!(ProblemSpec::builder().horizon(0.0).build().is_err());
        assert!(ProblemSpec::builder().nodes(7).build().is_err());
        assert!(ProblemSpec::builder().steps(4).build().is_err());
        assert!(ProblemSpec::builder().paths(0).build().is_err());
        assert!(ProblemSpec::builder().dt(2.0).build().is_err());
        assert!(ProblemSpec::builder().domain(&[1.0], &[0.0]).build().is_err());
        assert!(ProblemSpec::builder().initial("x2").build().is_err());
    }

    #[test]
    fn mc_times_have_final_short_step() {
        let t = mc_times(1.0, 0.3);
        assert_eq!(t.len(), 5);
        assert_eq!(*t.last().unwrap(), 1.0);
        assert!((t[3] - 0.9).abs() < 1e-15);
        let t = mc_times(1.0, 1e-3);
        assert_eq!(t.len(), 1001);
        assert_eq!(t[1000], 1.0);
    }

    #[test]
    fn f_examples() {
        let s = spec1("1", "1", "0", "0");
        assert_eq!(eval_f(&[0.3], &[0.7], 0.1, &s).unwrap(), vec![0.7]);
        let s = spec1("1", "1", "sin(x)", "0");
        let f = eval_f(&[0.5], &[0.2], 0.4, &s).unwrap();
        assert_eq!(f[0], 0.5f64.sin() + 0.2);
        assert_eq!(eval_f(&[0.5], &[0.0], 0.4, &s).unwrap()[0], 0.5f64.sin());
        assert!(matches!(eval_f(&[1.5], &[0.0], 0.0, &s), Err(LabError::Domain { .. })));
    }

    #[test]
    fn g_examples() {
        let s = spec1("1", "1", "0", "0");
        assert_eq!(eval_g(&[0.4], &[3.0], 0.2, &s).unwrap(), vec![0.0]);
        let s = spec1("1", "1", "0", "x^2");
        assert_eq!(eval_g(&[0.4], &[3.0], 0.2, &s).unwrap(), vec![0.8]);
        let s = spec1("1", "1", "x", "0");
        assert_eq!(eval_g(&[0.4], &[3.0], 0.2, &s).unwrap(), vec![-3.0]);
        assert!(eval_g(&[-0.1], &[0.0], 0.0, &s).is_err());
    }

    #[test]
    fn numeric_g_agrees_with_symbolic() {
        let s = ProblemSpec::builder()
            .domain(&[0.0, 0.0], &[1.0, 1.0])
            .drift("[x1^2*x2 + sin(x1), x1^3/3 + cos(x2)]")
            .potential("exp(x1)*x2")
            .nodes(16)
            .steps(16)
            .build()
            .unwrap();
        let x = [0.3, 0.6];
        let y = [0.7, -1.1];
        let a = eval_g(&x, &y, 0.0, &s).unwrap();
        let b = eval_g_with(&x, &y, 0.0, &s, DerivativeMode::Numeric(1e-3)).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-5, "{a:?} {b:?}");
        }
    }

    #[test]
    fn one_dimensional_fields_are_conservative() {
        let s = spec1("1", "1", "sin(3*x) + x^2", "0");
        let c = check_conservative(&s, 0.5);
        assert!(c.is_conservative);
        let p = c.potential.unwrap();
        // P(x) = (1 - cos 3x)/3 + x^3/3
        let g = p.grid.clone();
        for n in 0..g.node_count() {
            let x = g.coord(n)[0];
            let exact = (1.0 - (3.0 * x).cos()) / 3.0 + x.powi(3) / 3.0;
            assert!((p.at(0, n) - exact).abs() < 2e-3);
        }
    }

    fn spec2(l: &str) -> ProblemSpec {
        ProblemSpec::builder()
            .domain(&[0.0, 0.0], &[1.0, 1.0])
            .drift(l)
            .nodes(21)
            .steps(8)
            .build()
            .unwrap()
    }

    #[test]
    fn radial_field_is_conservative_with_half_square_potential() {
        let c = check_conservative(&spec2("preset:radial"), 0.0);
        assert!(c.is_conservative);
        assert_eq!(c.max_curl_defect, 0.0);
        let p = c.potential.unwrap();
        let g = p.grid.clone();
        for n in 0..g.node_count() {
            let x = g.coord(n);
            let exact = 0.5 * (x[0] * x[0] + x[1] * x[1]);
            assert!((p.at(0, n) - exact).abs() < 1e-3);
        }
    }

    #[test]
    fn rotational_field_is_not_conservative() {
        let s = spec2("preset:rotational");
        let c = check_conservative(&s, 0.0);
        assert!(!c.is_conservative);
        assert!((c.max_curl_defect - 2.0).abs() < 1e-12);
        assert!(c.witness.is_some());
        let c = check_conservative_with(&s, 0.0, DerivativeMode::Numeric(0.0));
        assert!(!c.is_conservative);
        assert!((c.max_curl_defect - 2.0).abs() < 1e-9);
        let r = validate_hypotheses(&s);
        assert_eq!(r.get(Hypothesis::Conservative).unwrap().status, Status::Fail);
    }

    proptest! {
        #[test]
        fn gradient_fields_are_conservative(a in -2.0f64..2.0, b in -2.0f64..2.0, c in 0.5f64..2.5) {
            // l = ∇(a x1^2 x2 + b sin(c x1 x2))
            let l = format!(
                "[2*({a})*x1*x2 + ({b})*cos(({c})*x1*x2)*({c})*x2, ({a})*x1^2 + ({b})*cos(({c})*x1*x2)*({c})*x1]"
            );
            let s = spec2(&l);
            prop_assert!(check_conservative(&s, 0.0).is_conservative);
            prop_assert!(check_conservative_with(&s, 0.0, DerivativeMode::Numeric(0.0)).is_conservative);
        }

        #[test]
        fn f_is_affine_in_y_with_unit_slope(x in 0.0f64..1.0, y in -5.0f64..5.0, t in 0.0f64..1.0) {
            let s = spec1("1", "1", "sin(pi*x)*exp(-t) + x^2", "0");
            let f0 = eval_f(&[x], &[0.0], t, &s).unwrap()[0];
            let mut l = [0.0];
            s.l_into(&[x], t, &mut l);
            prop_assert_eq!(f0, l[0]);
            let fy = eval_f(&[x], &[y], t, &s).unwrap()[0];
            prop_assert!((fy - f0 - y).abs() <= 1e-14 * (1.0 + y.abs() + f0.abs()));
        }

        #[test]
        fn g_slope_matches_finite_difference_jacobian(
            x1 in 0.1f64..0.9, x2 in 0.1f64..0.9, y1 in -3.0f64..3.0, y2 in -3.0f64..3.0
        ) {
            let s = ProblemSpec::builder()
                .domain(&[0.0, 0.0], &[1.0, 1.0])
                .drift("[sin(x1)*x2^2, x1*x2 + cos(x2)]")
                .potential("x1*x2^3")
                .nodes(16)
                .steps(16)
                .build()
                .unwrap();
            let x = [x1, x2];
            let g0 = eval_g(&x, &[0.0, 0.0], 0.0, &s).unwrap();
            let gy = eval_g(&x, &[y1, y2], 0.0, &s).unwrap();
            let h = 1e-3;
            let jac = numeric_jacobian(&s, &x, 0.0, h);
            for i in 0..2 {
                let slope = -(jac[i * 2] * y1 + jac[i * 2 + 1] * y2);
                // O(h²) agreement of the y-slope with finite differences of l
                prop_assert!((gy[i] - g0[i] - slope).abs() < 1e-5 * (1.0 + y1.abs() + y2.abs()));
            }
        }
    }
}
