//! Drift fields of the reversible diffusion and reflected Euler–Maruyama
//! simulation in both time directions.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::coefficients::{mc_times, ProblemSpec};
use crate::error::{LabError, Result};
use crate::grid::{DriftKind, Grid, ScalarField, TensorField, VectorField, MAX_DIM};
use crate::pde_engine::SolvedProblem;

#[derive(Debug, Clone)]
pub struct Drifts {
    pub l: VectorField,
    /// `l + ∇ ln v`
    pub b_star: VectorField,
    /// `l - ∇ ln u`
    pub b: VectorField,
    /// `∇ ln v`
    pub c_star: VectorField,
    /// `-∇ ln u`
    pub c: VectorField,
    pub grad_c_star: TensorField,
    pub grad_c: TensorField,
}

/// Second-order difference of `f` along axis `a` at node `n`: central in
/// the interior, three-point one-sided on the faces.
#[inline]
fn axis_derivative(grid: &Grid, n: usize, a: usize, f: impl Fn(usize) -> f64) -> f64 {
    let ax = grid.axis(a);
    let h = ax.spacing();
    let s = grid.stride(a);
    let i = grid.multi_index(n)[a];
    if i == 0 {
        let f0 = f(n);
        (4.0 * (f(n + s) - f0) - (f(n + 2 * s) - f0)) / (2.0 * h)
    } else if i + 1 == ax.nodes {
        let f0 = f(n);
        (4.0 * (f0 - f(n - s)) - (f0 - f(n - 2 * s))) / (2.0 * h)
    } else {
        (f(n + s) - f(n - s)) / (2.0 * h)
    }
}

/// `sign · ∇ ln field` at every node and level.
pub fn log_gradient(field: &ScalarField, sign: f64, kind: DriftKind) -> Result<VectorField> {
    let grid = field.grid.clone();
    let d = grid.dim();
    let nn = grid.node_count();
    let mut out = VectorField::zeros(grid.clone(), kind);
    for level in 0..grid.levels() {
        let logs: Vec<f64> = field.level(level).iter().map(|v| v.ln()).collect();
        for n in 0..nn {
            for a in 0..d {
                let g = sign * axis_derivative(&grid, n, a, |m| logs[m]);
                if !g.is_finite() {
                    let p = grid.coord(n);
                    return Err(LabError::Solver(format!(
                        "log-gradient is {g} at x={:?}, t={}: field not positive",
                        &p[..d],
                        grid.times()[level]
                    )));
                }
                out.get_mut(level, n)[a] = g;
            }
        }
    }
    Ok(out)
}

/// Row `i` of the result is the gradient of component `i`.
pub fn vector_gradient(field: &VectorField) -> TensorField {
    let grid = field.grid.clone();
    let d = grid.dim();
    let mut out = TensorField::zeros(grid.clone(), field.kind);
    for level in 0..grid.levels() {
        for n in 0..grid.node_count() {
            for i in 0..d {
                for j in 0..d {
                    out.get_mut(level, n)[i * d + j] =
                        axis_derivative(&grid, n, j, |m| field.get(level, m)[i]);
                }
            }
        }
    }
    out
}

pub fn drift_field(spec: &ProblemSpec, grid: &Arc<Grid>) -> VectorField {
    let d = grid.dim();
    let mut out = VectorField::zeros(grid.clone(), DriftKind::L);
    for level in 0..grid.levels() {
        let t = grid.times()[level];
        for n in 0..grid.node_count() {
            let p = grid.coord(n);
            spec.l_into(&p[..d], t, out.get_mut(level, n));
        }
    }
    out
}

fn sum_fields(a: &VectorField, b: &VectorField, kind: DriftKind) -> VectorField {
    VectorField {
        grid: a.grid.clone(),
        kind,
        values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
    }
}

pub fn build_drifts(u: &ScalarField, v: &ScalarField, spec: &ProblemSpec) -> Result<Drifts> {
    if u.grid != v.grid {
        return Err(LabError::Mismatch("u and v live on different grids".into()));
    }
    let grid = u.grid.clone();
    let l = drift_field(spec, &grid);
    let c_star = log_gradient(v, 1.0, DriftKind::CStar)?;
    let c = log_gradient(u, -1.0, DriftKind::C)?;
    let b_star = sum_fields(&l, &c_star, DriftKind::BStar);
    let b = sum_fields(&l, &c, DriftKind::B);
    let grad_c_star = vector_gradient(&c_star);
    let grad_c = vector_gradient(&c);
    Ok(Drifts {
        l,
        b_star,
        b,
        c_star,
        c,
        grad_c_star,
        grad_c,
    })
}

/// Sampler for the piecewise-linear (d = 1) or cellwise-constant with
/// uniform jitter (d = 2) density built from nodal values.
#[derive(Debug, Clone)]
pub struct DensitySampler {
    grid: Grid,
    values: Vec<f64>,
    cumulative: Vec<f64>,
}

pub const DENSITY_TOL: f64 = 1e-8;

impl DensitySampler {
    pub fn new(grid: &Grid, values: &[f64]) -> Result<Self> {
        let grid = grid.snapshot(0.0);
        if values.len() != grid.node_count() {
            return Err(LabError::Mismatch("density values do not match grid".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(LabError::Simulation(format!("density has invalid value {v}")));
        }
        let cells = cell_masses(&grid, values);
        let mut cumulative = Vec::with_capacity(cells.len());
        let mut acc = 0.0;
        for m in cells {
            acc += m;
            cumulative.push(acc);
        }
        if (acc - 1.0).abs() > DENSITY_TOL {
            return Err(LabError::Simulation(format!(
                "density integrates to {acc}, expected 1: normalize first"
            )));
        }
        Ok(Self {
            grid,
            values: values.to_vec(),
            cumulative,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let total = *self.cumulative.last().unwrap();
        let u: f64 = rng.random::<f64>() * total;
        let cell = self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1);
        let below = if cell == 0 { 0.0 } else { self.cumulative[cell - 1] };
        let mass = self.cumulative[cell] - below;
        let frac = if mass > 0.0 { ((u - below) / mass).clamp(0.0, 1.0) } else { 0.5 };
        if self.grid.dim() == 1 {
            let ax = self.grid.axis(0);
            let (a, b) = (self.values[cell], self.values[cell + 1]);
            // invert a s + (b - a) s²/2 = frac (a + b)/2
            let c = frac * 0.5 * (a + b);
            let disc = (a * a + 2.0 * (b - a) * c).max(0.0);
            let denom = a + disc.sqrt();
            let s = if denom > 0.0 { (2.0 * c / denom).clamp(0.0, 1.0) } else { frac };
            out[0] = (ax.coord(cell) + s * ax.spacing()).clamp(ax.lower, ax.upper);
        } else {
            let n0 = self.grid.axis(0).nodes - 1;
            let (i, j) = (cell % n0, cell / n0);
            for (a, idx) in [(0usize, i), (1usize, j)] {
                let ax = self.grid.axis(a);
                let s: f64 = rng.random();
                out[a] = (ax.coord(idx) + s * ax.spacing()).clamp(ax.lower, ax.upper);
            }
        }
    }
}

fn cell_masses(grid: &Grid, values: &[f64]) -> Vec<f64> {
    if grid.dim() == 1 {
        let ax = grid.axis(0);
        let h = ax.spacing();
        (0..ax.nodes - 1).map(|i| 0.5 * h * (values[i] + values[i + 1])).collect()
    } else {
        let (a0, a1) = (grid.axis(0), grid.axis(1));
        let area = a0.spacing() * a1.spacing();
        let n0 = a0.nodes;
        let mut out = Vec::with_capacity((a0.nodes - 1) * (a1.nodes - 1));
        for j in 0..a1.nodes - 1 {
            for i in 0..a0.nodes - 1 {
                let b = i + n0 * j;
                out.push(0.25 * area * (values[b] + values[b + 1] + values[b + n0] + values[b + n0 + 1]));
            }
        }
        out
    }
}

/// Bin probabilities of the piecewise-linear density through the nodal
/// values on the first axis, integrated exactly.
pub fn bin_probabilities(grid: &Grid, values: &[f64], bins: usize) -> Vec<f64> {
    let ax = grid.axis(0);
    let h = ax.spacing();
    let dens = |x: f64| {
        let (c, f) = ax.locate(x);
        values[c] * (1.0 - f) + values[c + 1] * f
    };
    let edge = |i: usize| ax.lower + ax.width() * i as f64 / bins as f64;
    let mut probs = vec![0.0; bins];
    for (b, p) in probs.iter_mut().enumerate() {
        let (lo, hi) = (edge(b), if b + 1 == bins { ax.upper } else { edge(b + 1) });
        // split at nodes; trapezoid is exact for linear pieces
        let mut pts = vec![lo];
        let first = ((lo - ax.lower) / h).floor() as usize + 1;
        for i in first..ax.nodes {
            let x = ax.coord(i);
            if x >= hi {
                break;
            }
            if x > lo {
                pts.push(x);
            }
        }
        pts.push(hi);
        *p = pts.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (dens(w[0]) + dens(w[1]))).sum();
    }
    probs
}

pub fn sample_initial(n: usize, solved: &SolvedProblem, seed: u64) -> Result<Vec<f64>> {
    let sampler = initial_sampler(solved)?;
    let d = solved.spec.dim();
    let mut rng = path_rng(seed, TAG_SAMPLE, 0);
    let mut out = vec![0.0; n * d];
    for p in 0..n {
        sampler.sample(&mut rng, &mut out[p * d..(p + 1) * d]);
    }
    Ok(out)
}

/// Density `φ v(·, 0)`.
pub fn initial_sampler(solved: &SolvedProblem) -> Result<DensitySampler> {
    let rho = solved.density();
    DensitySampler::new(&rho.grid, rho.level(0))
}

/// Density `u(·, T) ψ`.
pub fn terminal_sampler(solved: &SolvedProblem) -> Result<DensitySampler> {
    let rho = solved.density();
    DensitySampler::new(&rho.grid, rho.level(rho.grid.levels() - 1))
}

const TAG_SAMPLE: u64 = 0x5a4d_504c;
const TAG_FORWARD: u64 = 0x4657_4452;
const TAG_BACKWARD: u64 = 0x4257_4452;

/// Independent stream `(seed, tag, path)` of a counter-based generator.
pub fn path_rng(seed: u64, tag: u64, path: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(path);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// Simulation clock. Forward runs use original time; backward runs use
/// `s = T - t`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Clock {
    pub direction: Direction,
    pub horizon: f64,
    pub times: Vec<f64>,
    /// Field level used on the step starting at each clock point.
    pub levels: Vec<usize>,
}

impl Clock {
    pub fn new(direction: Direction, field_grid: &Grid, dt: f64) -> Self {
        let horizon = field_grid.horizon();
        let times = mc_times(horizon, dt);
        let levels = times
            .iter()
            .map(|&s| match direction {
                Direction::Forward => field_grid.level_floor(s),
                Direction::Backward => field_grid.level_ceil(horizon - s),
            })
            .collect();
        Self {
            direction,
            horizon,
            times,
            levels,
        }
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    #[inline]
    pub fn step(&self, j: usize) -> f64 {
        self.times[j + 1] - self.times[j]
    }

    /// Original time of clock point `j`.
    #[inline]
    pub fn original(&self, j: usize) -> f64 {
        match self.direction {
            Direction::Forward => self.times[j],
            Direction::Backward => {
                if j == self.steps() {
                    0.0
                } else {
                    self.horizon - self.times[j]
                }
            }
        }
    }

    /// Clock index whose original time is closest to `t`.
    pub fn index_of_original(&self, t: f64) -> usize {
        (0..self.times.len())
            .min_by(|&a, &b| {
                (self.original(a) - t).abs().total_cmp(&(self.original(b) - t).abs())
            })
            .unwrap()
    }
}

/// One path in clock order.
#[derive(Debug, Clone, Default)]
pub struct PathBuf {
    pub dim: usize,
    /// `(steps + 1) x d`
    pub states: Vec<f64>,
    /// Gaussian increments, `steps x d`.
    pub dw: Vec<f64>,
    /// Displacement added by the reflection, `steps x d`.
    pub reflection: Vec<f64>,
}

impl PathBuf {
    pub fn new(dim: usize, steps: usize) -> Self {
        Self {
            dim,
            states: vec![0.0; (steps + 1) * dim],
            dw: vec![0.0; steps * dim],
            reflection: vec![0.0; steps * dim],
        }
    }

    #[inline]
    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn increment(&self, j: usize) -> &[f64] {
        &self.dw[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn reflected(&self, j: usize) -> bool {
        self.reflection[j * self.dim..(j + 1) * self.dim].iter().any(|r| *r != 0.0)
    }
}

/// Coordinatewise mirror fold into `[lo, hi]`.
#[inline]
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if x >= lo && x <= hi {
        return x;
    }
    let w = hi - lo;
    let mut y = (x - lo).rem_euclid(2.0 * w);
    if y > w {
        y = 2.0 * w - y;
    }
    (lo + y).clamp(lo, hi)
}

pub const CHUNK: usize = 512;

/// Reflected Euler–Maruyama for `dX = σ_dir (l + F)(X, t) dt + dW`, where
/// `F` is the translated drift field (`c*` forward, `c` backward) and
/// `σ_dir` is `+1` forward and `-1` backward.
pub struct Simulator<'a> {
    pub spec: &'a ProblemSpec,
    pub field: &'a VectorField,
    pub clock: Clock,
    pub seed: u64,
    sampler: DensitySampler,
    autonomous_l: bool,
}

impl<'a> Simulator<'a> {
    pub fn new(
        spec: &'a ProblemSpec,
        field: &'a VectorField,
        direction: Direction,
        sampler: DensitySampler,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        if field.dim() != spec.dim() {
            return Err(LabError::Mismatch("drift field dimension differs from the problem dimension".into()));
        }
        if !(dt > 0.0) || dt > field.grid.horizon() {
            return Err(LabError::Simulation(format!("step {dt} outside (0, T]")));
        }
        Ok(Self {
            spec,
            clock: Clock::new(direction, &field.grid, dt),
            field,
            seed,
            sampler,
            autonomous_l: !spec.drift.depends_on(crate::expr::Var::T),
        })
    }

    /// Forward run with drift `b* = l + c*` from `φ v(·, 0)`.
    pub fn forward(solved: &'a SolvedProblem, drifts: &'a Drifts, dt: f64, seed: u64) -> Result<Self> {
        Self::new(&solved.spec, &drifts.c_star, Direction::Forward, initial_sampler(solved)?, dt, seed)
    }

    /// Reversed-time run with drift `-b(y, T - s)` from `u(·, T) ψ`.
    pub fn backward(solved: &'a SolvedProblem, drifts: &'a Drifts, dt: f64, seed: u64) -> Result<Self> {
        Self::new(&solved.spec, &drifts.c, Direction::Backward, terminal_sampler(solved)?, dt, seed)
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn sign(&self) -> f64 {
        match self.clock.direction {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }

    /// `f` along the path: `σ_dir (l(x, t) + B)` with `B` the translated field.
    #[inline]
    pub fn drift_into(&self, j: usize, x: &[f64], b: &[f64], out: &mut [f64]) {
        let t = if self.autonomous_l { 0.0 } else { self.clock.original(j) };
        self.spec.l_into(x, t, out);
        let s = self.sign();
        for (o, bi) in out.iter_mut().zip(b) {
            *o = s * (*o + bi);
        }
    }

    #[inline]
    pub fn field_into(&self, j: usize, x: &[f64], out: &mut [f64]) {
        self.field.interp_into(self.clock.levels[j], x, out);
    }

    pub fn run_path(&self, p: u64, buf: &mut PathBuf) -> Result<()> {
        let d = self.dim();
        let steps = self.clock.steps();
        if buf.states.len() != (steps + 1) * d {
            *buf = PathBuf::new(d, steps);
        }
        let tag = match self.clock.direction {
            Direction::Forward => TAG_FORWARD,
            Direction::Backward => TAG_BACKWARD,
        };
        let mut rng = path_rng(self.seed, tag, p);
        self.sampler.sample(&mut rng, &mut buf.states[..d]);
        let dom = &self.spec.domain;
        let mut b = [0.0; MAX_DIM];
        let mut f = [0.0; MAX_DIM];
        for j in 0..steps {
            let dt = self.clock.step(j);
            let sq = dt.sqrt();
            let (head, tail) = buf.states.split_at_mut((j + 1) * d);
            let x = &head[j * d..];
            self.field_into(j, x, &mut b[..d]);
            self.drift_into(j, x, &b[..d], &mut f[..d]);
            for a in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let dw = sq * z;
                let disp = f[a] * dt + dw;
                let width = dom.upper[a] - dom.lower[a];
                if !(disp.abs() <= 2.0 * width) {
                    return Err(LabError::Simulation(format!(
                        "step displacement {disp} exceeds twice the box width: reduce the time step"
                    )));
                }
                let prop = x[a] + disp;
                let next = reflect(prop, dom.lower[a], dom.upper[a]);
                tail[a] = next;
                buf.dw[j * d + a] = dw;
                buf.reflection[j * d + a] = if next == prop { 0.0 } else { next - prop };
            }
        }
        Ok(())
    }

    /// Deterministic parallel map-reduce over paths `0..n`: chunks of
    /// `CHUNK` paths are folded in order and merged in chunk order.
    pub fn fold_paths<A, I, F, M>(&self, n: usize, init: I, fold: F, merge: M) -> Result<A>
    where
        A: Send,
        I: Fn() -> A + Sync,
        F: Fn(&mut A, u64, &PathBuf) -> Result<()> + Sync,
        M: Fn(&mut A, A),
    {
        let chunks = n.div_ceil(CHUNK);
        let parts: Vec<A> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = init();
                let mut buf = PathBuf::new(self.dim(), self.clock.steps());
                for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    self.run_path(p as u64, &mut buf)?;
                    fold(&mut acc, p as u64, &buf)?;
                }
                Ok(acc)
            })
            .collect::<Result<Vec<A>>>()?;
        let mut it = parts.into_iter();
        let mut total = it.next().unwrap_or_else(&init);
        for part in it {
            merge(&mut total, part);
        }
        Ok(total)
    }

    /// Materializes `n` paths.
    pub fn collect(&self, n: usize) -> Result<PathEnsemble> {
        let d = self.dim();
        let steps = self.clock.steps();
        let size = n as u128 * (steps as u128 + 1) * d as u128 * 3;
        if size > MAX_ENSEMBLE_VALUES as u128 {
            return Err(LabError::SizeLimit(format!(
                "{n} paths of {steps} steps exceed the in-memory ensemble budget: use streaming checks"
            )));
        }
        let bufs = self.fold_paths(
            n,
            Vec::new,
            |acc: &mut Vec<PathBuf>, _, buf| {
                acc.push(buf.clone());
                Ok(())
            },
            |a, mut b| a.append(&mut b),
        )?;
        Ok(PathEnsemble::from_clock_paths(&self.clock, self.seed, &bufs))
    }
}

pub const MAX_ENSEMBLE_VALUES: usize = 60_000_000;

/// Materialized paths, stored in original-time order.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub direction: Direction,
    pub dim: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Original times, ascending.
    pub times: Vec<f64>,
    /// `[path][k][d]`
    pub states: Vec<f64>,
    /// Increment consumed on `[t_k, t_{k+1}]`, `[path][k][d]`.
    pub increments: Vec<f64>,
    /// Reflection displacement on the same interval.
    pub reflections: Vec<f64>,
    pub clock: Clock,
}

impl PathEnsemble {
    pub fn from_clock_paths(clock: &Clock, seed: u64, bufs: &[PathBuf]) -> Self {
        let steps = clock.steps();
        let d = bufs.first().map(|b| b.dim).unwrap_or(1);
        let n = bufs.len();
        let mut states = Vec::with_capacity(n * (steps + 1) * d);
        let mut increments = Vec::with_capacity(n * steps * d);
        let mut reflections = Vec::with_capacity(n * steps * d);
        for b in bufs {
            match clock.direction {
                Direction::Forward => {
                    states.extend_from_slice(&b.states);
                    increments.extend_from_slice(&b.dw);
                    reflections.extend_from_slice(&b.reflection);
                }
                Direction::Backward => {
                    for k in 0..=steps {
                        states.extend_from_slice(b.state(steps - k));
                    }
                    for k in 0..steps {
                        let j = steps - 1 - k;
                        increments.extend_from_slice(&b.dw[j * d..(j + 1) * d]);
                        reflections.extend_from_slice(&b.reflection[j * d..(j + 1) * d]);
                    }
                }
            }
        }
        let times = (0..=steps)
            .map(|k| match clock.direction {
                Direction::Forward => clock.original(k),
                Direction::Backward => clock.original(steps - k),
            })
            .collect();
        Self {
            direction: clock.direction,
            dim: d,
            n_paths: n,
            dt: clock.step(0),
            seed,
            times,
            states,
            increments,
            reflections,
            clock: clock.clone(),
        }
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    #[inline]
    pub fn state(&self, p: usize, k: usize) -> &[f64] {
        let off = (p * (self.steps() + 1) + k) * self.dim;
        &self.states[off..off + self.dim]
    }

    #[inline]
    pub fn increment(&self, p: usize, k: usize) -> &[f64] {
        let off = (p * self.steps() + k) * self.dim;
        &self.increments[off..off + self.dim]
    }

    /// Path `p` back in clock order.
    pub fn path_buf(&self, p: usize) -> PathBuf {
        let steps = self.steps();
        let d = self.dim;
        let mut b = PathBuf::new(d, steps);
        for k in 0..=steps {
            let j = match self.direction {
                Direction::Forward => k,
                Direction::Backward => steps - k,
            };
            b.states[j * d..(j + 1) * d].copy_from_slice(self.state(p, k));
        }
        for k in 0..steps {
            let j = match self.direction {
                Direction::Forward => k,
                Direction::Backward => steps - 1 - k,
            };
            let off = (p * steps + k) * d;
            b.dw[j * d..(j + 1) * d].copy_from_slice(&self.increments[off..off + d]);
            b.reflection[j * d..(j + 1) * d].copy_from_slice(&self.reflections[off..off + d]);
        }
        b
    }

    /// Index of the stored time closest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        (0..self.times.len())
            .min_by(|&a, &b| (self.times[a] - t).abs().total_cmp(&(self.times[b] - t).abs()))
            .unwrap()
    }

    /// First coordinate of every path at stored index `k`.
    pub fn coordinate_at(&self, k: usize, axis: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, k)[axis]).collect()
    }

    pub fn is_confined(&self, lower: &[f64], upper: &[f64]) -> bool {
        self.states
            .chunks(self.dim)
            .all(|x| (0..self.dim).all(|a| x[a] >= lower[a] && x[a] <= upper[a]))
    }

    pub fn reflection_steps(&self) -> usize {
        self.reflections.chunks(self.dim).filter(|r| r.iter().any(|v| *v != 0.0)).count()
    }
}

pub fn simulate_forward(solved: &SolvedProblem, drifts: &Drifts, n: usize, dt: f64, seed: u64) -> Result<PathEnsemble> {
    Simulator::forward(solved, drifts, dt, seed)?.collect(n)
}

pub fn simulate_backward(solved: &SolvedProblem, drifts: &Drifts, n: usize, dt: f64, seed: u64) -> Result<PathEnsemble> {
    Simulator::backward(solved, drifts, dt, seed)?.collect(n)
}

/// Increments recovered from states as `ΔA - f Δt` (raw) and with the
/// reflection displacement removed (folded).
#[derive(Debug, Clone)]
pub struct WienerPaths {
    pub dim: usize,
    pub steps: usize,
    /// Clock order, `[path][j][d]`.
    pub raw: Vec<f64>,
    pub folded: Vec<f64>,
    /// `max |folded - stored|` over all entries.
    pub max_mismatch: f64,
}

/// Recovers the driving increments of one clock-order path, writing
/// `ΔA - f Δt` into `raw` and the reflection-corrected version into
/// `folded`. Returns the largest deviation from the stored increments.
pub fn reconstruct_path(sim: &Simulator, buf: &PathBuf, raw: &mut [f64], folded: &mut [f64]) -> f64 {
    let d = buf.dim;
    let mut b = [0.0; MAX_DIM];
    let mut f = [0.0; MAX_DIM];
    let mut worst: f64 = 0.0;
    for j in 0..sim.clock.steps() {
        let dt = sim.clock.step(j);
        let x = buf.state(j);
        let y = buf.state(j + 1);
        sim.field_into(j, x, &mut b[..d]);
        sim.drift_into(j, x, &b[..d], &mut f[..d]);
        for a in 0..d {
            let r = (y[a] - x[a]) - f[a] * dt;
            let fo = r - buf.reflection[j * d + a];
            raw[j * d + a] = r;
            folded[j * d + a] = fo;
            worst = worst.max((fo - buf.dw[j * d + a]).abs());
        }
    }
    worst
}

pub fn reconstruct_wiener(sim: &Simulator, ensemble: &PathEnsemble) -> Result<WienerPaths> {
    let steps = sim.clock.steps();
    if ensemble.steps() != steps || ensemble.dim != sim.dim() || ensemble.direction != sim.clock.direction {
        return Err(LabError::Mismatch("ensemble does not match the simulator clock".into()));
    }
    let d = ensemble.dim;
    let n = ensemble.n_paths;
    let mut raw = vec![0.0; n * steps * d];
    let mut folded = vec![0.0; n * steps * d];
    let mut worst: f64 = 0.0;
    for p in 0..n {
        let buf = ensemble.path_buf(p);
        let r = &mut raw[p * steps * d..(p + 1) * steps * d];
        let f = &mut folded[p * steps * d..(p + 1) * steps * d];
        worst = worst.max(reconstruct_path(sim, &buf, r, f));
    }
    Ok(WienerPaths {
        dim: d,
        steps,
        raw,
        folded,
        max_mismatch: worst,
    })
}
