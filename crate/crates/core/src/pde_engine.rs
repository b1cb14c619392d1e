//! Finite-difference solver for the forward problem
//! `∂_t u = ½Δu - (l,∇u) - V u`, `u(·,0) = φ`, and its adjoint
//! `-∂_t v = ½Δv + div(v l) - V v`, `v(·,T) = ψ`, both with reflecting
//! (Neumann) boundaries on a box.
//!
//! Space: vertex-centred central differences, ghost-node reflection, product
//! trapezoid weights `W`. Time: θ-scheme for `½Δ - (l,∇)` written in
//! increment form, Strang-split with the exact factor `exp(-kV/2)` on either
//! side. The backward sweep applies `W⁻¹ Mᵀ W` for the forward one-step
//! matrix `M`, so `⟨u(t), v(t)⟩_W` is constant in `t` up to roundoff.

use std::sync::Arc;

use rayon::prelude::*;

use crate::coefficients::ProblemSpec;
use crate::error::{LabError, Result};
use crate::grid::{FieldKind, Grid, ScalarField, MAX_DIM};
use crate::linalg::{BandLu, BandMatrix};

const MAX_OFF: usize = 2 * MAX_DIM;

/// Sparse generator in difference form:
/// `(G u)_i = Σ_j a_ij (u_j - u_i) + s_i u_i`.
#[derive(Debug, Clone)]
pub struct Generator {
    cols: Vec<[usize; MAX_OFF]>,
    vals: Vec<[f64; MAX_OFF]>,
    len: Vec<u8>,
    reaction: Vec<f64>,
    bandwidth: usize,
}

impl Generator {
    /// Discrete `½Δ - (l(·,t),∇)` with ghost-node reflection.
    pub fn forward(grid: &Grid, spec: &ProblemSpec, t: f64) -> Self {
        let nn = grid.node_count();
        let d = grid.dim();
        let mut g = Self {
            cols: vec![[0; MAX_OFF]; nn],
            vals: vec![[0.0; MAX_OFF]; nn],
            len: vec![0; nn],
            reaction: vec![0.0; nn],
            bandwidth: grid.stride(d - 1),
        };
        let mut l = [0.0; MAX_DIM];
        for n in 0..nn {
            let p = grid.coord(n);
            spec.l_into(&p[..d], t, &mut l[..d]);
            let idx = grid.multi_index(n);
            let mut entries: [(usize, f64); MAX_OFF] = [(0, 0.0); MAX_OFF];
            let mut c = 0;
            for (a, ax) in grid.axes().iter().enumerate() {
                let h = ax.spacing();
                let q = 1.0 / (h * h);
                let s = grid.stride(a);
                let i = idx[a];
                if i == 0 {
                    entries[c] = (n + s, q);
                    c += 1;
                } else if i + 1 == ax.nodes {
                    entries[c] = (n - s, q);
                    c += 1;
                } else {
                    let adv = l[a] / (2.0 * h);
                    entries[c] = (n - s, 0.5 * q + adv);
                    entries[c + 1] = (n + s, 0.5 * q - adv);
                    c += 2;
                }
            }
            g.set_row(n, &mut entries[..c]);
        }
        g
    }

    fn set_row(&mut self, n: usize, entries: &mut [(usize, f64)]) {
        entries.sort_by_key(|e| e.0);
        for (k, (c, v)) in entries.iter().enumerate() {
            self.cols[n][k] = *c;
            self.vals[n][k] = *v;
        }
        self.len[n] = entries.len() as u8;
    }

    /// `W⁻¹ Gᵀ W` in difference form, with `w_j / w_i` taken from the
    /// relative weights `rel` (powers of two) so the ratio is exact.
    pub fn adjoint(&self, rel: &[f64]) -> Self {
        let nn = self.len.len();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(MAX_OFF); nn];
        for j in 0..nn {
            for k in 0..self.len[j] as usize {
                let i = self.cols[j][k];
                rows[i].push((j, self.vals[j][k] * (rel[j] / rel[i])));
            }
        }
        let mut g = Self {
            cols: vec![[0; MAX_OFF]; nn],
            vals: vec![[0.0; MAX_OFF]; nn],
            len: vec![0; nn],
            reaction: vec![0.0; nn],
            bandwidth: self.bandwidth,
        };
        for (i, row) in rows.iter_mut().enumerate() {
            g.set_row(i, row);
            let own: f64 = self.off(i).map(|(_, v)| v).sum();
            let trans: f64 = g.off(i).map(|(_, v)| v).sum();
            // diagonal of Gᵀ equals that of G, i.e. -own
            g.reaction[i] = trans - own + self.reaction[i];
        }
        g
    }

    #[inline]
    fn off(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len[i] as usize).map(move |k| (self.cols[i][k], self.vals[i][k]))
    }

    pub fn size(&self) -> usize {
        self.len.len()
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        for i in 0..self.size() {
            let ui = u[i];
            let mut acc = 0.0;
            for (j, a) in self.off(i) {
                acc += a * (u[j] - ui);
            }
            out[i] = acc + self.reaction[i] * ui;
        }
    }

    /// Diagonal entry of the assembled matrix.
    pub fn diagonal(&self, i: usize) -> f64 {
        self.reaction[i] - self.off(i).map(|(_, v)| v).sum::<f64>()
    }

    /// Dense row-major copy, for oracles and tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.size();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = self.diagonal(i);
            for (j, v) in self.off(i) {
                m[i * n + j] += v;
            }
        }
        m
    }

    /// `I - c G` as a band matrix.
    pub fn shifted_identity(&self, c: f64) -> BandMatrix {
        let n = self.size();
        let mut m = BandMatrix::zeros(n, self.bandwidth);
        for i in 0..n {
            m.set(i, i, 1.0 - c * self.diagonal(i));
            for (j, v) in self.off(i) {
                m.add(i, j, -c * v);
            }
        }
        m
    }

    /// Smallest off-diagonal entry; negative means the discrete maximum
    /// principle is lost.
    pub fn min_off_diagonal(&self) -> f64 {
        (0..self.size())
            .flat_map(|i| self.off(i).map(|(_, v)| v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Trapezoid weights divided by the cell volume; entries are powers of two.
fn relative_weights(grid: &Grid) -> Vec<f64> {
    let cell: f64 = grid.axes().iter().map(|a| a.spacing()).product();
    grid.weights().iter().map(|w| (w / cell * 4.0).round() / 4.0).collect()
}

/// Operators attached to one time level.
struct Level {
    gen: Generator,
    adj: Generator,
    lu: BandLu,
}

/// Time stepper of the split θ-scheme.
pub struct Propagator<'a> {
    spec: &'a ProblemSpec,
    grid: Arc<Grid>,
    theta: f64,
    k: f64,
    weights: Vec<f64>,
    rel: Vec<f64>,
    frozen: Option<Arc<Level>>,
}

impl<'a> Propagator<'a> {
    pub fn new(spec: &'a ProblemSpec, theta: f64) -> Result<Self> {
        let grid = spec.pde_grid();
        if !(0.0..=1.0).contains(&theta) {
            return Err(LabError::InvalidSpec(format!("theta {theta} outside [0, 1]")));
        }
        let k = grid.horizon() / (grid.levels() - 1) as f64;
        let mut p = Self {
            spec,
            weights: grid.weights(),
            rel: relative_weights(&grid),
            grid,
            theta,
            k,
            frozen: None,
        };
        if !spec.drift.depends_on(crate::expr::Var::T) {
            p.frozen = Some(Arc::new(p.build_level(0.0)?));
        }
        Ok(p)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    fn build_level(&self, t: f64) -> Result<Level> {
        let gen = Generator::forward(&self.grid, self.spec, t);
        let adj = gen.adjoint(&self.rel);
        let lu = gen.shifted_identity(self.theta * self.k).factor()?;
        Ok(Level { gen, adj, lu })
    }

    fn level(&self, n: usize) -> Result<Arc<Level>> {
        match &self.frozen {
            Some(l) => Ok(l.clone()),
            None => Ok(Arc::new(self.build_level(self.grid.times()[n])?)),
        }
    }

    fn half_potential(&self, n: usize, out: &mut [f64]) {
        let d = self.grid.dim();
        let t = self.grid.times()[n];
        for (i, o) in out.iter_mut().enumerate() {
            let p = self.grid.coord(i);
            *o = (-0.5 * self.k * self.spec.v_at(&p[..d], t)).exp();
        }
    }

    fn forward_step(&self, lo: &Level, hi: &Level, e_lo: &[f64], e_hi: &[f64], u: &mut [f64], s: &mut [f64]) {
        let (th, k) = (self.theta, self.k);
        let nn = u.len();
        for i in 0..nn {
            u[i] *= e_lo[i];
        }
        let (r, tmp) = s.split_at_mut(nn);
        hi.gen.apply(u, r);
        lo.gen.apply(u, tmp);
        for i in 0..nn {
            r[i] = k * (th * r[i] + (1.0 - th) * tmp[i]);
        }
        hi.lu.solve(r);
        for i in 0..nn {
            u[i] = (u[i] + r[i]) * e_hi[i];
        }
    }

    fn backward_step(&self, lo: &Level, hi: &Level, e_lo: &[f64], e_hi: &[f64], v: &mut [f64], s: &mut [f64]) {
        let (th, k) = (self.theta, self.k);
        let nn = v.len();
        for i in 0..nn {
            v[i] *= e_hi[i];
        }
        let (r, tmp) = s.split_at_mut(nn);
        hi.adj.apply(v, r);
        for i in 0..nn {
            r[i] *= th * k * self.weights[i];
        }
        hi.lu.solve_transpose(r);
        for i in 0..nn {
            v[i] += r[i] / self.weights[i];
        }
        lo.adj.apply(v, tmp);
        for i in 0..nn {
            v[i] = (v[i] + (1.0 - th) * k * tmp[i]) * e_lo[i];
        }
    }

    /// Full forward sweep from the given initial values.
    pub fn forward(&self, initial: &[f64]) -> Result<ScalarField> {
        let nn = self.grid.node_count();
        check_len(initial, nn)?;
        let levels = self.grid.levels();
        let mut field = ScalarField::zeros(self.grid.clone(), FieldKind::Forward);
        field.level_mut(0).copy_from_slice(initial);
        let mut u = initial.to_vec();
        let mut scratch = vec![0.0; 2 * nn];
        let (mut e_lo, mut e_hi) = (vec![0.0; nn], vec![0.0; nn]);
        self.half_potential(0, &mut e_lo);
        let mut lo = self.level(0)?;
        for n in 0..levels - 1 {
            let hi = self.level(n + 1)?;
            self.half_potential(n + 1, &mut e_hi);
            self.forward_step(&lo, &hi, &e_lo, &e_hi, &mut u, &mut scratch);
            field.level_mut(n + 1).copy_from_slice(&u);
            lo = hi;
            std::mem::swap(&mut e_lo, &mut e_hi);
        }
        Ok(field)
    }

    /// Structural backward sweep from the given terminal values.
    pub fn backward(&self, terminal: &[f64]) -> Result<ScalarField> {
        let nn = self.grid.node_count();
        check_len(terminal, nn)?;
        let levels = self.grid.levels();
        let mut field = ScalarField::zeros(self.grid.clone(), FieldKind::Adjoint);
        field.level_mut(levels - 1).copy_from_slice(terminal);
        let mut v = terminal.to_vec();
        let mut scratch = vec![0.0; 2 * nn];
        let (mut e_lo, mut e_hi) = (vec![0.0; nn], vec![0.0; nn]);
        self.half_potential(levels - 1, &mut e_hi);
        let mut hi = self.level(levels - 1)?;
        for n in (0..levels - 1).rev() {
            let lo = self.level(n)?;
            self.half_potential(n, &mut e_lo);
            self.backward_step(&lo, &hi, &e_lo, &e_hi, &mut v, &mut scratch);
            field.level_mut(n).copy_from_slice(&v);
            hi = lo;
            std::mem::swap(&mut e_lo, &mut e_hi);
        }
        Ok(field)
    }

    /// Forward propagation of many initial vectors at once (columns of a
    /// row-major `nn x cols` block); returns the terminal block.
    pub fn forward_block(&self, mut block: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let nn = self.grid.node_count();
        let levels = self.grid.levels();
        let (mut e_lo, mut e_hi) = (vec![0.0; nn], vec![0.0; nn]);
        self.half_potential(0, &mut e_lo);
        let mut lo = self.level(0)?;
        for n in 0..levels - 1 {
            let hi = self.level(n + 1)?;
            self.half_potential(n + 1, &mut e_hi);
            block.par_iter_mut().for_each_init(
                || vec![0.0; 2 * nn],
                |scratch, col| self.forward_step(&lo, &hi, &e_lo, &e_hi, col, scratch),
            );
            lo = hi;
            std::mem::swap(&mut e_lo, &mut e_hi);
        }
        Ok(block)
    }
}

fn check_len(values: &[f64], nn: usize) -> Result<()> {
    if values.len() != nn {
        return Err(LabError::Mismatch(format!(
            "{} values for {nn} grid nodes",
            values.len()
        )));
    }
    Ok(())
}

fn nodal(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let d = grid.dim();
    (0..grid.node_count()).map(|n| f(&grid.coord(n)[..d])).collect()
}

pub fn initial_values(spec: &ProblemSpec, grid: &Grid) -> Vec<f64> {
    nodal(grid, |x| spec.phi_at(x))
}

pub fn terminal_values(spec: &ProblemSpec, grid: &Grid) -> Vec<f64> {
    nodal(grid, |x| spec.psi_at(x))
}

fn positivity_gate(field: &ScalarField, what: &str) -> Result<()> {
    if let Some((level, node, value)) = field.first_nonpositive() {
        let g = &field.grid;
        let p = g.coord(node);
        return Err(LabError::Solver(format!(
            "{what} is {value:e} at x={:?}, t={}: discrete maximum principle violated, refine the grid",
            &p[..g.dim()],
            g.times()[level]
        )));
    }
    Ok(())
}

/// Forward solve without the positivity gate.
pub fn propagate_forward(spec: &ProblemSpec, theta: f64, initial: &[f64]) -> Result<ScalarField> {
    Propagator::new(spec, theta)?.forward(initial)
}

/// Structural adjoint solve without the positivity gate.
pub fn propagate_adjoint(spec: &ProblemSpec, theta: f64, terminal: &[f64]) -> Result<ScalarField> {
    Propagator::new(spec, theta)?.backward(terminal)
}

fn gated<F>(spec: &ProblemSpec, what: &str, solve: F) -> Result<ScalarField>
where
    F: Fn(f64) -> Result<ScalarField>,
{
    let first = solve(spec.grid.theta)?;
    match positivity_gate(&first, what) {
        Ok(()) => Ok(first),
        Err(e) if spec.grid.theta < 1.0 => {
            let second = solve(1.0)?;
            positivity_gate(&second, what).map_err(|_| e)?;
            Ok(second)
        }
        Err(e) => Err(e),
    }
}

/// `u_φ`, falling back to θ = 1 if the configured θ loses positivity.
pub fn solve_forward(spec: &ProblemSpec) -> Result<ScalarField> {
    let grid = spec.pde_grid();
    let init = initial_values(spec, &grid);
    gated(spec, "u", |theta| propagate_forward(spec, theta, &init))
}

/// `v_ψ` by the structural backward sweep, with the same fallback.
pub fn solve_adjoint(spec: &ProblemSpec) -> Result<ScalarField> {
    let grid = spec.pde_grid();
    let term = terminal_values(spec, &grid);
    gated(spec, "v", |theta| propagate_adjoint(spec, theta, &term))
}

/// `u_φ` and `v_ψ` computed with one common θ.
pub fn solve_pair(spec: &ProblemSpec) -> Result<(ScalarField, ScalarField, f64)> {
    let grid = spec.pde_grid();
    let init = initial_values(spec, &grid);
    let term = terminal_values(spec, &grid);
    let attempt = |theta: f64| -> Result<(ScalarField, ScalarField)> {
        let p = Propagator::new(spec, theta)?;
        let u = p.forward(&init)?;
        positivity_gate(&u, "u")?;
        let v = p.backward(&term)?;
        positivity_gate(&v, "v")?;
        Ok((u, v))
    };
    match attempt(spec.grid.theta) {
        Ok((u, v)) => Ok((u, v, spec.grid.theta)),
        Err(e) if spec.grid.theta < 1.0 => match attempt(1.0) {
            Ok((u, v)) => Ok((u, v, 1.0)),
            Err(_) => Err(e),
        },
        Err(e) => Err(e),
    }
}

/// Adjoint problem discretized on its own: central differences for
/// `½Δv + div(v l) - V v` with even ghosts for `v` and odd ghosts for `v l`,
/// unsplit θ-scheme. Used to measure how far an independent discretization
/// is from exact duality.
pub fn solve_adjoint_independent(spec: &ProblemSpec, theta: f64) -> Result<ScalarField> {
    let grid = spec.pde_grid();
    let nn = grid.node_count();
    let levels = grid.levels();
    let k = grid.horizon() / (levels - 1) as f64;
    let d = grid.dim();
    let assemble = |t: f64| -> BandMatrix {
        let mut m = BandMatrix::zeros(nn, grid.stride(d - 1));
        let mut l = [0.0; MAX_DIM];
        let ls: Vec<[f64; MAX_DIM]> = (0..nn)
            .map(|n| {
                spec.l_into(&grid.coord(n)[..d], t, &mut l[..d]);
                l
            })
            .collect();
        for n in 0..nn {
            let p = grid.coord(n);
            m.add(n, n, -spec.v_at(&p[..d], t));
            let idx = grid.multi_index(n);
            for (a, ax) in grid.axes().iter().enumerate() {
                let h = ax.spacing();
                let q = 1.0 / (h * h);
                let s = grid.stride(a);
                let i = idx[a];
                m.add(n, n, -q);
                if i == 0 {
                    m.add(n, n + s, q + ls[n + s][a] / h);
                } else if i + 1 == ax.nodes {
                    m.add(n, n - s, q - ls[n - s][a] / h);
                } else {
                    m.add(n, n + s, 0.5 * q + ls[n + s][a] / (2.0 * h));
                    m.add(n, n - s, 0.5 * q - ls[n - s][a] / (2.0 * h));
                }
            }
        }
        m
    };
    let mut field = ScalarField::zeros(grid.clone(), FieldKind::Adjoint);
    let term = terminal_values(spec, &grid);
    field.level_mut(levels - 1).copy_from_slice(&term);
    let mut v = term;
    let mut rhs = vec![0.0; nn];
    for n in (0..levels - 1).rev() {
        let hi = assemble(grid.times()[n + 1]);
        let lo = assemble(grid.times()[n]);
        hi.mul_vec(&v, &mut rhs);
        for i in 0..nn {
            rhs[i] = v[i] + (1.0 - theta) * k * rhs[i];
        }
        let mut a = BandMatrix::zeros(nn, lo.bandwidth());
        for i in 0..nn {
            for j in i.saturating_sub(lo.bandwidth())..(i + lo.bandwidth() + 1).min(nn) {
                let id = if i == j { 1.0 } else { 0.0 };
                a.set(i, j, id - theta * k * lo.get(i, j));
            }
        }
        a.factor()?.solve(&mut rhs);
        v.copy_from_slice(&rhs);
        field.level_mut(n).copy_from_slice(&v);
    }
    Ok(field)
}

/// `max_n |⟨u_n, v_n⟩_W - ⟨u_0, v_0⟩_W|`.
pub fn duality_defect(u: &ScalarField, v: &ScalarField) -> Result<f64> {
    if u.grid != v.grid {
        return Err(LabError::Mismatch("u and v live on different grids".into()));
    }
    let w = u.grid.weights();
    let pairing = |n: usize| -> f64 {
        u.level(n)
            .iter()
            .zip(v.level(n))
            .zip(&w)
            .map(|((a, b), w)| a * b * w)
            .sum()
    };
    let p0 = pairing(0);
    Ok((0..u.grid.levels()).map(|n| (pairing(n) - p0).abs()).fold(0.0, f64::max))
}

/// Total mass `∫ u v dx` at every level.
pub fn marginal_masses(u: &ScalarField, v: &ScalarField) -> Result<Vec<f64>> {
    let rho = u.product(v, FieldKind::Density)?;
    Ok((0..rho.grid.levels()).map(|n| rho.integral(n)).collect())
}

pub const MAX_KERNEL_NODES: usize = 4096;

/// Discrete Green function `G[y, x] ≈ g(y, T; x, 0)`.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    pub grid: Arc<Grid>,
    /// Row-major, `values[y * n + x]`.
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub theta: f64,
}

impl TransitionKernel {
    pub fn size(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.size() + x]
    }

    /// `Σ_y w(y) G[y, x]` for every source `x`.
    pub fn column_masses(&self) -> Vec<f64> {
        let n = self.size();
        (0..n)
            .map(|x| (0..n).map(|y| self.weights[y] * self.at(y, x)).sum())
            .collect()
    }

    pub fn min_entry(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Green kernel with the configured θ, falling back to θ = 1 if an entry
/// is not positive.
pub fn green_kernel(spec: &ProblemSpec) -> Result<TransitionKernel> {
    let first = green_kernel_with(spec, spec.grid.theta)?;
    if first.min_entry() > 0.0 {
        return Ok(first);
    }
    if spec.grid.theta < 1.0 {
        let second = green_kernel_with(spec, 1.0)?;
        if second.min_entry() > 0.0 {
            return Ok(second);
        }
    }
    Err(LabError::Solver(format!(
        "Green kernel has entry {:e}: refine the grid",
        first.min_entry()
    )))
}

/// Green kernel by propagating a discrete delta `e_x / w(x)` from every
/// source node; entries are not checked.
pub fn green_kernel_with(spec: &ProblemSpec, theta: f64) -> Result<TransitionKernel> {
    let p = Propagator::new(spec, theta)?;
    let grid = Arc::new(p.grid().snapshot(spec.horizon));
    let n = grid.node_count();
    if n > MAX_KERNEL_NODES {
        return Err(LabError::SizeLimit(format!(
            "dense Green kernel needs at most {MAX_KERNEL_NODES} nodes, grid has {n}"
        )));
    }
    let weights = grid.weights();
    let block: Vec<Vec<f64>> = (0..n)
        .map(|x| {
            let mut col = vec![0.0; n];
            col[x] = 1.0 / weights[x];
            col
        })
        .collect();
    let cols = p.forward_block(block)?;
    let mut values = vec![0.0; n * n];
    for (x, col) in cols.iter().enumerate() {
        for y in 0..n {
            values[y * n + x] = col[y];
        }
    }
    Ok(TransitionKernel {
        grid,
        values,
        weights,
        theta,
    })
}

/// Normalized endpoint density `ρ[x, y] = φ(x) G[y, x] ψ(y) / c_μ`.
#[derive(Debug, Clone)]
pub struct JointMeasure {
    pub grid: Arc<Grid>,
    /// Row-major, `density[x * n + y]`.
    pub density: Vec<f64>,
    pub weights: Vec<f64>,
    pub c_mu: f64,
}

impl JointMeasure {
    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn total_mass(&self) -> f64 {
        let n = self.size();
        let mut s = 0.0;
        for x in 0..n {
            let row: f64 = (0..n).map(|y| self.weights[y] * self.density[x * n + y]).sum();
            s += self.weights[x] * row;
        }
        s
    }

    /// Density of the first endpoint.
    pub fn initial_marginal(&self) -> Vec<f64> {
        let n = self.size();
        (0..n)
            .map(|x| (0..n).map(|y| self.weights[y] * self.density[x * n + y]).sum())
            .collect()
    }

    /// Density of the second endpoint.
    pub fn terminal_marginal(&self) -> Vec<f64> {
        let n = self.size();
        (0..n)
            .map(|y| (0..n).map(|x| self.weights[x] * self.density[x * n + y]).sum())
            .collect()
    }
}

pub fn normalize_mu(spec: &ProblemSpec, g: &TransitionKernel) -> Result<JointMeasure> {
    let grid = g.grid.clone();
    let n = g.size();
    let phi = initial_values(spec, &grid);
    let psi = terminal_values(spec, &grid);
    let mut raw = vec![0.0; n * n];
    let mut c_mu = 0.0;
    for x in 0..n {
        let mut row = 0.0;
        for y in 0..n {
            let r = phi[x] * g.at(y, x) * psi[y];
            raw[x * n + y] = r;
            row += g.weights[y] * r;
        }
        c_mu += g.weights[x] * row;
    }
    if !c_mu.is_finite() || !(c_mu > 0.0) {
        return Err(LabError::Solver(format!("normalization constant c_mu = {c_mu}")));
    }
    let density = raw.iter().map(|r| r / c_mu).collect();
    Ok(JointMeasure {
        grid,
        density,
        weights: g.weights.clone(),
        c_mu,
    })
}

/// Everything downstream stages need from the parabolic solves, with `ψ`
/// rescaled by `1 / c_μ`.
#[derive(Debug, Clone)]
pub struct SolvedProblem {
    pub spec: ProblemSpec,
    pub u: ScalarField,
    pub v: ScalarField,
    pub theta: f64,
    pub c_mu: f64,
    pub kernel: Option<TransitionKernel>,
    pub mu: Option<JointMeasure>,
}

impl SolvedProblem {
    pub fn density(&self) -> ScalarField {
        self.u.product(&self.v, FieldKind::Density).expect("same grid")
    }
}

/// Solves for `u_φ`, `v_ψ` and (when small enough) the Green kernel, then
/// normalizes so that `∫∫ φ g ψ = 1`.
pub fn solve_normalized(spec: &ProblemSpec, with_kernel: bool) -> Result<SolvedProblem> {
    let (u, v, theta) = solve_pair(spec)?;
    let w = u.grid.weights();
    let last = u.grid.levels() - 1;
    // ⟨u(T), ψ⟩ equals the double quadrature of φ G ψ
    let pairing: f64 = u.level(last).iter().zip(v.level(last)).zip(&w).map(|((a, b), w)| a * b * w).sum();
    let (kernel, mu, c_mu) = if with_kernel && u.grid.node_count() <= MAX_KERNEL_NODES {
        let mut s = spec.clone();
        s.grid.theta = theta;
        let g = green_kernel_with(&s, theta)?;
        if !(g.min_entry() > 0.0) {
            return Err(LabError::Solver(format!(
                "Green kernel has entry {:e}: refine the grid",
                g.min_entry()
            )));
        }
        let mu = normalize_mu(spec, &g)?;
        let c = mu.c_mu;
        (Some(g), Some(mu), c)
    } else {
        (None, None, pairing)
    };
    if !c_mu.is_finite() || !(c_mu > 0.0) {
        return Err(LabError::Solver(format!("normalization constant c_mu = {c_mu}")));
    }
    let scale = 1.0 / c_mu;
    let mut scaled = spec.with_terminal_scale(scale)?;
    scaled.grid.theta = spec.grid.theta;
    Ok(SolvedProblem {
        spec: scaled,
        v: v.scaled(scale),
        u,
        theta,
        c_mu,
        kernel,
        mu,
    })
}
