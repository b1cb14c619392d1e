//! Dense finite-state reference model: the same discrete generator as the
//! PDE engine, propagated by matrix exponentials, plus brute-force path
//! enumeration for conditional expectations.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::coefficients::ProblemSpec;
use crate::error::{LabError, Result};
use crate::expr::Var;
use crate::grid::{Axis, FieldKind, Grid, ScalarField};
use crate::pde_engine::Generator;

pub const MAX_STATES: usize = 64;
pub const MAX_TRAJECTORIES: u64 = 10_000_000;

#[derive(Debug, Clone)]
pub struct ChainModel {
    /// States are the nodes of this grid; time levels follow the `ProblemSpec` grid.
    pub grid: Arc<Grid>,
    /// V-free rate matrix per level (a single entry when `l` is autonomous).
    rates: Vec<DMatrix<f64>>,
    /// `V(·, t_n)` per level (a single entry when `V` is autonomous).
    potential: Vec<DVector<f64>>,
    pub weights: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// `m` states in total; in two dimensions `m` must be a perfect square.
pub fn build_chain(spec: &ProblemSpec, m: usize) -> Result<ChainModel> {
    if m > MAX_STATES {
        return Err(LabError::SizeLimit(format!("chain oracle supports at most {MAX_STATES} states, got {m}")));
    }
    let d = spec.dim();
    let per_axis = if d == 1 {
        m
    } else {
        let r = (m as f64).sqrt().round() as usize;
        if r * r != m {
            return Err(LabError::InvalidSpec(format!("{m} states do not form a square grid")));
        }
        r
    };
    if per_axis < 2 {
        return Err(LabError::InvalidSpec("chain needs at least two states per axis".into()));
    }
    let axes = (0..d)
        .map(|a| Axis::new(spec.domain.lower[a], spec.domain.upper[a], per_axis))
        .collect::<Result<Vec<_>>>()?;
    let grid = Arc::new(Grid::new(axes, spec.pde_grid().times().to_vec())?);
    let times = grid.times().to_vec();
    let rate_at = |t: f64| {
        let g = Generator::forward(&grid, spec, t);
        DMatrix::from_row_slice(m, m, &g.to_dense())
    };
    let pot_at = |t: f64| {
        DVector::from_iterator(m, (0..m).map(|n| spec.v_at(&grid.coord(n)[..d], t)))
    };
    let rates = if spec.drift.depends_on(Var::T) {
        times.iter().map(|&t| rate_at(t)).collect()
    } else {
        vec![rate_at(0.0)]
    };
    let potential = if spec.potential.depends_on(Var::T) {
        times.iter().map(|&t| pot_at(t)).collect()
    } else {
        vec![pot_at(0.0)]
    };
    let weights = DVector::from_vec(grid.weights());
    Ok(ChainModel {
        grid,
        rates,
        potential,
        weights,
    })
}

impl ChainModel {
    pub fn states(&self) -> usize {
        self.weights.len()
    }

    pub fn rate_matrix(&self, level: usize) -> &DMatrix<f64> {
        &self.rates[level.min(self.rates.len() - 1)]
    }

    /// Full generator `Q - diag V` frozen at level `n`.
    pub fn generator(&self, level: usize) -> DMatrix<f64> {
        let mut q = self.rate_matrix(level).clone();
        let v = &self.potential[level.min(self.potential.len() - 1)];
        for i in 0..self.states() {
            q[(i, i)] -= v[i];
        }
        q
    }

    fn autonomous(&self) -> bool {
        self.rates.len() == 1 && self.potential.len() == 1
    }

    /// `exp(k Q)` for the step from level `n` to `n + 1`, with `Q` the
    /// endpoint average of the two frozen generators.
    pub fn step_matrix(&self, level: usize) -> DMatrix<f64> {
        let t = self.grid.times();
        let q = if self.autonomous() {
            self.generator(level)
        } else {
            (self.generator(level) + self.generator(level + 1)) * 0.5
        };
        (q * (t[level + 1] - t[level])).exp()
    }

    /// Propagator from level `a` to level `b > a`, acting on column vectors.
    pub fn transition(&self, a: usize, b: usize) -> DMatrix<f64> {
        let m = self.states();
        if self.autonomous() {
            let t = self.grid.times();
            return (self.generator(0) * (t[b] - t[a])).exp();
        }
        let mut p = DMatrix::identity(m, m);
        for n in a..b {
            p = self.step_matrix(n) * p;
        }
        p
    }

    /// Chain Green matrix `G[y, x] = P[y, x] / w(x)` over the whole horizon.
    pub fn green(&self) -> DMatrix<f64> {
        let mut p = self.transition(0, self.grid.levels() - 1);
        for x in 0..self.states() {
            let w = self.weights[x];
            p.column_mut(x).scale_mut(1.0 / w);
        }
        p
    }
}

/// Exact discrete solution. Forward propagates initial data with `Q`;
/// backward propagates final data with `W⁻¹ Qᵀ W`.
pub fn chain_solve(chain: &ChainModel, data: &[f64], direction: Direction) -> Result<ScalarField> {
    let m = chain.states();
    if data.len() != m {
        return Err(LabError::Mismatch(format!("{} values for {m} states", data.len())));
    }
    let levels = chain.grid.levels();
    let kind = match direction {
        Direction::Forward => FieldKind::Forward,
        Direction::Backward => FieldKind::Adjoint,
    };
    let mut field = ScalarField::zeros(chain.grid.clone(), kind);
    let mut x = DVector::from_column_slice(data);
    let step_cache = if chain.autonomous() && is_uniform(chain.grid.times()) {
        Some(chain.step_matrix(0))
    } else {
        None
    };
    let step = |n: usize| step_cache.clone().unwrap_or_else(|| chain.step_matrix(n));
    match direction {
        Direction::Forward => {
            field.level_mut(0).copy_from_slice(data);
            for n in 0..levels - 1 {
                x = step(n) * x;
                field.level_mut(n + 1).copy_from_slice(x.as_slice());
            }
        }
        Direction::Backward => {
            field.level_mut(levels - 1).copy_from_slice(data);
            for n in (0..levels - 1).rev() {
                let wx = x.component_mul(&chain.weights);
                x = (step(n).transpose() * wx).component_div(&chain.weights);
                field.level_mut(n).copy_from_slice(x.as_slice());
            }
        }
    }
    Ok(field)
}

fn is_uniform(times: &[f64]) -> bool {
    let k = times[1] - times[0];
    times.windows(2).all(|w| ((w[1] - w[0]) - k).abs() <= 1e-12 * k)
}

/// Probability weights of every trajectory `(z_0, ..., z_n)` of an
/// `m`-state process observed at `n + 1` instants. Index of a trajectory is
/// its base-`m` encoding with `z_0` most significant.
#[derive(Debug, Clone)]
pub struct PathLaw {
    pub states: usize,
    pub steps: usize,
    pub weights: Vec<f64>,
}

impl PathLaw {
    fn check_size(states: usize, steps: usize) -> Result<u64> {
        let count = (states as u64).checked_pow(steps as u32 + 1).unwrap_or(u64::MAX);
        if count > MAX_TRAJECTORIES {
            return Err(LabError::SizeLimit(format!(
                "{states} states and {steps} steps give {count} trajectories"
            )));
        }
        Ok(count)
    }

    /// Product-form law `π(z) ∝ a(z_0) Π_j K_j[z_{j+1}, z_j] b(z_n)`.
    pub fn product(
        initial: &[f64],
        kernels: &[DMatrix<f64>],
        terminal: &[f64],
    ) -> Result<Self> {
        let m = initial.len();
        let n = kernels.len();
        let count = Self::check_size(m, n)?;
        let mut weights = Vec::with_capacity(count as usize);
        let mut z = vec![0usize; n + 1];
        for code in 0..count {
            decode(code, m, &mut z);
            let mut w = initial[z[0]] * terminal[z[n]];
            for j in 0..n {
                w *= kernels[j][(z[j + 1], z[j])];
            }
            weights.push(w);
        }
        let mut law = Self {
            states: m,
            steps: n,
            weights,
        };
        law.normalize()?;
        Ok(law)
    }

    /// Reweights every trajectory by `factor(z)` and renormalizes.
    pub fn reweighted(&self, factor: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let mut z = vec![0usize; self.steps + 1];
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(code, w)| {
                decode(code as u64, self.states, &mut z);
                w * factor(&z)
            })
            .collect();
        let mut law = Self {
            states: self.states,
            steps: self.steps,
            weights,
        };
        law.normalize()?;
        Ok(law)
    }

    fn normalize(&mut self) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(LabError::Evaluation(format!("path law has total mass {total}")));
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        Ok(())
    }

    /// Law of `(z_i, z_j)`.
    pub fn pair_marginal(&self, i: usize, j: usize) -> DMatrix<f64> {
        let m = self.states;
        let mut out = DMatrix::zeros(m, m);
        let mut z = vec![0usize; self.steps + 1];
        for (code, w) in self.weights.iter().enumerate() {
            decode(code as u64, m, &mut z);
            out[(z[i], z[j])] += w;
        }
        out
    }

    pub fn marginal(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.states];
        let mut z = vec![0usize; self.steps + 1];
        for (code, w) in self.weights.iter().enumerate() {
            decode(code as u64, self.states, &mut z);
            out[z[i]] += w;
        }
        out
    }
}

fn decode(mut code: u64, m: usize, z: &mut [usize]) {
    for slot in z.iter_mut().rev() {
        *slot = (code % m as u64) as usize;
        code /= m as u64;
    }
}

/// Discrete endpoint law built from `φ`, the chain Green function and `ψ`,
/// observed at `steps + 1` equally spaced instants.
pub fn bernstein_law(chain: &ChainModel, phi: &[f64], psi: &[f64], steps: usize) -> Result<PathLaw> {
    let levels = chain.grid.levels() - 1;
    if steps == 0 || levels % steps != 0 {
        return Err(LabError::InvalidSpec(format!(
            "{steps} observation steps do not divide {levels} chain levels"
        )));
    }
    let block = levels / steps;
    let m = chain.states();
    let w = &chain.weights;
    // G_j(y; x) w(y) = P_j[y, x] w(y) / w(x)
    let kernels: Vec<DMatrix<f64>> = (0..steps)
        .map(|j| {
            let p = chain.transition(j * block, (j + 1) * block);
            DMatrix::from_fn(m, m, |y, x| p[(y, x)] * w[y] / w[x])
        })
        .collect();
    let a: Vec<f64> = (0..m).map(|x| phi[x] * w[x]).collect();
    PathLaw::product(&a, &kernels, psi)
}

#[derive(Debug, Clone)]
pub struct ConditionalReport {
    /// `max |E(h(Z_r) | Z_0..Z_s, Z_t..Z_n) - E(h(Z_r) | Z_s, Z_t)|`.
    pub defect: f64,
    /// Conditioning histories with positive probability.
    pub defined: usize,
    /// Conditioning histories of probability zero, excluded from the max.
    pub undefined: usize,
    /// `(z_s, z_t) -> E(h(Z_r) | Z_s, Z_t)`; absent when undefined.
    pub pair_values: Vec<Option<f64>>,
}

/// Both sides of the reciprocal conditioning identity, by enumeration.
pub fn chain_conditional(
    law: &PathLaw,
    s: usize,
    r: usize,
    t: usize,
    h: impl Fn(usize) -> f64,
) -> Result<ConditionalReport> {
    let n = law.steps;
    if !(s < r && r < t && t <= n) {
        return Err(LabError::InvalidSpec(format!("need s < r < t <= {n}, got {s}, {r}, {t}")));
    }
    let m = law.states;
    let mut full: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
    let mut pair = vec![(0.0, 0.0); m * m];
    let mut z = vec![0usize; n + 1];
    for (code, &w) in law.weights.iter().enumerate() {
        decode(code as u64, m, &mut z);
        let key: Vec<usize> = z[..=s].iter().chain(&z[t..]).copied().collect();
        let hv = h(z[r]);
        let e = full.entry(key).or_insert((0.0, 0.0));
        e.0 += w * hv;
        e.1 += w;
        let p = z[s] * m + z[t];
        pair[p].0 += w * hv;
        pair[p].1 += w;
    }
    let pair_values: Vec<Option<f64>> = pair
        .iter()
        .map(|&(num, den)| if den > 0.0 { Some(num / den) } else { None })
        .collect();
    let mut defect: f64 = 0.0;
    let (mut defined, mut undefined) = (0, 0);
    for (key, (num, den)) in &full {
        if !(*den > 0.0) {
            undefined += 1;
            continue;
        }
        defined += 1;
        let p = key[s] * m + key[s + 1];
        let rhs = pair_values[p].expect("positive sub-event implies positive pair event");
        defect = defect.max((num / den - rhs).abs());
    }
    Ok(ConditionalReport {
        defect,
        defined,
        undefined,
        pair_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(l: &str, v: &str, steps: usize) -> ProblemSpec {
        ProblemSpec::builder().drift(l).potential(v).nodes(16).steps(steps).build().unwrap()
    }

    #[test]
    fn two_state_chain_has_closed_form_exponential() {
        let s = spec("0", "0", 10);
        let c = build_chain(&s, 2).unwrap();
        let q = c.generator(0);
        // h = 1: ghost reflection gives rate 1/h²
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]));
        let p = c.transition(0, 10);
        let e = (-2.0f64).exp();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0 + e, 1.0 - e, 1.0 - e, 1.0 + e]) * 0.5;
        assert!((p - expect).abs().max() < 1e-14);
    }

    #[test]
    fn rows_sum_to_zero_and_potential_shifts_diagonal() {
        let s = spec("0.4*sin(pi*x)", "0", 10);
        let c = build_chain(&s, 7).unwrap();
        let q = c.generator(0);
        for i in 0..7 {
            assert!(q.row(i).sum().abs() < 1e-12);
            for j in 0..7 {
                if i != j {
                    assert!(q[(i, j)] >= 0.0);
                }
            }
        }
        let c2 = build_chain(&spec("0.4*sin(pi*x)", "2.5", 10), 7).unwrap();
        let diff = c2.generator(0) - q;
        for i in 0..7 {
            for j in 0..7 {
                let expect = if i == j { -2.5 } else { 0.0 };
                assert!((diff[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constants_propagate_and_green_is_positive() {
        let s = spec("0.3*sin(pi*x)", "0", 20);
        let c = build_chain(&s, 9).unwrap();
        let u = chain_solve(&c, &[1.0; 9], Direction::Forward).unwrap();
        assert!(u.values.iter().all(|v| (v - 1.0).abs() < 1e-13));
        assert!(c.green().iter().all(|&g| g > 0.0));
        assert!(build_chain(&s, 65).is_err());
    }

    #[test]
    fn discrete_endpoint_marginals_match_chain_solves() {
        let s = spec("0.3*sin(pi*x)", "x^2", 12);
        let c = build_chain(&s, 5).unwrap();
        let grid = c.grid.clone();
        let phi: Vec<f64> = (0..5).map(|n| 2.0 + (std::f64::consts::PI * grid.coord(n)[0]).cos()).collect();
        let psi: Vec<f64> = (0..5).map(|n| 1.0 + grid.coord(n)[0]).collect();
        let law = bernstein_law(&c, &phi, &psi, 3).unwrap();
        let u = chain_solve(&c, &phi, Direction::Forward).unwrap();
        let v = chain_solve(&c, &psi, Direction::Backward).unwrap();
        let last = grid.levels() - 1;
        let z: f64 = (0..5).map(|x| c.weights[x] * phi[x] * v.at(0, x)).sum();
        let (m0, mt) = (law.marginal(0), law.marginal(3));
        for x in 0..5 {
            let w = c.weights[x];
            assert!((m0[x] - w * phi[x] * v.at(0, x) / z).abs() < 1e-13);
            assert!((mt[x] - w * u.at(last, x) * psi[x] / z).abs() < 1e-13);
        }
    }

    #[test]
    fn markov_law_is_reciprocal() {
        let s = spec("0.5*sin(pi*x)", "x", 12);
        let c = build_chain(&s, 3).unwrap();
        let law = bernstein_law(&c, &[1.0, 2.0, 1.5], &[0.5, 1.0, 3.0], 4).unwrap();
        let r = chain_conditional(&law, 1, 2, 4, |z| [0.3, -1.0, 2.0][z]).unwrap();
        assert!(r.defect < 1e-13, "{}", r.defect);
        assert_eq!(r.undefined, 0);
        let r = chain_conditional(&law, 0, 2, 3, |_| 1.0).unwrap();
        assert!(r.defect < 1e-15);
        assert!(r.pair_values.iter().all(|v| (v.unwrap() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn history_dependent_law_is_detected() {
        let s = spec("0", "0", 12);
        let c = build_chain(&s, 3).unwrap();
        let law = bernstein_law(&c, &[1.0; 3], &[1.0; 3], 4).unwrap();
        let bent = law.reweighted(|z| if z[0] == z[2] { 3.0 } else { 1.0 }).unwrap();
        let r = chain_conditional(&bent, 1, 2, 3, |z| z as f64).unwrap();
        assert!(r.defect > 1e-3, "{}", r.defect);
    }

    #[test]
    fn null_events_are_excluded() {
        let s = spec("0", "0", 12);
        let c = build_chain(&s, 3).unwrap();
        let law = bernstein_law(&c, &[1.0; 3], &[1.0; 3], 4).unwrap();
        let cut = law.reweighted(|z| if z[0] == 0 { 0.0 } else { 1.0 }).unwrap();
        let r = chain_conditional(&cut, 1, 2, 3, |z| z as f64).unwrap();
        assert!(r.undefined > 0);
        assert!(r.defect < 1e-13);
    }

    #[test]
    fn enumeration_cap() {
        let k = vec![DMatrix::from_element(8, 8, 1.0); 9];
        assert!(matches!(PathLaw::product(&[1.0; 8], &k, &[1.0; 8]), Err(LabError::SizeLimit(_))));
    }
}
