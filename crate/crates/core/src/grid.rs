//! Tensor-product space-time grids and the grid functions that live on them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Spatial dimension limit.
pub const MAX_DIM: usize = 2;

/// Fixed-capacity point; only the first `dim` entries are meaningful.
pub type Point = [f64; MAX_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(lower: f64, upper: f64, nodes: usize) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(LabError::InvalidSpec(format!("empty axis [{lower}, {upper}]")));
        }
        if nodes < 2 {
            return Err(LabError::InvalidSpec("an axis needs at least two nodes".into()));
        }
        Ok(Self { lower, upper, nodes })
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.nodes - 1) as f64
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Node coordinate; the last node sits exactly on the upper face.
    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.upper
        } else {
            self.lower + i as f64 * self.spacing()
        }
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        let h = self.spacing();
        if i == 0 || i + 1 == self.nodes {
            0.5 * h
        } else {
            h
        }
    }

    /// Cell index and local coordinate in [0, 1] for linear interpolation.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let h = self.spacing();
        let s = ((x - self.lower) / h).max(0.0);
        let cell = (s.floor() as usize).min(self.nodes - 2);
        let frac = (s - cell as f64).clamp(0.0, 1.0);
        (cell, frac)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

/// Nodes of the closed box times uniform time levels `0 = t_0 < ... < t_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
    times: Vec<f64>,
}

/// Multilinear interpolation weights: up to `2^d` (node, weight) pairs.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
    pub len: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>, times: Vec<f64>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_DIM {
            return Err(LabError::InvalidSpec(format!(
                "dimension {} not supported",
                axes.len()
            )));
        }
        if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LabError::InvalidSpec("time levels must increase strictly".into()));
        }
        Ok(Self { axes, times })
    }

    /// Uniform time levels on [0, horizon].
    pub fn uniform(axes: Vec<Axis>, horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(LabError::InvalidSpec("horizon and step count must be positive".into()));
        }
        let k = horizon / steps as f64;
        let times = (0..=steps)
            .map(|n| if n == steps { horizon } else { n as f64 * k })
            .collect();
        Self::new(axes, times)
    }

    /// Same space grid with a single time level.
    pub fn snapshot(&self, t: f64) -> Grid {
        Grid {
            axes: self.axes.clone(),
            times: vec![t],
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, a: usize) -> &Axis {
        &self.axes[a]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn levels(&self) -> usize {
        self.times.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    /// Axis indices of a flat node index (axis 0 fastest).
    #[inline]
    pub fn multi_index(&self, node: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        let mut rest = node;
        for (a, axis) in self.axes.iter().enumerate() {
            out[a] = rest % axis.nodes;
            rest /= axis.nodes;
        }
        out
    }

    #[inline]
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for (a, axis) in self.axes.iter().enumerate() {
            flat += idx[a] * stride;
            stride *= axis.nodes;
        }
        flat
    }

    /// Flat-index offset of a unit move along axis `a`.
    pub fn stride(&self, a: usize) -> usize {
        self.axes[..a].iter().map(|ax| ax.nodes).product()
    }

    pub fn coord(&self, node: usize) -> Point {
        let idx = self.multi_index(node);
        let mut p = [0.0; MAX_DIM];
        for (a, axis) in self.axes.iter().enumerate() {
            p[a] = axis.coord(idx[a]);
        }
        p
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let idx = self.multi_index(node);
        self.axes
            .iter()
            .enumerate()
            .any(|(a, ax)| idx[a] == 0 || idx[a] + 1 == ax.nodes)
    }

    /// True when every axis index is at least `margin` nodes away from both faces.
    pub fn is_interior(&self, node: usize, margin: usize) -> bool {
        let idx = self.multi_index(node);
        self.axes
            .iter()
            .enumerate()
            .all(|(a, ax)| idx[a] >= margin && idx[a] + margin < ax.nodes)
    }

    /// Product trapezoid weights.
    pub fn weights(&self) -> Vec<f64> {
        (0..self.node_count())
            .map(|n| {
                let idx = self.multi_index(n);
                self.axes
                    .iter()
                    .enumerate()
                    .map(|(a, ax)| ax.weight(idx[a]))
                    .product()
            })
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.axes.iter().map(Axis::width).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.axes.iter().enumerate().all(|(a, ax)| ax.contains(x[a]))
    }

    pub fn min_spacing(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).fold(0.0, f64::max)
    }

    #[inline]
    pub fn stencil(&self, x: &[f64]) -> Stencil {
        let (c0, f0) = self.axes[0].locate(x[0]);
        if self.axes.len() == 1 {
            return Stencil {
                nodes: [c0, c0 + 1, 0, 0],
                weights: [1.0 - f0, f0, 0.0, 0.0],
                len: 2,
            };
        }
        let (c1, f1) = self.axes[1].locate(x[1]);
        let n0 = self.axes[0].nodes;
        let base = c0 + n0 * c1;
        Stencil {
            nodes: [base, base + 1, base + n0, base + n0 + 1],
            weights: [
                (1.0 - f0) * (1.0 - f1),
                f0 * (1.0 - f1),
                (1.0 - f0) * f1,
                f0 * f1,
            ],
            len: 4,
        }
    }

    /// Largest level with `t_n <= t` (up to a relative slack).
    pub fn level_floor(&self, t: f64) -> usize {
        let slack = 1e-9 * self.horizon();
        match self.times.iter().rposition(|&tn| tn <= t + slack) {
            Some(n) => n,
            None => 0,
        }
    }

    /// Smallest level with `t_n >= t` (up to a relative slack).
    pub fn level_ceil(&self, t: f64) -> usize {
        let slack = 1e-9 * self.horizon();
        match self.times.iter().position(|&tn| tn >= t - slack) {
            Some(n) => n,
            None => self.times.len() - 1,
        }
    }

    pub fn same_space(&self, other: &Grid) -> bool {
        self.axes == other.axes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Forward,
    Adjoint,
    Density,
    Potential,
    Drift,
    Defect,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftKind {
    L,
    BStar,
    B,
    CStar,
    C,
}

#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Arc<Grid>,
    pub kind: FieldKind,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Arc<Grid>, kind: FieldKind) -> Self {
        let len = grid.levels() * grid.node_count();
        Self {
            grid,
            kind,
            values: vec![0.0; len],
        }
    }

    pub fn from_levels(grid: Arc<Grid>, kind: FieldKind, levels: Vec<Vec<f64>>) -> Result<Self> {
        let nn = grid.node_count();
        if levels.len() != grid.levels() || levels.iter().any(|l| l.len() != nn) {
            return Err(LabError::Mismatch("level data does not match grid".into()));
        }
        Ok(Self {
            grid,
            kind,
            values: levels.concat(),
        })
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let nn = self.grid.node_count();
        &self.values[n * nn..(n + 1) * nn]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        let nn = self.grid.node_count();
        &mut self.values[n * nn..(n + 1) * nn]
    }

    pub fn at(&self, level: usize, node: usize) -> f64 {
        self.values[level * self.grid.node_count() + node]
    }

    #[inline]
    pub fn interp(&self, level: usize, x: &[f64]) -> f64 {
        let s = self.grid.stencil(x);
        let vals = self.level(level);
        (0..s.len).map(|i| s.weights[i] * vals[s.nodes[i]]).sum()
    }

    /// Quadrature of one level against the trapezoid weights.
    pub fn integral(&self, level: usize) -> f64 {
        self.grid
            .weights()
            .iter()
            .zip(self.level(level))
            .map(|(w, v)| w * v)
            .sum()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            kind: self.kind,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Pointwise product of two fields on the same grid.
    pub fn product(&self, other: &ScalarField, kind: FieldKind) -> Result<Self> {
        if self.grid != other.grid {
            return Err(LabError::Mismatch("fields live on different grids".into()));
        }
        Ok(Self {
            grid: self.grid.clone(),
            kind,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect(),
        })
    }

    /// First nonpositive or non-finite entry as `(level, node, value)`.
    pub fn first_nonpositive(&self) -> Option<(usize, usize, f64)> {
        let nn = self.grid.node_count();
        self.values
            .iter()
            .position(|v| !(*v > 0.0) || !v.is_finite())
            .map(|i| (i / nn, i % nn, self.values[i]))
    }
}

#[derive(Debug, Clone)]
pub struct VectorField {
    pub grid: Arc<Grid>,
    pub kind: DriftKind,
    pub values: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: Arc<Grid>, kind: DriftKind) -> Self {
        let len = grid.levels() * grid.node_count() * grid.dim();
        Self {
            grid,
            kind,
            values: vec![0.0; len],
        }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    #[inline]
    pub fn get(&self, level: usize, node: usize) -> &[f64] {
        let d = self.dim();
        let off = (level * self.grid.node_count() + node) * d;
        &self.values[off..off + d]
    }

    #[inline]
    pub fn get_mut(&mut self, level: usize, node: usize) -> &mut [f64] {
        let d = self.dim();
        let off = (level * self.grid.node_count() + node) * d;
        &mut self.values[off..off + d]
    }

    #[inline]
    pub fn interp_into(&self, level: usize, x: &[f64], out: &mut [f64]) {
        let s = self.grid.stencil(x);
        let d = self.dim();
        let base = level * self.grid.node_count();
        out[..d].iter_mut().for_each(|o| *o = 0.0);
        for i in 0..s.len {
            let off = (base + s.nodes[i]) * d;
            for c in 0..d {
                out[c] += s.weights[i] * self.values[off + c];
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Row-major `d x d` blocks per (level, node); row `i` is the gradient of component `i`.
#[derive(Debug, Clone)]
pub struct TensorField {
    pub grid: Arc<Grid>,
    pub kind: DriftKind,
    pub values: Vec<f64>,
}

impl TensorField {
    pub fn zeros(grid: Arc<Grid>, kind: DriftKind) -> Self {
        let d = grid.dim();
        let len = grid.levels() * grid.node_count() * d * d;
        Self {
            grid,
            kind,
            values: vec![0.0; len],
        }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    #[inline]
    pub fn get(&self, level: usize, node: usize) -> &[f64] {
        let dd = self.dim() * self.dim();
        let off = (level * self.grid.node_count() + node) * dd;
        &self.values[off..off + dd]
    }

    #[inline]
    pub fn get_mut(&mut self, level: usize, node: usize) -> &mut [f64] {
        let dd = self.dim() * self.dim();
        let off = (level * self.grid.node_count() + node) * dd;
        &mut self.values[off..off + dd]
    }

    #[inline]
    pub fn interp_into(&self, level: usize, x: &[f64], out: &mut [f64]) {
        let s = self.grid.stencil(x);
        let dd = self.dim() * self.dim();
        let base = level * self.grid.node_count();
        out[..dd].iter_mut().for_each(|o| *o = 0.0);
        for i in 0..s.len {
            let off = (base + s.nodes[i]) * dd;
            for c in 0..dd {
                out[c] += s.weights[i] * self.values[off + c];
            }
        }
    }

    /// max over nodes and levels of |T - T^t|.
    pub fn max_asymmetry(&self) -> f64 {
        let d = self.dim();
        self.values
            .chunks(d * d)
            .map(|m| {
                let mut worst: f64 = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        worst = worst.max((m[i * d + j] - m[j * d + i]).abs());
                    }
                }
                worst
            })
            .fold(0.0, f64::max)
    }
}
