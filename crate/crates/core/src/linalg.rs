//! Banded matrices and an unpivoted banded LU with plain and transposed solves.

use crate::error::{LabError, Result};

/// Square matrix with equal lower and upper bandwidth `b`, stored row-major
/// as `n x (2b + 1)`.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    b: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, b: usize) -> Self {
        Self {
            n,
            b,
            data: vec![0.0; n * (2 * b + 1)],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.b
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.b, "({i},{j}) outside band {}", self.b);
        i * (2 * self.b + 1) + (j + self.b - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.b {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    fn cols(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.b)..(i + self.b + 1).min(self.n)
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            out[i] = self.cols(i).map(|j| self.get(i, j) * x[j]).sum();
        }
    }

    pub fn mul_t_vec(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.n {
            for j in self.cols(i) {
                out[j] += self.get(i, j) * x[i];
            }
        }
    }

    pub fn factor(self) -> Result<BandLu> {
        BandLu::new(self)
    }
}

/// `A = LU` with unit lower `L`, both stored in the band of `A`.
#[derive(Debug, Clone)]
pub struct BandLu {
    a: BandMatrix,
}

impl BandLu {
    pub fn new(mut a: BandMatrix) -> Result<Self> {
        let (n, b) = (a.n, a.b);
        let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..n {
            let pivot = a.get(k, k);
            if !(pivot.abs() > 1e-14 * scale) {
                return Err(LabError::Solver(format!("zero pivot at row {k} of banded system")));
            }
            let end = (k + b + 1).min(n);
            for i in k + 1..end {
                let lik = a.get(i, k) / pivot;
                if lik == 0.0 {
                    continue;
                }
                a.set(i, k, lik);
                for j in k + 1..end {
                    let akj = a.get(k, j);
                    if akj != 0.0 {
                        a.add(i, j, -lik * akj);
                    }
                }
            }
        }
        Ok(Self { a })
    }

    pub fn size(&self) -> usize {
        self.a.n
    }

    /// Overwrites `x` with `A⁻¹ x`.
    pub fn solve(&self, x: &mut [f64]) {
        let (n, b) = (self.a.n, self.a.b);
        for i in 0..n {
            let mut s = x[i];
            for j in i.saturating_sub(b)..i {
                s -= self.a.get(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..(i + b + 1).min(n) {
                s -= self.a.get(i, j) * x[j];
            }
            x[i] = s / self.a.get(i, i);
        }
    }

    /// Overwrites `x` with `A⁻ᵀ x`.
    pub fn solve_transpose(&self, x: &mut [f64]) {
        let (n, b) = (self.a.n, self.a.b);
        // Uᵀ z = x
        for i in 0..n {
            let mut s = x[i];
            for j in i.saturating_sub(b)..i {
                s -= self.a.get(j, i) * x[j];
            }
            x[i] = s / self.a.get(i, i);
        }
        // Lᵀ y = z
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..(i + b + 1).min(n) {
                s -= self.a.get(j, i) * x[j];
            }
            x[i] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_band(n: usize, b: usize, seed: &[f64]) -> BandMatrix {
        let mut m = BandMatrix::zeros(n, b);
        let mut c = 0;
        for i in 0..n {
            for j in i.saturating_sub(b)..(i + b + 1).min(n) {
                let v = seed[c % seed.len()];
                c += 1;
                m.set(i, j, if i == j { 4.0 * (b as f64 + 1.0) + v } else { v });
            }
        }
        m
    }

    proptest! {
        #[test]
        fn solves_invert_products(
            n in 1usize..30,
            b in 0usize..5,
            vals in proptest::collection::vec(-1.0f64..1.0, 8..40),
            x in proptest::collection::vec(-5.0f64..5.0, 30),
        ) {
            let m = random_band(n, b, &vals);
            let x = &x[..n];
            let mut ax = vec![0.0; n];
            m.mul_vec(x, &mut ax);
            let mut atx = vec![0.0; n];
            m.mul_t_vec(x, &mut atx);
            let lu = m.factor().unwrap();
            lu.solve(&mut ax);
            lu.solve_transpose(&mut atx);
            for i in 0..n {
                prop_assert!((ax[i] - x[i]).abs() < 1e-10);
                prop_assert!((atx[i] - x[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = BandMatrix::zeros(3, 1);
        assert!(m.factor().is_err());
    }

    #[test]
    fn tridiagonal_known_solution() {
        // [2 -1 0; -1 2 -1; 0 -1 2] x = [1 0 1] -> x = [1 1 1]
        let mut m = BandMatrix::zeros(3, 1);
        for i in 0..3 {
            m.set(i, i, 2.0);
            if i > 0 {
                m.set(i, i - 1, -1.0);
                m.set(i - 1, i, -1.0);
            }
        }
        let lu = m.factor().unwrap();
        let mut x = vec![1.0, 0.0, 1.0];
        lu.solve(&mut x);
        for v in x {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }
}
