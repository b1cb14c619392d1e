//! Histograms and the goodness-of-fit statistics used by the verifiers.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{LabError, Result};

/// Equal-width histogram on `[lower, upper]`; the upper edge is inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lower: f64, upper: f64, bins: usize) -> Self {
        Self {
            lower,
            upper,
            counts: vec![0; bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self) -> Vec<f64> {
        let b = self.bins();
        (0..=b)
            .map(|i| {
                if i == b {
                    self.upper
                } else {
                    self.lower + (self.upper - self.lower) * i as f64 / b as f64
                }
            })
            .collect()
    }

    #[inline]
    pub fn bin_of(&self, x: f64) -> usize {
        let b = self.bins();
        let s = (x - self.lower) / (self.upper - self.lower) * b as f64;
        (s.max(0.0) as usize).min(b - 1)
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let i = self.bin_of(x);
        self.counts[i] += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub critical: f64,
    pub p_value: f64,
    pub level: f64,
    pub pass: bool,
}

fn chi2_verdict(statistic: f64, dof: usize, level: f64) -> Result<ChiSquareTest> {
    if dof == 0 {
        return Err(LabError::Verification("chi-square test with zero degrees of freedom".into()));
    }
    let dist = ChiSquared::new(dof as f64).map_err(|e| LabError::Verification(e.to_string()))?;
    let critical = dist.inverse_cdf(1.0 - level);
    let p_value = 1.0 - dist.cdf(statistic);
    Ok(ChiSquareTest {
        statistic,
        dof,
        critical,
        p_value,
        level,
        pass: statistic <= critical,
    })
}

/// Pearson test of observed counts against bin probabilities.
pub fn chi_square_gof(hist: &Histogram, probs: &[f64], level: f64) -> Result<ChiSquareTest> {
    if probs.len() != hist.bins() {
        return Err(LabError::Mismatch("bin probabilities do not match histogram".into()));
    }
    let n = hist.total() as f64;
    let total_p: f64 = probs.iter().sum();
    let mut stat = 0.0;
    let mut used = 0;
    for (&o, &p) in hist.counts.iter().zip(probs) {
        let e = n * p / total_p;
        if e > 0.0 {
            stat += (o as f64 - e).powi(2) / e;
            used += 1;
        } else if o > 0 {
            stat = f64::INFINITY;
        }
    }
    chi2_verdict(stat, used.max(1) - 1, level)
}

/// Two-sample homogeneity test on a common binning.
pub fn chi_square_two_sample(a: &Histogram, b: &Histogram, level: f64) -> Result<ChiSquareTest> {
    if a.bins() != b.bins() {
        return Err(LabError::Mismatch("histograms have different binnings".into()));
    }
    let (na, nb) = (a.total() as f64, b.total() as f64);
    let (ka, kb) = ((nb / na).sqrt(), (na / nb).sqrt());
    let mut stat = 0.0;
    let mut used = 0;
    for (&r, &s) in a.counts.iter().zip(&b.counts) {
        let tot = (r + s) as f64;
        if tot > 0.0 {
            stat += (ka * r as f64 - kb * s as f64).powi(2) / tot;
            used += 1;
        }
    }
    if used <= 1 {
        // both samples sit in the same single bin
        return Ok(ChiSquareTest {
            statistic: 0.0,
            dof: 0,
            critical: 0.0,
            p_value: 1.0,
            level,
            pass: true,
        });
    }
    chi2_verdict(stat, used - 1, level)
}

/// One-sample Kolmogorov–Smirnov statistic against a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at level 1%.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Streaming mean/variance plus third and fourth raw moments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s4: f64,
}

impl Moments {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let x2 = x * x;
        self.n += 1;
        self.s1 += x;
        self.s2 += x2;
        self.s3 += x2 * x;
        self.s4 += x2 * x2;
    }

    pub fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.s1 += o.s1;
        self.s2 += o.s2;
        self.s3 += o.s3;
        self.s4 += o.s4;
    }

    pub fn mean(&self) -> f64 {
        self.s1 / self.n as f64
    }

    /// Raw second moment.
    pub fn second(&self) -> f64 {
        self.s2 / self.n as f64
    }

    pub fn fourth(&self) -> f64 {
        self.s4 / self.n as f64
    }

    pub fn variance(&self) -> f64 {
        let n = self.n as f64;
        ((self.s2 - self.s1 * self.s1 / n) / (n - 1.0)).max(0.0)
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn critical_value_for_31_dof() {
        let t = chi2_verdict(0.0, 31, 0.01).unwrap();
        assert!((t.critical - 52.191).abs() < 1e-2);
    }

    #[test]
    fn uniform_samples_pass_and_skewed_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut h = Histogram::new(0.0, 1.0, 32);
        let mut skew = Histogram::new(0.0, 1.0, 32);
        let mut xs = Vec::new();
        for _ in 0..100_000 {
            let x: f64 = rng.random();
            h.add(x);
            skew.add(x.powf(1.1));
            xs.push(x);
        }
        let p = vec![1.0 / 32.0; 32];
        assert!(chi_square_gof(&h, &p, 0.01).unwrap().pass);
        assert!(!chi_square_gof(&skew, &p, 0.01).unwrap().pass);
        assert!(chi_square_two_sample(&h, &h, 0.01).unwrap().pass);
        assert!(!chi_square_two_sample(&h, &skew, 0.01).unwrap().pass);
        let mut point = Histogram::new(0.0, 1.0, 32);
        point.add(0.5);
        assert!(chi_square_two_sample(&point, &point, 0.01).unwrap().pass);
        assert!(ks_statistic(&mut xs, |x| x) < ks_critical_1pct(xs.len()));
    }

    #[test]
    fn histogram_edges_and_bins() {
        let mut h = Histogram::new(0.0, 1.0, 4);
        h.add(0.0);
        h.add(1.0);
        h.add(0.5);
        assert_eq!(h.counts, vec![1, 0, 1, 1]);
        assert_eq!(h.edges(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn moments_of_a_small_sample() {
        let mut m = Moments::default();
        for x in [1.0, 2.0, 3.0, 4.0] {
            m.add(x);
        }
        assert_eq!(m.mean(), 2.5);
        assert!((m.variance() - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.fourth(), (1.0 + 16.0 + 81.0 + 256.0) / 4.0);
    }
}
