//! Empirical measures with uniform weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest ensemble accepted by the exact multi-dimensional assignment.
pub const W2_ASSIGNMENT_LIMIT: usize = 2000;

/// Uniformly weighted particle cloud in `R^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    /// `points` is row-major `N x dim`.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("measure dimension must be positive"));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::domain(format!(
                "{} coordinates do not form a non-empty cloud in dimension {dim}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("particle {} has a non-finite coordinate", i / dim)));
        }
        Ok(EmpiricalMeasure { dim, points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::domain("rows have inconsistent dimensions"));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(point.len(), point.to_vec())
    }

    /// Independent Gaussian draws with per-coordinate mean and standard deviation.
    pub fn sample_gaussian(size: usize, mean: &[f64], std: &[f64], seed: u64) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::domain("mean and std lengths differ"));
        }
        if std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::domain("standard deviations must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(size * mean.len());
        for _ in 0..size {
            for (m, s) in mean.iter().zip(std) {
                let z: f64 = StandardNormal.sample(&mut rng);
                points.push(m + s * z);
            }
        }
        Self::new(mean.len(), points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    pub fn mean(&self) -> Vec<f64> {
        mf_expectation(self, self.dim, |y| y.to_vec())
    }

    /// Cloud translated by `shift`.
    pub fn shifted(&self, shift: &[f64]) -> Self {
        let points = self.points.iter().enumerate().map(|(k, v)| v + shift[k % self.dim]).collect();
        EmpiricalMeasure { dim: self.dim, points }
    }

    /// Cloud moved particle-wise along `direction` (row-major `N x dim`) by `eps`.
    pub fn perturbed(&self, direction: &[f64], eps: f64) -> Self {
        assert_eq!(direction.len(), self.points.len());
        let points = self.points.iter().zip(direction).map(|(v, d)| v + eps * d).collect();
        EmpiricalMeasure { dim: self.dim, points }
    }
}

fn norm(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `|m|_1 = (1/N) sum |x_i|`.
pub fn moment1(mu: &EmpiricalMeasure) -> f64 {
    mf_expectation(mu, 1, |y| vec![norm(y)])[0]
}

/// `|m|_2 = sqrt((1/N) sum |x_i|^2)`.
pub fn moment2(mu: &EmpiricalMeasure) -> f64 {
    mf_expectation(mu, 1, |y| vec![y.iter().map(|v| v * v).sum()])[0].sqrt()
}

/// Uniform average of a vector-valued kernel over the particles.
pub fn mf_expectation<F>(mu: &EmpiricalMeasure, out_dim: usize, kernel: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut acc = vec![0.0; out_dim];
    for y in mu.iter() {
        let k = kernel(y);
        assert_eq!(k.len(), out_dim, "kernel output has the wrong length");
        acc.iter_mut().zip(k).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / mu.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Evenly spaced subsample of `size` particles.
fn subsample(mu: &EmpiricalMeasure, size: usize) -> EmpiricalMeasure {
    if size == mu.len() {
        return mu.clone();
    }
    let n = mu.len();
    let mut points = Vec::with_capacity(size * mu.dim);
    for k in 0..size {
        points.extend_from_slice(mu.point(k * n / size));
    }
    EmpiricalMeasure { dim: mu.dim, points }
}

/// Wasserstein-2 distance between two clouds.
///
/// Clouds of unequal size are compared after evenly subsampling the larger one.
/// One-dimensional clouds use the sorted coupling; higher dimensions use an exact
/// assignment and are limited to [`W2_ASSIGNMENT_LIMIT`] particles.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim != nu.dim {
        return Err(Error::domain("measures live in different dimensions"));
    }
    let size = mu.len().min(nu.len());
    let (a, b) = (subsample(mu, size), subsample(nu, size));
    if a.dim == 1 {
        let mut x = a.points.clone();
        let mut y = b.points.clone();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        let s: f64 = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum();
        return Ok((s / size as f64).sqrt());
    }
    if size > W2_ASSIGNMENT_LIMIT {
        return Err(Error::SizeLimit(format!(
            "exact assignment supports at most {W2_ASSIGNMENT_LIMIT} particles, got {size}"
        )));
    }
    let cost = |i: usize, j: usize| -> f64 {
        a.point(i).iter().zip(b.point(j)).map(|(p, q)| (p - q).powi(2)).sum()
    };
    let assignment = hungarian(size, cost);
    let s: f64 = assignment.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
    Ok((s / size as f64).sqrt())
}

/// Minimum-cost perfect matching on a dense square cost matrix (shortest augmenting paths).
fn hungarian(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cloud(rows: &[&[f64]]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn moment1_examples() {
        assert_relative_eq!(moment1(&cloud(&[&[3.0, 4.0], &[0.0, 0.0]])), 2.5);
        assert_eq!(moment1(&EmpiricalMeasure::dirac(&[0.0]).unwrap()), 0.0);
        let mu = EmpiricalMeasure::sample_gaussian(1000, &[0.0], &[1.0], 11).unwrap();
        let mc = (1.0 - 2.0 / std::f64::consts::PI).sqrt() / 1000f64.sqrt();
        assert!((moment1(&mu) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 3.0 * mc);
    }

    #[test]
    fn moment2_examples() {
        assert_relative_eq!(moment2(&cloud(&[&[3.0, 4.0], &[0.0, 0.0]])), 12.5f64.sqrt());
        assert_relative_eq!(moment2(&EmpiricalMeasure::dirac(&[1.0, 0.0]).unwrap()), 1.0);
        assert_relative_eq!(moment2(&cloud(&[&[-1.0], &[1.0]])), 1.0);
    }

    #[test]
    fn expectation_examples() {
        let mu = cloud(&[&[1.0], &[3.0]]);
        assert_relative_eq!(mf_expectation(&mu, 1, |y| vec![y[0]])[0], 2.0);
        assert_relative_eq!(mf_expectation(&mu, 1, |_| vec![1.0])[0], 1.0);
        let big = EmpiricalMeasure::sample_gaussian(100_000, &[0.0], &[1.0], 5).unwrap();
        let m2 = mf_expectation(&big, 1, |y| vec![y[0] * y[0]])[0];
        assert!((m2 - 1.0).abs() < 3.0 * (2.0 / 1e5f64).sqrt());
    }

    #[test]
    fn wasserstein_examples() {
        let mu = cloud(&[&[0.0], &[1.0]]);
        assert_eq!(wasserstein2(&mu, &mu).unwrap(), 0.0);
        let a = EmpiricalMeasure::dirac(&[2.0]).unwrap();
        let b = EmpiricalMeasure::dirac(&[-1.5]).unwrap();
        assert_relative_eq!(wasserstein2(&a, &b).unwrap(), 3.5);
        let nu = cloud(&[&[0.5], &[1.5]]);
        // Couplings {0->0.5, 1->1.5} and {0->1.5, 1->0.5} cost 0.25 and 1.25.
        assert_relative_eq!(wasserstein2(&mu, &nu).unwrap(), 0.5);
    }

    #[test]
    fn assignment_matches_brute_force_in_2d() {
        let mu = EmpiricalMeasure::sample_gaussian(6, &[0.0, 0.0], &[1.0, 1.0], 1).unwrap();
        let nu = EmpiricalMeasure::sample_gaussian(6, &[0.5, -0.2], &[1.0, 2.0], 2).unwrap();
        let mut perm: Vec<usize> = (0..6).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let c: f64 = (0..6)
                .map(|i| mu.point(i).iter().zip(nu.point(p[i])).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum();
            best = best.min(c);
        });
        assert_relative_eq!(wasserstein2(&mu, &nu).unwrap(), (best / 6.0).sqrt(), epsilon = 1e-12);
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn multi_d_size_limit() {
        let mu = EmpiricalMeasure::sample_gaussian(W2_ASSIGNMENT_LIMIT + 1, &[0.0, 0.0], &[1.0, 1.0], 1).unwrap();
        assert!(matches!(wasserstein2(&mu, &mu), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn rejects_non_finite_points() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, f64::NAN]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![0.0]).is_err());
    }
}
