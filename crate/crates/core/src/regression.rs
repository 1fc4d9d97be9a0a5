//! Polynomial ridge regression used for conditional expectations.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub basis_degree: usize,
    pub ridge: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig { basis_degree: 2, ridge: 1e-8 }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.basis_degree) {
            return Err(Error::config("regression.basis_degree", "must be between 1 and 4"));
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(Error::config("regression.ridge", "must be positive"));
        }
        Ok(())
    }
}

/// Monomials of total degree at most `degree` in standardized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    n: usize,
    exponents: Vec<Vec<u32>>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

fn monomials(n: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; n]];
    for total in 1..=degree as u32 {
        let mut stack = vec![(0usize, vec![0u32; n], total)];
        while let Some((c, e, left)) = stack.pop() {
            if c == n - 1 {
                let mut e = e;
                e[c] = left;
                out.push(e);
                continue;
            }
            for k in (0..=left).rev() {
                let mut e2 = e.clone();
                e2[c] = k;
                stack.push((c + 1, e2, left - k));
            }
        }
    }
    out
}

impl Basis {
    /// Standardizes against the per-coordinate mean and standard deviation of `cloud`.
    pub fn fit(cloud: &[f64], n: usize, degree: usize) -> Basis {
        let count = (cloud.len() / n).max(1) as f64;
        let mut center = vec![0.0; n];
        for row in cloud.chunks(n) {
            for c in 0..n {
                center[c] += row[c];
            }
        }
        center.iter_mut().for_each(|v| *v /= count);
        let mut scale = vec![0.0; n];
        for row in cloud.chunks(n) {
            for c in 0..n {
                scale[c] += (row[c] - center[c]).powi(2);
            }
        }
        for s in scale.iter_mut() {
            *s = (*s / count).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Basis { n, exponents: monomials(n, degree), center, scale }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn standardize(&self, x: &[f64], z: &mut [f64]) {
        for c in 0..self.n {
            z[c] = (x[c] - self.center[c]) / self.scale[c];
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut z = [0.0; 8];
        let z = if self.n <= 8 { &mut z[..self.n] } else { return self.eval_slow(x, out) };
        self.standardize(x, z);
        for (m, e) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for c in 0..self.n {
                v *= z[c].powi(e[c] as i32);
            }
            out[m] = v;
        }
    }

    fn eval_slow(&self, x: &[f64], out: &mut [f64]) {
        let mut z = vec![0.0; self.n];
        self.standardize(x, &mut z);
        for (m, e) in self.exponents.iter().enumerate() {
            out[m] = (0..self.n).map(|c| z[c].powi(e[c] as i32)).product();
        }
    }

    /// Directional derivative of the features along `dx`.
    pub fn eval_tangent(&self, x: &[f64], dx: &[f64], out: &mut [f64]) {
        let mut z = vec![0.0; self.n];
        self.standardize(x, &mut z);
        for (m, e) in self.exponents.iter().enumerate() {
            let mut d = 0.0;
            for c in 0..self.n {
                if e[c] == 0 || dx[c] == 0.0 {
                    continue;
                }
                let mut term = e[c] as f64 * z[c].powi(e[c] as i32 - 1) * dx[c] / self.scale[c];
                for c2 in 0..self.n {
                    if c2 != c {
                        term *= z[c2].powi(e[c2] as i32);
                    }
                }
                d += term;
            }
            out[m] = d;
        }
    }
}

/// Cholesky factor of a ridge-regularized normal matrix.
#[derive(Clone, Debug)]
pub struct NormalSystem {
    chol: Cholesky<f64, Dyn>,
}

impl NormalSystem {
    /// `gram` is the averaged outer product of features whose first entry is the
    /// constant; the ridge leaves that entry unpenalized. `step` is reported on failure.
    pub fn new(mut gram: DMatrix<f64>, ridge: f64, step: usize) -> Result<Self> {
        for i in 1..gram.nrows() {
            gram[(i, i)] += ridge;
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularRegression { step });
        }
        let chol = Cholesky::new(gram).ok_or(Error::SingularRegression { step })?;
        Ok(NormalSystem { chol })
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 2).len(), 3);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 3).len(), 20);
        let m = monomials(2, 2);
        let mut sorted = m.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), m.len());
    }

    #[test]
    fn feature_tangent_matches_finite_difference() {
        let cloud = vec![0.1, 2.0, -0.4, 1.0, 0.9, -0.5, 1.3, 0.2];
        let b = Basis::fit(&cloud, 2, 3);
        let x = [0.3, -0.7];
        let dx = [0.4, 1.1];
        let mut t = vec![0.0; b.len()];
        b.eval_tangent(&x, &dx, &mut t);
        let h = 1e-6;
        let mut p = vec![0.0; b.len()];
        let mut m = vec![0.0; b.len()];
        b.eval(&[x[0] + h * dx[0], x[1] + h * dx[1]], &mut p);
        b.eval(&[x[0] - h * dx[0], x[1] - h * dx[1]], &mut m);
        for k in 0..b.len() {
            assert!(((p[k] - m[k]) / (2.0 * h) - t[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn exact_quadratic_is_recovered() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 10.0 - 2.0).collect();
        let b = Basis::fit(&xs, 1, 2);
        let mut gram = DMatrix::zeros(3, 3);
        let mut rhs = DMatrix::zeros(3, 1);
        let mut f = vec![0.0; 3];
        for x in &xs {
            b.eval(&[*x], &mut f);
            let y = 1.0 - 2.0 * x + 0.5 * x * x;
            for i in 0..3 {
                rhs[(i, 0)] += f[i] * y / 50.0;
                for j in 0..3 {
                    gram[(i, j)] += f[i] * f[j] / 50.0;
                }
            }
        }
        let beta = NormalSystem::new(gram, 1e-12, 0).unwrap().solve(&rhs);
        b.eval(&[0.77], &mut f);
        let pred: f64 = (0..3).map(|i| f[i] * beta[(i, 0)]).sum();
        assert!((pred - (1.0 - 1.54 + 0.5 * 0.77 * 0.77)).abs() < 1e-9);
    }
}
