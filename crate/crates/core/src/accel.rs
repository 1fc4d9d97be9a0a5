//! Anderson acceleration of a fixed-point map `x -> G(x)`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

/// Mixing over the last `depth` iterates; `depth = 0` is plain relaxation
/// `x + beta (G(x) - x)`.
#[derive(Clone, Debug)]
pub(crate) struct Anderson {
    depth: usize,
    pub beta: f64,
    xs: VecDeque<Vec<f64>>,
    fs: VecDeque<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Anderson {
    pub fn new(depth: usize, beta: f64) -> Self {
        Anderson { depth, beta, xs: VecDeque::new(), fs: VecDeque::new() }
    }

    pub fn reset(&mut self) {
        self.xs.clear();
        self.fs.clear();
    }

    /// Next iterate from the current `x` and its image `g = G(x)`.
    pub fn step(&mut self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let f: Vec<f64> = g.iter().zip(x).map(|(a, b)| a - b).collect();
        let mut next: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + self.beta * b).collect();
        if self.depth == 0 {
            return next;
        }
        self.xs.push_back(x.to_vec());
        self.fs.push_back(f.clone());
        if self.xs.len() > self.depth + 1 {
            self.xs.pop_front();
            self.fs.pop_front();
        }
        let m = self.xs.len() - 1;
        if m == 0 {
            return next;
        }
        let df: Vec<Vec<f64>> = (0..m).map(|i| self.fs[i + 1].iter().zip(&self.fs[i]).map(|(a, b)| a - b).collect()).collect();
        let mut gram = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for i in 0..m {
            rhs[i] = dot(&df[i], &f);
            for j in i..m {
                let v = dot(&df[i], &df[j]);
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let scale = (0..m).map(|i| gram[(i, i)]).fold(0.0, f64::max);
        if scale == 0.0 {
            return next;
        }
        for i in 0..m {
            gram[(i, i)] += 1e-12 * scale;
        }
        let Some(gamma) = gram.cholesky().map(|c| c.solve(&rhs)) else {
            return next;
        };
        for i in 0..m {
            let gi = gamma[i];
            let (x0, x1) = (&self.xs[i], &self.xs[i + 1]);
            for (k, v) in next.iter_mut().enumerate() {
                *v -= gi * ((x1[k] - x0[k]) + self.beta * df[i][k]);
            }
        }
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_linear_fixed_point_in_few_steps() {
        // G(x) = A x + b with eigenvalues of A in (-13, 0.5); plain iteration diverges.
        let diag = [-13.0, -4.0, -0.5, 0.2, 0.5];
        let b = [1.0, -2.0, 0.5, 3.0, 1.0];
        let fixed: Vec<f64> = diag.iter().zip(&b).map(|(a, b)| b / (1.0 - a)).collect();
        let mut acc = Anderson::new(5, 0.5);
        let mut x = vec![0.0; 5];
        for _ in 0..12 {
            let g: Vec<f64> = x.iter().zip(diag.iter().zip(&b)).map(|(x, (a, b))| a * x + b).collect();
            x = acc.step(&x, &g);
        }
        for (a, b) in x.iter().zip(&fixed) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_depth_is_relaxation() {
        let mut acc = Anderson::new(0, 0.25);
        assert_eq!(acc.step(&[1.0, 2.0], &[3.0, 2.0]), vec![1.5, 2.0]);
    }
}
