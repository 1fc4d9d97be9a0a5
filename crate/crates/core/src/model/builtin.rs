//! Built-in coefficient maps for the linear-quadratic family and the
//! exponential example drift.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{ArgDims, MeasureStats, SmoothMap};

/// `phi(y) = y`.
#[derive(Clone, Copy, Debug)]
pub struct MeanStats {
    pub n: usize,
}

impl MeasureStats for MeanStats {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn dim(&self) -> usize {
        self.n
    }
    fn phi(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(y)
    }
    fn grad(&self, _y: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.n, self.n)
    }
    fn hessians(&self, _y: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::zeros(self.n, self.n); self.n])
    }
}

/// `|y|` outside the unit interval, `-y^4/8 + 3y^2/4 + 3/8` inside.
pub fn example_phi(y: f64) -> f64 {
    if y.abs() >= 1.0 {
        y.abs()
    } else {
        -y.powi(4) / 8.0 + 0.75 * y * y + 0.375
    }
}

pub fn example_phi_prime(y: f64) -> f64 {
    if y.abs() >= 1.0 {
        y.signum()
    } else {
        -0.5 * y.powi(3) + 1.5 * y
    }
}

pub fn example_phi_second(y: f64) -> f64 {
    if y.abs() >= 1.0 {
        0.0
    } else {
        -1.5 * y * y + 1.5
    }
}

/// One-dimensional statistics `(y, phi(y))` used by [`ExampleDrift`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ExampleStats;

impl MeasureStats for ExampleStats {
    fn state_dim(&self) -> usize {
        1
    }
    fn dim(&self) -> usize {
        2
    }
    fn phi(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![y[0], example_phi(y[0])])
    }
    fn grad(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[1.0, example_phi_prime(y[0])])
    }
    fn hessians(&self, y: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, example_phi_second(y[0]))])
    }
}

/// Diagonal linear drift `b_c = a_c x_c + abar_c s_{o+c} + c_c v_c` with `d_0 = n`.
#[derive(Clone, Debug)]
pub struct LqDrift {
    pub a: Vec<f64>,
    pub abar: Vec<f64>,
    pub c: Vec<f64>,
    /// Number of statistics.
    pub k: usize,
    /// Index of the first mean coordinate inside the statistics.
    pub mean_offset: usize,
}

impl SmoothMap for LqDrift {
    fn args(&self) -> ArgDims {
        ArgDims { x: self.a.len(), s: self.k, v: self.a.len() }
    }
    fn out_dim(&self) -> usize {
        self.a.len()
    }
    fn eval(&self, _t: f64, z: &[f64]) -> DVector<f64> {
        let n = self.a.len();
        DVector::from_fn(n, |i, _| {
            self.a[i] * z[i] + self.abar[i] * z[n + self.mean_offset + i] + self.c[i] * z[n + self.k + i]
        })
    }
    fn jacobian(&self, _t: f64, _z: &[f64]) -> DMatrix<f64> {
        let n = self.a.len();
        let mut j = DMatrix::zeros(n, 2 * n + self.k);
        for i in 0..n {
            j[(i, i)] = self.a[i];
            j[(i, n + self.mean_offset + i)] = self.abar[i];
            j[(i, n + self.k + i)] = self.c[i];
        }
        j
    }
    fn hessians(&self, _t: f64, _z: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        let m = 2 * self.a.len() + self.k;
        Some(vec![DMatrix::zeros(m, m); self.a.len()])
    }
}

/// Separable quadratic `1/2 (sum wx x^2 + sum ws s^2 + sum wv v^2)`.
#[derive(Clone, Debug)]
pub struct DiagQuadratic {
    pub wx: Vec<f64>,
    pub ws: Vec<f64>,
    pub wv: Vec<f64>,
}

impl DiagQuadratic {
    fn weights(&self) -> impl Iterator<Item = &f64> {
        self.wx.iter().chain(&self.ws).chain(&self.wv)
    }
}

impl SmoothMap for DiagQuadratic {
    fn args(&self) -> ArgDims {
        ArgDims { x: self.wx.len(), s: self.ws.len(), v: self.wv.len() }
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, _t: f64, z: &[f64]) -> DVector<f64> {
        DVector::from_element(1, 0.5 * self.weights().zip(z).map(|(w, v)| w * v * v).sum::<f64>())
    }
    fn jacobian(&self, _t: f64, z: &[f64]) -> DMatrix<f64> {
        DMatrix::from_iterator(1, z.len(), self.weights().zip(z).map(|(w, v)| w * v))
    }
    fn hessians(&self, _t: f64, _z: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        let d = DVector::from_iterator(self.args().total(), self.weights().copied());
        Some(vec![DMatrix::from_diagonal(&d)])
    }
}

/// Controlled column `e_j (s0 + s1 x_j + s2 s_{o+j} + sc . v)`.
#[derive(Clone, Debug)]
pub struct AffineColumnMap {
    pub n: usize,
    pub j: usize,
    pub k: usize,
    pub mean_offset: usize,
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub sc: Vec<f64>,
}

impl SmoothMap for AffineColumnMap {
    fn args(&self) -> ArgDims {
        ArgDims { x: self.n, s: self.k, v: self.sc.len() }
    }
    fn out_dim(&self) -> usize {
        self.n
    }
    fn eval(&self, _t: f64, z: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        let v = &z[self.n + self.k..];
        out[self.j] = self.s0
            + self.s1 * z[self.j]
            + self.s2 * z[self.n + self.mean_offset + self.j]
            + self.sc.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        out
    }
    fn jacobian(&self, _t: f64, _z: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n, self.args().total());
        jac[(self.j, self.j)] = self.s1;
        jac[(self.j, self.n + self.mean_offset + self.j)] = self.s2;
        for (b, c) in self.sc.iter().enumerate() {
            jac[(self.j, self.n + self.k + b)] = *c;
        }
        jac
    }
    fn hessians(&self, _t: f64, _z: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        let m = self.args().total();
        Some(vec![DMatrix::zeros(m, m); self.n])
    }
}

/// `B(x, m, v) = x + v + mean(m) + eps x exp(-x^2 - v^2 - (int phi dm)^2)` on `R`,
/// reading the statistics `(mean, int phi dm)` of [`ExampleStats`].
#[derive(Clone, Copy, Debug)]
pub struct ExampleDrift {
    pub epsilon: f64,
}

impl ExampleDrift {
    pub fn new(epsilon: f64) -> crate::Result<Self> {
        if !(epsilon.abs() <= 1.0) {
            return Err(crate::Error::domain(format!("|epsilon| = {} exceeds 1", epsilon.abs())));
        }
        Ok(ExampleDrift { epsilon })
    }
}

impl SmoothMap for ExampleDrift {
    fn args(&self) -> ArgDims {
        ArgDims { x: 1, s: 2, v: 1 }
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, _t: f64, z: &[f64]) -> DVector<f64> {
        let (x, s1, s2, v) = (z[0], z[1], z[2], z[3]);
        let e = (-x * x - v * v - s2 * s2).exp();
        DVector::from_element(1, x + v + s1 + self.epsilon * x * e)
    }
    fn jacobian(&self, _t: f64, z: &[f64]) -> DMatrix<f64> {
        let (x, _s1, s2, v) = (z[0], z[1], z[2], z[3]);
        let ee = self.epsilon * (-x * x - v * v - s2 * s2).exp();
        DMatrix::from_row_slice(1, 4, &[1.0 + ee * (1.0 - 2.0 * x * x), 1.0, -2.0 * x * s2 * ee, 1.0 - 2.0 * x * v * ee])
    }
    fn hessians(&self, _t: f64, z: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        let (x, _s1, s2, v) = (z[0], z[1], z[2], z[3]);
        let ee = self.epsilon * (-x * x - v * v - s2 * s2).exp();
        let hxx = ee * (4.0 * x.powi(3) - 6.0 * x);
        let hxs = -2.0 * s2 * ee * (1.0 - 2.0 * x * x);
        let hxv = -2.0 * v * ee * (1.0 - 2.0 * x * x);
        let hss = -2.0 * x * ee * (1.0 - 2.0 * s2 * s2);
        let hsv = 4.0 * x * v * s2 * ee;
        let hvv = -2.0 * x * ee * (1.0 - 2.0 * v * v);
        #[rustfmt::skip]
        let h = DMatrix::from_row_slice(4, 4, &[
            hxx, 0.0, hxs, hxv,
            0.0, 0.0, 0.0, 0.0,
            hxs, 0.0, hss, hsv,
            hxv, 0.0, hsv, hvv,
        ]);
        Some(vec![h])
    }
}

/// Wraps a map and shifts one Jacobian entry, for exercising the derivative checker.
pub struct PerturbedJacobian {
    pub inner: Arc<dyn SmoothMap>,
    pub row: usize,
    pub col: usize,
    pub offset: f64,
}

impl SmoothMap for PerturbedJacobian {
    fn args(&self) -> ArgDims {
        self.inner.args()
    }
    fn out_dim(&self) -> usize {
        self.inner.out_dim()
    }
    fn eval(&self, t: f64, z: &[f64]) -> DVector<f64> {
        self.inner.eval(t, z)
    }
    fn jacobian(&self, t: f64, z: &[f64]) -> DMatrix<f64> {
        let mut j = self.inner.jacobian(t, z);
        j[(self.row, self.col)] += self.offset;
        j
    }
    fn hessians(&self, t: f64, z: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        self.inner.hessians(t, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_branches_agree_at_one() {
        for y in [1.0f64, -1.0] {
            let inner = -y.powi(4) / 8.0 + 0.75 * y * y + 0.375;
            assert_eq!(inner, 1.0);
            assert_eq!(example_phi(y), 1.0);
            let inner_d = -0.5 * y * y * y + 1.5 * y;
            assert_eq!(inner_d, y.signum());
            let below = example_phi_prime(y * (1.0 - 1e-12));
            assert!((below - example_phi_prime(y)).abs() < 1e-10);
        }
    }

    #[test]
    fn example_drift_special_cases() {
        assert!(ExampleDrift::new(1.5).is_err());
        let b = ExampleDrift::new(0.5).unwrap();
        // Point mass at 0: mean 0 and int phi = phi(0) = 3/8.
        assert_eq!(b.eval(0.0, &[0.0, 0.0, 0.375, 0.0])[0], 0.0);
        let b0 = ExampleDrift::new(0.0).unwrap();
        assert_eq!(b0.eval(0.0, &[0.3, -0.2, 0.9, 0.4])[0], 0.3 + 0.4 - 0.2);
    }

    #[test]
    fn quadratic_gradient() {
        let q = DiagQuadratic { wx: vec![2.0], ws: vec![0.5], wv: vec![1.0] };
        assert_eq!(q.eval(0.0, &[1.0, 2.0, 3.0])[0], 0.5 * (2.0 + 2.0 + 9.0));
        assert_eq!(q.jacobian(0.0, &[1.0, 2.0, 3.0]).as_slice(), &[2.0, 1.0, 3.0]);
    }
}
