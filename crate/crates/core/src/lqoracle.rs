//! Closed-form linear-quadratic problems with jumps.
//!
//! For a diagonal system every coordinate decouples. Writing the adjoint as
//! `P = p Y + (K - p) E[Y] + s`, matching coefficients in the adjoint equation
//! gives, per coordinate and with `Lam_ij = sum_a lambda_a gamma_i,a gamma_j,a`,
//!
//! ```text
//! p'   = -(2a + s1^2 + Lam_11) p + (c^2/r) p^2 - q,                          p(T) = h
//! K'   = -2(a + abar) K + (c^2/r) K^2 - ((s1+s2)^2 + Lam_(1+2)(1+2)) p - (q + qbar), K(T) = h + hbar
//! s'   = ((c^2/r) K - (a + abar)) s - (s0 (s1+s2) + Lam_0(1+2)) p,           s(T) = 0
//! chi' = (c^2 / 2r) s^2 - p (s0^2 + Lam_00) / 2,                             chi(T) = 0
//! ```
//!
//! and the value `V(t, mu) = p Var(mu)/2 + K mean(mu)^2/2 + s mean(mu) + chi`
//! with optimal feedback `u = -(c/r) (p x + (K - p) mean + s)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::EmpiricalMeasure;
use crate::model::{
    AffineCoeffs, AffineColumnMap, AssumptionConstants, AtomTable, ConstantAffine, DiagQuadratic, DiffusionColumn,
    ExampleDrift, ExampleStats, JumpAtom, JumpMeasure, LqDrift, MeanStats, MeasureStats, ModelSpec, SmoothMap,
};

/// Jump atom of a diagonal LQ problem with per-coordinate affine coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqJump {
    pub mark: Vec<f64>,
    pub weight: f64,
    pub gamma0: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
}

/// Control acting on the diffusion: column `j` gains `sc_j v^j` at cost `r_sigma_j |v^j|^2 / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlledSigma {
    pub sc: Vec<f64>,
    pub r_sigma: Vec<f64>,
}

/// Diagonal linear-quadratic problem; every vector holds one entry per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqSpec {
    pub a: Vec<f64>,
    pub abar: Vec<f64>,
    pub c: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub q: Vec<f64>,
    pub qbar: Vec<f64>,
    pub r: Vec<f64>,
    pub h: Vec<f64>,
    pub hbar: Vec<f64>,
    pub jumps: Vec<LqJump>,
    pub controlled_sigma: Option<ControlledSigma>,
}

impl LqSpec {
    /// One-dimensional problem with every coefficient zero except `c = r = 1`.
    pub fn scalar() -> Self {
        let z = vec![0.0];
        LqSpec {
            a: z.clone(),
            abar: z.clone(),
            c: vec![1.0],
            sigma0: z.clone(),
            sigma1: z.clone(),
            sigma2: z.clone(),
            q: z.clone(),
            qbar: z.clone(),
            r: vec![1.0],
            h: z.clone(),
            hbar: z,
            jumps: vec![],
            controlled_sigma: None,
        }
    }

    /// One-dimensional problem with mean-field drift, state-dependent noise and one jump atom.
    pub fn fixture_with_jump() -> Self {
        LqSpec {
            a: vec![0.1],
            abar: vec![-0.2],
            c: vec![1.0],
            sigma0: vec![0.3],
            sigma1: vec![0.1],
            sigma2: vec![0.0],
            q: vec![1.0],
            qbar: vec![0.5],
            r: vec![1.0],
            h: vec![1.0],
            hbar: vec![0.5],
            jumps: vec![LqJump { mark: vec![1.0], weight: 2.0, gamma0: vec![0.1], gamma1: vec![0.1], gamma2: vec![-0.05] }],
            controlled_sigma: None,
        }
    }

    /// Noise and costs paired with the exponential example drift; with `epsilon = 0`
    /// the example reduces to this problem with `a = abar = c = 1`.
    pub fn example_costs() -> Self {
        LqSpec {
            a: vec![1.0],
            abar: vec![1.0],
            c: vec![1.0],
            sigma0: vec![0.3],
            sigma1: vec![0.0],
            sigma2: vec![0.0],
            q: vec![1.0],
            qbar: vec![0.0],
            r: vec![1.0],
            h: vec![1.0],
            hbar: vec![0.0],
            jumps: vec![LqJump { mark: vec![1.0], weight: 1.0, gamma0: vec![0.1], gamma1: vec![0.0], gamma2: vec![0.0] }],
            controlled_sigma: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::config("n", "must be positive"));
        }
        let fields: [(&str, &Vec<f64>); 11] = [
            ("a", &self.a),
            ("abar", &self.abar),
            ("c", &self.c),
            ("sigma0", &self.sigma0),
            ("sigma1", &self.sigma1),
            ("sigma2", &self.sigma2),
            ("q", &self.q),
            ("qbar", &self.qbar),
            ("r", &self.r),
            ("h", &self.h),
            ("hbar", &self.hbar),
        ];
        for (name, v) in fields {
            if v.len() != n {
                return Err(Error::config(name, format!("expected {n} entries, got {}", v.len())));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::config(format!("{name}[{i}]"), "must be finite"));
            }
        }
        for (i, r) in self.r.iter().enumerate() {
            if *r <= 0.0 {
                return Err(Error::config(format!("r[{i}]"), "must be positive"));
            }
        }
        for i in 0..n {
            if self.q[i] + self.qbar[i] < 0.0 {
                return Err(Error::config(format!("qbar[{i}]"), "q + qbar must be non-negative"));
            }
            if self.h[i] < 0.0 || self.h[i] + self.hbar[i] < 0.0 {
                return Err(Error::config(format!("h[{i}]"), "terminal cost must be convex (h >= 0, h + hbar >= 0)"));
            }
        }
        for (k, j) in self.jumps.iter().enumerate() {
            for (name, v) in [("gamma0", &j.gamma0), ("gamma1", &j.gamma1), ("gamma2", &j.gamma2)] {
                if v.len() != n {
                    return Err(Error::config(format!("jump_atoms[{k}].{name}"), format!("expected {n} entries")));
                }
            }
            if !(j.weight > 0.0 && j.weight.is_finite()) {
                return Err(Error::config(format!("jump_atoms[{k}].weight"), "must be positive"));
            }
        }
        if let Some(cs) = &self.controlled_sigma {
            if cs.sc.len() != n || cs.r_sigma.len() != n {
                return Err(Error::config("controlled_sigma", format!("expected {n} entries")));
            }
            if let Some(i) = cs.r_sigma.iter().position(|r| *r <= 0.0) {
                return Err(Error::config(format!("controlled_sigma.r_sigma[{i}]"), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn jump_measure(&self) -> Result<JumpMeasure> {
        JumpMeasure::new(self.jumps.iter().map(|j| JumpAtom { mark: j.mark.clone(), weight: j.weight }).collect())
    }

    /// Structural constants implied by the coefficients. Costs of the form `qbar mean^2 / 2`
    /// give no `L^2`-convexity in the measure argument, so `lambda_m = min(qbar, 0) / 2`.
    pub fn constants(&self) -> AssumptionConstants {
        let n = self.dim();
        let mut big_l: f64 = 0.0;
        let mut lambda0 = f64::INFINITY;
        let mut lambda_v = f64::INFINITY;
        let mut lambda_x = f64::INFINITY;
        let mut lambda_m = f64::INFINITY;
        for i in 0..n {
            for v in [
                self.a[i], self.abar[i], self.c[i], self.sigma0[i], self.sigma1[i], self.sigma2[i], self.q[i],
                self.qbar[i], self.r[i], self.h[i], self.hbar[i],
            ] {
                big_l = big_l.max(v.abs());
            }
            for g in 0..3 {
                let norm: f64 = self
                    .jumps
                    .iter()
                    .map(|j| j.weight * [&j.gamma0, &j.gamma1, &j.gamma2][g][i].powi(2))
                    .sum::<f64>()
                    .sqrt();
                big_l = big_l.max(norm);
            }
            lambda0 = lambda0.min(self.c[i] * self.c[i]);
            lambda_v = lambda_v.min(self.r[i] / 2.0);
            lambda_x = lambda_x.min(self.q[i] / 2.0);
            lambda_m = lambda_m.min(self.qbar[i].min(0.0) / 2.0);
            if let Some(cs) = &self.controlled_sigma {
                big_l = big_l.max(cs.sc[i].abs()).max(cs.r_sigma[i]);
                lambda0 = lambda0.min(cs.sc[i] * cs.sc[i]);
                lambda_v = lambda_v.min(cs.r_sigma[i] / 2.0);
            }
        }
        AssumptionConstants {
            big_l,
            l0: 0.0,
            l1: 0.0,
            l2: 0.0,
            lambda0: if lambda0 > 0.0 { lambda0 } else { f64::MIN_POSITIVE },
            lambda_v,
            lambda_x,
            lambda_m,
            l: if self.controlled_sigma.is_some() { n } else { 0 },
        }
    }

    /// Assembles the model around a given drift and statistics map; costs read the mean
    /// from the first `n` statistics.
    pub(crate) fn assemble(
        &self,
        name: &str,
        stats: Arc<dyn MeasureStats>,
        drift: Arc<dyn SmoothMap>,
        constants: AssumptionConstants,
    ) -> Result<ModelSpec> {
        self.validate()?;
        let n = self.dim();
        let k = stats.dim();
        let mut ws = vec![0.0; k];
        let mut wsh = vec![0.0; k];
        ws[..n].copy_from_slice(&self.qbar);
        wsh[..n].copy_from_slice(&self.hbar);
        let unit = |i: usize, v: f64| {
            let mut d = DMatrix::zeros(n, n);
            d[(i, i)] = v;
            d
        };
        let mut columns = Vec::with_capacity(n);
        let mut split = vec![n];
        for j in 0..n {
            match &self.controlled_sigma {
                None => {
                    let mut c0 = DVector::zeros(n);
                    c0[j] = self.sigma0[j];
                    let coeffs = AffineCoeffs { c0, c1: unit(j, self.sigma1[j]), c2: unit(j, self.sigma2[j]) };
                    columns.push(DiffusionColumn::Linear(Arc::new(ConstantAffine(coeffs))));
                    split.push(0);
                }
                Some(cs) => {
                    let coeff = AffineColumnMap {
                        n,
                        j,
                        k,
                        mean_offset: 0,
                        s0: self.sigma0[j],
                        s1: self.sigma1[j],
                        s2: self.sigma2[j],
                        sc: vec![cs.sc[j]],
                    };
                    let cost = DiagQuadratic { wx: vec![0.0; n], ws: vec![0.0; k], wv: vec![cs.r_sigma[j]] };
                    columns.push(DiffusionColumn::Controlled { coeff: Arc::new(coeff), cost: Arc::new(cost) });
                    split.push(1);
                }
            }
        }
        let jumps = self
            .jumps
            .iter()
            .map(|jp| AffineCoeffs {
                c0: DVector::from_column_slice(&jp.gamma0),
                c1: DMatrix::from_diagonal(&DVector::from_column_slice(&jp.gamma1)),
                c2: DMatrix::from_diagonal(&DVector::from_column_slice(&jp.gamma2)),
            })
            .collect();
        let model = ModelSpec {
            name: name.to_string(),
            n,
            control_split: split,
            stats,
            drift,
            running_cost: Arc::new(DiagQuadratic { wx: self.q.clone(), ws, wv: self.r.clone() }),
            columns,
            jump: Arc::new(AtomTable(jumps)),
            terminal_cost: Arc::new(DiagQuadratic { wx: self.h.clone(), ws: wsh, wv: vec![] }),
            constants,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn model(&self) -> Result<ModelSpec> {
        self.validate()?;
        let n = self.dim();
        let drift = LqDrift { a: self.a.clone(), abar: self.abar.clone(), c: self.c.clone(), k: n, mean_offset: 0 };
        self.assemble("lq", Arc::new(MeanStats { n }), Arc::new(drift), self.constants())
    }
}

/// Example-drift model with the noise and costs of a one-dimensional `base` problem
/// (its `a`, `abar` and `c` are ignored).
pub fn example_model(epsilon: f64, base: &LqSpec) -> Result<ModelSpec> {
    if base.dim() != 1 || base.controlled_sigma.is_some() {
        return Err(Error::domain("the example drift is one-dimensional with control-free diffusion"));
    }
    let drift = ExampleDrift::new(epsilon)?;
    let mut lq = base.clone();
    lq.a = vec![1.0];
    lq.abar = vec![1.0];
    lq.c = vec![1.0];
    let mut constants = lq.constants();
    constants.big_l = constants.big_l.max(1.0 + epsilon.abs());
    constants.lambda0 = (1.0 - epsilon.abs() / std::f64::consts::E).powi(2);
    let mut model = lq.assemble("example_drift", Arc::new(ExampleStats), Arc::new(drift), constants)?;
    if epsilon != 0.0 {
        let est = crate::model::estimate_constants(&model, 20_000, 4.0, 0x5eed)?;
        model.constants.l0 = est.l0;
        model.constants.l1 = est.l1;
        model.constants.l2 = est.l2;
    }
    Ok(model)
}

/// Per-coordinate coefficient trajectories on the refined grid (index 0 is `t0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateRiccati {
    pub p: Vec<f64>,
    /// `K = p + pi`, the coefficient of `mean^2 / 2` in the value.
    pub k: Vec<f64>,
    pub s: Vec<f64>,
    pub chi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub coords: Vec<CoordinateRiccati>,
    c: Vec<f64>,
    r: Vec<f64>,
}

/// Refinement factor of the RK4 grid relative to the requested grid.
pub const RICCATI_REFINEMENT: usize = 10;

struct CoordCoeffs {
    a: f64,
    abar: f64,
    c2r: f64,
    s0: f64,
    s1: f64,
    s12: f64,
    lam00: f64,
    lam11: f64,
    lam0_12: f64,
    lam12_12: f64,
    q: f64,
    qq: f64,
}

impl CoordCoeffs {
    fn rhs(&self, y: [f64; 4]) -> [f64; 4] {
        let [p, k, s, _chi] = y;
        let dp = -(2.0 * self.a + self.s1 * self.s1 + self.lam11) * p + self.c2r * p * p - self.q;
        let dk = -2.0 * (self.a + self.abar) * k + self.c2r * k * k - (self.s12 * self.s12 + self.lam12_12) * p - self.qq;
        let ds = (self.c2r * k - (self.a + self.abar)) * s - (self.s0 * self.s12 + self.lam0_12) * p;
        let dchi = 0.5 * self.c2r * s * s - 0.5 * p * (self.s0 * self.s0 + self.lam00);
        [dp, dk, ds, dchi]
    }
}

/// Integrates the coefficient system backward with classical RK4 on a grid
/// refined [`RICCATI_REFINEMENT`] times.
pub fn solve_riccati(spec: &LqSpec, grid: &TimeGrid) -> Result<RiccatiSolution> {
    spec.validate()?;
    if spec.controlled_sigma.is_some() {
        return Err(Error::OperationUnsupported("Riccati oracle requires control-free diffusion".into()));
    }
    let fine = grid.refined(RICCATI_REFINEMENT);
    let h = fine.dt();
    let mut coords = Vec::with_capacity(spec.dim());
    for i in 0..spec.dim() {
        let lam = |f: &dyn Fn(&LqJump) -> f64| spec.jumps.iter().map(|j| j.weight * f(j)).sum::<f64>();
        let cc = CoordCoeffs {
            a: spec.a[i],
            abar: spec.abar[i],
            c2r: spec.c[i] * spec.c[i] / spec.r[i],
            s0: spec.sigma0[i],
            s1: spec.sigma1[i],
            s12: spec.sigma1[i] + spec.sigma2[i],
            lam00: lam(&|j| j.gamma0[i] * j.gamma0[i]),
            lam11: lam(&|j| j.gamma1[i] * j.gamma1[i]),
            lam0_12: lam(&|j| j.gamma0[i] * (j.gamma1[i] + j.gamma2[i])),
            lam12_12: lam(&|j| (j.gamma1[i] + j.gamma2[i]).powi(2)),
            q: spec.q[i],
            qq: spec.q[i] + spec.qbar[i],
        };
        let knots = fine.knots();
        let mut traj = vec![[0.0; 4]; knots];
        let mut y = [spec.h[i], spec.h[i] + spec.hbar[i], 0.0, 0.0];
        traj[knots - 1] = y;
        for step in (0..fine.steps).rev() {
            let add = |y: [f64; 4], k: [f64; 4], f: f64| [y[0] + f * k[0], y[1] + f * k[1], y[2] + f * k[2], y[3] + f * k[3]];
            let k1 = cc.rhs(y);
            let k2 = cc.rhs(add(y, k1, -0.5 * h));
            let k3 = cc.rhs(add(y, k2, -0.5 * h));
            let k4 = cc.rhs(add(y, k3, -h));
            for c in 0..4 {
                y[c] -= h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
            if y.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
                return Err(Error::RiccatiBlowUp { t: fine.time(step) });
            }
            traj[step] = y;
        }
        coords.push(CoordinateRiccati {
            p: traj.iter().map(|v| v[0]).collect(),
            k: traj.iter().map(|v| v[1]).collect(),
            s: traj.iter().map(|v| v[2]).collect(),
            chi: traj.iter().map(|v| v[3]).collect(),
        });
    }
    Ok(RiccatiSolution { grid: fine, coords, c: spec.c.clone(), r: spec.r.clone() })
}

/// Per-coordinate affine feedback `u = kx x + km mean + k0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gains {
    pub kx: f64,
    pub km: f64,
    pub k0: f64,
}

impl RiccatiSolution {
    fn interp(&self, series: &[f64], t: f64) -> f64 {
        let g = &self.grid;
        let x = ((t - g.t0) / g.dt()).clamp(0.0, g.steps as f64);
        let i = (x.floor() as usize).min(g.steps - 1);
        let w = x - i as f64;
        series[i] * (1.0 - w) + series[i + 1] * w
    }

    pub fn p(&self, i: usize, t: f64) -> f64 {
        self.interp(&self.coords[i].p, t)
    }

    pub fn big_k(&self, i: usize, t: f64) -> f64 {
        self.interp(&self.coords[i].k, t)
    }

    pub fn s(&self, i: usize, t: f64) -> f64 {
        self.interp(&self.coords[i].s, t)
    }

    pub fn chi(&self, i: usize, t: f64) -> f64 {
        self.interp(&self.coords[i].chi, t)
    }

    /// `V(t, mu)` for a measure with the given per-coordinate mean and variance.
    pub fn value(&self, t: f64, mean: &[f64], var: &[f64]) -> f64 {
        (0..self.coords.len())
            .map(|i| {
                0.5 * self.p(i, t) * var[i] + 0.5 * self.big_k(i, t) * mean[i] * mean[i] + self.s(i, t) * mean[i] + self.chi(i, t)
            })
            .sum()
    }

    pub fn value_of(&self, t: f64, mu: &EmpiricalMeasure) -> f64 {
        let mean = mu.mean();
        let n = mu.dim();
        let mut var = vec![0.0; n];
        for y in mu.iter() {
            for c in 0..n {
                var[c] += (y[c] - mean[c]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= mu.len() as f64);
        self.value(t, &mean, &var)
    }

    /// Adjoint field `D_y dV/dnu(t, mu)(x) = p x + (K - p) mean + s`.
    pub fn adjoint(&self, t: f64, x: &[f64], mean: &[f64]) -> Vec<f64> {
        (0..self.coords.len())
            .map(|i| {
                let p = self.p(i, t);
                p * x[i] + (self.big_k(i, t) - p) * mean[i] + self.s(i, t)
            })
            .collect()
    }

    pub fn gains(&self, i: usize, t: f64) -> Gains {
        let f = -self.c[i] / self.r[i];
        let p = self.p(i, t);
        Gains { kx: f * p, km: f * (self.big_k(i, t) - p), k0: f * self.s(i, t) }
    }

    pub fn feedback(&self, t: f64, x: &[f64], mean: &[f64]) -> Vec<f64> {
        (0..self.coords.len())
            .map(|i| {
                let g = self.gains(i, t);
                g.kx * x[i] + g.km * mean[i] + g.k0
            })
            .collect()
    }
}

/// `J(u + delta) - J(u)` for the optimal `u` on `[0, horizon]`, where `delta` is a constant
/// shift of the open-loop controls. The cost is quadratic and the dynamics linear, so
/// the first-order term vanishes and the gap is the quadratic form of the deviation
/// `D = X^{u + delta} - X^u`, computed from the moment equations of `m = E[D]`, `M2 = E[D^2]`.
pub fn shift_gap(spec: &LqSpec, delta: &[f64], horizon: f64) -> Result<f64> {
    spec.validate()?;
    if delta.len() != spec.dim() {
        return Err(Error::config("delta", "one entry per coordinate"));
    }
    const STEPS: usize = 4000;
    let h = horizon / STEPS as f64;
    let mut total = 0.0;
    for i in 0..spec.dim() {
        let (a, ab, c, d) = (spec.a[i], spec.abar[i], spec.c[i], delta[i]);
        let (s1, s2) = (spec.sigma1[i], spec.sigma2[i]);
        let lam = |f: &dyn Fn(&LqJump) -> f64| spec.jumps.iter().map(|j| j.weight * f(j)).sum::<f64>();
        let l11 = lam(&|j| j.gamma1[i] * j.gamma1[i]);
        let l12 = lam(&|j| j.gamma1[i] * j.gamma2[i]);
        let l22 = lam(&|j| j.gamma2[i] * j.gamma2[i]);
        let (q, qb, r) = (spec.q[i], spec.qbar[i], spec.r[i]);
        // y = (m, M2, accumulated running cost)
        let rhs = |y: [f64; 3]| {
            let [m, m2, _] = y;
            let dm = (a + ab) * m + c * d;
            let dm2 = 2.0 * a * m2 + 2.0 * ab * m * m + 2.0 * c * d * m
                + (s1 * s1 + l11) * m2
                + (2.0 * s1 * s2 + s2 * s2 + 2.0 * l12 + l22) * m * m;
            [dm, dm2, 0.5 * (q * m2 + qb * m * m + r * d * d)]
        };
        let mut y = [0.0; 3];
        for _ in 0..STEPS {
            let add = |y: [f64; 3], k: [f64; 3], f: f64| [y[0] + f * k[0], y[1] + f * k[1], y[2] + f * k[2]];
            let k1 = rhs(y);
            let k2 = rhs(add(y, k1, 0.5 * h));
            let k3 = rhs(add(y, k2, 0.5 * h));
            let k4 = rhs(add(y, k3, h));
            for c in 0..3 {
                y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
        }
        total += y[2] + 0.5 * (spec.h[i] * y[1] + spec.hbar[i] * y[0] * y[0]);
    }
    Ok(total)
}

impl LqSpec {
    /// Scalar problem whose Riccati system is at rest: `h` and `hbar` are the equilibria
    /// of `p` and `K`, and the noise is balanced so that `s = 0`. The optimal feedback
    /// is then a time-independent affine map of `(x, mean)`.
    pub fn stationary_fixture() -> Self {
        let mut spec = LqSpec {
            a: vec![0.1],
            abar: vec![-0.2],
            c: vec![1.0],
            sigma0: vec![0.3],
            sigma1: vec![0.1],
            sigma2: vec![0.0],
            q: vec![1.0],
            qbar: vec![0.5],
            r: vec![1.0],
            h: vec![0.0],
            hbar: vec![0.0],
            jumps: vec![LqJump { mark: vec![1.0], weight: 2.0, gamma0: vec![-0.1], gamma1: vec![0.1], gamma2: vec![0.05] }],
            controlled_sigma: None,
        };
        let lam = |f: &dyn Fn(&LqJump) -> f64| spec.jumps.iter().map(|j| j.weight * f(j)).sum::<f64>();
        let l11 = lam(&|j| j.gamma1[0].powi(2));
        let l12_12 = lam(&|j| (j.gamma1[0] + j.gamma2[0]).powi(2));
        let c2r = spec.c[0] * spec.c[0] / spec.r[0];
        let root = |b: f64, c: f64| (b + (b * b + 4.0 * c2r * c).sqrt()) / (2.0 * c2r);
        let p = root(2.0 * spec.a[0] + spec.sigma1[0].powi(2) + l11, spec.q[0]);
        let s12 = spec.sigma1[0] + spec.sigma2[0];
        let k = root(2.0 * (spec.a[0] + spec.abar[0]), (s12 * s12 + l12_12) * p + spec.q[0] + spec.qbar[0]);
        spec.h = vec![p];
        spec.hbar = vec![k - p];
        spec
    }
}

/// Result of an exhaustive search over affine feedbacks `u = kx x + km mean + k0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForceReport {
    /// Best gains `(kx, km, k0)` found.
    pub best: [f64; 3],
    pub best_cost: f64,
    /// Riccati gains and their cost under the same noise.
    pub riccati: [f64; 3],
    pub riccati_cost: f64,
    pub std_error: f64,
    /// Closed-form `V(0, mu)`.
    pub value: f64,
    /// Largest grid spacing of the last refinement level.
    pub resolution: f64,
    /// Largest cost increase over the Riccati gains moved by half a final spacing on
    /// every axis, i.e. the cost the grid cannot resolve.
    pub resolution_cost: f64,
    pub evaluations: usize,
}

/// Scalar particle simulator with stored noise, evaluating affine feedbacks under
/// common random numbers.
struct ScalarLab<'a> {
    spec: &'a LqSpec,
    init: &'a [f64],
    steps: usize,
    dt: f64,
    db: Vec<f64>,
    dn: Vec<f64>,
}

impl ScalarLab<'_> {
    /// Per-particle costs of the feedback `g`.
    fn costs(&self, g: [f64; 3]) -> Vec<f64> {
        let s = self.spec;
        let n = self.init.len();
        let mut x = self.init.to_vec();
        let mut acc = vec![0.0; n];
        let atoms = s.jumps.len();
        let mut mean = x.iter().sum::<f64>() / n as f64;
        for k in 0..self.steps {
            let db = &self.db[k * n..(k + 1) * n];
            let dn = &self.dn[k * n * atoms..(k + 1) * n * atoms];
            let mut next_sum = 0.0;
            for i in 0..n {
                let xi = x[i];
                let u = g[0] * xi + g[1] * mean + g[2];
                let b = s.a[0] * xi + s.abar[0] * mean + s.c[0] * u;
                let sig = s.sigma0[0] + s.sigma1[0] * xi + s.sigma2[0] * mean;
                let mut y = xi + b * self.dt + sig * db[i];
                for (a, jp) in s.jumps.iter().enumerate() {
                    let gam = jp.gamma0[0] + jp.gamma1[0] * xi + jp.gamma2[0] * mean;
                    y += gam * (dn[i * atoms + a] - jp.weight * self.dt);
                }
                acc[i] += 0.5 * (s.q[0] * xi * xi + s.qbar[0] * mean * mean + s.r[0] * u * u) * self.dt;
                x[i] = y;
                next_sum += y;
            }
            mean = next_sum / n as f64;
        }
        for i in 0..n {
            acc[i] += 0.5 * (s.h[0] * x[i] * x[i] + s.hbar[0] * mean * mean);
        }
        acc
    }

    fn mean_cost(&self, g: [f64; 3]) -> f64 {
        self.costs(g).iter().sum::<f64>() / self.init.len() as f64
    }
}

/// Searches a coarse-to-fine grid of affine feedbacks for the scalar problem `spec` on
/// `[0, horizon]`, starting from `init`, and compares the best cost with the Riccati
/// feedback and the closed-form value. Gains are taken constant in time, which is
/// exact for [`LqSpec::stationary_fixture`].
pub fn brute_force_search(
    spec: &LqSpec,
    init: &EmpiricalMeasure,
    horizon: f64,
    steps: usize,
    seed: u64,
    levels: usize,
    exec: crate::exec::Exec,
) -> Result<BruteForceReport> {
    if spec.dim() != 1 || init.dim() != 1 {
        return Err(Error::domain("the brute-force search is one-dimensional"));
    }
    let grid = TimeGrid::new(0.0, horizon, steps)?;
    let ric = solve_riccati(spec, &grid)?;
    let jm = spec.jump_measure()?;
    let noise = crate::noise::NoiseBundle::new(seed, 1, &jm, &grid);
    let n = init.len();
    let atoms = jm.len();
    let mut db = vec![0.0; steps * n];
    let mut dn = vec![0.0; steps * n * atoms];
    let mut nz = crate::noise::StepNoise::new(1, atoms);
    for k in 0..steps {
        for i in 0..n {
            noise.fill(i, k, &mut nz);
            db[k * n + i] = nz.db[0];
            for a in 0..atoms {
                dn[(k * n + i) * atoms + a] = nz.dn[a] as f64;
            }
        }
    }
    let lab = ScalarLab { spec, init: init.points(), steps, dt: grid.dt(), db, dn };
    let g = ric.gains(0, 0.0);
    let riccati = [g.kx, g.km, g.k0];
    let ric_costs = lab.costs(riccati);
    let riccati_cost = ric_costs.iter().sum::<f64>() / n as f64;
    let mut centre = [0.0, 0.0, 0.0];
    let mut half = [3.0, 2.0, 1.0];
    let mut best = (f64::INFINITY, centre);
    let mut evaluations = 1;
    const PTS: usize = 9;
    for _ in 0..levels.max(1) {
        let axis = |c: usize, j: usize| centre[c] - half[c] + 2.0 * half[c] * j as f64 / (PTS - 1) as f64;
        let candidates: Vec<[f64; 3]> = (0..PTS * PTS * PTS)
            .map(|j| [axis(0, j / (PTS * PTS)), axis(1, j / PTS % PTS), axis(2, j % PTS)])
            .collect();
        let costs = crate::exec::map(exec, candidates.len(), |j| lab.mean_cost(candidates[j]));
        evaluations += candidates.len();
        for (gains, cost) in candidates.into_iter().zip(costs) {
            if cost.is_finite() && cost < best.0 {
                best = (cost, gains);
            }
        }
        centre = best.1;
        for h in half.iter_mut() {
            *h *= 2.0 / (PTS - 1) as f64;
        }
    }
    let best_costs = lab.costs(best.1);
    let diffs: Vec<f64> = best_costs.iter().zip(&ric_costs).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1).max(1) as f64;
    // After the loop `half` has shrunk once more and equals the final spacing.
    let resolution = half.iter().fold(0.0f64, |m, h| m.max(*h));
    let corners: Vec<[f64; 3]> = (0..8)
        .map(|b| std::array::from_fn(|c| riccati[c] + if b >> c & 1 == 1 { 0.5 } else { -0.5 } * half[c]))
        .collect();
    let resolution_cost = crate::exec::map(exec, corners.len(), |j| lab.mean_cost(corners[j]))
        .into_iter()
        .fold(0.0f64, |m, c| m.max(c - riccati_cost));
    Ok(BruteForceReport {
        best: best.1,
        best_cost: best.0,
        riccati,
        riccati_cost,
        std_error: (var / n as f64).sqrt(),
        value: ric.value_of(0.0, init),
        resolution,
        resolution_cost,
        evaluations,
    })
}

/// Solver output measured against the closed-form solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqComparison {
    /// Control-variate estimate of the cost of the computed control.
    pub cost: f64,
    pub cost_std_error: f64,
    /// `V(t0, mu)` from the Riccati system.
    pub value: f64,
    pub cost_rel_error: f64,
    /// Relative `L^2` distance of the computed controls from the Riccati feedback
    /// evaluated along the computed ensemble.
    pub feedback_rel_error: f64,
}

pub fn compare_with_riccati(
    spec: &LqSpec,
    model: &ModelSpec,
    jm: &JumpMeasure,
    sol: &crate::solver::Solution,
) -> Result<LqComparison> {
    let ens = &sol.ensemble;
    let grid = ens.grid;
    let ric = solve_riccati(spec, &grid)?;
    let (cost, cost_std_error) = crate::value::value_estimate(model, jm, sol, crate::exec::Exec::default());
    let value = ric.value_of(grid.t0, &ens.measure_at(0));
    let (mut err, mut size) = (0.0, 0.0);
    for k in 0..grid.steps {
        let t = grid.time(k);
        let mean = &ens.snapshots[k].mean;
        for i in 0..ens.particles() {
            let exact = ric.feedback(t, ens.states.at(k, i), mean);
            for (u, e) in ens.controls.at(k, i).iter().zip(&exact) {
                err += (u - e).powi(2);
                size += e * e;
            }
        }
    }
    Ok(LqComparison {
        cost,
        cost_std_error,
        value,
        cost_rel_error: (cost - value).abs() / value.abs().max(f64::MIN_POSITIVE),
        feedback_rel_error: if size > 0.0 { (err / size).sqrt() } else { err.sqrt() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 100).unwrap()
    }

    #[test]
    fn scalar_lqr_matches_tanh_solution() {
        // p' = p^2 - 1 with p(1) = 0 is solved by p(t) = tanh(1 - t).
        let mut spec = LqSpec::scalar();
        spec.sigma0 = vec![1.0];
        spec.q = vec![1.0];
        let sol = solve_riccati(&spec, &grid()).unwrap();
        for t in [0.0, 0.25, 0.5, 0.9] {
            assert!((sol.p(0, t) - (1.0 - t).tanh()).abs() < 1e-9, "t = {t}");
        }
        // With h = 1 the terminal value is the equilibrium p = 1.
        spec.h = vec![1.0];
        let sol = solve_riccati(&spec, &grid()).unwrap();
        assert!((sol.p(0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_control_authority_means_zero_gains() {
        let mut spec = LqSpec::fixture_with_jump();
        spec.c = vec![0.0];
        let sol = solve_riccati(&spec, &grid()).unwrap();
        let g = sol.gains(0, 0.3);
        assert_eq!((g.kx, g.km, g.k0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn refinement_changes_little() {
        let spec = LqSpec::fixture_with_jump();
        let a = solve_riccati(&spec, &grid()).unwrap();
        let b = solve_riccati(&spec, &TimeGrid::new(0.0, 1.0, 200).unwrap()).unwrap();
        assert!((a.p(0, 0.0) - b.p(0, 0.0)).abs() <= 1e-8);
        assert!((a.big_k(0, 0.0) - b.big_k(0, 0.0)).abs() <= 1e-8);
    }

    #[test]
    fn p_is_non_negative() {
        let sol = solve_riccati(&LqSpec::fixture_with_jump(), &grid()).unwrap();
        assert!(sol.coords[0].p.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn blow_up_is_reported() {
        let mut spec = LqSpec::scalar();
        spec.c = vec![0.0];
        spec.a = vec![40.0];
        spec.h = vec![1.0];
        assert!(matches!(solve_riccati(&spec, &grid()), Err(Error::RiccatiBlowUp { .. })));
    }

    #[test]
    fn validation_names_the_field() {
        let mut spec = LqSpec::fixture_with_jump();
        spec.r = vec![-1.0];
        match spec.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "r[0]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shift_gap_is_quadratic_in_delta() {
        let spec = LqSpec::fixture_with_jump();
        let g1 = shift_gap(&spec, &[0.1], 1.0).unwrap();
        let g2 = shift_gap(&spec, &[0.2], 1.0).unwrap();
        assert!(g1 > 0.0 && ((g2 / g1) - 4.0).abs() < 1e-9);
        // Without state dependence the gap is r delta^2 T / 2 plus the state penalty.
        let mut spec = LqSpec::scalar();
        spec.c = vec![0.0];
        assert!((shift_gap(&spec, &[0.5], 2.0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn stationary_fixture_is_at_rest() {
        let spec = LqSpec::stationary_fixture();
        let sol = solve_riccati(&spec, &grid()).unwrap();
        for t in [0.0, 0.5, 1.0] {
            assert!((sol.p(0, t) - spec.h[0]).abs() < 1e-10);
            assert!((sol.big_k(0, t) - spec.h[0] - spec.hbar[0]).abs() < 1e-10);
            assert!(sol.s(0, t).abs() < 1e-12);
        }
    }

    #[test]
    fn brute_force_finds_the_riccati_gains() {
        let spec = LqSpec::stationary_fixture();
        let init = EmpiricalMeasure::sample_gaussian(2000, &[0.5], &[0.4], 1).unwrap();
        let rep = brute_force_search(&spec, &init, 1.0, 20, 3, 3, crate::exec::Exec::default()).unwrap();
        assert!((rep.best_cost - rep.riccati_cost).abs() <= rep.resolution_cost + 3.0 * rep.std_error, "{rep:?}");
        for c in 0..3 {
            assert!((rep.best[c] - rep.riccati[c]).abs() <= rep.resolution + 0.1, "{rep:?}");
        }
    }
}
