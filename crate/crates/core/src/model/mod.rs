//! Problem data: coefficient maps, derivative callbacks, jump intensities and
//! the structural constants of the standing assumptions.
//!
//! Measure dependence is cylindrical: every coefficient sees a measure `m` only
//! through the statistics `s = (1/N) sum_i phi(x_i)` supplied by a
//! [`MeasureStats`] implementation. Derivatives in the measure argument are
//! then assembled by the chain rule, e.g.
//! `D_y dB/dnu(t, x, m, v)(y) = B_s(t, x, s, v) * grad phi(y)`.

mod builtin;
mod check;
mod descriptor;

pub use builtin::{
    example_phi, example_phi_prime, example_phi_second, AffineColumnMap, DiagQuadratic, ExampleDrift, ExampleStats,
    LqDrift, MeanStats, PerturbedJacobian,
};
pub use check::{
    certificate_coefficient, check_sufficiency_condition, estimate_constants, verify_derivative_consistency,
    ConditionReport, EmpiricalConstants, Violation,
};
pub use descriptor::{ConstantsOverride, FaultInjection, JumpAtomDescriptor, ModelDescriptor, ModelKind, ProblemData};
pub use crate::lqoracle::example_model;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::measure::EmpiricalMeasure;

/// Block sizes of the argument `z = (x, s, v)` of a [`SmoothMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArgDims {
    pub x: usize,
    pub s: usize,
    pub v: usize,
}

impl ArgDims {
    pub fn total(&self) -> usize {
        self.x + self.s + self.v
    }
    pub fn x_range(&self) -> std::ops::Range<usize> {
        0..self.x
    }
    pub fn s_range(&self) -> std::ops::Range<usize> {
        self.x..self.x + self.s
    }
    pub fn v_range(&self) -> std::ops::Range<usize> {
        self.x + self.s..self.total()
    }
}

/// Smooth map `R^{x+s+v} -> R^out` with analytic first and optional second derivatives.
pub trait SmoothMap: Send + Sync {
    fn args(&self) -> ArgDims;
    fn out_dim(&self) -> usize;
    fn eval(&self, t: f64, z: &[f64]) -> DVector<f64>;
    /// `out x total` Jacobian.
    fn jacobian(&self, t: f64, z: &[f64]) -> DMatrix<f64>;
    /// One symmetric `total x total` Hessian per output component.
    fn hessians(&self, _t: f64, _z: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        None
    }
}

/// Statistics `phi: R^n -> R^K` through which coefficients see the measure.
pub trait MeasureStats: Send + Sync {
    fn state_dim(&self) -> usize;
    fn dim(&self) -> usize;
    fn phi(&self, y: &[f64]) -> DVector<f64>;
    /// `K x n` Jacobian of `phi`.
    fn grad(&self, y: &[f64]) -> DMatrix<f64>;
    /// One `n x n` Hessian per statistic.
    fn hessians(&self, _y: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        None
    }
}

/// Coefficients of an affine map `c0 + c1 x + c2 mean(m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCoeffs {
    pub c0: DVector<f64>,
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
}

impl AffineCoeffs {
    pub fn zeros(n: usize) -> Self {
        AffineCoeffs { c0: DVector::zeros(n), c1: DMatrix::zeros(n, n), c2: DMatrix::zeros(n, n) }
    }

    pub fn apply(&self, x: &[f64], mean: &[f64]) -> DVector<f64> {
        let x = DVector::from_column_slice(x);
        let m = DVector::from_column_slice(mean);
        &self.c0 + &self.c1 * x + &self.c2 * m
    }

    pub fn is_zero(&self) -> bool {
        self.c0.iter().chain(self.c1.iter()).chain(self.c2.iter()).all(|v| *v == 0.0)
    }
}

/// Time-dependent affine diffusion column `sigma^j_0(t) + sigma^j_1(t) x + sigma^j_2(t) mean`.
pub trait LinearColumn: Send + Sync {
    fn coeffs(&self, t: f64) -> AffineCoeffs;
}

/// Jump coefficient `gamma_0(t,e) + gamma_1(t,e) x + gamma_2(t,e) mean` for each atom.
pub trait LinearJump: Send + Sync {
    fn coeffs(&self, t: f64, atom: usize, mark: &[f64]) -> AffineCoeffs;
}

/// Time-independent affine coefficient.
#[derive(Clone, Debug)]
pub struct ConstantAffine(pub AffineCoeffs);

impl LinearColumn for ConstantAffine {
    fn coeffs(&self, _t: f64) -> AffineCoeffs {
        self.0.clone()
    }
}

/// Jump coefficients tabulated per atom, constant in time.
#[derive(Clone, Debug)]
pub struct AtomTable(pub Vec<AffineCoeffs>);

impl LinearJump for AtomTable {
    fn coeffs(&self, _t: f64, atom: usize, _mark: &[f64]) -> AffineCoeffs {
        self.0[atom].clone()
    }
}

/// Column `j` of the diffusion matrix.
#[derive(Clone)]
pub enum DiffusionColumn {
    /// Control-free affine column (`d_j = 0`).
    Linear(Arc<dyn LinearColumn>),
    /// `A^j(t, x, s, v^j)` with its running cost `f^j(t, x, s, v^j)`.
    Controlled { coeff: Arc<dyn SmoothMap>, cost: Arc<dyn SmoothMap> },
}

/// Finite atomic intensity measure on the mark space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpAtom {
    pub mark: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpMeasure {
    atoms: Vec<JumpAtom>,
}

impl JumpMeasure {
    pub fn new(atoms: Vec<JumpAtom>) -> Result<Self> {
        for (k, a) in atoms.iter().enumerate() {
            if !(a.weight.is_finite() && a.weight > 0.0) {
                return Err(Error::domain(format!("jump atom {k} has non-positive weight {}", a.weight)));
            }
            if a.mark.is_empty() || a.mark.iter().all(|v| *v == 0.0) {
                return Err(Error::domain(format!("jump atom {k} has a zero mark")));
            }
            if a.mark.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("jump atom {k} has a non-finite mark")));
            }
        }
        Ok(JumpMeasure { atoms })
    }

    pub fn none() -> Self {
        JumpMeasure { atoms: Vec::new() }
    }

    pub fn single(mark: f64, weight: f64) -> Result<Self> {
        Self::new(vec![JumpAtom { mark: vec![mark], weight }])
    }

    pub fn atoms(&self) -> &[JumpAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weight(&self, a: usize) -> f64 {
        self.atoms[a].weight
    }

    pub fn total_intensity(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }
}

/// Structural constants entering the cone bounds and the sufficiency certificate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionConstants {
    #[serde(rename = "L")]
    pub big_l: f64,
    #[serde(rename = "L0")]
    pub l0: f64,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    pub lambda0: f64,
    pub lambda_v: f64,
    pub lambda_x: f64,
    pub lambda_m: f64,
    /// Number of controlled diffusion columns.
    pub l: usize,
}

impl AssumptionConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.big_l, self.l0, self.l1, self.l2, self.lambda0, self.lambda_v, self.lambda_x, self.lambda_m];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("assumption constants must be finite"));
        }
        if self.big_l < 0.0 || self.l0 < 0.0 || self.l1 < 0.0 || self.l2 < 0.0 {
            return Err(Error::domain("L, L0, L1, L2 must be non-negative"));
        }
        if self.lambda0 <= 0.0 {
            return Err(Error::domain("lambda0 must be positive"));
        }
        Ok(())
    }
}

/// Cross-section summary shared by every particle at one time knot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSnapshot {
    pub mean: Vec<f64>,
    pub stats: Vec<f64>,
    /// `|m|_1`
    pub moment1: f64,
    /// `|m|_2`
    pub moment2: f64,
}

/// Full problem specification.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub n: usize,
    /// `(d_0, d_1, ..., d_n)`
    pub control_split: Vec<usize>,
    pub stats: Arc<dyn MeasureStats>,
    /// `B(t, x, s, v^0) -> R^n`
    pub drift: Arc<dyn SmoothMap>,
    /// `f^0(t, x, s, v^0) -> R`
    pub running_cost: Arc<dyn SmoothMap>,
    pub columns: Vec<DiffusionColumn>,
    pub jump: Arc<dyn LinearJump>,
    /// `g(x, s) -> R`
    pub terminal_cost: Arc<dyn SmoothMap>,
    pub constants: AssumptionConstants,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("control_split", &self.control_split)
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

/// Per-step time-only coefficients of the affine columns and jumps.
#[derive(Clone, Debug)]
pub(crate) struct StepAffine {
    pub columns: Vec<Option<AffineCoeffs>>,
    pub jumps: Vec<AffineCoeffs>,
    pub weights: Vec<f64>,
}

/// Control-independent quantities of the backward driver at one particle.
#[derive(Clone, Debug)]
pub(crate) struct DriverParts {
    /// Local part of the driver.
    pub local: DVector<f64>,
    /// Contribution to the statistic-space mean-field vector.
    pub cvec: DVector<f64>,
    /// Contribution to the state-space mean-field vector (affine columns and jumps).
    pub dvec: DVector<f64>,
}

pub(crate) fn pack(x: &[f64], s: &[f64], v: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(x.len() + s.len() + v.len());
    z.extend_from_slice(x);
    z.extend_from_slice(s);
    z.extend_from_slice(v);
    z
}

/// `sum_o w_o H_o dz`, the directional derivative of `J^T w` for fixed `w`.
pub(crate) fn weighted_hvp(h: &[DMatrix<f64>], w: &[f64], dz: &[f64]) -> DVector<f64> {
    let dz = DVector::from_column_slice(dz);
    let mut out = DVector::zeros(dz.len());
    for (ho, wo) in h.iter().zip(w) {
        if *wo != 0.0 {
            out.gemv(*wo, ho, &dz, 1.0);
        }
    }
    out
}

fn require_hessians(name: &str, h: Option<Vec<DMatrix<f64>>>) -> Result<Vec<DMatrix<f64>>> {
    h.ok_or_else(|| Error::MissingDerivatives(format!("{name} provides no Hessians")))
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(Error::domain("state dimension must be positive"));
        }
        if self.control_split.len() != n + 1 {
            return Err(Error::domain(format!(
                "control_split has {} entries, expected n + 1 = {}",
                self.control_split.len(),
                n + 1
            )));
        }
        if self.control_split[0] == 0 {
            return Err(Error::domain("d_0 must be at least 1"));
        }
        if self.columns.len() != n {
            return Err(Error::domain(format!("{} diffusion columns for n = {n}", self.columns.len())));
        }
        let k = self.stats.dim();
        if self.stats.state_dim() != n {
            return Err(Error::domain("measure statistics act on the wrong dimension"));
        }
        let d0 = self.control_split[0];
        let expect = |name: &str, map: &dyn SmoothMap, args: ArgDims, out: usize| -> Result<()> {
            if map.args() != args || map.out_dim() != out {
                return Err(Error::domain(format!(
                    "{name}: expected args {args:?} -> {out}, got {:?} -> {}",
                    map.args(),
                    map.out_dim()
                )));
            }
            Ok(())
        };
        expect("drift", self.drift.as_ref(), ArgDims { x: n, s: k, v: d0 }, n)?;
        expect("running_cost", self.running_cost.as_ref(), ArgDims { x: n, s: k, v: d0 }, 1)?;
        expect("terminal_cost", self.terminal_cost.as_ref(), ArgDims { x: n, s: k, v: 0 }, 1)?;
        for (j, col) in self.columns.iter().enumerate() {
            let dj = self.control_split[j + 1];
            match col {
                DiffusionColumn::Linear(_) if dj == 0 => {}
                DiffusionColumn::Controlled { coeff, cost } if dj > 0 => {
                    let args = ArgDims { x: n, s: k, v: dj };
                    expect(&format!("diffusion[{}]", j + 1), coeff.as_ref(), args, n)?;
                    expect(&format!("running_cost[{}]", j + 1), cost.as_ref(), args, 1)?;
                }
                _ => {
                    return Err(Error::domain(format!(
                        "diffusion column {} does not match d_{} = {dj}",
                        j + 1,
                        j + 1
                    )))
                }
            }
        }
        self.constants.validate()?;
        if self.constants.l != self.controlled_columns() {
            return Err(Error::domain(format!(
                "constants.l = {} but {} columns are controlled",
                self.constants.l,
                self.controlled_columns()
            )));
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.control_split.iter().sum()
    }

    pub fn stats_dim(&self) -> usize {
        self.stats.dim()
    }

    /// Offset of block `j` inside the full control vector.
    pub fn control_offset(&self, j: usize) -> usize {
        self.control_split[..j].iter().sum()
    }

    pub fn control_block<'a>(&self, u: &'a [f64], j: usize) -> &'a [f64] {
        let o = self.control_offset(j);
        &u[o..o + self.control_split[j]]
    }

    pub fn controlled_columns(&self) -> usize {
        self.control_split[1..].iter().filter(|d| **d > 0).count()
    }

    /// Whether the diffusion is control-free.
    pub fn diffusion_control_free(&self) -> bool {
        self.controlled_columns() == 0
    }

    /// Whether every callback supplies second derivatives.
    pub fn has_second_derivatives(&self) -> bool {
        self.second_derivative_gaps().is_empty()
    }

    fn second_derivative_gaps(&self) -> Vec<String> {
        let n = self.n;
        let k = self.stats.dim();
        let d0 = self.control_split[0];
        let probe = |m: &dyn SmoothMap, v: usize| m.hessians(0.0, &vec![0.1; n + k + v]).is_some();
        let mut gaps = Vec::new();
        if self.stats.hessians(&vec![0.1; n]).is_none() {
            gaps.push("measure statistics".to_string());
        }
        if !probe(self.drift.as_ref(), d0) {
            gaps.push("drift".into());
        }
        if !probe(self.running_cost.as_ref(), d0) {
            gaps.push("running_cost".into());
        }
        if !probe(self.terminal_cost.as_ref(), 0) {
            gaps.push("terminal_cost".into());
        }
        for (j, col) in self.columns.iter().enumerate() {
            if let DiffusionColumn::Controlled { coeff, cost } = col {
                let dj = self.control_split[j + 1];
                if !probe(coeff.as_ref(), dj) || !probe(cost.as_ref(), dj) {
                    gaps.push(format!("diffusion[{}]", j + 1));
                }
            }
        }
        gaps
    }

    pub fn require_second_derivatives(&self) -> Result<()> {
        let gaps = self.second_derivative_gaps();
        if gaps.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingDerivatives(gaps.join(", ")))
        }
    }

    /// Snapshot of a flattened `N x n` cloud.
    pub fn snapshot(&self, exec: Exec, cloud: &[f64]) -> MeasureSnapshot {
        let n = self.n;
        let k = self.stats.dim();
        let count = cloud.len() / n;
        let acc = exec::mean(exec, count, n + k + 2, |i, acc| {
            let y = &cloud[i * n..(i + 1) * n];
            let phi = self.stats.phi(y);
            let mut sq = 0.0;
            for c in 0..n {
                acc[c] += y[c];
                sq += y[c] * y[c];
            }
            for l in 0..k {
                acc[n + l] += phi[l];
            }
            acc[n + k] += sq.sqrt();
            acc[n + k + 1] += sq;
        });
        MeasureSnapshot {
            mean: acc[..n].to_vec(),
            stats: acc[n..n + k].to_vec(),
            moment1: acc[n + k],
            moment2: acc[n + k + 1].sqrt(),
        }
    }

    pub fn snapshot_of(&self, mu: &EmpiricalMeasure) -> MeasureSnapshot {
        self.snapshot(Exec::Sequential, mu.points())
    }

    pub(crate) fn step_affine(&self, t: f64, jm: &crate::model::JumpMeasure) -> StepAffine {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                DiffusionColumn::Linear(l) => Some(l.coeffs(t)),
                DiffusionColumn::Controlled { .. } => None,
            })
            .collect();
        let jumps = jm.atoms().iter().enumerate().map(|(a, atom)| self.jump.coeffs(t, a, &atom.mark)).collect();
        let weights = jm.atoms().iter().map(|a| a.weight).collect();
        StepAffine { columns, jumps, weights }
    }

    /// Drift vector and diffusion matrix (columns `sigma^j`) at one particle.
    pub(crate) fn coefficients(
        &self,
        t: f64,
        x: &[f64],
        snap: &MeasureSnapshot,
        aff: &StepAffine,
        u: &[f64],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let b = self.drift.eval(t, &pack(x, &snap.stats, self.control_block(u, 0)));
        let mut sigma = DMatrix::zeros(self.n, self.n);
        for (j, col) in self.columns.iter().enumerate() {
            let c = match col {
                DiffusionColumn::Linear(_) => aff.columns[j].as_ref().expect("affine column").apply(x, &snap.mean),
                DiffusionColumn::Controlled { coeff, .. } => {
                    coeff.eval(t, &pack(x, &snap.stats, self.control_block(u, j + 1)))
                }
            };
            sigma.set_column(j, &c);
        }
        (b, sigma)
    }

    /// `f(t, x, m, u) = f^0 + sum_j f^j`.
    pub(crate) fn running_cost_at(&self, t: f64, x: &[f64], snap: &MeasureSnapshot, u: &[f64]) -> f64 {
        let mut f = self.running_cost.eval(t, &pack(x, &snap.stats, self.control_block(u, 0)))[0];
        for (j, col) in self.columns.iter().enumerate() {
            if let DiffusionColumn::Controlled { cost, .. } = col {
                f += cost.eval(t, &pack(x, &snap.stats, self.control_block(u, j + 1)))[0];
            }
        }
        f
    }

    pub(crate) fn terminal_cost_at(&self, t: f64, x: &[f64], snap: &MeasureSnapshot) -> f64 {
        self.terminal_cost.eval(t, &pack(x, &snap.stats, &[]))[0]
    }

    /// Per-particle pieces of `g_x(x, m) + E^[D_y dg/dnu(X^, m)(x)]`: local gradient and statistic gradient.
    pub(crate) fn terminal_parts(&self, t: f64, x: &[f64], snap: &MeasureSnapshot) -> (DVector<f64>, DVector<f64>) {
        let a = self.terminal_cost.args();
        let j = self.terminal_cost.jacobian(t, &pack(x, &snap.stats, &[]));
        let row = j.row(0);
        (
            DVector::from_iterator(a.x, row.columns_range(a.x_range()).iter().copied()),
            DVector::from_iterator(a.s, row.columns_range(a.s_range()).iter().copied()),
        )
    }

    /// Tangent of [`Self::terminal_parts`] along `(dx, ds)`.
    pub(crate) fn terminal_parts_tangent(
        &self,
        t: f64,
        x: &[f64],
        snap: &MeasureSnapshot,
        dx: &[f64],
        ds: &[f64],
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let a = self.terminal_cost.args();
        let h = require_hessians("terminal_cost", self.terminal_cost.hessians(t, &pack(x, &snap.stats, &[])))?;
        let d = weighted_hvp(&h, &[1.0], &pack(dx, ds, &[]));
        Ok((d.rows_range(a.x_range()).into_owned(), d.rows_range(a.s_range()).into_owned()))
    }

    /// `grad phi(y)^T c` plus optionally its tangent along `dy`.
    pub(crate) fn stats_pullback(&self, y: &[f64], c: &[f64]) -> DVector<f64> {
        self.stats.grad(y).tr_mul(&DVector::from_column_slice(c))
    }

    pub(crate) fn stats_pullback_tangent(&self, y: &[f64], c: &[f64], dy: &[f64], dc: &[f64]) -> Result<DVector<f64>> {
        let mut out = self.stats.grad(y).tr_mul(&DVector::from_column_slice(dc));
        let h = require_hessians("measure statistics", self.stats.hessians(y))?;
        out += weighted_hvp(&h, c, dy);
        Ok(out)
    }

    /// Per-particle pieces of the adjoint driver for adjoint values `(p, q, r)`.
    ///
    /// `q` stores column `Q^j` at `q[j*n..(j+1)*n]`; `r` stores atom `a` at `r[a*n..(a+1)*n]`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn driver_parts(
        &self,
        t: f64,
        x: &[f64],
        snap: &MeasureSnapshot,
        aff: &StepAffine,
        u: &[f64],
        p: &[f64],
        q: &[f64],
        r: &[f64],
    ) -> DriverParts {
        let n = self.n;
        let k = self.stats.dim();
        let mut local = DVector::zeros(n);
        let mut cvec = DVector::zeros(k);
        let mut dvec = DVector::zeros(n);
        let add_map = |jac: &DMatrix<f64>, w: &[f64], local: &mut DVector<f64>, cvec: &mut DVector<f64>| {
            let wv = DVector::from_column_slice(w);
            let jt = jac.tr_mul(&wv);
            *local += jt.rows(0, n);
            *cvec += jt.rows(n, k);
        };
        let z0 = pack(x, &snap.stats, self.control_block(u, 0));
        add_map(&self.drift.jacobian(t, &z0), p, &mut local, &mut cvec);
        add_map(&self.running_cost.jacobian(t, &z0), &[1.0], &mut local, &mut cvec);
        for (j, col) in self.columns.iter().enumerate() {
            let qj = &q[j * n..(j + 1) * n];
            let qv = DVector::from_column_slice(qj);
            match col {
                DiffusionColumn::Linear(_) => {
                    let c = aff.columns[j].as_ref().expect("affine column");
                    local += c.c1.tr_mul(&qv);
                    dvec += c.c2.tr_mul(&qv);
                }
                DiffusionColumn::Controlled { coeff, cost } => {
                    let zj = pack(x, &snap.stats, self.control_block(u, j + 1));
                    add_map(&coeff.jacobian(t, &zj), qj, &mut local, &mut cvec);
                    add_map(&cost.jacobian(t, &zj), &[1.0], &mut local, &mut cvec);
                }
            }
        }
        for (a, g) in aff.jumps.iter().enumerate() {
            let ra = DVector::from_column_slice(&r[a * n..(a + 1) * n]) * aff.weights[a];
            local += g.c1.tr_mul(&ra);
            dvec += g.c2.tr_mul(&ra);
        }
        DriverParts { local, cvec, dvec }
    }

    /// Directional derivative of [`Self::driver_parts`].
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn driver_parts_tangent(
        &self,
        t: f64,
        x: &[f64],
        snap: &MeasureSnapshot,
        aff: &StepAffine,
        u: &[f64],
        p: &[f64],
        q: &[f64],
        dx: &[f64],
        ds: &[f64],
        du: &[f64],
        dp: &[f64],
        dq: &[f64],
        dr: &[f64],
    ) -> Result<DriverParts> {
        let n = self.n;
        let k = self.stats.dim();
        let mut local = DVector::zeros(n);
        let mut cvec = DVector::zeros(k);
        let mut dvec = DVector::zeros(n);
        let add_map = |name: &str,
                           map: &dyn SmoothMap,
                           z: &[f64],
                           dz: &[f64],
                           w: &[f64],
                           dw: Option<&[f64]>,
                           local: &mut DVector<f64>,
                           cvec: &mut DVector<f64>|
         -> Result<()> {
            let h = require_hessians(name, map.hessians(t, z))?;
            let mut d = weighted_hvp(&h, w, dz);
            if let Some(dw) = dw {
                d += map.jacobian(t, z).tr_mul(&DVector::from_column_slice(dw));
            }
            *local += d.rows(0, n);
            *cvec += d.rows(n, k);
            Ok(())
        };
        let z0 = pack(x, &snap.stats, self.control_block(u, 0));
        let dz0 = pack(dx, ds, self.control_block(du, 0));
        add_map("drift", self.drift.as_ref(), &z0, &dz0, p, Some(dp), &mut local, &mut cvec)?;
        add_map("running_cost", self.running_cost.as_ref(), &z0, &dz0, &[1.0], None, &mut local, &mut cvec)?;
        for (j, col) in self.columns.iter().enumerate() {
            let dqj = &dq[j * n..(j + 1) * n];
            match col {
                DiffusionColumn::Linear(_) => {
                    let c = aff.columns[j].as_ref().expect("affine column");
                    let dqv = DVector::from_column_slice(dqj);
                    local += c.c1.tr_mul(&dqv);
                    dvec += c.c2.tr_mul(&dqv);
                }
                DiffusionColumn::Controlled { coeff, cost } => {
                    let zj = pack(x, &snap.stats, self.control_block(u, j + 1));
                    let dzj = pack(dx, ds, self.control_block(du, j + 1));
                    let qj = &q[j * n..(j + 1) * n];
                    add_map("diffusion", coeff.as_ref(), &zj, &dzj, qj, Some(dqj), &mut local, &mut cvec)?;
                    add_map("running_cost", cost.as_ref(), &zj, &dzj, &[1.0], None, &mut local, &mut cvec)?;
                }
            }
        }
        for (a, g) in aff.jumps.iter().enumerate() {
            let ra = DVector::from_column_slice(&dr[a * n..(a + 1) * n]) * aff.weights[a];
            local += g.c1.tr_mul(&ra);
            dvec += g.c2.tr_mul(&ra);
        }
        Ok(DriverParts { local, cvec, dvec })
    }

    /// Compensated jump increment `sum_a gamma_a (dN_a - lambda_a dt)`.
    pub(crate) fn jump_increment(
        &self,
        x: &[f64],
        mean: &[f64],
        aff: &StepAffine,
        counts: &[u32],
        dt: f64,
    ) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (a, g) in aff.jumps.iter().enumerate() {
            let comp = counts[a] as f64 - aff.weights[a] * dt;
            if comp != 0.0 {
                out += g.apply(x, mean) * comp;
            }
        }
        out
    }

    // Named callbacks evaluated against an explicit measure.

    pub fn drift_at(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, v0: &[f64]) -> DVector<f64> {
        let s = self.snapshot_of(mu);
        self.drift.eval(t, &pack(x, &s.stats, v0))
    }

    pub fn drift_dx(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, v0: &[f64]) -> DMatrix<f64> {
        let s = self.snapshot_of(mu);
        let a = self.drift.args();
        self.drift.jacobian(t, &pack(x, &s.stats, v0)).columns_range(a.x_range()).into_owned()
    }

    pub fn drift_dv(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, v0: &[f64]) -> DMatrix<f64> {
        let s = self.snapshot_of(mu);
        let a = self.drift.args();
        self.drift.jacobian(t, &pack(x, &s.stats, v0)).columns_range(a.v_range()).into_owned()
    }

    /// `D_y dB/dnu(t, x, mu, v0)(y)`.
    pub fn drift_dnu(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, v0: &[f64], y: &[f64]) -> DMatrix<f64> {
        let s = self.snapshot_of(mu);
        let a = self.drift.args();
        let js = self.drift.jacobian(t, &pack(x, &s.stats, v0)).columns_range(a.s_range()).into_owned();
        js * self.stats.grad(y)
    }

    /// `D_y df/dnu(t, x, mu, u)(y)` for the full running cost.
    pub fn running_cost_dnu(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, u: &[f64], y: &[f64]) -> DVector<f64> {
        let s = self.snapshot_of(mu);
        let cvec = self.cost_stat_gradient(t, x, &s, u);
        self.stats.grad(y).tr_mul(&cvec)
    }

    fn cost_stat_gradient(&self, t: f64, x: &[f64], snap: &MeasureSnapshot, u: &[f64]) -> DVector<f64> {
        let a = self.running_cost.args();
        let mut c: DVector<f64> = self
            .running_cost
            .jacobian(t, &pack(x, &snap.stats, self.control_block(u, 0)))
            .row(0)
            .columns_range(a.s_range())
            .transpose();
        for (j, col) in self.columns.iter().enumerate() {
            if let DiffusionColumn::Controlled { cost, .. } = col {
                let a = cost.args();
                c += cost
                    .jacobian(t, &pack(x, &snap.stats, self.control_block(u, j + 1)))
                    .row(0)
                    .columns_range(a.s_range())
                    .transpose();
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqoracle::LqSpec;

    #[test]
    fn jump_measure_invariants() {
        assert!(JumpMeasure::new(vec![JumpAtom { mark: vec![0.0], weight: 1.0 }]).is_err());
        assert!(JumpMeasure::new(vec![JumpAtom { mark: vec![1.0], weight: 0.0 }]).is_err());
        let jm = JumpMeasure::new(vec![
            JumpAtom { mark: vec![1.0], weight: 2.0 },
            JumpAtom { mark: vec![-1.0], weight: 0.5 },
        ])
        .unwrap();
        assert_eq!(jm.total_intensity(), 2.5);
    }

    #[test]
    fn affine_columns_have_exact_x_derivatives() {
        let spec = LqSpec::fixture_with_jump();
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let aff = model.step_affine(0.3, &jm);
        let snap = MeasureSnapshot { mean: vec![0.2], stats: vec![0.2], moment1: 0.2, moment2: 0.2 };
        let h = 1e-3;
        let (_, sp) = model.coefficients(0.3, &[0.7 + h], &snap, &aff, &[0.0]);
        let (_, sm) = model.coefficients(0.3, &[0.7 - h], &snap, &aff, &[0.0]);
        let fd = (sp[(0, 0)] - sm[(0, 0)]) / (2.0 * h);
        assert!((fd - spec.sigma1[0]).abs() < 1e-12);
        let gp = aff.jumps[0].apply(&[0.7 + h], &snap.mean)[0];
        let gm = aff.jumps[0].apply(&[0.7 - h], &snap.mean)[0];
        assert!(((gp - gm) / (2.0 * h) - spec.jumps[0].gamma1[0]).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_split() {
        let mut model = LqSpec::fixture_with_jump().model().unwrap();
        model.control_split = vec![0, 1];
        assert!(model.validate().is_err());
        let mut model = LqSpec::fixture_with_jump().model().unwrap();
        model.constants.l = 1;
        assert!(model.validate().is_err());
    }

    #[test]
    fn named_measure_derivative_matches_chain_rule() {
        let model = crate::lqoracle::example_model(0.5, &LqSpec::example_costs()).unwrap();
        let mu = EmpiricalMeasure::new(1, vec![-0.5, 0.3, 1.4]).unwrap();
        let d = model.drift_dnu(0.0, &[0.4], &mu, &[0.1], &[0.3]);
        // Finite difference of the N-particle lift, scaled by N.
        let h = 1e-6;
        let bump = |e: f64| {
            let m = EmpiricalMeasure::new(1, vec![-0.5, 0.3 + e, 1.4]).unwrap();
            model.drift_at(0.0, &[0.4], &m, &[0.1])[0]
        };
        let fd = 3.0 * (bump(h) - bump(-h)) / (2.0 * h);
        assert!((d[(0, 0)] - fd).abs() < 1e-7);
    }
}
