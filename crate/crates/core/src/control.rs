//! Hamiltonian minimizers, feedback assembly and cone-property monitors.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adjoint::{AdjointEnsemble, DecouplingField};
use crate::array::Cube;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::measure::EmpiricalMeasure;
use crate::model::{pack, weighted_hvp, DiffusionColumn, MeasureSnapshot, ModelSpec, SmoothMap};
use crate::simulate::ParticleEnsemble;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinimizerSettings {
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Initial Newton step length; halved until the residual decreases.
    pub damping: f64,
}

impl Default for MinimizerSettings {
    fn default() -> Self {
        MinimizerSettings { newton_tol: 1e-10, max_newton: 50, damping: 1.0 }
    }
}

impl MinimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0) {
            return Err(Error::config("minimizer.newton_tol", "must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("minimizer.damping", "must lie in (0, 1]"));
        }
        if self.max_newton == 0 {
            return Err(Error::config("minimizer.max_newton", "must be positive"));
        }
        Ok(())
    }
}

/// Iterations of the fixed-point fallback.
const FALLBACK_ITERATIONS: usize = 200;

/// Threshold on the first-order residual, relative to `1 + |p| + |q|`, for a control to count as optimal.
pub const OPTIMALITY_THRESHOLD: f64 = 1e-6;

/// `J_w^T w + J_c^T` restricted to the control rows, with `w` weighting the outputs of `weighted`.
fn block_gradient(weighted: &dyn SmoothMap, w: &[f64], cost: &dyn SmoothMap, t: f64, z: &[f64]) -> DVector<f64> {
    let a = weighted.args();
    let jw = weighted.jacobian(t, z);
    let jc = cost.jacobian(t, z);
    let mut g = DVector::zeros(a.v);
    for (r, c) in a.v_range().enumerate() {
        let mut acc = jc[(0, c)];
        for (o, wo) in w.iter().enumerate() {
            acc += jw[(o, c)] * wo;
        }
        g[r] = acc;
    }
    g
}

fn block_hessian(
    weighted: &dyn SmoothMap,
    w: &[f64],
    cost: &dyn SmoothMap,
    t: f64,
    z: &[f64],
) -> Option<DMatrix<f64>> {
    let a = weighted.args();
    let hw = weighted.hessians(t, z)?;
    let hc = cost.hessians(t, z)?;
    let vr = a.v_range();
    let mut h = hc[0].view((vr.start, vr.start), (a.v, a.v)).into_owned();
    for (ho, wo) in hw.iter().zip(w) {
        if *wo != 0.0 {
            h += ho.view((vr.start, vr.start), (a.v, a.v)) * *wo;
        }
    }
    Some(h)
}

/// Solves `J_w(v)^T w + J_c(v)^T = 0` in the control block of `(x, s, v)`.
#[allow(clippy::too_many_arguments)]
fn minimize_block(
    name: &str,
    weighted: &dyn SmoothMap,
    w: &[f64],
    cost: &dyn SmoothMap,
    t: f64,
    x: &[f64],
    s: &[f64],
    init: &[f64],
    settings: &MinimizerSettings,
    tau: f64,
) -> Result<Vec<f64>> {
    let wnorm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = settings.newton_tol * (1.0 + wnorm);
    let mut z = pack(x, s, init);
    let vr = weighted.args().v_range();
    let grad = |z: &[f64]| block_gradient(weighted, w, cost, t, z);
    let mut g = grad(&z);
    let mut res = g.norm();
    if !res.is_finite() {
        return Err(Error::CallbackFailure { name: name.into(), detail: "non-finite first-order residual".into() });
    }
    let mut newton_ok = true;
    for _ in 0..settings.max_newton {
        if res <= tol {
            return Ok(z[vr].to_vec());
        }
        let Some(h) = block_hessian(weighted, w, cost, t, &z) else {
            newton_ok = false;
            break;
        };
        let Some(step) = h.lu().solve(&g) else {
            newton_ok = false;
            break;
        };
        let mut alpha = settings.damping;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = z.clone();
            for (k, c) in vr.clone().enumerate() {
                trial[c] -= alpha * step[k];
            }
            let gt = grad(&trial);
            let rt = gt.norm();
            if rt < res || rt <= tol {
                z = trial;
                g = gt;
                res = rt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            newton_ok = false;
            break;
        }
    }
    if res <= tol {
        return Ok(z[vr].to_vec());
    }
    let _ = newton_ok;
    for _ in 0..FALLBACK_ITERATIONS {
        for (k, c) in vr.clone().enumerate() {
            z[c] -= tau * g[k];
        }
        g = grad(&z);
        res = g.norm();
        if res <= tol {
            return Ok(z[vr].to_vec());
        }
    }
    Err(Error::NoConvergence {
        what: format!("minimizer for {name}"),
        iterations: settings.max_newton + FALLBACK_ITERATIONS,
        last_change: res,
        report: None,
    })
}

fn fallback_tau(model: &ModelSpec) -> f64 {
    let c = &model.constants;
    if c.big_l > 0.0 && c.lambda_v > 0.0 {
        c.lambda_v / (c.big_l * c.big_l)
    } else {
        0.5
    }
}

/// Minimizer of `v0 -> B(t,x,s,v0) . p + f0(t,x,s,v0)` at a snapshot.
pub fn phi0_at(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    snap: &MeasureSnapshot,
    p: &[f64],
    settings: &MinimizerSettings,
    init: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let d0 = model.control_split[0];
    let zero = vec![0.0; d0];
    minimize_block(
        "drift",
        model.drift.as_ref(),
        p,
        model.running_cost.as_ref(),
        t,
        x,
        &snap.stats,
        init.unwrap_or(&zero),
        settings,
        fallback_tau(model),
    )
}

/// Minimizer of `v -> A^j(t,x,s,v) . q + f^j(t,x,s,v)` for a controlled column `j` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn phij_at(
    model: &ModelSpec,
    j: usize,
    t: f64,
    x: &[f64],
    snap: &MeasureSnapshot,
    q: &[f64],
    settings: &MinimizerSettings,
    init: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let Some(DiffusionColumn::Controlled { coeff, cost }) = model.columns.get(j.wrapping_sub(1)) else {
        return Err(Error::domain(format!("column {j} carries no control")));
    };
    let zero = vec![0.0; model.control_split[j]];
    minimize_block(
        &format!("diffusion[{j}]"),
        coeff.as_ref(),
        q,
        cost.as_ref(),
        t,
        x,
        &snap.stats,
        init.unwrap_or(&zero),
        settings,
        fallback_tau(model),
    )
}

pub fn phi0(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    p: &[f64],
    settings: &MinimizerSettings,
) -> Result<Vec<f64>> {
    phi0_at(model, t, x, &model.snapshot_of(mu), p, settings, None)
}

#[allow(clippy::too_many_arguments)]
pub fn phij(
    model: &ModelSpec,
    j: usize,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    qj: &[f64],
    settings: &MinimizerSettings,
) -> Result<Vec<f64>> {
    phij_at(model, j, t, x, &model.snapshot_of(mu), qj, settings, None)
}

/// Full control vector `(phi0(p), phi1(q^1), ..., phin(q^n))` at one particle; `q` holds the columns `q^j`.
#[allow(clippy::too_many_arguments)]
pub fn feedback_at(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    snap: &MeasureSnapshot,
    p: &[f64],
    q: &[f64],
    settings: &MinimizerSettings,
    warm: Option<&[f64]>,
    out: &mut [f64],
) -> Result<()> {
    let n = model.n;
    let d0 = model.control_split[0];
    let v0 = phi0_at(model, t, x, snap, p, settings, warm.map(|w| &w[..d0]))?;
    out[..d0].copy_from_slice(&v0);
    for j in 1..=n {
        let dj = model.control_split[j];
        if dj == 0 {
            continue;
        }
        let o = model.control_offset(j);
        let vj = phij_at(model, j, t, x, snap, &q[(j - 1) * n..j * n], settings, warm.map(|w| &w[o..o + dj]))?;
        out[o..o + dj].copy_from_slice(&vj);
    }
    Ok(())
}

/// Controls for a whole cross-section; `p` is `N x n`, `q` is `N x n^2`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_feedback(
    model: &ModelSpec,
    exec: Exec,
    t: f64,
    states: &[f64],
    snap: &MeasureSnapshot,
    p: &[f64],
    q: &[f64],
    settings: &MinimizerSettings,
    warm: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = model.n;
    let d = model.control_dim();
    let mut out = vec![0.0; states.len() / n * d];
    exec::try_fill_rows(exec, &mut out, d, |i, row| {
        feedback_at(
            model,
            t,
            &states[i * n..(i + 1) * n],
            snap,
            &p[i * n..(i + 1) * n],
            &q[i * n * n..(i + 1) * n * n],
            settings,
            warm.map(|w| &w[i * d..(i + 1) * d]),
            row,
        )
        .map_err(|e| match e {
            Error::NoConvergence { what, iterations, last_change, report } => {
                Error::NoConvergence { what: format!("{what} at particle {i}"), iterations, last_change, report }
            }
            other => other,
        })
    })?;
    Ok(out)
}

/// First-order residual of the split optimality condition at one particle, relative to `1 + |p| + |q|`.
pub fn optimality_residual(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    snap: &MeasureSnapshot,
    u: &[f64],
    p: &[f64],
    q: &[f64],
) -> f64 {
    let n = model.n;
    let z0 = pack(x, &snap.stats, model.control_block(u, 0));
    let mut sq = block_gradient(model.drift.as_ref(), p, model.running_cost.as_ref(), t, &z0).norm_squared();
    for (j, col) in model.columns.iter().enumerate() {
        if let DiffusionColumn::Controlled { coeff, cost } = col {
            let zj = pack(x, &snap.stats, model.control_block(u, j + 1));
            sq += block_gradient(coeff.as_ref(), &q[j * n..(j + 1) * n], cost.as_ref(), t, &zj).norm_squared();
        }
    }
    let scale = 1.0 + p.iter().chain(q).map(|v| v * v).sum::<f64>().sqrt();
    sq.sqrt() / scale
}

/// Directional derivative of the full first-order condition vector along
/// `(dx, ds, du, dp, dq)`; `q`, `dq` hold the columns `q^j`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn foc_tangent(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    snap: &MeasureSnapshot,
    u: &[f64],
    p: &[f64],
    q: &[f64],
    dx: &[f64],
    ds: &[f64],
    du: &[f64],
    dp: &[f64],
    dq: &[f64],
) -> Result<DVector<f64>> {
    let n = model.n;
    let mut out = DVector::zeros(model.control_dim());
    let block = |name: &str,
                 map: &dyn SmoothMap,
                 cost: &dyn SmoothMap,
                 j: usize,
                 w: &[f64],
                 dw: &[f64],
                 out: &mut DVector<f64>|
     -> Result<()> {
        let z = pack(x, &snap.stats, model.control_block(u, j));
        let dz = pack(dx, ds, model.control_block(du, j));
        let hm = map.hessians(t, &z).ok_or_else(|| Error::MissingDerivatives(format!("{name} provides no Hessians")))?;
        let hc = cost.hessians(t, &z).ok_or_else(|| Error::MissingDerivatives(format!("{name} cost provides no Hessians")))?;
        let mut g = weighted_hvp(&hm, w, &dz) + weighted_hvp(&hc, &[1.0], &dz);
        g += map.jacobian(t, &z).tr_mul(&DVector::from_column_slice(dw));
        let a = map.args();
        let o = model.control_offset(j);
        for (r, c) in a.v_range().enumerate() {
            out[o + r] = g[c];
        }
        Ok(())
    };
    block("drift", model.drift.as_ref(), model.running_cost.as_ref(), 0, p, dp, &mut out)?;
    for (j, col) in model.columns.iter().enumerate() {
        if let DiffusionColumn::Controlled { coeff, cost } = col {
            let r = j * n..(j + 1) * n;
            block("diffusion", coeff.as_ref(), cost.as_ref(), j + 1, &q[r.clone()], &dq[r], &mut out)?;
        }
    }
    Ok(out)
}

/// Hessian of the Hamiltonian in the control, block diagonal over the split.
pub(crate) fn foc_jacobian(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    snap: &MeasureSnapshot,
    u: &[f64],
    p: &[f64],
    q: &[f64],
) -> Result<DMatrix<f64>> {
    let n = model.n;
    let d = model.control_dim();
    let zx = vec![0.0; n];
    let zs = vec![0.0; model.stats_dim()];
    let zq = vec![0.0; n * n];
    let mut m = DMatrix::zeros(d, d);
    let mut e = vec![0.0; d];
    for l in 0..d {
        e[l] = 1.0;
        let col = foc_tangent(model, t, x, snap, u, p, q, &zx, &zs, &e, &zx, &zq)?;
        m.set_column(l, &col);
        e[l] = 0.0;
    }
    Ok(m)
}

/// Control rule used by forward simulation.
#[derive(Clone)]
pub enum FeedbackPolicy {
    Zero,
    /// Open-loop controls per step and particle (`steps x N x d`).
    Table(Cube),
    /// Explicit closed-loop rule `(t, x, snapshot) -> v`.
    Callback(Arc<dyn Fn(f64, &[f64], &MeasureSnapshot) -> Vec<f64> + Send + Sync>),
    /// Feedback through the adjoint decoupling field of a solved problem.
    Adjoint { field: Arc<DecouplingField>, settings: MinimizerSettings },
    /// Open-loop table plus a closed-loop perturbation `(t, x) -> dv`.
    Shifted { table: Cube, shift: Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync> },
}

impl std::fmt::Debug for FeedbackPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeedbackPolicy::Zero => write!(f, "Zero"),
            FeedbackPolicy::Table(c) => write!(f, "Table({}x{}x{})", c.times(), c.particles(), c.width()),
            FeedbackPolicy::Callback(_) => write!(f, "Callback"),
            FeedbackPolicy::Adjoint { .. } => write!(f, "Adjoint"),
            FeedbackPolicy::Shifted { .. } => write!(f, "Shifted"),
        }
    }
}

impl FeedbackPolicy {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn control(
        &self,
        model: &ModelSpec,
        step: usize,
        t: f64,
        particle: usize,
        x: &[f64],
        snap: &MeasureSnapshot,
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            FeedbackPolicy::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            FeedbackPolicy::Table(c) => out.copy_from_slice(c.at(step, particle)),
            FeedbackPolicy::Callback(f) => {
                let v = f(t, x, snap);
                if v.len() != out.len() {
                    return Err(Error::CallbackFailure {
                        name: "policy".into(),
                        detail: format!("returned {} controls, expected {}", v.len(), out.len()),
                    });
                }
                out.copy_from_slice(&v);
            }
            FeedbackPolicy::Adjoint { field, settings } => {
                let _ = model;
                let (u, _) = field.feedback(step, x, snap, settings, None)?;
                out.copy_from_slice(&u);
            }
            FeedbackPolicy::Shifted { table, shift } => {
                let dv = shift(t, x);
                if dv.len() != out.len() {
                    return Err(Error::CallbackFailure {
                        name: "shift".into(),
                        detail: format!("returned {} entries, expected {}", dv.len(), out.len()),
                    });
                }
                for ((o, u), s) in out.iter_mut().zip(table.at(step, particle)).zip(&dv) {
                    *o = u + s;
                }
            }
        }
        Ok(())
    }
}

/// Minimum cone margins at one time step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeStep {
    pub min_margin_p: f64,
    pub min_margin_q: f64,
    pub min_margin_u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeReport {
    pub per_step: Vec<ConeStep>,
    pub min_margin_p: f64,
    pub min_margin_q: f64,
    pub min_margin_u: f64,
    /// Largest bound encountered; margins are compared against a slack relative to it.
    pub scale: f64,
}

impl ConeReport {
    pub fn min_margin(&self) -> f64 {
        self.min_margin_p.min(self.min_margin_q).min(self.min_margin_u)
    }
}

/// Raw cone margins for one particle: `(margin_P, min_j margin_Qj, min margin_u, largest bound)`.
#[allow(clippy::too_many_arguments)]
pub fn cone_margins_at(
    model: &ModelSpec,
    y: &[f64],
    moment1: f64,
    u: Option<&[f64]>,
    p: &[f64],
    q: Option<&[f64]>,
) -> (f64, f64, f64, f64) {
    let c = &model.constants;
    let n = model.n;
    let kp = c.big_l * c.big_l / c.lambda0;
    let ku = c.big_l / (2.0 * c.lambda_v);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let base = 1.0 + norm(y) + moment1;
    let u0 = u.map(|u| norm(model.control_block(u, 0))).unwrap_or(0.0);
    let pn = norm(p);
    let bound_p = kp * (base + u0);
    let mut mp = bound_p - pn;
    let mut mq = f64::INFINITY;
    let mut mu = f64::INFINITY;
    let mut scale = bound_p;
    if let Some(u) = u {
        let bu = ku * (base + pn);
        mu = bu - u0;
        scale = scale.max(bu);
        for j in 1..=n {
            let uj = norm(model.control_block(u, j));
            if let Some(q) = q {
                let qn = norm(&q[(j - 1) * n..j * n]);
                let bq = kp * (base + uj);
                mq = mq.min(bq - qn);
                scale = scale.max(bq);
                if model.control_split[j] > 0 {
                    let bu = ku * (base + qn);
                    mu = mu.min(bu - uj);
                    scale = scale.max(bu);
                }
            }
        }
    } else {
        mp = bound_p - pn;
    }
    (mp, mq, mu, scale)
}

/// Cone-property margins along a solved ensemble.
pub fn cone_margins(model: &ModelSpec, ens: &ParticleEnsemble, adj: &AdjointEnsemble) -> ConeReport {
    let steps = ens.grid.steps;
    let n_particles = ens.particles();
    let mut per_step = Vec::with_capacity(steps + 1);
    let mut scale: f64 = 0.0;
    for k in 0..=steps {
        let m1 = ens.snapshots[k].moment1;
        let mut cs = ConeStep { min_margin_p: f64::INFINITY, min_margin_q: f64::INFINITY, min_margin_u: f64::INFINITY };
        for i in 0..n_particles {
            let (u, q) = if k < steps { (Some(ens.controls.at(k, i)), Some(adj.q.at(k, i))) } else { (None, None) };
            let (mp, mq, mu, sc) = cone_margins_at(model, ens.states.at(k, i), m1, u, adj.p.at(k, i), q);
            cs.min_margin_p = cs.min_margin_p.min(mp);
            cs.min_margin_q = cs.min_margin_q.min(mq);
            cs.min_margin_u = cs.min_margin_u.min(mu);
            scale = scale.max(sc);
        }
        per_step.push(cs);
    }
    let fold = |f: fn(&ConeStep) -> f64| per_step.iter().map(f).fold(f64::INFINITY, f64::min);
    ConeReport {
        min_margin_p: fold(|c| c.min_margin_p),
        min_margin_q: fold(|c| c.min_margin_q),
        min_margin_u: fold(|c| c.min_margin_u),
        per_step,
        scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqoracle::{example_model, LqSpec};
    use crate::model::MeasureSnapshot;

    fn snap(mean: f64) -> MeasureSnapshot {
        MeasureSnapshot { mean: vec![mean], stats: vec![mean], moment1: mean.abs(), moment2: mean.abs() }
    }

    #[test]
    fn lq_minimizer_is_linear() {
        let mut spec = LqSpec::fixture_with_jump();
        spec.c = vec![2.0];
        spec.r = vec![4.0];
        let model = spec.model().unwrap();
        let v = phi0_at(&model, 0.0, &[0.3], &snap(0.1), &[1.5], &MinimizerSettings::default(), None).unwrap();
        assert!((v[0] + 2.0 * 1.5 / 4.0).abs() < 1e-12);
        let v = phi0_at(&model, 0.0, &[0.3], &snap(0.1), &[0.0], &MinimizerSettings::default(), None).unwrap();
        assert_eq!(v[0], 0.0);
    }

    fn grid_search(model: &ModelSpec, x: f64, s: &MeasureSnapshot, p: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        let mut k = 0;
        while k <= 200_000 {
            let v = -10.0 + k as f64 * 1e-4;
            let z = pack(&[x], &s.stats, &[v]);
            let h = model.drift.eval(0.0, &z)[0] * p + model.running_cost.eval(0.0, &z)[0];
            if h < best.0 {
                best = (h, v);
            }
            k += 1;
        }
        best.1
    }

    #[test]
    fn example_minimizer_matches_grid_search() {
        let mut costs = LqSpec::example_costs();
        costs.q = vec![2.0];
        costs.r = vec![2.0];
        let model = example_model(0.5, &costs).unwrap();
        let mu = EmpiricalMeasure::new(1, vec![-0.3, 0.2, 0.9]).unwrap();
        let s = model.snapshot_of(&mu);
        let mut rng = 12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..4 {
            let x = 4.0 * next() - 2.0;
            let p = 6.0 * next() - 3.0;
            let v = phi0(&model, 0.0, &[x], &mu, &[p], &MinimizerSettings::default()).unwrap();
            assert!((v[0] - grid_search(&model, x, &s, p)).abs() < 1e-3, "x={x} p={p}");
        }
    }

    #[test]
    fn controlled_column_minimizer() {
        let mut spec = LqSpec::fixture_with_jump();
        spec.controlled_sigma = Some(crate::lqoracle::ControlledSigma { sc: vec![0.5], r_sigma: vec![2.0] });
        let model = spec.model().unwrap();
        let v = phij_at(&model, 1, 0.0, &[0.2], &snap(0.0), &[0.8], &MinimizerSettings::default(), None).unwrap();
        assert!((v[0] + 0.5 * 0.8 / 2.0).abs() < 1e-12);
        assert!(phij_at(&LqSpec::fixture_with_jump().model().unwrap(), 1, 0.0, &[0.2], &snap(0.0), &[0.8], &MinimizerSettings::default(), None).is_err());
    }

    #[test]
    fn newton_starts_agree() {
        let model = example_model(0.5, &LqSpec::example_costs()).unwrap();
        let s = model.snapshot_of(&EmpiricalMeasure::new(1, vec![-0.3, 0.7]).unwrap());
        let set = MinimizerSettings::default();
        let a = phi0_at(&model, 0.0, &[0.7], &s, &[1.3], &set, Some(&[5.0])).unwrap();
        let b = phi0_at(&model, 0.0, &[0.7], &s, &[1.3], &set, Some(&[-5.0])).unwrap();
        assert!((a[0] - b[0]).abs() <= 10.0 * set.newton_tol);
    }

    #[test]
    fn cone_margin_arithmetic() {
        let mut model = LqSpec::fixture_with_jump().model().unwrap();
        model.constants.big_l = 2.0;
        model.constants.lambda0 = 1.0;
        let (mp, ..) = cone_margins_at(&model, &[1.0], 1.0, Some(&[0.0]), &[3.0], Some(&[0.0]));
        assert_eq!(mp, 9.0);
        let (mp, ..) = cone_margins_at(&model, &[0.0], 0.0, Some(&[0.0]), &[0.0], Some(&[0.0]));
        assert_eq!(mp, 4.0);
    }
}
