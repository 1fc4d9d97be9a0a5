//! Variational systems around a solved problem: the Gateaux derivative
//! `D_eta Theta` of the whole solution in the initial condition, the pinned flow
//! `Theta^{y, mu}` of a tagged particle started at `y` inside the frozen population,
//! and its state derivative `D_y Theta^{y, mu}`.
//!
//! The backward tangent differentiates the discrete regression scheme itself,
//! including the movement of the regression coefficients, so that the flow is the
//! exact derivative of the computed solution map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::accel::Anderson;
use crate::adjoint::{joint_features, step_system, StepSystem};
use crate::array::Cube;
use crate::control::{cone_margins_at, foc_jacobian, foc_tangent, ConeReport, ConeStep, FeedbackPolicy, MinimizerSettings};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::grid::TimeGrid;
use crate::model::{JumpMeasure, ModelSpec};
use crate::noise::{NoiseBundle, StepNoise};
use crate::regression::RegressionConfig;
use crate::simulate::{cross_section_tangent, euler_step_tangent, propagate, simulate_linearized};
use crate::solver::{s_norm, Solution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityConfig {
    /// Relative tolerance on the `L^2` change of `D_eta u` between sweeps.
    pub tol: f64,
    pub max_iter: usize,
    /// Anderson mixing depth of the sweep iteration; 0 gives plain relaxation.
    pub anderson_depth: usize,
    /// Must match the configuration the base solution was computed with.
    pub regression: RegressionConfig,
    pub minimizer: MinimizerSettings,
    pub exec: Exec,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            tol: 1e-10,
            max_iter: 100,
            anderson_depth: 10,
            regression: RegressionConfig::default(),
            minimizer: MinimizerSettings::default(),
            exec: Exec::default(),
        }
    }
}

/// `(D_eta Y, D_eta P, D_eta Q, D_eta R, D_eta u)` laid out like the base solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianFlow {
    pub eta: Vec<f64>,
    pub dy: Cube,
    pub dp: Cube,
    pub dq: Cube,
    pub dr: Cube,
    pub du: Cube,
    pub iterations: usize,
    pub history: Vec<f64>,
    /// Final relaxation weight; starts at 1 and halves whenever a sweep grows.
    pub damping: f64,
    /// `||D_eta Theta||_S / ||eta||_2`, or 0 when `eta = 0`.
    pub bound_ratio: f64,
}

impl JacobianFlow {
    pub fn s_norm(&self, jm: &JumpMeasure, dt: f64) -> f64 {
        s_norm(&self.dy, &self.dp, &self.dq, &self.dr, &self.du, jm, dt)
    }
}

fn l2(c: &Cube, dt: f64) -> f64 {
    let n = c.particles().max(1) as f64;
    (c.data().iter().map(|v| v * v).sum::<f64>() * dt / n).sqrt()
}

/// Per-particle inverse Hessians of the Hamiltonian in the control (`steps x N x d^2`).
fn inverse_foc_jacobians(model: &ModelSpec, base: &Solution, exec: Exec) -> Result<Cube> {
    let ens = &base.ensemble;
    let adj = &base.adjoint;
    let d = model.control_dim();
    let count = ens.particles();
    let mut out = Cube::zeros(ens.grid.steps, count, d * d);
    for k in 0..ens.grid.steps {
        let t = ens.grid.time(k);
        let snap = &ens.snapshots[k];
        exec::try_fill_rows(exec, out.slab_mut(k), d * d, |i, row| {
            let a = foc_jacobian(model, t, ens.states.at(k, i), snap, ens.controls.at(k, i), adj.p.at(k, i), adj.q.at(k, i))?;
            let inv = a.try_inverse().ok_or_else(|| Error::domain(format!("singular control Hessian at step {k}, particle {i}")))?;
            row.copy_from_slice(inv.as_slice());
            Ok::<(), Error>(())
        })?;
    }
    Ok(out)
}

struct Backward {
    dp: Cube,
    dq: Cube,
    dr: Cube,
}

/// Tangent of the backward regression scheme along `(dY, du)`.
fn backward_tangent(
    model: &ModelSpec,
    jm: &JumpMeasure,
    base: &Solution,
    systems: &[StepSystem],
    dy: &Cube,
    du: &Cube,
    exec: Exec,
) -> Result<Backward> {
    let ens = &base.ensemble;
    let adj = &base.adjoint;
    let field = &base.field;
    let grid = ens.grid;
    let n = model.n;
    let kd = model.stats_dim();
    let atoms = jm.len();
    let count = ens.particles();
    let steps = grid.steps;
    let dt = grid.dt();
    let d = model.control_dim();
    let weights: Vec<f64> = jm.atoms().iter().map(|a| a.weight).collect();
    let mut dp = Cube::zeros(steps + 1, count, n);
    let mut dq = Cube::zeros(steps, count, n * n);
    let mut dr = Cube::zeros(steps, count, atoms * n);

    // Terminal condition.
    let ys = ens.states.slab(steps);
    let snap_t = &ens.snapshots[steps];
    let (ds_t, _) = cross_section_tangent(model, exec, ys, dy.slab(steps));
    let mut parts = vec![0.0; count * (n + kd)];
    exec::try_fill_rows(exec, &mut parts, n + kd, |i, row| {
        let (gx, gs) =
            model.terminal_parts_tangent(grid.horizon, &ys[i * n..(i + 1) * n], snap_t, dy.at(steps, i), &ds_t)?;
        row[..n].copy_from_slice(gx.as_slice());
        row[n..].copy_from_slice(gs.as_slice());
        Ok::<(), Error>(())
    })?;
    let dgbar = exec::mean(exec, count, kd, |i, acc| {
        for l in 0..kd {
            acc[l] += parts[i * (n + kd) + n + l];
        }
    });
    exec::try_fill_rows(exec, dp.slab_mut(steps), n, |i, row| {
        let pull = model.stats_pullback_tangent(&ys[i * n..(i + 1) * n], &field.terminal_cbar, dy.at(steps, i), &dgbar)?;
        for c in 0..n {
            row[c] = parts[i * (n + kd) + c] + pull[c];
        }
        Ok::<(), Error>(())
    })?;

    let width = n + n * n + atoms * n + n + kd + n;
    let mut tmp = vec![0.0; count * width];
    for k in (0..steps).rev() {
        let t = grid.time(k);
        let st = &field.steps[k];
        let sys = &systems[k];
        let ys = ens.states.slab(k);
        let dys = dy.slab(k);
        let snap = &ens.snapshots[k];
        let f = sys.basis.len();
        let blocks = 1 + n + atoms;
        let w = f * blocks;
        let p_next = adj.p.slab(k + 1);
        let dp_next = dp.slab(k + 1);
        // Coefficient tangent: G^{-1} mean(dPhi e^T + Phi (dP - dPhi^T beta)^T).
        let acc = exec::mean(exec, count, w * n, |i, acc| {
            let y = &ys[i * n..(i + 1) * n];
            let mut phi = vec![0.0; f];
            let mut z = vec![0.0; blocks];
            let mut row = vec![0.0; w];
            joint_features(&sys.basis, y, &base.noise, i, k, &sys.noise_scale, &weights, dt, &mut phi, &mut z, &mut row);
            let mut dphi = vec![0.0; f];
            sys.basis.eval_tangent(y, &dys[i * n..(i + 1) * n], &mut dphi);
            let mut fit = vec![0.0; n];
            let mut dfit = vec![0.0; n];
            for b in 0..blocks {
                for m in 0..f {
                    for c in 0..n {
                        let beta = sys.beta[(b * f + m, c)];
                        fit[c] += row[b * f + m] * beta;
                        dfit[c] += z[b] * dphi[m] * beta;
                    }
                }
            }
            for b in 0..blocks {
                for m in 0..f {
                    let a = b * f + m;
                    let dfeat = z[b] * dphi[m];
                    for c in 0..n {
                        let e = p_next[i * n + c] - fit[c];
                        acc[a * n + c] += dfeat * e + row[a] * (dp_next[i * n + c] - dfit[c]);
                    }
                }
            }
        });
        let dbeta = sys.normal.solve(&DMatrix::from_row_slice(w, n, &acc));
        let (ds, _) = cross_section_tangent(model, exec, ys, dys);
        let dus = du.slab(k);
        exec::try_fill_rows(exec, &mut tmp, width, |i, row| {
            let y = &ys[i * n..(i + 1) * n];
            let dyi = &dys[i * n..(i + 1) * n];
            let mut phi = vec![0.0; f];
            let mut dphi = vec![0.0; f];
            st.basis.eval(y, &mut phi);
            st.basis.eval_tangent(y, dyi, &mut dphi);
            let reg = st.regressed_with(&phi, n);
            let dreg = st.regressed_tangent(&phi, &dphi, Some(&dbeta), n);
            let parts = model.driver_parts_tangent(
                t,
                y,
                snap,
                &st.aff,
                ens.controls.at(k, i),
                &reg.alpha,
                &reg.q,
                dyi,
                &ds,
                &dus[i * d..(i + 1) * d],
                &dreg.alpha,
                &dreg.q,
                &dreg.r,
            )?;
            let mut o = 0;
            for v in dreg.alpha.iter().chain(&dreg.q).chain(&dreg.r) {
                row[o] = *v;
                o += 1;
            }
            for v in parts.local.iter().chain(parts.cvec.iter()).chain(parts.dvec.iter()) {
                row[o] = *v;
                o += 1;
            }
            Ok::<(), Error>(())
        })?;
        let off_c = n + n * n + atoms * n + n;
        let means = exec::mean(exec, count, kd + n, |i, acc| {
            for l in 0..kd + n {
                acc[l] += tmp[i * width + off_c + l];
            }
        });
        let (dcbar, ddbar) = means.split_at(kd);
        {
            let tmp = &tmp;
            exec::try_fill_rows(exec, dp.slab_mut(k), n, |i, row| {
                let tr = &tmp[i * width..(i + 1) * width];
                let local = &tr[n + n * n + atoms * n..];
                let pull = model.stats_pullback_tangent(&ys[i * n..(i + 1) * n], &st.cbar, &dys[i * n..(i + 1) * n], dcbar)?;
                for c in 0..n {
                    row[c] = tr[c] + dt * (local[c] + pull[c] + ddbar[c]);
                }
                Ok::<(), Error>(())
            })?;
        }
        for i in 0..count {
            let tr = &tmp[i * width..(i + 1) * width];
            dq.at_mut(k, i).copy_from_slice(&tr[n..n + n * n]);
            dr.at_mut(k, i).copy_from_slice(&tr[n + n * n..n + n * n + atoms * n]);
        }
    }
    Ok(Backward { dp, dq, dr })
}

/// Solves the linear forward-backward system for `D_eta Theta` along a converged `base`.
pub fn solve_jacobian_flow(
    model: &ModelSpec,
    jm: &JumpMeasure,
    base: &Solution,
    eta: &[f64],
    cfg: &SensitivityConfig,
) -> Result<JacobianFlow> {
    model.require_second_derivatives()?;
    let ens = &base.ensemble;
    let grid = ens.grid;
    let n = model.n;
    let d = model.control_dim();
    let count = ens.particles();
    let steps = grid.steps;
    let dt = grid.dt();
    let exec = cfg.exec;
    if eta.len() != count * n {
        return Err(Error::domain("eta must have one row per particle"));
    }
    let systems = (0..steps)
        .map(|k| step_system(model, jm, ens.states.slab(k), base.adjoint.p.slab(k + 1), &base.noise, k, dt, &cfg.regression, exec))
        .collect::<Result<Vec<_>>>()?;
    let inverses = inverse_foc_jacobians(model, base, exec)?;
    let mut du = Cube::zeros(steps, count, d);
    let mut history = Vec::new();
    let mut damping = 1.0;
    let mut accel = Anderson::new(cfg.anderson_depth, damping);
    let mut best: Option<(f64, Cube, Cube)> = None;
    for it in 1..=cfg.max_iter {
        let dy = simulate_linearized(model, jm, ens, Some(&du), eta, &base.noise, exec)?;
        let bw = backward_tangent(model, jm, base, &systems, &dy, &du, exec)?;
        let mut du_new = Cube::zeros(steps, count, d);
        for k in 0..steps {
            let t = grid.time(k);
            let snap = &ens.snapshots[k];
            let (ds, _) = cross_section_tangent(model, exec, ens.states.slab(k), dy.slab(k));
            exec::try_fill_rows(exec, du_new.slab_mut(k), d, |i, row| {
                let r = foc_tangent(
                    model,
                    t,
                    ens.states.at(k, i),
                    snap,
                    ens.controls.at(k, i),
                    base.adjoint.p.at(k, i),
                    base.adjoint.q.at(k, i),
                    dy.at(k, i),
                    &ds,
                    &vec![0.0; d],
                    bw.dp.at(k, i),
                    bw.dq.at(k, i),
                )?;
                let inv = DMatrix::from_column_slice(d, d, inverses.at(k, i));
                let v = -(inv * r);
                row.copy_from_slice(v.as_slice());
                Ok::<(), Error>(())
            })?;
        }
        let mut delta = du_new.clone();
        delta.data_mut().iter_mut().zip(du.data()).for_each(|(a, b)| *a -= b);
        let change = l2(&delta, dt);
        let size = l2(&du_new, dt);
        if !change.is_finite() {
            return Err(Error::BlowUp { step: 0, particle: 0, magnitude: f64::INFINITY, iteration: Some(it) });
        }
        history.push(change);
        if change <= cfg.tol * (1.0 + size) {
            let eta_norm = (eta.iter().map(|v| v * v).sum::<f64>() / count as f64).sqrt();
            let mut flow = JacobianFlow {
                eta: eta.to_vec(),
                dy,
                dp: bw.dp,
                dq: bw.dq,
                dr: bw.dr,
                du,
                iterations: it,
                history,
                damping,
                bound_ratio: 0.0,
            };
            if eta_norm > 0.0 {
                flow.bound_ratio = flow.s_norm(jm, dt) / eta_norm;
            }
            return Ok(flow);
        }
        let best_change = best.as_ref().map_or(f64::INFINITY, |b| b.0);
        if change > 2.0 * best_change {
            damping *= 0.5;
            accel.reset();
            accel.beta = damping;
            let (_, u0, g0) = best.as_ref().expect("growth is measured against a previous sweep");
            du = u0.clone();
            du.relax_towards(g0, damping);
        } else {
            let next = Cube::from_vec(steps, count, d, accel.step(du.data(), du_new.data()));
            if change <= best_change {
                best = Some((change, std::mem::replace(&mut du, next), du_new));
            } else {
                du = next;
            }
        }
        if it == cfg.max_iter {
            return Err(Error::NoConvergence {
                what: "Jacobian flow".into(),
                iterations: it,
                last_change: change,
                report: None,
            });
        }
    }
    Err(Error::domain("max_iter must be positive"))
}

/// Noise driving the tagged particles of a pinned flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagNoise {
    /// Fresh streams independent of the population.
    Independent,
    /// Tag `m` reuses the Brownian and jump draws of base particle `streams[m]`.
    Baseline(Vec<usize>),
}

/// Tagged particles started at `ys` inside the frozen base population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinnedFlow {
    pub grid: TimeGrid,
    /// `M x n` initial states.
    pub tags: Vec<f64>,
    pub states: Cube,
    pub controls: Cube,
    pub p: Cube,
    pub q: Cube,
    pub r: Cube,
    pub streams: Vec<usize>,
    pub noise: NoiseBundle,
    /// Cone margins measured against the base population's first moment.
    pub cone: ConeReport,
}

impl PinnedFlow {
    pub fn len(&self) -> usize {
        self.states.particles()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn solve_pinned_flow(
    model: &ModelSpec,
    jm: &JumpMeasure,
    base: &Solution,
    ys: &[f64],
    tag_noise: &TagNoise,
    cfg: &SensitivityConfig,
) -> Result<PinnedFlow> {
    let n = model.n;
    let m = ys.len() / n;
    if m == 0 || ys.len() != m * n {
        return Err(Error::domain("tagged points do not match the state dimension"));
    }
    let count = base.ensemble.particles();
    let (noise, streams) = match tag_noise {
        TagNoise::Independent => (base.noise.pinned(), (0..m).collect::<Vec<_>>()),
        TagNoise::Baseline(s) => {
            if s.len() != m || s.iter().any(|&i| i >= count) {
                return Err(Error::domain("baseline streams must name one base particle per tag"));
            }
            (base.noise.clone(), s.clone())
        }
    };
    let grid = base.ensemble.grid;
    let field = &base.field;
    let policy = FeedbackPolicy::Adjoint { field: field.clone(), settings: cfg.minimizer };
    let ens = propagate(model, jm, ys, &policy, &grid, &noise, Some(&base.ensemble.snapshots), Some(&streams), cfg.exec)?;
    let steps = grid.steps;
    let atoms = jm.len();
    let mut p = Cube::zeros(steps + 1, m, n);
    let mut q = Cube::zeros(steps, m, n * n);
    let mut r = Cube::zeros(steps, m, atoms * n);
    for k in 0..steps {
        let st = &field.steps[k];
        for i in 0..m {
            let y = ens.states.at(k, i);
            let reg = st.regressed(y);
            let pv = field.psi_with(k, y, ens.controls.at(k, i), &reg);
            p.at_mut(k, i).copy_from_slice(&pv);
            q.at_mut(k, i).copy_from_slice(&reg.q);
            r.at_mut(k, i).copy_from_slice(&reg.r);
        }
    }
    for i in 0..m {
        let pv = field.psi_terminal(ens.states.at(steps, i));
        p.at_mut(steps, i).copy_from_slice(&pv);
    }
    let mut per_step = Vec::with_capacity(steps + 1);
    let mut scale: f64 = 0.0;
    for k in 0..=steps {
        let m1 = base.ensemble.snapshots[k].moment1;
        let mut cs = ConeStep { min_margin_p: f64::INFINITY, min_margin_q: f64::INFINITY, min_margin_u: f64::INFINITY };
        for i in 0..m {
            let (u, qq) = if k < steps { (Some(ens.controls.at(k, i)), Some(q.at(k, i))) } else { (None, None) };
            let (mp, mq, mu, sc) = cone_margins_at(model, ens.states.at(k, i), m1, u, p.at(k, i), qq);
            cs.min_margin_p = cs.min_margin_p.min(mp);
            cs.min_margin_q = cs.min_margin_q.min(mq);
            cs.min_margin_u = cs.min_margin_u.min(mu);
            scale = scale.max(sc);
        }
        per_step.push(cs);
    }
    let fold = |f: fn(&ConeStep) -> f64| per_step.iter().map(f).fold(f64::INFINITY, f64::min);
    let cone = ConeReport {
        min_margin_p: fold(|c| c.min_margin_p),
        min_margin_q: fold(|c| c.min_margin_q),
        min_margin_u: fold(|c| c.min_margin_u),
        per_step,
        scale,
    };
    Ok(PinnedFlow {
        grid,
        tags: ys.to_vec(),
        states: ens.states,
        controls: ens.controls,
        p,
        q,
        r,
        streams,
        noise,
        cone,
    })
}

/// `D_y Theta^{y, mu}` per tag. Each entry is a matrix stored column by column, column
/// `c` being the derivative along `e_c`: `dy`, `dp` are `n x n`, `dq` is `n^2 x n`,
/// `dr` is `(atoms n) x n`, `du` is `d x n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinnedJacobian {
    pub dy: Cube,
    pub dp: Cube,
    pub dq: Cube,
    pub dr: Cube,
    pub du: Cube,
}

impl PinnedJacobian {
    /// `D_y P` of tag `m` at knot `k` as an `n x n` matrix.
    pub fn dp_matrix(&self, k: usize, m: usize) -> DMatrix<f64> {
        let n = (self.dp.width() as f64).sqrt() as usize;
        DMatrix::from_column_slice(n, n, self.dp.at(k, m))
    }

    pub fn dq_matrix(&self, k: usize, m: usize) -> DMatrix<f64> {
        let w = self.dq.width();
        let n = (self.dy.width() as f64).sqrt() as usize;
        DMatrix::from_column_slice(w / n, n, self.dq.at(k, m))
    }

    pub fn dr_matrix(&self, k: usize, m: usize) -> DMatrix<f64> {
        let n = (self.dy.width() as f64).sqrt() as usize;
        DMatrix::from_column_slice(self.dr.width() / n, n, self.dr.at(k, m))
    }
}

struct TagTangent {
    dy: Vec<f64>,
    dp: Vec<f64>,
    dq: Vec<f64>,
    dr: Vec<f64>,
    du: Vec<f64>,
}

/// Solves the variational system of the pinned flow in the initial state.
pub fn solve_pinned_jacobian(
    model: &ModelSpec,
    jm: &JumpMeasure,
    base: &Solution,
    pinned: &PinnedFlow,
    cfg: &SensitivityConfig,
) -> Result<PinnedJacobian> {
    model.require_second_derivatives()?;
    let n = model.n;
    let d = model.control_dim();
    let atoms = jm.len();
    let grid = pinned.grid;
    let steps = grid.steps;
    let m = pinned.len();
    let per_tag = exec::try_map(cfg.exec, m, |tag| -> Result<Vec<TagTangent>> {
        (0..n).map(|c| tag_tangent(model, jm, base, pinned, tag, c)).collect()
    })?;
    let mut out = PinnedJacobian {
        dy: Cube::zeros(steps + 1, m, n * n),
        dp: Cube::zeros(steps + 1, m, n * n),
        dq: Cube::zeros(steps, m, n * n * n),
        dr: Cube::zeros(steps, m, atoms * n * n),
        du: Cube::zeros(steps, m, d * n),
    };
    for (tag, dirs) in per_tag.iter().enumerate() {
        for (c, tt) in dirs.iter().enumerate() {
            for k in 0..=steps {
                out.dy.at_mut(k, tag)[c * n..(c + 1) * n].copy_from_slice(&tt.dy[k * n..(k + 1) * n]);
                out.dp.at_mut(k, tag)[c * n..(c + 1) * n].copy_from_slice(&tt.dp[k * n..(k + 1) * n]);
            }
            for k in 0..steps {
                let wq = n * n;
                out.dq.at_mut(k, tag)[c * wq..(c + 1) * wq].copy_from_slice(&tt.dq[k * wq..(k + 1) * wq]);
                let wr = atoms * n;
                out.dr.at_mut(k, tag)[c * wr..(c + 1) * wr].copy_from_slice(&tt.dr[k * wr..(k + 1) * wr]);
                out.du.at_mut(k, tag)[c * d..(c + 1) * d].copy_from_slice(&tt.du[k * d..(k + 1) * d]);
            }
        }
    }
    Ok(out)
}

fn tag_tangent(
    model: &ModelSpec,
    jm: &JumpMeasure,
    base: &Solution,
    pinned: &PinnedFlow,
    tag: usize,
    dir: usize,
) -> Result<TagTangent> {
    let n = model.n;
    let d = model.control_dim();
    let kd = model.stats_dim();
    let atoms = jm.len();
    let grid = pinned.grid;
    let steps = grid.steps;
    let dt = grid.dt();
    let field = &base.field;
    let zero_s = vec![0.0; kd];
    let zero_m = vec![0.0; n];
    let mut out = TagTangent {
        dy: vec![0.0; (steps + 1) * n],
        dp: vec![0.0; (steps + 1) * n],
        dq: vec![0.0; steps * n * n],
        dr: vec![0.0; steps * atoms * n],
        du: vec![0.0; steps * d],
    };
    out.dy[dir] = 1.0;
    let mut sn = StepNoise::new(n, atoms);
    for k in 0..steps {
        let st = &field.steps[k];
        let t = st.t;
        let snap = &st.snapshot;
        let y = pinned.states.at(k, tag);
        let u = pinned.controls.at(k, tag);
        let p = pinned.p.at(k, tag);
        let dy = out.dy[k * n..(k + 1) * n].to_vec();
        let f = st.basis.len();
        let mut phi = vec![0.0; f];
        let mut dphi = vec![0.0; f];
        st.basis.eval(y, &mut phi);
        st.basis.eval_tangent(y, &dy, &mut dphi);
        let reg = st.regressed_with(&phi, n);
        let dreg = st.regressed_tangent(&phi, &dphi, None, n);
        let pull = model.stats_pullback_tangent(y, &st.cbar, &dy, &zero_s)?;
        let dpsi = |du: &[f64]| -> Result<DVector<f64>> {
            let parts = model.driver_parts_tangent(
                t, y, snap, &st.aff, u, &reg.alpha, &reg.q, &dy, &zero_s, du, &dreg.alpha, &dreg.q, &dreg.r,
            )?;
            Ok(DVector::from_fn(n, |c, _| dreg.alpha[c] + dt * (parts.local[c] + pull[c])))
        };
        let residual = |du: &[f64]| -> Result<DVector<f64>> {
            let dp = dpsi(du)?;
            foc_tangent(model, t, y, snap, u, p, &reg.q, &dy, &zero_s, du, dp.as_slice(), &dreg.q)
        };
        let mut e = vec![0.0; d];
        let r0 = residual(&e)?;
        let mut jac = DMatrix::zeros(d, d);
        for l in 0..d {
            e[l] = 1.0;
            jac.set_column(l, &(residual(&e)? - &r0));
            e[l] = 0.0;
        }
        let du = jac
            .lu()
            .solve(&(-r0))
            .ok_or_else(|| Error::domain(format!("singular pinned control Jacobian at step {k}, tag {tag}")))?;
        let dp = dpsi(du.as_slice())?;
        out.du[k * d..(k + 1) * d].copy_from_slice(du.as_slice());
        out.dp[k * n..(k + 1) * n].copy_from_slice(dp.as_slice());
        out.dq[k * n * n..(k + 1) * n * n].copy_from_slice(&dreg.q);
        out.dr[k * atoms * n..(k + 1) * atoms * n].copy_from_slice(&dreg.r);
        pinned.noise.fill(pinned.streams[tag], k, &mut sn);
        let mut next = vec![0.0; n];
        euler_step_tangent(model, t, dt, y, snap, &st.aff, u, &sn, &dy, &zero_s, &zero_m, du.as_slice(), &mut next);
        out.dy[(k + 1) * n..(k + 2) * n].copy_from_slice(&next);
    }
    let y = pinned.states.at(steps, tag);
    let dy = out.dy[steps * n..(steps + 1) * n].to_vec();
    let (gx, _) = model.terminal_parts_tangent(grid.horizon, y, &field.terminal_snapshot, &dy, &zero_s)?;
    let pull = model.stats_pullback_tangent(y, &field.terminal_cbar, &dy, &zero_s)?;
    for c in 0..n {
        out.dp[steps * n + c] = gx[c] + pull[c];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqoracle::{solve_riccati, LqSpec};
    use crate::measure::EmpiricalMeasure;
    use crate::solver::{solve_mftc, SolveConfig};
    use std::sync::OnceLock;

    struct Fixture {
        spec: LqSpec,
        jm: JumpMeasure,
        model: ModelSpec,
        sol: Solution,
    }

    fn cfg() -> SolveConfig {
        SolveConfig { steps: 20, tol_control: 1e-9, seed: 11, ..SolveConfig::default() }
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let spec = LqSpec::fixture_with_jump();
            let jm = spec.jump_measure().unwrap();
            let model = spec.model().unwrap();
            let init = EmpiricalMeasure::sample_gaussian(2000, &[0.5], &[0.4], 5).unwrap();
            let sol = solve_mftc(&model, &jm, &init, &cfg()).unwrap();
            Fixture { spec, jm, model, sol }
        })
    }

    fn eta(count: usize, seed: u64) -> Vec<f64> {
        EmpiricalMeasure::sample_gaussian(count, &[0.3], &[1.0], seed).unwrap().points().to_vec()
    }

    #[test]
    fn zero_direction_gives_zero_flow() {
        let f = fixture();
        let flow = solve_jacobian_flow(&f.model, &f.jm, &f.sol, &vec![0.0; 2000], &SensitivityConfig::default()).unwrap();
        assert_eq!(flow.dy.max_abs(), 0.0);
        assert_eq!(flow.dp.max_abs(), 0.0);
        assert_eq!(flow.du.max_abs(), 0.0);
        assert_eq!(flow.bound_ratio, 0.0);
    }

    #[test]
    fn flow_is_linear_in_direction() {
        let f = fixture();
        let e = eta(2000, 1);
        let sc = SensitivityConfig::default();
        let a = solve_jacobian_flow(&f.model, &f.jm, &f.sol, &e, &sc).unwrap();
        let e2: Vec<f64> = e.iter().map(|v| -2.5 * v).collect();
        let b = solve_jacobian_flow(&f.model, &f.jm, &f.sol, &e2, &sc).unwrap();
        for (x, y) in a.dp.data().iter().zip(b.dp.data()) {
            assert!((y + 2.5 * x).abs() <= 1e-8 * (1.0 + x.abs()), "{x} {y}");
        }
        for (x, y) in a.du.data().iter().zip(b.du.data()) {
            assert!((y + 2.5 * x).abs() <= 1e-8 * (1.0 + x.abs()));
        }
        assert!(a.bound_ratio.is_finite() && a.bound_ratio > 0.0);
    }

    #[test]
    fn lq_flow_follows_riccati_gains() {
        let f = fixture();
        let e = eta(2000, 2);
        let flow = solve_jacobian_flow(&f.model, &f.jm, &f.sol, &e, &SensitivityConfig::default()).unwrap();
        let ric = solve_riccati(&f.spec, &f.sol.ensemble.grid).unwrap();
        let grid = f.sol.ensemble.grid;
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..=grid.steps {
            let t = grid.time(k);
            let dy = flow.dy.slab(k);
            let mbar = dy.iter().sum::<f64>() / dy.len() as f64;
            let (p, big_k) = (ric.p(0, t), ric.big_k(0, t));
            for (i, v) in dy.iter().enumerate() {
                let want = p * v + (big_k - p) * mbar;
                num += (flow.dp.at(k, i)[0] - want).powi(2);
                den += want * want;
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.01, "relative error {rel}");
    }

    #[test]
    fn baseline_copies_reproduce_base_particles() {
        let f = fixture();
        let idx = vec![0, 7, 1999];
        let ys: Vec<f64> = idx.iter().flat_map(|&i| f.sol.ensemble.states.at(0, i).to_vec()).collect();
        let pf = solve_pinned_flow(&f.model, &f.jm, &f.sol, &ys, &TagNoise::Baseline(idx.clone()), &SensitivityConfig::default())
            .unwrap();
        for (m, &i) in idx.iter().enumerate() {
            for k in 0..=pf.grid.steps {
                let gap = (pf.states.at(k, m)[0] - f.sol.ensemble.states.at(k, i)[0]).abs();
                assert!(gap < 1e-6, "state gap {gap} at step {k}");
                let gp = (pf.p.at(k, m)[0] - f.sol.adjoint.p.at(k, i)[0]).abs();
                assert!(gp < 1e-6, "adjoint gap {gp} at step {k}");
            }
        }
    }

    #[test]
    fn pinned_jacobian_matches_riccati_and_finite_differences() {
        let f = fixture();
        let y0 = 0.8;
        let h = 1e-3;
        let ys = vec![y0, y0 + h, y0 - h];
        let pf = solve_pinned_flow(&f.model, &f.jm, &f.sol, &ys, &TagNoise::Baseline(vec![3, 3, 3]), &SensitivityConfig::default())
            .unwrap();
        assert!(pf.cone.min_margin() >= -1e-6 * pf.cone.scale);
        let jac = solve_pinned_jacobian(&f.model, &f.jm, &f.sol, &pf, &SensitivityConfig::default()).unwrap();
        let ric = solve_riccati(&f.spec, &pf.grid).unwrap();
        for k in 0..=pf.grid.steps {
            let dp = jac.dp_matrix(k, 0)[(0, 0)];
            let fd = (pf.p.at(k, 1)[0] - pf.p.at(k, 2)[0]) / (2.0 * h);
            assert!((dp - fd).abs() < 1e-5 * (1.0 + dp.abs()), "step {k}: {dp} vs {fd}");
            let want = ric.p(0, pf.grid.time(k)) * jac.dy.at(k, 0)[0];
            assert!((dp - want).abs() < 0.01 * want.abs(), "step {k}: {dp} vs Riccati {want}");
        }
    }

    #[test]
    fn frozen_dynamics_propagate_identity() {
        let mut spec = LqSpec::scalar();
        spec.a = vec![0.0];
        spec.c = vec![0.0];
        spec.q = vec![0.0];
        spec.h = vec![1.0];
        let jm = spec.jump_measure().unwrap();
        let model = spec.model().unwrap();
        let init = EmpiricalMeasure::sample_gaussian(200, &[0.0], &[1.0], 3).unwrap();
        let sol = solve_mftc(&model, &jm, &init, &SolveConfig { steps: 10, allow_insufficient: true, ..SolveConfig::default() }).unwrap();
        let pf = solve_pinned_flow(&model, &jm, &sol, &[0.3, -1.0], &TagNoise::Independent, &SensitivityConfig::default()).unwrap();
        let jac = solve_pinned_jacobian(&model, &jm, &sol, &pf, &SensitivityConfig::default()).unwrap();
        for k in 0..=10 {
            for m in 0..2 {
                assert!((jac.dy.at(k, m)[0] - 1.0).abs() < 1e-12);
                assert!((jac.dp.at(k, m)[0] - 1.0).abs() < 1e-6, "{}", jac.dp.at(k, m)[0]);
            }
        }
    }
}
