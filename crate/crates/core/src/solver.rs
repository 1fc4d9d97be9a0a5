//! Damped Picard iteration for the coupled forward-backward system, with optional
//! Anderson mixing of past iterates.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accel::Anderson;
use crate::adjoint::{energy_ratio, solve_adjoint_with_field, AdjointEnsemble, DecouplingField};
use crate::array::Cube;
use crate::control::{assemble_feedback, cone_margins, optimality_residual, ConeReport, FeedbackPolicy, MinimizerSettings};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::grid::TimeGrid;
use crate::measure::EmpiricalMeasure;
use crate::model::{check_sufficiency_condition, ConditionReport, JumpMeasure, ModelSpec};
use crate::noise::NoiseBundle;
use crate::regression::RegressionConfig;
use crate::simulate::{simulate_forward, ParticleEnsemble};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub t0: f64,
    pub horizon: f64,
    pub steps: usize,
    /// Weight of the new control in `u <- (1 - rho) u + rho u_new`.
    pub damping: f64,
    /// Number of past iterates mixed by Anderson acceleration; 0 gives plain damped Picard.
    pub anderson_depth: usize,
    pub tol_control: f64,
    pub max_picard: usize,
    pub seed: u64,
    pub regression: RegressionConfig,
    pub minimizer: MinimizerSettings,
    /// Continue with a warning when the sufficiency condition fails.
    pub allow_insufficient: bool,
    /// Largest relative first-order residual accepted at convergence.
    pub optimality_threshold: f64,
    pub exec: Exec,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            t0: 0.0,
            horizon: 1.0,
            steps: 100,
            damping: 0.5,
            anderson_depth: 10,
            tol_control: 1e-4,
            max_picard: 200,
            seed: 0,
            regression: RegressionConfig::default(),
            minimizer: MinimizerSettings::default(),
            allow_insufficient: false,
            optimality_threshold: crate::control::OPTIMALITY_THRESHOLD,
            exec: Exec::default(),
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("solver.damping", "must lie in (0, 1]"));
        }
        if !(self.tol_control > 0.0) {
            return Err(Error::config("solver.tol_control", "must be positive"));
        }
        if self.max_picard == 0 {
            return Err(Error::config("solver.max_picard", "must be positive"));
        }
        if !(self.optimality_threshold > 0.0) {
            return Err(Error::config("solver.optimality_threshold", "must be positive"));
        }
        TimeGrid::new(self.t0, self.horizon, self.steps).map_err(|e| Error::config("solver.steps", e.to_string()))?;
        self.regression.validate()?;
        self.minimizer.validate()
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t0, self.horizon, self.steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub converged: bool,
    pub iterations: usize,
    /// `||u_new - u||` in `L^2(dt x particles)` per iteration.
    pub history: Vec<f64>,
    pub cost: f64,
    pub cost_std_error: f64,
    pub cone: Option<ConeReport>,
    /// Largest relative first-order residual of the returned control.
    pub optimality_residual: f64,
    pub sufficiency: ConditionReport,
    /// Adjoint energy over control energy.
    pub energy_ratio: f64,
    /// State energy over control energy.
    pub moment_ratio: f64,
    pub wallclock_secs: f64,
    pub damping: f64,
    pub tol_control: f64,
    pub warnings: Vec<String>,
}

/// Converged forward-backward system together with the data needed downstream.
#[derive(Clone, Debug)]
pub struct Solution {
    pub ensemble: ParticleEnsemble,
    pub adjoint: AdjointEnsemble,
    pub field: Arc<DecouplingField>,
    pub noise: NoiseBundle,
    pub report: SolverReport,
}

impl Solution {
    pub fn controls(&self) -> &Cube {
        &self.ensemble.controls
    }
}

fn l2_change(a: &Cube, b: &Cube, dt: f64) -> f64 {
    let n = a.particles().max(1) as f64;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    (s * dt / n).sqrt()
}

fn max_residual(model: &ModelSpec, exec: Exec, ens: &ParticleEnsemble, adj: &AdjointEnsemble) -> f64 {
    let count = ens.particles();
    let mut worst: f64 = 0.0;
    for k in 0..ens.grid.steps {
        let t = ens.grid.time(k);
        let snap = &ens.snapshots[k];
        let r = exec::max_scalar(exec, count, |i| {
            optimality_residual(model, t, ens.states.at(k, i), snap, ens.controls.at(k, i), adj.p.at(k, i), adj.q.at(k, i))
        });
        worst = worst.max(r);
    }
    worst
}

/// Checks the sufficiency condition against the solver flag.
pub fn sufficiency_gate(model: &ModelSpec, allow: bool, warnings: &mut Vec<String>) -> Result<ConditionReport> {
    let rep = check_sufficiency_condition(&model.constants);
    if !rep.holds() {
        let msg = format!(
            "sufficiency condition fails (margin_i = {:.4e}, margin_ii = {:.4e})",
            rep.margin_i, rep.margin_ii
        );
        if !allow {
            return Err(Error::Precondition(msg));
        }
        warnings.push(msg);
    }
    Ok(rep)
}

/// The relaxation weight halves whenever the control change grows, down to this
/// fraction of the configured value.
pub const MIN_DAMPING_FRACTION: f64 = 1.0 / 64.0;

/// Solves the forward-backward system by damped Picard iteration from the zero control.
pub fn solve_mftc(model: &ModelSpec, jm: &JumpMeasure, init: &EmpiricalMeasure, cfg: &SolveConfig) -> Result<Solution> {
    solve_mftc_from(model, jm, init, cfg, None)
}

/// As [`solve_mftc`], starting from `warm` (`steps x N x d`) when given.
pub fn solve_mftc_from(
    model: &ModelSpec,
    jm: &JumpMeasure,
    init: &EmpiricalMeasure,
    cfg: &SolveConfig,
    warm: Option<Cube>,
) -> Result<Solution> {
    let start = Instant::now();
    cfg.validate()?;
    model.validate()?;
    if init.dim() != model.n {
        return Err(Error::domain("initial measure has the wrong dimension"));
    }
    let mut warnings = Vec::new();
    let sufficiency = sufficiency_gate(model, cfg.allow_insufficient, &mut warnings)?;
    let grid = cfg.grid()?;
    let dt = grid.dt();
    let noise = NoiseBundle::new(cfg.seed, model.n, jm, &grid);
    let count = init.len();
    let d = model.control_dim();
    let mut u = match warm {
        Some(w) if w.times() == grid.steps && w.particles() == count && w.width() == d => w,
        Some(_) => return Err(Error::domain("warm start has the wrong shape")),
        None => Cube::zeros(grid.steps, count, d),
    };
    let mut history: Vec<f64> = Vec::new();
    let mut damping = cfg.damping;
    let mut accel = Anderson::new(cfg.anderson_depth, damping);
    // Best iterate so far and its image, used to retreat after a failed extrapolation.
    let mut best: Option<(f64, Cube, Cube)> = None;
    let with_iter = |e: Error, it: usize| match e {
        Error::BlowUp { step, particle, magnitude, .. } => Error::BlowUp { step, particle, magnitude, iteration: Some(it) },
        other => other,
    };
    let min_damping = cfg.damping * MIN_DAMPING_FRACTION;
    for it in 1..=cfg.max_picard {
        let policy = FeedbackPolicy::Table(u);
        let sweep = picard_sweep(model, jm, init, &policy, &grid, &noise, cfg);
        let FeedbackPolicy::Table(u_cur) = policy else { unreachable!() };
        let (ens, adj, field, u_new) = match sweep {
            Ok(v) => v,
            Err(Error::BlowUp { .. }) if best.is_some() && damping > min_damping => {
                let (_, u0, g0) = best.as_ref().expect("checked");
                damping = (damping * 0.5).max(min_damping);
                warnings.push(format!("iteration {it} blew up; retreating to the best iterate with damping {damping}"));
                accel.reset();
                accel.beta = damping;
                let mut next = u0.clone();
                next.relax_towards(g0, damping);
                u = next;
                continue;
            }
            Err(e) => return Err(with_iter(e, it)),
        };
        let change = l2_change(&u_cur, &u_new, dt);
        if !change.is_finite() {
            return Err(Error::BlowUp { step: 0, particle: 0, magnitude: f64::INFINITY, iteration: Some(it) });
        }
        let best_change = best.as_ref().map_or(f64::INFINITY, |b| b.0);
        history.push(change);
        if change <= cfg.tol_control {
            let residual = max_residual(model, cfg.exec, &ens, &adj);
            if residual <= cfg.optimality_threshold {
                let report = finish_report(model, jm, &ens, &adj, true, history, residual, sufficiency, cfg, damping, start, warnings);
                return Ok(Solution { ensemble: ens, adjoint: adj, field: Arc::new(field), noise, report });
            }
        }
        let growing = if cfg.anderson_depth == 0 { history.len() > 1 && change > history[history.len() - 2] } else { change > 2.0 * best_change };
        if growing && damping > min_damping {
            damping = (damping * 0.5).max(min_damping);
            accel.reset();
            accel.beta = damping;
        }
        if growing && cfg.anderson_depth > 0 {
            let (_, u0, g0) = best.as_ref().expect("growth is measured against a previous iterate");
            let mut next = u0.clone();
            next.relax_towards(g0, damping);
            u = next;
        } else {
            let next = accel.step(u_cur.data(), u_new.data());
            u = Cube::from_vec(grid.steps, count, d, next);
            if change <= best_change {
                best = Some((change, u_cur, u_new));
            }
        }
        if it == cfg.max_picard {
            let residual = max_residual(model, cfg.exec, &ens, &adj);
            let report = finish_report(model, jm, &ens, &adj, false, history, residual, sufficiency, cfg, damping, start, warnings);
            return Err(Error::NoConvergence {
                what: "Picard iteration".into(),
                iterations: it,
                last_change: change,
                report: Some(Box::new(report)),
            });
        }
    }
    Err(Error::NoConvergence {
        what: "Picard iteration".into(),
        iterations: cfg.max_picard,
        last_change: f64::INFINITY,
        report: None,
    })
}

/// Forward simulation, adjoint solve and feedback update for one control table.
fn picard_sweep(
    model: &ModelSpec,
    jm: &JumpMeasure,
    init: &EmpiricalMeasure,
    policy: &FeedbackPolicy,
    grid: &TimeGrid,
    noise: &NoiseBundle,
    cfg: &SolveConfig,
) -> Result<(ParticleEnsemble, AdjointEnsemble, DecouplingField, Cube)> {
    let ens = simulate_forward(model, jm, init, policy, grid, noise, cfg.exec)?;
    let (adj, field) = solve_adjoint_with_field(model, jm, &ens, noise, &cfg.regression, cfg.exec)?;
    let FeedbackPolicy::Table(u_cur) = policy else { unreachable!("Picard sweeps use control tables") };
    let mut u_new = Cube::zeros(grid.steps, ens.particles(), model.control_dim());
    for k in 0..grid.steps {
        let row = assemble_feedback(
            model,
            cfg.exec,
            grid.time(k),
            ens.states.slab(k),
            &ens.snapshots[k],
            adj.p.slab(k),
            adj.q.slab(k),
            &cfg.minimizer,
            Some(u_cur.slab(k)),
        )?;
        u_new.slab_mut(k).copy_from_slice(&row);
    }
    Ok((ens, adj, field, u_new))
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    model: &ModelSpec,
    jm: &JumpMeasure,
    ens: &ParticleEnsemble,
    adj: &AdjointEnsemble,
    converged: bool,
    history: Vec<f64>,
    residual: f64,
    sufficiency: ConditionReport,
    cfg: &SolveConfig,
    damping: f64,
    start: Instant,
    warnings: Vec<String>,
) -> SolverReport {
    let (cost, cost_std_error) = crate::value::cost_with_error(model, jm, ens, cfg.exec);
    SolverReport {
        converged,
        iterations: history.len(),
        history,
        cost,
        cost_std_error,
        cone: Some(cone_margins(model, ens, adj)),
        optimality_residual: residual,
        sufficiency,
        energy_ratio: energy_ratio(ens, adj, jm),
        moment_ratio: ens.moment_ratio(),
        wallclock_secs: start.elapsed().as_secs_f64(),
        damping,
        tol_control: cfg.tol_control,
        warnings,
    }
}

/// Difference of two solutions on the same grid in the norm
/// `sup_k E|dY_k|^2 + sup_k E|dP_k|^2 + sum_k (E|dQ_k|^2 + E|du_k|^2 + sum_a lambda_a E|dR_k,a|^2) dt`, square-rooted.
pub fn s_norm_gap(a: &Solution, b: &Solution, jm: &JumpMeasure) -> f64 {
    s_norm(
        &diff(&a.ensemble.states, &b.ensemble.states),
        &diff(&a.adjoint.p, &b.adjoint.p),
        &diff(&a.adjoint.q, &b.adjoint.q),
        &diff(&a.adjoint.r, &b.adjoint.r),
        &diff(&a.ensemble.controls, &b.ensemble.controls),
        jm,
        a.ensemble.grid.dt(),
    )
}

fn diff(a: &Cube, b: &Cube) -> Cube {
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x -= y);
    out
}

/// The `S`-norm of a perturbation `(dY, dP, dQ, dR, du)`.
pub fn s_norm(dy: &Cube, dp: &Cube, dq: &Cube, dr: &Cube, du: &Cube, jm: &JumpMeasure, dt: f64) -> f64 {
    let count = dy.particles().max(1) as f64;
    let mean_sq = |c: &Cube, k: usize| c.slab(k).iter().map(|v| v * v).sum::<f64>() / count;
    let sup = |c: &Cube| (0..c.times()).map(|k| mean_sq(c, k)).fold(0.0, f64::max);
    let mut integ = 0.0;
    let n = dy.width();
    for k in 0..dq.times() {
        integ += mean_sq(dq, k) + mean_sq(du, k);
        for (a, atom) in jm.atoms().iter().enumerate() {
            let s: f64 = dr.slab(k).chunks(dr.width().max(1)).flat_map(|row| &row[a * n..(a + 1) * n]).map(|v| v * v).sum();
            integ += atom.weight * s / count;
        }
    }
    (sup(dy) + sup(dp) + integ * dt).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// `||Theta^2 - Theta^1||_S`
    pub solution_gap: f64,
    /// Coupled per-particle `L^2` distance of the initial clouds.
    pub initial_gap: f64,
    /// `solution_gap / initial_gap`, or `None` when the initial clouds coincide.
    pub ratio: Option<f64>,
}

/// Solves both problems with common random numbers and compares them.
pub fn lipschitz_probe(
    model: &ModelSpec,
    jm: &JumpMeasure,
    init1: &EmpiricalMeasure,
    init2: &EmpiricalMeasure,
    cfg: &SolveConfig,
) -> Result<LipschitzReport> {
    if init1.len() != init2.len() || init1.dim() != init2.dim() {
        return Err(Error::domain("both initial measures need the same particle count"));
    }
    let a = solve_mftc(model, jm, init1, cfg)?;
    let b = solve_mftc(model, jm, init2, cfg)?;
    Ok(lipschitz_between(&a, &b, init1, init2, jm))
}

/// Lipschitz ratio between two already solved problems.
pub fn lipschitz_between(
    a: &Solution,
    b: &Solution,
    init1: &EmpiricalMeasure,
    init2: &EmpiricalMeasure,
    jm: &JumpMeasure,
) -> LipschitzReport {
    let solution_gap = s_norm_gap(a, b, jm);
    let initial_gap = (init1.points().iter().zip(init2.points()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        / init1.len() as f64)
        .sqrt();
    let ratio = if initial_gap > 0.0 { Some(solution_gap / initial_gap) } else { None };
    LipschitzReport { solution_gap, initial_gap, ratio }
}
