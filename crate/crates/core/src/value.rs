//! Cost evaluation, value-function derivatives, the sufficiency-gap certificate,
//! the mean-field Ito check and the HJB residual.
//!
//! `dV/dnu(t, mu)` is only determined up to an additive constant; samples normalize it
//! by `int dV/dnu(t, mu)(y) mu(dy) = 0`. Every quantity used downstream (gradients and
//! increments `k(x + h) - k(x)`) is independent of that choice.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{phi0_at, FeedbackPolicy, MinimizerSettings};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::measure::{moment2, EmpiricalMeasure};
use crate::model::{certificate_coefficient, check_sufficiency_condition, JumpMeasure, ModelSpec};
use crate::noise::StepNoise;
use crate::regression::{Basis, NormalSystem};
use crate::sensitivity::{solve_pinned_flow, solve_pinned_jacobian, SensitivityConfig, TagNoise};
use crate::simulate::{simulate_forward, ParticleEnsemble};
use crate::solver::{solve_mftc, solve_mftc_from, Solution, SolveConfig};

/// Per-particle realized cost `sum_k f(t_k, Y_k, mu_k, u_k) dt + g(Y_T, mu_T)`.
pub fn particle_costs(model: &ModelSpec, ens: &ParticleEnsemble, exec: Exec) -> Vec<f64> {
    let grid = &ens.grid;
    let dt = grid.dt();
    let steps = grid.steps;
    exec::map(exec, ens.particles(), |i| {
        let mut c = 0.0;
        for k in 0..steps {
            c += model.running_cost_at(grid.time(k), ens.states.at(k, i), &ens.snapshots[k], ens.controls.at(k, i)) * dt;
        }
        c + model.terminal_cost_at(grid.horizon, ens.states.at(steps, i), &ens.snapshots[steps])
    })
}

/// Mean cost and its Monte Carlo standard error.
pub fn cost_with_error(model: &ModelSpec, _jm: &JumpMeasure, ens: &ParticleEnsemble, exec: Exec) -> (f64, f64) {
    mean_and_error(&particle_costs(model, ens, exec))
}

pub(crate) fn mean_and_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = exec::sum_scalar(Exec::Sequential, xs.len(), |i| xs[i]) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = exec::sum_scalar(Exec::Sequential, xs.len(), |i| (xs[i] - mean).powi(2)) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `J = (1/N) sum_i [sum_k f dt + g]` along an ensemble.
pub fn evaluate_cost(model: &ModelSpec, jm: &JumpMeasure, ens: &ParticleEnsemble) -> f64 {
    cost_with_error(model, jm, ens, Exec::default()).0
}

/// Realized costs minus the zero-mean martingale
/// `sum_k P_k . (sigma_k dB_k + sum_a gamma_a (dN_a - lambda_a dt))`.
///
/// The mean is unchanged while most of the noise of each path is removed.
pub fn costs_with_control_variate(model: &ModelSpec, jm: &JumpMeasure, sol: &Solution, exec: Exec) -> Vec<f64> {
    let ens = &sol.ensemble;
    let grid = ens.grid;
    let dt = grid.dt();
    let n = model.n;
    let raw = particle_costs(model, ens, exec);
    let affs: Vec<_> = (0..grid.steps).map(|k| model.step_affine(grid.time(k), jm)).collect();
    exec::map(exec, ens.particles(), |i| {
        let mut nz = StepNoise::new(n, jm.len());
        let mut mart = 0.0;
        for (k, aff) in affs.iter().enumerate() {
            sol.noise.fill(i, k, &mut nz);
            let x = ens.states.at(k, i);
            let snap = &ens.snapshots[k];
            let (_, sigma) = model.coefficients(grid.time(k), x, snap, aff, ens.controls.at(k, i));
            let p = DVector::from_column_slice(sol.adjoint.p.at(k, i));
            let inc = sigma * DVector::from_column_slice(&nz.db) + model.jump_increment(x, &snap.mean, aff, &nz.dn, dt);
            mart += p.dot(&inc);
        }
        raw[i] - mart
    })
}

/// `V(t0, mu)` of a solved problem with its standard error, using the control variate.
pub fn value_estimate(model: &ModelSpec, jm: &JumpMeasure, sol: &Solution, exec: Exec) -> (f64, f64) {
    mean_and_error(&costs_with_control_variate(model, jm, sol, exec))
}

/// Outcome of the quadratic-gap test `J(v) - J(u) >= c E int |v - u|^2 dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCertificate {
    /// `J(v) - J(u)` under common random numbers.
    pub lhs: f64,
    /// `c E int |v - u|^2 dt`
    pub rhs: f64,
    pub coefficient: f64,
    /// `E int |v - u|^2 dt`
    pub distance_sq: f64,
    /// Standard error of `lhs`.
    pub std_error: f64,
    pub passes: bool,
}

/// Open-loop controls of `base` plus the closed-loop perturbation `shift(t, x)`.
pub fn shifted_policy(base: &Solution, shift: Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>) -> FeedbackPolicy {
    FeedbackPolicy::Shifted { table: base.controls().clone(), shift }
}

pub fn constant_shift(base: &Solution, delta: &[f64]) -> FeedbackPolicy {
    let delta = delta.to_vec();
    shifted_policy(base, Arc::new(move |_, _| delta.clone()))
}

/// Smooth random perturbation `amplitude * sum_m w_m sin(a_m . x + b_m t + c_m)` per control component.
pub fn random_shift_field(n: usize, d: usize, amplitude: f64, seed: u64) -> Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync> {
    const MODES: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<Vec<(Vec<f64>, f64, f64, f64)>> = (0..d)
        .map(|_| {
            (0..MODES)
                .map(|_| {
                    let a = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    (a, rng.gen_range(-3.0..3.0), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..1.0))
                })
                .collect()
        })
        .collect();
    Arc::new(move |t, x| {
        modes
            .iter()
            .map(|ms| {
                amplitude
                    * ms.iter()
                        .map(|(a, b, c, w)| w * (a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() + b * t + c).sin())
                        .sum::<f64>()
                    / MODES as f64
            })
            .collect()
    })
}

/// Simulates `alt` with the noise and initial cloud of `base` and tests the quadratic gap.
pub fn certify_gap(
    model: &ModelSpec,
    jm: &JumpMeasure,
    base: &Solution,
    alt: &FeedbackPolicy,
    exec: Exec,
) -> Result<GapCertificate> {
    let cond = check_sufficiency_condition(&model.constants);
    if !cond.holds() {
        return Err(Error::Precondition(format!(
            "sufficiency condition fails (margin_i = {:.4e}, margin_ii = {:.4e})",
            cond.margin_i, cond.margin_ii
        )));
    }
    let coefficient = certificate_coefficient(&model.constants);
    let ens = &base.ensemble;
    let grid = ens.grid;
    let init = ens.measure_at(0);
    let alt_ens = simulate_forward(model, jm, &init, alt, &grid, &base.noise, exec).map_err(|e| match e {
        Error::BlowUp { .. } => Error::NonAdmissible(e.to_string()),
        other => other,
    })?;
    let a = particle_costs(model, &alt_ens, exec);
    let b = particle_costs(model, ens, exec);
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let dt = grid.dt();
    let dist = exec::map(exec, ens.particles(), |i| {
        (0..grid.steps)
            .map(|k| alt_ens.controls.at(k, i).iter().zip(ens.controls.at(k, i)).map(|(v, u)| (v - u).powi(2)).sum::<f64>())
            .sum::<f64>()
            * dt
    });
    let (lhs, std_error) = mean_and_error(&diffs);
    let distance_sq = mean_and_error(&dist).0;
    let rhs = coefficient * distance_sq;
    Ok(GapCertificate { lhs, rhs, coefficient, distance_sq, std_error, passes: lhs >= rhs - 3.0 * std_error })
}

/// Central finite difference of `V` along `eta` against `E[P_0 . eta]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateauxCheck {
    pub finite_difference: f64,
    pub std_error: f64,
    pub predicted: f64,
    pub passes: bool,
}

/// Re-solves from `xi +- eps eta` (warm-started at `base`) with the noise of `base`.
pub fn gateaux_check(
    model: &ModelSpec,
    jm: &JumpMeasure,
    base: &Solution,
    eta: &[f64],
    eps: f64,
    cfg: &SolveConfig,
) -> Result<GateauxCheck> {
    let init = base.ensemble.measure_at(0);
    if eta.len() != init.points().len() {
        return Err(Error::domain("eta must have one row per particle"));
    }
    let solve = |sign: f64| {
        let mu = init.perturbed(eta, sign * eps);
        solve_mftc_from(model, jm, &mu, cfg, Some(base.controls().clone()))
    };
    let plus = particle_costs(model, &solve(1.0)?.ensemble, cfg.exec);
    let minus = particle_costs(model, &solve(-1.0)?.ensemble, cfg.exec);
    let n = model.n;
    let count = init.len();
    let own: Vec<f64> = (0..count)
        .map(|i| base.adjoint.p.at(0, i).iter().zip(&eta[i * n..(i + 1) * n]).map(|(p, e)| p * e).sum::<f64>())
        .collect();
    let diffs: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let finite_difference = diffs.iter().sum::<f64>() / count as f64;
    let predicted = own.iter().sum::<f64>() / count as f64;
    // Error of the comparison itself, from the paired per-particle residuals.
    let paired: Vec<f64> = diffs.iter().zip(&own).map(|(d, o)| d - o).collect();
    let std_error = mean_and_error(&paired).1;
    let tol = (3.0 * std_error).max(0.02 * predicted.abs());
    Ok(GateauxCheck { finite_difference, std_error, predicted, passes: (finite_difference - predicted).abs() <= tol })
}

/// Least-squares polynomial fit of a vector-valued function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PolyFit {
    basis: Basis,
    width: usize,
    /// `features x width`, row-major.
    coef: Vec<f64>,
}

impl PolyFit {
    fn fit(points: &[f64], n: usize, values: &[f64], width: usize, degree: usize) -> Result<(PolyFit, f64)> {
        let m = points.len() / n;
        let basis = Basis::fit(points, n, degree);
        let nf = basis.len();
        if m < nf {
            return Err(Error::domain(format!("{m} probes cannot fit {nf} polynomial features")));
        }
        let mut gram = DMatrix::zeros(nf, nf);
        let mut rhs = DMatrix::zeros(nf, width);
        let mut phi = vec![0.0; nf];
        for (y, v) in points.chunks(n).zip(values.chunks(width)) {
            basis.eval(y, &mut phi);
            for a in 0..nf {
                for b in 0..nf {
                    gram[(a, b)] += phi[a] * phi[b] / m as f64;
                }
                for c in 0..width {
                    rhs[(a, c)] += phi[a] * v[c] / m as f64;
                }
            }
        }
        let beta = NormalSystem::new(gram, 1e-12, 0)?.solve(&rhs);
        let fit = PolyFit { basis, width, coef: (0..nf).flat_map(|a| (0..width).map(move |c| (a, c))).map(|(a, c)| beta[(a, c)]).collect() };
        let (mut err, mut size) = (0.0, 0.0);
        for (y, v) in points.chunks(n).zip(values.chunks(width)) {
            let pred = fit.eval(y);
            err += pred.iter().zip(v).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
            size += v.iter().map(|t| t * t).sum::<f64>();
        }
        let residual = if size > 0.0 { (err / size).sqrt() } else { err.sqrt() };
        Ok((fit, residual))
    }

    fn eval(&self, y: &[f64]) -> Vec<f64> {
        let mut phi = vec![0.0; self.basis.len()];
        self.basis.eval(y, &mut phi);
        let mut out = vec![0.0; self.width];
        for (a, f) in phi.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += f * self.coef[a * self.width + c];
            }
        }
        out
    }
}

/// Gauss-Legendre nodes and weights on `[0, 1]` (Golub-Welsch).
fn gauss_legendre(count: usize) -> Vec<(f64, f64)> {
    let mut jac = DMatrix::zeros(count, count);
    for k in 1..count {
        let b = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut out: Vec<(f64, f64)> = (0..count)
        .map(|k| (0.5 * (eig.eigenvalues[k] + 1.0), eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    /// Total degree of the polynomial surrogates.
    pub fit_degree: usize,
    /// Gauss-Legendre nodes for line integrals of `D_y dV/dnu`.
    pub quadrature_nodes: usize,
    pub sensitivity: SensitivityConfig,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig { fit_degree: 2, quadrature_nodes: 8, sensitivity: SensitivityConfig::default() }
    }
}

/// Value and measure derivatives of `V` at one `(t, mu)`, with surrogates fitted from
/// pinned flows on a probe set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueSample {
    pub t: f64,
    pub mu: EmpiricalMeasure,
    pub value: f64,
    pub value_std_error: f64,
    /// Solver controls `u_t` at the particles of `mu` (`N x d`); empty for overrides.
    pub controls: Vec<f64>,
    /// Base point of the rays along which `D_y dV/dnu` is integrated.
    pub anchor: Vec<f64>,
    /// Ray integral averaged over `mu`, subtracted for the normalization.
    pub offset: f64,
    /// `M x n` probe states.
    pub probes: Vec<f64>,
    /// Pinned-flow `P_t` (`M x n`), `D_y P_t` (`M x n^2`, column-major), `Q_t` (`M x n^2`) and `R_t` (`M x atoms n`).
    pub p: Vec<f64>,
    pub dp: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    /// Largest relative RMS residual of the two surrogate fits.
    pub fit_residual: f64,
    /// `max |D_y dV/dnu(y)| / (1 + |y| + |mu|_2)` over the probes.
    pub growth_constant: f64,
    grad_fit: Option<PolyFit>,
    hess_fit: Option<PolyFit>,
    nodes: Vec<(f64, f64)>,
}

impl ValueSample {
    /// The identically zero candidate `V = 0`.
    pub fn zero(t: f64, mu: &EmpiricalMeasure) -> Self {
        ValueSample {
            t,
            mu: mu.clone(),
            value: 0.0,
            value_std_error: 0.0,
            controls: Vec::new(),
            anchor: mu.mean(),
            offset: 0.0,
            probes: Vec::new(),
            p: Vec::new(),
            dp: Vec::new(),
            q: Vec::new(),
            r: Vec::new(),
            fit_residual: 0.0,
            growth_constant: 0.0,
            grad_fit: None,
            hess_fit: None,
            nodes: gauss_legendre(2),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    /// `D_y dV/dnu(t, mu)(y)`
    pub fn d_y_dvdnu(&self, y: &[f64]) -> Vec<f64> {
        match &self.grad_fit {
            Some(f) => f.eval(y),
            None => vec![0.0; self.dim()],
        }
    }

    /// `D_y^2 dV/dnu(t, mu)(y)`
    pub fn d_y2_dvdnu(&self, y: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        match &self.hess_fit {
            Some(f) => DMatrix::from_column_slice(n, n, &f.eval(y)),
            None => DMatrix::zeros(n, n),
        }
    }

    /// `k(x + h) - k(x)` for `k = dV/dnu(t, mu)`, integrating `D_y k` along the segment.
    pub fn dvdnu_increment(&self, x: &[f64], h: &[f64]) -> f64 {
        let mut y = vec![0.0; x.len()];
        self.nodes
            .iter()
            .map(|(s, w)| {
                for c in 0..x.len() {
                    y[c] = x[c] + s * h[c];
                }
                w * self.d_y_dvdnu(&y).iter().zip(h).map(|(g, hc)| g * hc).sum::<f64>()
            })
            .sum()
    }

    fn ray_integral(&self, y: &[f64]) -> f64 {
        let h: Vec<f64> = y.iter().zip(&self.anchor).map(|(a, b)| a - b).collect();
        self.dvdnu_increment(&self.anchor, &h)
    }

    /// `dV/dnu(t, mu)(y)`, normalized to integrate to zero against `mu`.
    pub fn dvdnu(&self, y: &[f64]) -> f64 {
        self.ray_integral(y) - self.offset
    }
}

/// Probe states covering `mu`: an even grid over mean +- 3 std in one dimension,
/// otherwise the first `count` particles.
pub fn default_probes(mu: &EmpiricalMeasure, count: usize) -> Vec<f64> {
    let count = count.clamp(1, mu.len().max(1));
    if mu.dim() == 1 {
        let mean = mu.mean()[0];
        let sd = (mu.iter().map(|y| (y[0] - mean).powi(2)).sum::<f64>() / mu.len() as f64).sqrt().max(1e-3);
        if count == 1 {
            return vec![mean];
        }
        return (0..count).map(|i| mean - 3.0 * sd + 6.0 * sd * i as f64 / (count - 1) as f64).collect();
    }
    mu.points()[..count * mu.dim()].to_vec()
}

/// `D_y dV/dnu := P^{y, mu}_t` and `D_y^2 dV/dnu := D_y P^{y, mu}_t` at the probes `ys`,
/// fitted by polynomial surrogates; `V` from the solution's costs.
pub fn fit_value_derivatives(
    model: &ModelSpec,
    jm: &JumpMeasure,
    base: &Solution,
    ys: &[f64],
    cfg: &ValueConfig,
) -> Result<ValueSample> {
    model.require_second_derivatives()?;
    let n = model.n;
    let pinned = solve_pinned_flow(model, jm, base, ys, &TagNoise::Independent, &cfg.sensitivity)?;
    let jac = solve_pinned_jacobian(model, jm, base, &pinned, &cfg.sensitivity)?;
    let p = pinned.p.slab(0).to_vec();
    let dp = jac.dp.slab(0).to_vec();
    let (grad_fit, r1) = PolyFit::fit(ys, n, &p, n, cfg.fit_degree)?;
    let (hess_fit, r2) = PolyFit::fit(ys, n, &dp, n * n, cfg.fit_degree)?;
    let mu = base.ensemble.measure_at(0);
    let m2 = moment2(&mu);
    let growth_constant = ys
        .chunks(n)
        .zip(p.chunks(n))
        .map(|(y, pv)| {
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            pv.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + ny + m2)
        })
        .fold(0.0, f64::max);
    let (value, value_std_error) = value_estimate(model, jm, base, cfg.sensitivity.exec);
    let mut vs = ValueSample {
        t: base.ensemble.grid.t0,
        anchor: mu.mean(),
        offset: 0.0,
        mu,
        value,
        value_std_error,
        controls: base.controls().slab(0).to_vec(),
        probes: ys.to_vec(),
        p,
        dp,
        q: pinned.q.slab(0).to_vec(),
        r: pinned.r.slab(0).to_vec(),
        fit_residual: r1.max(r2),
        growth_constant,
        grad_fit: Some(grad_fit),
        hess_fit: Some(hess_fit),
        nodes: gauss_legendre(cfg.quadrature_nodes.max(1)),
    };
    vs.offset = exec::sum_scalar(cfg.sensitivity.exec, vs.mu.len(), |i| vs.ray_integral(vs.mu.point(i))) / vs.mu.len() as f64;
    Ok(vs)
}

/// A functional `F(t, mu)` with its time derivative and measure derivatives.
pub trait MeasureFunctional: Send + Sync {
    fn value(&self, t: f64, mu: &EmpiricalMeasure) -> f64;
    fn time_derivative(&self, _t: f64, _mu: &EmpiricalMeasure) -> f64 {
        0.0
    }
    /// `dF/dnu(t, mu)(y)`, any normalization.
    fn dvdnu(&self, t: f64, mu: &EmpiricalMeasure, y: &[f64]) -> f64;
    fn d_y(&self, t: f64, mu: &EmpiricalMeasure, y: &[f64]) -> DVector<f64>;
    fn d_y2(&self, t: f64, mu: &EmpiricalMeasure, y: &[f64]) -> DMatrix<f64>;
}

/// `F(mu) = int y_c mu(dy)`.
#[derive(Clone, Copy, Debug)]
pub struct FirstMoment(pub usize);

impl MeasureFunctional for FirstMoment {
    fn value(&self, _t: f64, mu: &EmpiricalMeasure) -> f64 {
        mu.mean()[self.0]
    }
    fn dvdnu(&self, _t: f64, _mu: &EmpiricalMeasure, y: &[f64]) -> f64 {
        y[self.0]
    }
    fn d_y(&self, _t: f64, _mu: &EmpiricalMeasure, y: &[f64]) -> DVector<f64> {
        let mut e = DVector::zeros(y.len());
        e[self.0] = 1.0;
        e
    }
    fn d_y2(&self, _t: f64, _mu: &EmpiricalMeasure, y: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(y.len(), y.len())
    }
}

/// `F(mu) = int |y|^2 mu(dy)`.
#[derive(Clone, Copy, Debug)]
pub struct SecondMoment;

impl MeasureFunctional for SecondMoment {
    fn value(&self, _t: f64, mu: &EmpiricalMeasure) -> f64 {
        mu.iter().map(|y| y.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / mu.len() as f64
    }
    fn dvdnu(&self, _t: f64, _mu: &EmpiricalMeasure, y: &[f64]) -> f64 {
        y.iter().map(|v| v * v).sum()
    }
    fn d_y(&self, _t: f64, _mu: &EmpiricalMeasure, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(y.len(), y.iter().map(|v| 2.0 * v))
    }
    fn d_y2(&self, _t: f64, _mu: &EmpiricalMeasure, y: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(y.len(), y.len()) * 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItoReport {
    /// `F(t_k, mu_k) - F(t_0, mu_0) - sum_{j<k} RHS_j dt` per knot.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

/// Compares the increments of `F(t_k, mu_k)` along an ensemble with the accumulated
/// right-hand side of the mean-field Ito formula evaluated by ensemble averages.
pub fn ito_check(
    model: &ModelSpec,
    jm: &JumpMeasure,
    f: &dyn MeasureFunctional,
    ens: &ParticleEnsemble,
    exec: Exec,
) -> ItoReport {
    let grid = ens.grid;
    let dt = grid.dt();
    let n = model.n;
    let count = ens.particles();
    let mu0 = ens.measure_at(0);
    let f0 = f.value(grid.t0, &mu0);
    let mut acc = 0.0;
    let mut residuals = vec![0.0];
    for k in 0..grid.steps {
        let t = grid.time(k);
        let mu = ens.measure_at(k);
        let snap = &ens.snapshots[k];
        let aff = model.step_affine(t, jm);
        let mean_term = exec::sum_scalar(exec, count, |i| {
            let x = ens.states.at(k, i);
            let (b, sigma) = model.coefficients(t, x, snap, &aff, ens.controls.at(k, i));
            let g = f.d_y(t, &mu, x);
            let h = f.d_y2(t, &mu, x);
            let mut v = g.dot(&b) + 0.5 * (&sigma * sigma.transpose()).component_mul(&h).sum();
            let base = f.dvdnu(t, &mu, x);
            for (a, jc) in aff.jumps.iter().enumerate() {
                let gam = jc.apply(x, &snap.mean);
                let shifted: Vec<f64> = (0..n).map(|c| x[c] + gam[c]).collect();
                v += aff.weights[a] * (f.dvdnu(t, &mu, &shifted) - base - g.dot(&gam));
            }
            v
        }) / count as f64;
        acc += (f.time_derivative(t, &mu) + mean_term) * dt;
        let fk = f.value(grid.time(k + 1), &ens.measure_at(k + 1));
        residuals.push(fk - f0 - acc);
    }
    let max_residual = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    ItoReport { residuals, max_residual }
}

/// Population averages of the pieces of the Hamiltonian `H` at the HJB minimizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HjbTerms {
    pub dvdt: f64,
    /// `E[tr(sigma sigma^T Gamma) / 2]`
    pub diffusion: f64,
    /// `E[p . b]`
    pub drift: f64,
    /// `-E[p . int gamma lambda(de)]`
    pub compensator: f64,
    pub cost: f64,
    /// `E[int (k(x + gamma) - k(x)) lambda(de)]`
    pub nonlocal: f64,
}

impl HjbTerms {
    fn largest(&self) -> f64 {
        [self.dvdt, self.diffusion, self.drift, self.compensator, self.cost, self.nonlocal]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn hamiltonian(&self) -> f64 {
        self.diffusion + self.drift + self.compensator + self.cost + self.nonlocal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HjbReport {
    pub t: f64,
    /// `dV/dt + int inf_v H mu(dx)`
    pub residual: f64,
    /// `|residual|` over the largest individual term.
    pub normalized: f64,
    pub terms: HjbTerms,
    /// `-E[H]` at the solver's control, the closed-form time derivative.
    pub analytic_dvdt: Option<f64>,
    /// Relative `L^2(mu)` distance of the HJB argmin from the solver's control.
    pub minimizer_match: Option<f64>,
    pub dvdt_std_error: f64,
    pub value: f64,
}

fn hamiltonian_terms(
    model: &ModelSpec,
    jm: &JumpMeasure,
    vs: &ValueSample,
    controls: Option<&[f64]>,
    settings: &MinimizerSettings,
    exec: Exec,
) -> Result<(HjbTerms, Vec<f64>)> {
    let n = model.n;
    let d = model.control_dim();
    let t = vs.t;
    let mu = &vs.mu;
    let count = mu.len();
    let snap = model.snapshot(exec, mu.points());
    let aff = model.step_affine(t, jm);
    let rows = exec::try_map(exec, count, |i| -> Result<([f64; 5], Vec<f64>)> {
        let x = mu.point(i);
        let p = vs.d_y_dvdnu(x);
        let v = match controls {
            Some(c) => c[i * d..(i + 1) * d].to_vec(),
            None => phi0_at(model, t, x, &snap, &p, settings, vs.controls.get(i * d..(i + 1) * d))?,
        };
        let (b, sigma) = model.coefficients(t, x, &snap, &aff, &v);
        let pv = DVector::from_column_slice(&p);
        let gam = vs.d_y2_dvdnu(x);
        let diffusion = 0.5 * (&sigma * sigma.transpose()).component_mul(&gam).sum();
        let mut compensator = 0.0;
        let mut nonlocal = 0.0;
        for (a, jc) in aff.jumps.iter().enumerate() {
            let g = jc.apply(x, &snap.mean);
            compensator -= aff.weights[a] * pv.dot(&g);
            nonlocal += aff.weights[a] * vs.dvdnu_increment(x, g.as_slice());
        }
        let cost = model.running_cost_at(t, x, &snap, &v);
        Ok(([diffusion, pv.dot(&b), compensator, cost, nonlocal], v))
    })?;
    let mut sums = [0.0; 5];
    let mut argmin = Vec::with_capacity(count * d);
    for (s, v) in rows {
        for c in 0..5 {
            sums[c] += s[c];
        }
        argmin.extend(v);
    }
    let m = count as f64;
    let _ = n;
    Ok((
        HjbTerms {
            dvdt: 0.0,
            diffusion: sums[0] / m,
            drift: sums[1] / m,
            compensator: sums[2] / m,
            cost: sums[3] / m,
            nonlocal: sums[4] / m,
        },
        argmin,
    ))
}

/// Evaluates `dV/dt + int inf_v H(t, x, mu, v, D_y dV/dnu, D_y^2 dV/dnu, dV/dnu) mu(dx)`.
pub fn hjb_residual(
    model: &ModelSpec,
    jm: &JumpMeasure,
    vs: &ValueSample,
    dvdt: f64,
    settings: &MinimizerSettings,
    exec: Exec,
) -> Result<HjbReport> {
    if !model.diffusion_control_free() {
        return Err(Error::OperationUnsupported("the HJB residual requires a control-free diffusion".into()));
    }
    let (mut terms, argmin) = hamiltonian_terms(model, jm, vs, None, settings, exec)?;
    terms.dvdt = dvdt;
    let residual = dvdt + terms.hamiltonian();
    let largest = terms.largest();
    let normalized = if largest > 0.0 { residual.abs() / largest } else { 0.0 };
    let (analytic_dvdt, minimizer_match) = if vs.controls.is_empty() {
        (None, None)
    } else {
        let (at_u, _) = hamiltonian_terms(model, jm, vs, Some(&vs.controls), settings, exec)?;
        let diff: f64 = argmin.iter().zip(&vs.controls).map(|(a, b)| (a - b).powi(2)).sum();
        let size: f64 = vs.controls.iter().map(|b| b * b).sum();
        let rel = if size > 0.0 { (diff / size).sqrt() } else { diff.sqrt() };
        (Some(-at_u.hamiltonian()), Some(rel))
    };
    Ok(HjbReport {
        t: vs.t,
        residual,
        normalized,
        terms,
        analytic_dvdt,
        minimizer_match,
        dvdt_std_error: 0.0,
        value: vs.value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HjbConfig {
    /// Evaluation time; must lie on the solver grid.
    pub time: f64,
    /// `dV/dt` uses solves started `offset_steps` grid steps before and after `time`.
    pub offset_steps: usize,
    pub probes: usize,
    /// Replace `V` by the zero function.
    pub zero_value: bool,
    pub value: ValueConfig,
}

impl Default for HjbConfig {
    fn default() -> Self {
        HjbConfig { time: 0.2, offset_steps: 2, probes: 21, zero_value: false, value: ValueConfig::default() }
    }
}

/// Solves from `mu` at `time` and `time +- offset_steps dt` on the grid of `cfg`, fits the
/// value derivatives at `time` and evaluates the HJB residual with a central difference in `t`.
pub fn hjb_check(
    model: &ModelSpec,
    jm: &JumpMeasure,
    mu: &EmpiricalMeasure,
    cfg: &SolveConfig,
    hc: &HjbConfig,
) -> Result<(HjbReport, ValueSample)> {
    if !model.diffusion_control_free() {
        return Err(Error::OperationUnsupported("the HJB residual requires a control-free diffusion".into()));
    }
    let grid = cfg.grid()?;
    let dt = grid.dt();
    let pos = (hc.time - grid.t0) / dt;
    let k = pos.round() as usize;
    if (pos - k as f64).abs() > 1e-9 || k < hc.offset_steps || k + hc.offset_steps >= grid.steps || hc.offset_steps == 0 {
        return Err(Error::config("hjb.time", "must be a grid time with offset_steps grid steps on either side"));
    }
    if hc.zero_value {
        let vs = ValueSample::zero(hc.time, mu);
        return Ok((hjb_residual(model, jm, &vs, 0.0, &cfg.minimizer, cfg.exec)?, vs));
    }
    let solve_from = |knot: usize| {
        let c = SolveConfig { t0: grid.time(knot), steps: grid.steps - knot, ..cfg.clone() };
        solve_mftc(model, jm, mu, &c)
    };
    let centre = solve_from(k)?;
    let mut vcfg = hc.value.clone();
    vcfg.sensitivity.regression = cfg.regression;
    vcfg.sensitivity.exec = cfg.exec;
    let probes = default_probes(mu, hc.probes);
    let vs = fit_value_derivatives(model, jm, &centre, &probes, &vcfg)?;
    drop(centre);
    let before = costs_with_control_variate(model, jm, &solve_from(k - hc.offset_steps)?, cfg.exec);
    let after = costs_with_control_variate(model, jm, &solve_from(k + hc.offset_steps)?, cfg.exec);
    let h = 2.0 * hc.offset_steps as f64 * dt;
    let diffs: Vec<f64> = after.iter().zip(&before).map(|(a, b)| (a - b) / h).collect();
    let (dvdt, se) = mean_and_error(&diffs);
    let mut report = hjb_residual(model, jm, &vs, dvdt, &cfg.minimizer, cfg.exec)?;
    report.dvdt_std_error = se;
    Ok((report, vs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QrReport {
    /// Relative `L^2` error of `Q^j_t` against `D_y^2 dV/dnu(y) sigma^j(t, y, mu)` over the probes.
    pub q_err: f64,
    /// Relative `L^2` error of `R_t(e)` against `D_y dV/dnu(y + gamma) - D_y dV/dnu(y)`.
    pub r_err: f64,
}

fn relative(err: f64, size: f64) -> f64 {
    if size > 0.0 {
        (err / size).sqrt()
    } else {
        err.sqrt()
    }
}

/// Checks the pinned-flow `Q_t`, `R_t` against the derivatives of `dV/dnu`.
pub fn q_r_characterization_check(model: &ModelSpec, jm: &JumpMeasure, vs: &ValueSample) -> Result<QrReport> {
    if !model.diffusion_control_free() {
        return Err(Error::OperationUnsupported("the characterization requires a control-free diffusion".into()));
    }
    if vs.probes.is_empty() {
        return Err(Error::domain("value sample carries no pinned-flow probes"));
    }
    let n = model.n;
    let t = vs.t;
    let snap = model.snapshot_of(&vs.mu);
    let aff = model.step_affine(t, jm);
    let zero_u = vec![0.0; model.control_dim()];
    let (mut qe, mut qs, mut re, mut rs) = (0.0, 0.0, 0.0, 0.0);
    for (m, y) in vs.probes.chunks(n).enumerate() {
        let (_, sigma) = model.coefficients(t, y, &snap, &aff, &zero_u);
        let pred_q = vs.d_y2_dvdnu(y) * &sigma;
        for (a, b) in vs.q[m * n * n..(m + 1) * n * n].iter().zip(pred_q.as_slice()) {
            qe += (a - b).powi(2);
            qs += b * b;
        }
        let py = vs.d_y_dvdnu(y);
        let width = jm.len() * n;
        for (a, jc) in aff.jumps.iter().enumerate() {
            let g = jc.apply(y, &snap.mean);
            let shifted: Vec<f64> = (0..n).map(|c| y[c] + g[c]).collect();
            let ps = vs.d_y_dvdnu(&shifted);
            for c in 0..n {
                let pred = ps[c] - py[c];
                re += (vs.r[m * width + a * n + c] - pred).powi(2);
                rs += pred * pred;
            }
        }
    }
    Ok(QrReport { q_err: relative(qe, qs), r_err: relative(re, rs) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::lqoracle::{solve_riccati, LqSpec};
    use crate::noise::NoiseBundle;

    fn lq_solution(count: usize, steps: usize) -> (LqSpec, ModelSpec, JumpMeasure, Solution, SolveConfig) {
        let spec = LqSpec::fixture_with_jump();
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let init = EmpiricalMeasure::sample_gaussian(count, &[0.5], &[0.4], 5).unwrap();
        let cfg = SolveConfig { steps, tol_control: 1e-9, seed: 11, ..Default::default() };
        let sol = solve_mftc(&model, &jm, &init, &cfg).unwrap();
        (spec, model, jm, sol, cfg)
    }

    #[test]
    fn constant_running_cost_integrates_exactly() {
        let mut spec = LqSpec::scalar();
        spec.q = vec![0.0];
        let model = spec.model().unwrap();
        let jm = JumpMeasure::none();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let noise = NoiseBundle::new(1, 1, &jm, &grid);
        let init = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let ens = simulate_forward(&model, &jm, &init, &FeedbackPolicy::Zero, &grid, &noise, Exec::Sequential).unwrap();
        assert_eq!(evaluate_cost(&model, &jm, &ens), 0.0);
        let one = FeedbackPolicy::Callback(Arc::new(|_, _, _| vec![2.0f64.sqrt()]));
        let ens = simulate_forward(&model, &jm, &init, &one, &grid, &noise, Exec::Sequential).unwrap();
        // f = r v^2 / 2 = 1 on [0, 1].
        assert!((evaluate_cost(&model, &jm, &ens) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn control_variate_keeps_the_mean_and_shrinks_the_error() {
        let (_, model, jm, sol, _) = lq_solution(4000, 20);
        let (m0, e0) = cost_with_error(&model, &jm, &sol.ensemble, Exec::default());
        let (m1, e1) = value_estimate(&model, &jm, &sol, Exec::default());
        assert!((m0 - m1).abs() < 3.0 * e0, "{m0} vs {m1}");
        assert!(e1 < 0.9 * e0, "{e1} vs {e0}");
    }

    #[test]
    fn identical_alternative_has_zero_gap() {
        let (_, model, jm, sol, _) = lq_solution(500, 10);
        let cert = certify_gap(&model, &jm, &sol, &FeedbackPolicy::Table(sol.controls().clone()), Exec::default()).unwrap();
        assert_eq!((cert.lhs, cert.rhs), (0.0, 0.0));
        assert!(cert.passes);
        assert_eq!(cert.coefficient, model.constants.lambda_v);
    }

    #[test]
    fn constant_shift_gap_matches_completion_of_squares() {
        let (spec, model, jm, sol, _) = lq_solution(4000, 50);
        for delta in [0.2, 0.5] {
            let cert = certify_gap(&model, &jm, &sol, &constant_shift(&sol, &[delta]), Exec::default()).unwrap();
            let exact = crate::lqoracle::shift_gap(&spec, &[delta], 1.0).unwrap();
            assert!(cert.passes);
            assert!((cert.lhs - exact).abs() < 0.03 * exact + 3.0 * cert.std_error, "{} vs {exact}", cert.lhs);
        }
    }

    #[test]
    fn violated_sufficiency_is_a_precondition_error() {
        let (_, mut model, jm, sol, _) = lq_solution(200, 5);
        model.constants.lambda_v = 0.0;
        let err = certify_gap(&model, &jm, &sol, &FeedbackPolicy::Table(sol.controls().clone()), Exec::default());
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let nodes = gauss_legendre(4);
        let w: f64 = nodes.iter().map(|(_, w)| w).sum();
        assert!((w - 1.0).abs() < 1e-14);
        let i7: f64 = nodes.iter().map(|(s, w)| w * s.powi(7)).sum();
        assert!((i7 - 0.125).abs() < 1e-14);
    }

    #[test]
    fn lq_value_derivatives_follow_riccati() {
        let (spec, model, jm, sol, cfg) = lq_solution(2000, 20);
        let ric = solve_riccati(&spec, &cfg.grid().unwrap()).unwrap();
        let mu = sol.ensemble.measure_at(0);
        let probes = default_probes(&mu, 11);
        let vcfg = ValueConfig { sensitivity: SensitivityConfig { regression: cfg.regression, ..Default::default() }, ..Default::default() };
        let vs = fit_value_derivatives(&model, &jm, &sol, &probes, &vcfg).unwrap();
        let mean = mu.mean();
        for y in [-0.5, 0.5, 1.5] {
            let exact = ric.adjoint(0.0, &[y], &mean)[0];
            assert!((vs.d_y_dvdnu(&[y])[0] - exact).abs() < 0.02 * (1.0 + exact.abs()), "y = {y}");
            assert!((vs.d_y2_dvdnu(&[y])[(0, 0)] - ric.p(0, 0.0)).abs() < 0.02 * ric.p(0, 0.0));
        }
        let avg = mu.iter().map(|y| vs.dvdnu(y)).sum::<f64>() / mu.len() as f64;
        assert!(avg.abs() < 1e-12);
        // dV/dnu(y) - dV/dnu(mean) = p (y - m)^2 / 2 + (K m + s)(y - m) for the Riccati value.
        let (p0, k0, s0) = (ric.p(0, 0.0), ric.big_k(0, 0.0), ric.s(0, 0.0));
        let exact = 0.5 * p0 + k0 * mean[0] + s0;
        assert!(((vs.dvdnu(&[mean[0] + 1.0]) - vs.dvdnu(&mean)) - exact).abs() < 0.02 * exact.abs());
        assert!(vs.fit_residual < 1e-6 && vs.growth_constant.is_finite());
        let qr = q_r_characterization_check(&model, &jm, &vs).unwrap();
        assert!(qr.q_err < 0.05 && qr.r_err < 0.05, "{qr:?}");
    }

    #[test]
    fn zero_value_candidate_is_rejected() {
        let spec = LqSpec::fixture_with_jump();
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let mu = EmpiricalMeasure::sample_gaussian(500, &[0.5], &[0.4], 5).unwrap();
        let vs = ValueSample::zero(0.3, &mu);
        let rep = hjb_residual(&model, &jm, &vs, 0.0, &MinimizerSettings::default(), Exec::default()).unwrap();
        assert!((rep.normalized - 1.0).abs() < 1e-12);
        assert!(rep.residual > 0.0 && rep.minimizer_match.is_none());
    }

    #[test]
    fn controlled_diffusion_is_unsupported() {
        let mut spec = LqSpec::fixture_with_jump();
        spec.controlled_sigma = Some(crate::lqoracle::ControlledSigma { sc: vec![0.5], r_sigma: vec![1.0] });
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let mu = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let vs = ValueSample::zero(0.0, &mu);
        let err = hjb_residual(&model, &jm, &vs, 0.0, &MinimizerSettings::default(), Exec::default());
        assert!(matches!(err, Err(Error::OperationUnsupported(_))));
    }

    #[test]
    fn ito_fixtures() {
        // b = 0, sigma = 1 and no jumps; then b = sigma = 0 with one unit jump.
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let init = EmpiricalMeasure::sample_gaussian(10_000, &[0.0], &[1.0], 3).unwrap();
        let mut spec = LqSpec::scalar();
        spec.c = vec![0.0];
        spec.sigma0 = vec![1.0];
        let model = spec.model().unwrap();
        let jm = JumpMeasure::none();
        let noise = NoiseBundle::new(7, 1, &jm, &grid);
        let ens = simulate_forward(&model, &jm, &init, &FeedbackPolicy::Zero, &grid, &noise, Exec::default()).unwrap();
        assert!(ito_check(&model, &jm, &FirstMoment(0), &ens, Exec::default()).max_residual <= 5e-2);
        assert!(ito_check(&model, &jm, &SecondMoment, &ens, Exec::default()).max_residual <= 5e-2);

        let mut spec = LqSpec::scalar();
        spec.c = vec![0.0];
        spec.jumps = vec![crate::lqoracle::LqJump { mark: vec![1.0], weight: 1.0, gamma0: vec![1.0], gamma1: vec![0.0], gamma2: vec![0.0] }];
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let noise = NoiseBundle::new(7, 1, &jm, &grid);
        let ens = simulate_forward(&model, &jm, &init, &FeedbackPolicy::Zero, &grid, &noise, Exec::default()).unwrap();
        let rep = ito_check(&model, &jm, &SecondMoment, &ens, Exec::default());
        assert!(rep.max_residual <= 5e-2, "{}", rep.max_residual);
        // A wrong Ito correction is caught.
        struct NoCorrection;
        impl MeasureFunctional for NoCorrection {
            fn value(&self, t: f64, mu: &EmpiricalMeasure) -> f64 {
                SecondMoment.value(t, mu)
            }
            fn dvdnu(&self, _t: f64, _mu: &EmpiricalMeasure, y: &[f64]) -> f64 {
                2.0 * y[0]
            }
            fn d_y(&self, t: f64, mu: &EmpiricalMeasure, y: &[f64]) -> DVector<f64> {
                SecondMoment.d_y(t, mu, y)
            }
            fn d_y2(&self, _t: f64, _mu: &EmpiricalMeasure, _y: &[f64]) -> DMatrix<f64> {
                DMatrix::zeros(1, 1)
            }
        }
        assert!(ito_check(&model, &jm, &NoCorrection, &ens, Exec::default()).max_residual > 0.5);
    }
}
