//! Euler scheme for the controlled McKean-Vlasov jump SDE on a particle ensemble,
//! and its linearization along a base ensemble.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::array::Cube;
use crate::control::FeedbackPolicy;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::grid::TimeGrid;
use crate::measure::EmpiricalMeasure;
use crate::model::{pack, DiffusionColumn, JumpMeasure, MeasureSnapshot, ModelSpec};
use crate::noise::{NoiseBundle, StepNoise};

/// States beyond this magnitude abort the simulation.
pub const BLOWUP_CAP: f64 = 1e8;

/// Particle states (`knots x N x n`), predictable controls (`steps x N x d`) and the
/// cross-section summaries the coefficients were evaluated against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub grid: TimeGrid,
    pub states: Cube,
    pub controls: Cube,
    pub snapshots: Vec<MeasureSnapshot>,
}

impl ParticleEnsemble {
    pub fn particles(&self) -> usize {
        self.states.particles()
    }

    pub fn dim(&self) -> usize {
        self.states.width()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.width()
    }

    pub fn measure_at(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.dim(), self.states.slab(k).to_vec()).expect("finite ensemble")
    }

    /// Moment monitor `E[sup_t |X_t|^2] / E[1 + |xi|^2 + sum |v|^2 dt]`.
    pub fn moment_ratio(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let dt = self.grid.dt();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..self.particles() {
            num += (0..self.grid.knots()).map(|k| sq(self.states.at(k, i))).fold(0.0, f64::max);
            den += 1.0 + sq(self.states.at(0, i)) + (0..self.grid.steps).map(|k| sq(self.controls.at(k, i))).sum::<f64>() * dt;
        }
        num / den
    }
}

fn check_row(row: &[f64], step: usize, particle: usize) -> Result<()> {
    let mag = row.iter().fold(0.0f64, |a, v| if v.is_nan() { f64::NAN } else { a.max(v.abs()) });
    if !(mag <= BLOWUP_CAP) {
        return Err(Error::BlowUp { step, particle, magnitude: mag, iteration: None });
    }
    Ok(())
}

/// One Euler step for a single particle.
#[allow(clippy::too_many_arguments)]
pub(crate) fn euler_step(
    model: &ModelSpec,
    t: f64,
    dt: f64,
    x: &[f64],
    snap: &MeasureSnapshot,
    aff: &crate::model::StepAffine,
    u: &[f64],
    noise: &StepNoise,
    out: &mut [f64],
) {
    let (b, sigma) = model.coefficients(t, x, snap, aff, u);
    let db = DVector::from_column_slice(&noise.db);
    let jump = model.jump_increment(x, &snap.mean, aff, &noise.dn, dt);
    let inc = b * dt + sigma * db + jump;
    for c in 0..x.len() {
        out[c] = x[c] + inc[c];
    }
}

/// Simulates `init.len()` particles; when `frozen` is given, coefficients read those
/// cross-sections instead of the particles' own empirical measure.
#[allow(clippy::too_many_arguments)]
pub(crate) fn propagate(
    model: &ModelSpec,
    jm: &JumpMeasure,
    init: &[f64],
    policy: &FeedbackPolicy,
    grid: &TimeGrid,
    noise: &NoiseBundle,
    frozen: Option<&[MeasureSnapshot]>,
    streams: Option<&[usize]>,
    exec: Exec,
) -> Result<ParticleEnsemble> {
    let n = model.n;
    let d = model.control_dim();
    let count = init.len() / n;
    if init.len() != count * n || count == 0 {
        return Err(Error::domain("initial cloud does not match the state dimension"));
    }
    if noise.dim() != n || noise.atoms() != jm.len() {
        return Err(Error::domain("noise bundle does not match the model"));
    }
    if (noise.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return Err(Error::domain("noise bundle was built for a different step size"));
    }
    let steps = grid.steps;
    let dt = grid.dt();
    let mut states = Cube::zeros(steps + 1, count, n);
    states.slab_mut(0).copy_from_slice(init);
    let mut controls = Cube::zeros(steps, count, d);
    let mut snapshots = Vec::with_capacity(steps + 1);
    let stream = |i: usize| streams.map(|s| s[i]).unwrap_or(i);
    for k in 0..steps {
        let t = grid.time(k);
        let snap = match frozen {
            Some(f) => f[k].clone(),
            None => model.snapshot(exec, states.slab(k)),
        };
        let aff = model.step_affine(t, jm);
        {
            let xs = states.slab(k);
            exec::try_fill_rows(exec, controls.slab_mut(k), d, |i, row| {
                policy.control(model, k, t, i, &xs[i * n..(i + 1) * n], &snap, row)
            })?;
        }
        let us = controls.slab(k);
        let (prev, next) = states.slab_pair_mut(k, k + 1);
        exec::try_fill_rows(exec, next, n, |i, row| {
            let mut sn = StepNoise::new(n, jm.len());
            noise.fill(stream(i), k, &mut sn);
            euler_step(model, t, dt, &prev[i * n..(i + 1) * n], &snap, &aff, &us[i * d..(i + 1) * d], &sn, row);
            check_row(row, k + 1, i)
        })?;
        snapshots.push(snap);
    }
    snapshots.push(match frozen {
        Some(f) => f[steps].clone(),
        None => model.snapshot(exec, states.slab(steps)),
    });
    Ok(ParticleEnsemble { grid: *grid, states, controls, snapshots })
}

/// Forward Euler simulation of the controlled system started from `init`.
pub fn simulate_forward(
    model: &ModelSpec,
    jm: &JumpMeasure,
    init: &EmpiricalMeasure,
    policy: &FeedbackPolicy,
    grid: &TimeGrid,
    noise: &NoiseBundle,
    exec: Exec,
) -> Result<ParticleEnsemble> {
    if init.dim() != model.n {
        return Err(Error::domain("initial measure has the wrong dimension"));
    }
    propagate(model, jm, init.points(), policy, grid, noise, None, None, exec)
}

/// Tangent of one Euler step along `(dx, ds, dm, du)`; `ds`, `dm` are the cross-section
/// perturbations of the statistics and the mean.
#[allow(clippy::too_many_arguments)]
pub(crate) fn euler_step_tangent(
    model: &ModelSpec,
    t: f64,
    dt: f64,
    x: &[f64],
    snap: &MeasureSnapshot,
    aff: &crate::model::StepAffine,
    u: &[f64],
    noise: &StepNoise,
    dx: &[f64],
    ds: &[f64],
    dm: &[f64],
    du: &[f64],
    out: &mut [f64],
) {
    let n = model.n;
    let mut inc = DVector::from_column_slice(dx);
    let z0 = pack(x, &snap.stats, model.control_block(u, 0));
    let dz0 = pack(dx, ds, model.control_block(du, 0));
    inc += model.drift.jacobian(t, &z0) * DVector::from_column_slice(&dz0) * dt;
    let dxv = DVector::from_column_slice(dx);
    let dmv = DVector::from_column_slice(dm);
    for (j, col) in model.columns.iter().enumerate() {
        let dcol = match col {
            DiffusionColumn::Linear(_) => {
                let c = aff.columns[j].as_ref().expect("affine column");
                &c.c1 * &dxv + &c.c2 * &dmv
            }
            DiffusionColumn::Controlled { coeff, .. } => {
                let zj = pack(x, &snap.stats, model.control_block(u, j + 1));
                let dzj = pack(dx, ds, model.control_block(du, j + 1));
                coeff.jacobian(t, &zj) * DVector::from_column_slice(&dzj)
            }
        };
        inc += dcol * noise.db[j];
    }
    for (a, g) in aff.jumps.iter().enumerate() {
        let comp = noise.dn[a] as f64 - aff.weights[a] * dt;
        if comp != 0.0 {
            inc += (&g.c1 * &dxv + &g.c2 * &dmv) * comp;
        }
    }
    out[..n].copy_from_slice(inc.as_slice());
}

/// Cross-section perturbation `(mean grad phi(Y_i) dY_i, mean dY_i)` of a cloud.
pub(crate) fn cross_section_tangent(model: &ModelSpec, exec: Exec, xs: &[f64], dxs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = model.n;
    let k = model.stats_dim();
    let count = xs.len() / n;
    let acc = exec::mean(exec, count, k + n, |i, acc| {
        let y = &xs[i * n..(i + 1) * n];
        let dy = &dxs[i * n..(i + 1) * n];
        let g = model.stats.grad(y);
        for l in 0..k {
            for c in 0..n {
                acc[l] += g[(l, c)] * dy[c];
            }
        }
        for c in 0..n {
            acc[k + c] += dy[c];
        }
    });
    (acc[..k].to_vec(), acc[k..].to_vec())
}

/// Variational states `D_eta Y` (`knots x N x n`) along `base` for an initial
/// perturbation `eta` (`N x n`) and control perturbation `du` (`steps x N x d`).
pub fn simulate_linearized(
    model: &ModelSpec,
    jm: &JumpMeasure,
    base: &ParticleEnsemble,
    du: Option<&Cube>,
    eta: &[f64],
    noise: &NoiseBundle,
    exec: Exec,
) -> Result<Cube> {
    let n = model.n;
    let d = model.control_dim();
    let count = base.particles();
    if eta.len() != count * n {
        return Err(Error::domain("eta must have one row per particle"));
    }
    let grid = &base.grid;
    let dt = grid.dt();
    let zero_u = vec![0.0; d];
    let mut out = Cube::zeros(grid.steps + 1, count, n);
    out.slab_mut(0).copy_from_slice(eta);
    for k in 0..grid.steps {
        let t = grid.time(k);
        let aff = model.step_affine(t, jm);
        let snap = &base.snapshots[k];
        let xs = base.states.slab(k);
        let (ds, dm) = cross_section_tangent(model, exec, xs, out.slab(k));
        let (prev, next) = out.slab_pair_mut(k, k + 1);
        exec::try_fill_rows(exec, next, n, |i, row| {
            let mut sn = StepNoise::new(n, jm.len());
            noise.fill(i, k, &mut sn);
            let dui = du.map(|c| c.at(k, i)).unwrap_or(&zero_u);
            euler_step_tangent(
                model,
                t,
                dt,
                &xs[i * n..(i + 1) * n],
                snap,
                &aff,
                base.controls.at(k, i),
                &sn,
                &prev[i * n..(i + 1) * n],
                &ds,
                &dm,
                dui,
                row,
            );
            check_row(row, k + 1, i)
        })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqoracle::LqSpec;
    use crate::measure::EmpiricalMeasure;

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, steps).unwrap()
    }

    #[test]
    fn zero_dynamics_keep_states_constant() {
        let model = LqSpec::scalar().model().unwrap();
        let jm = JumpMeasure::none();
        let init = EmpiricalMeasure::sample_gaussian(50, &[0.0], &[1.0], 1).unwrap();
        let noise = NoiseBundle::new(3, 1, &jm, &grid(10));
        let ens = simulate_forward(&model, &jm, &init, &FeedbackPolicy::Zero, &grid(10), &noise, Exec::Sequential)
            .unwrap();
        for k in 0..=10 {
            assert_eq!(ens.states.slab(k), init.points());
        }
    }

    #[test]
    fn euler_recursion_for_linear_drift() {
        let mut spec = LqSpec::scalar();
        spec.a = vec![1.0];
        let model = spec.model().unwrap();
        let jm = JumpMeasure::none();
        let g = grid(10_000);
        let init = EmpiricalMeasure::dirac(&[1.0]).unwrap();
        let noise = NoiseBundle::new(0, 1, &jm, &g);
        let ens = simulate_forward(&model, &jm, &init, &FeedbackPolicy::Zero, &g, &noise, Exec::Sequential).unwrap();
        let xt = ens.states.at(10_000, 0)[0];
        assert!((xt / std::f64::consts::E - 1.0).abs() < 2e-4);
        assert!((xt - (1.0f64 + 1e-4).powi(10_000)).abs() < 1e-9);
    }

    #[test]
    fn compensated_poisson_mean_is_zero() {
        let mut spec = LqSpec::scalar();
        spec.jumps = vec![crate::lqoracle::LqJump {
            mark: vec![1.0],
            weight: 1.0,
            gamma0: vec![1.0],
            gamma1: vec![0.0],
            gamma2: vec![0.0],
        }];
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let g = grid(100);
        let init = EmpiricalMeasure::new(1, vec![0.0; 4000]).unwrap();
        let noise = NoiseBundle::new(5, 1, &jm, &g);
        let ens = simulate_forward(&model, &jm, &init, &FeedbackPolicy::Zero, &g, &noise, Exec::Sequential).unwrap();
        let mean = ens.snapshots[100].mean[0];
        assert!(mean.abs() < 3.0 * (1.0f64 / 4000.0).sqrt(), "mean {mean}");
    }

    #[test]
    fn blow_up_is_reported() {
        let mut spec = LqSpec::scalar();
        spec.a = vec![400.0];
        let model = spec.model().unwrap();
        let jm = JumpMeasure::none();
        let g = grid(10);
        let init = EmpiricalMeasure::dirac(&[1.0]).unwrap();
        let noise = NoiseBundle::new(0, 1, &jm, &g);
        let err = simulate_forward(&model, &jm, &init, &FeedbackPolicy::Zero, &g, &noise, Exec::Sequential);
        assert!(matches!(err, Err(Error::BlowUp { particle: 0, .. })));
    }

    #[test]
    fn linearized_recursion_for_lq() {
        let mut spec = LqSpec::fixture_with_jump();
        spec.sigma1 = vec![0.0];
        spec.jumps[0].gamma1 = vec![0.0];
        spec.jumps[0].gamma2 = vec![0.0];
        spec.abar = vec![0.0];
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let g = grid(20);
        let init = EmpiricalMeasure::sample_gaussian(30, &[0.5], &[0.5], 2).unwrap();
        let noise = NoiseBundle::new(9, 1, &jm, &g);
        let ens = simulate_forward(&model, &jm, &init, &FeedbackPolicy::Zero, &g, &noise, Exec::Sequential).unwrap();
        let lin = simulate_linearized(&model, &jm, &ens, None, &vec![1.0; 30], &noise, Exec::Sequential).unwrap();
        for k in 0..=20 {
            let expect = (1.0 + 0.1 * g.dt()).powi(k as i32);
            for i in 0..30 {
                assert!((lin.at(k, i)[0] - expect).abs() < 1e-14);
            }
        }
        let zero = simulate_linearized(&model, &jm, &ens, None, &vec![0.0; 30], &noise, Exec::Sequential).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn modes_agree_bitwise() {
        let spec = LqSpec::fixture_with_jump();
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let g = grid(20);
        let init = EmpiricalMeasure::sample_gaussian(700, &[0.5], &[0.5], 2).unwrap();
        let noise = NoiseBundle::new(9, 1, &jm, &g);
        let pol = FeedbackPolicy::Callback(std::sync::Arc::new(|_, x: &[f64], s: &MeasureSnapshot| vec![-x[0] + 0.3 * s.mean[0]]));
        let a = simulate_forward(&model, &jm, &init, &pol, &g, &noise, Exec::Sequential).unwrap();
        let b = simulate_forward(&model, &jm, &init, &pol, &g, &noise, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
