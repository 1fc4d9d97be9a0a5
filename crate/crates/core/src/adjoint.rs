//! Backward regression scheme for the adjoint equation with jumps.
//!
//! At step `k` the next adjoint value is regressed jointly on
//! `phi(Y_k) (1, dB_k / sqrt(dt), (dN_k,a - lambda_a dt) / sqrt(lambda_a dt))`.
//! The block on `1` estimates `E[P_{k+1} | Y_k]`; the noise blocks estimate
//! `E[P_{k+1} dB / dt | Y_k]` and `E[P_{k+1} (dN_a - lambda_a dt) / (lambda_a dt) | Y_k]`,
//! i.e. `Q^j` and `R(e_a)`. The driver is then applied explicitly:
//! `P_k = E[P_{k+1} | Y_k] + dt * H_x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::array::Cube;
use crate::control::{feedback_at, MinimizerSettings};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::grid::TimeGrid;
use crate::model::{JumpMeasure, MeasureSnapshot, ModelSpec, StepAffine};
use crate::noise::{NoiseBundle, StepNoise};
use crate::regression::{Basis, NormalSystem, RegressionConfig};
use crate::simulate::ParticleEnsemble;

/// `P` (`knots x N x n`), `Q` (`steps x N x n^2`, column `Q^j` at `[j n, (j+1) n)`),
/// `R` (`steps x N x atoms n`, atom `a` at `[a n, (a+1) n)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointEnsemble {
    pub grid: TimeGrid,
    pub p: Cube,
    pub q: Cube,
    pub r: Cube,
}

impl AdjointEnsemble {
    pub fn atoms(&self) -> usize {
        if self.p.width() == 0 {
            0
        } else {
            self.r.width() / self.p.width()
        }
    }
}

/// Regression and mean-field data of one backward step.
#[derive(Clone, Debug)]
pub struct StepField {
    pub t: f64,
    pub dt: f64,
    pub(crate) basis: Basis,
    /// `(F (1 + n + atoms)) x n`
    pub(crate) beta: DMatrix<f64>,
    /// Statistic-space mean-field vector of the driver.
    pub cbar: Vec<f64>,
    /// State-space mean-field vector of the driver.
    pub dbar: Vec<f64>,
    pub snapshot: MeasureSnapshot,
    pub(crate) aff: StepAffine,
    /// `sqrt(dt)` per Brownian column followed by `sqrt(lambda_a dt)` per atom.
    pub(crate) noise_scale: Vec<f64>,
}

/// The map `y -> P_k` implied by the backward scheme at every step.
#[derive(Clone, Debug)]
pub struct DecouplingField {
    pub model: ModelSpec,
    pub grid: TimeGrid,
    pub steps: Vec<StepField>,
    pub terminal_snapshot: MeasureSnapshot,
    /// `mean_i g_s(Y_T^i)`
    pub terminal_cbar: Vec<f64>,
}

/// Regressed values at one point: `(E[P_{k+1} | y], Q(y), R(y))`.
#[derive(Clone, Debug)]
pub struct Regressed {
    pub alpha: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
}

pub(crate) fn regressors(noise: &StepNoise, scale: &[f64], atoms_weights: &[f64], dt: f64, out: &mut [f64]) {
    let n = noise.db.len();
    out[0] = 1.0;
    for j in 0..n {
        out[1 + j] = noise.db[j] / scale[j];
    }
    for (a, w) in atoms_weights.iter().enumerate() {
        out[1 + n + a] = (noise.dn[a] as f64 - w * dt) / scale[n + a];
    }
}

fn predict(beta: &DMatrix<f64>, phi: &[f64], scale: &[f64], n: usize) -> Regressed {
    let f = phi.len();
    let block = |b: usize, out: &mut [f64], div: f64| {
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for m in 0..f {
                acc += phi[m] * beta[(b * f + m, c)];
            }
            *o = acc / div;
        }
    };
    let atoms = scale.len() - n;
    let mut alpha = vec![0.0; n];
    block(0, &mut alpha, 1.0);
    let mut q = vec![0.0; n * n];
    for j in 0..n {
        block(1 + j, &mut q[j * n..(j + 1) * n], scale[j]);
    }
    let mut r = vec![0.0; atoms * n];
    for a in 0..atoms {
        block(1 + n + a, &mut r[a * n..(a + 1) * n], scale[n + a]);
    }
    Regressed { alpha, q, r }
}

impl Regressed {
    fn add(mut self, other: &Regressed) -> Regressed {
        for (a, b) in self.alpha.iter_mut().chain(&mut self.q).chain(&mut self.r).zip(other.alpha.iter().chain(&other.q).chain(&other.r)) {
            *a += b;
        }
        self
    }
}

impl StepField {
    fn features(&self) -> usize {
        self.basis.len()
    }

    pub(crate) fn regressed_with(&self, phi: &[f64], n: usize) -> Regressed {
        predict(&self.beta, phi, &self.noise_scale, n)
    }

    /// Tangent of the regressed values for feature tangent `dphi` and, when the
    /// coefficients move as well, coefficient tangent `dbeta`.
    pub(crate) fn regressed_tangent(&self, phi: &[f64], dphi: &[f64], dbeta: Option<&DMatrix<f64>>, n: usize) -> Regressed {
        let base = predict(&self.beta, dphi, &self.noise_scale, n);
        match dbeta {
            Some(db) => base.add(&predict(db, phi, &self.noise_scale, n)),
            None => base,
        }
    }

    pub fn regressed(&self, y: &[f64]) -> Regressed {
        let mut phi = vec![0.0; self.features()];
        self.basis.eval(y, &mut phi);
        self.regressed_with(&phi, y.len())
    }
}

impl DecouplingField {
    pub fn n(&self) -> usize {
        self.model.n
    }

    /// `P_k` at state `y` when control `u` is applied there (`k < steps`).
    pub fn psi(&self, k: usize, y: &[f64], u: &[f64]) -> Vec<f64> {
        let st = &self.steps[k];
        let reg = st.regressed(y);
        self.psi_with(k, y, u, &reg)
    }

    pub(crate) fn psi_with(&self, k: usize, y: &[f64], u: &[f64], reg: &Regressed) -> Vec<f64> {
        let st = &self.steps[k];
        let m = &self.model;
        let parts = m.driver_parts(st.t, y, &st.snapshot, &st.aff, u, &reg.alpha, &reg.q, &reg.r);
        let pull = m.stats_pullback(y, &st.cbar);
        (0..m.n).map(|c| reg.alpha[c] + st.dt * (parts.local[c] + pull[c] + st.dbar[c])).collect()
    }

    /// Terminal adjoint value at `y`.
    pub fn psi_terminal(&self, y: &[f64]) -> Vec<f64> {
        let (gx, _) = self.model.terminal_parts(self.grid.horizon, y, &self.terminal_snapshot);
        let pull = self.model.stats_pullback(y, &self.terminal_cbar);
        (0..self.model.n).map(|c| gx[c] + pull[c]).collect()
    }

    /// Control and adjoint value `(u, P)` at `y`, solving `u = phi(y, psi_k(y, u), Q_k(y))`.
    pub fn feedback(
        &self,
        k: usize,
        y: &[f64],
        _snap: &MeasureSnapshot,
        settings: &MinimizerSettings,
        init: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let st = &self.steps[k];
        let reg = st.regressed(y);
        let d = self.model.control_dim();
        let mut u = vec![0.0; d];
        match init {
            Some(v) => u.copy_from_slice(v),
            None => feedback_at(&self.model, st.t, y, &st.snapshot, &reg.alpha, &reg.q, settings, None, &mut u)?,
        }
        let mut next = vec![0.0; d];
        for _ in 0..100 {
            let p = self.psi_with(k, y, &u, &reg);
            feedback_at(&self.model, st.t, y, &st.snapshot, &p, &reg.q, settings, Some(&u), &mut next)?;
            let change: f64 = u.iter().zip(&next).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let size: f64 = next.iter().map(|a| a * a).sum::<f64>().sqrt();
            std::mem::swap(&mut u, &mut next);
            if change <= 1e-14 * (1.0 + size) {
                break;
            }
        }
        let p = self.psi_with(k, y, &u, &reg);
        Ok((u, p))
    }
}

/// `g_x(Y_T^i, mu_T) + (1/N) sum_k D_y dg/dnu(Y_T^k, mu_T)(Y_T^i)` for every particle.
pub fn terminal_condition(model: &ModelSpec, exec: Exec, final_states: &[f64]) -> Vec<f64> {
    terminal_with_mean(model, exec, final_states, &model.snapshot(exec, final_states), 0.0).0
}

fn terminal_with_mean(
    model: &ModelSpec,
    exec: Exec,
    ys: &[f64],
    snap: &MeasureSnapshot,
    horizon: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = model.n;
    let k = model.stats_dim();
    let count = ys.len() / n;
    let gbar = exec::mean(exec, count, k, |i, acc| {
        let (_, gs) = model.terminal_parts(horizon, &ys[i * n..(i + 1) * n], snap);
        for l in 0..k {
            acc[l] += gs[l];
        }
    });
    let mut p = vec![0.0; ys.len()];
    exec::fill_rows(exec, &mut p, n, |i, row| {
        let y = &ys[i * n..(i + 1) * n];
        let (gx, _) = model.terminal_parts(horizon, y, snap);
        let pull = model.stats_pullback(y, &gbar);
        for c in 0..n {
            row[c] = gx[c] + pull[c];
        }
    });
    (p, gbar)
}

/// Regression system of one backward step, reusable by tangent computations.
pub(crate) struct StepSystem {
    pub basis: Basis,
    pub normal: NormalSystem,
    pub beta: DMatrix<f64>,
    pub noise_scale: Vec<f64>,
}

pub(crate) fn noise_scale(n: usize, jm: &JumpMeasure, dt: f64) -> Vec<f64> {
    let mut s = vec![dt.sqrt(); n];
    s.extend(jm.atoms().iter().map(|a| (a.weight * dt).sqrt()));
    s
}

/// Joint features of particle `i` at step `k` into `out` (length `F (1 + n + atoms)`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn joint_features(
    basis: &Basis,
    y: &[f64],
    noise: &NoiseBundle,
    stream: usize,
    k: usize,
    scale: &[f64],
    weights: &[f64],
    dt: f64,
    phi: &mut [f64],
    z: &mut [f64],
    out: &mut [f64],
) {
    let mut sn = StepNoise::new(y.len(), weights.len());
    noise.fill(stream, k, &mut sn);
    regressors(&sn, scale, weights, dt, z);
    basis.eval(y, phi);
    let f = phi.len();
    for (b, zb) in z.iter().enumerate() {
        for m in 0..f {
            out[b * f + m] = zb * phi[m];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn step_system(
    model: &ModelSpec,
    jm: &JumpMeasure,
    ys: &[f64],
    p_next: &[f64],
    noise: &NoiseBundle,
    k: usize,
    dt: f64,
    cfg: &RegressionConfig,
    exec: Exec,
) -> Result<StepSystem> {
    let n = model.n;
    let count = ys.len() / n;
    let basis = Basis::fit(ys, n, cfg.basis_degree);
    let f = basis.len();
    let blocks = 1 + n + jm.len();
    let w = f * blocks;
    let scale = noise_scale(n, jm, dt);
    let weights: Vec<f64> = jm.atoms().iter().map(|a| a.weight).collect();
    let tri = w * (w + 1) / 2;
    let acc = exec::mean(exec, count, tri + w * n, |i, acc| {
        let mut phi = vec![0.0; f];
        let mut z = vec![0.0; blocks];
        let mut row = vec![0.0; w];
        joint_features(&basis, &ys[i * n..(i + 1) * n], noise, i, k, &scale, &weights, dt, &mut phi, &mut z, &mut row);
        let mut o = 0;
        for a in 0..w {
            let ra = row[a];
            if ra != 0.0 {
                for b in a..w {
                    acc[o + b - a] += ra * row[b];
                }
            }
            o += w - a;
        }
        let p = &p_next[i * n..(i + 1) * n];
        for a in 0..w {
            for c in 0..n {
                acc[tri + a * n + c] += row[a] * p[c];
            }
        }
    });
    let mut gram = DMatrix::zeros(w, w);
    let mut o = 0;
    for a in 0..w {
        for b in a..w {
            gram[(a, b)] = acc[o + b - a];
            gram[(b, a)] = acc[o + b - a];
        }
        o += w - a;
    }
    let rhs = DMatrix::from_row_slice(w, n, &acc[tri..]);
    let normal = NormalSystem::new(gram, cfg.ridge, k)?;
    let beta = normal.solve(&rhs);
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularRegression { step: k });
    }
    Ok(StepSystem { basis, normal, beta, noise_scale: scale })
}

/// Backward solve along `ens`; returns the adjoint ensemble and its decoupling field.
pub fn solve_adjoint_with_field(
    model: &ModelSpec,
    jm: &JumpMeasure,
    ens: &ParticleEnsemble,
    noise: &NoiseBundle,
    cfg: &RegressionConfig,
    exec: Exec,
) -> Result<(AdjointEnsemble, DecouplingField)> {
    cfg.validate()?;
    let n = model.n;
    let kdim = model.stats_dim();
    let atoms = jm.len();
    let grid = ens.grid;
    let steps = grid.steps;
    let dt = grid.dt();
    let count = ens.particles();
    let d = model.control_dim();
    let mut p = Cube::zeros(steps + 1, count, n);
    let mut q = Cube::zeros(steps, count, n * n);
    let mut r = Cube::zeros(steps, count, atoms * n);
    let (pt, gbar) = terminal_with_mean(model, exec, ens.states.slab(steps), &ens.snapshots[steps], grid.horizon);
    p.slab_mut(steps).copy_from_slice(&pt);
    let mut fields: Vec<Option<StepField>> = vec![None; steps];
    let width = n + n * n + atoms * n + n + kdim + n;
    let mut tmp = vec![0.0; count * width];
    for k in (0..steps).rev() {
        let t = grid.time(k);
        let ys = ens.states.slab(k);
        let snap = &ens.snapshots[k];
        let aff = model.step_affine(t, jm);
        let sys = step_system(model, jm, ys, p.slab(k + 1), noise, k, dt, cfg, exec)?;
        let proto = StepField {
            t,
            dt,
            basis: sys.basis,
            beta: sys.beta,
            cbar: vec![0.0; kdim],
            dbar: vec![0.0; n],
            snapshot: snap.clone(),
            aff: aff.clone(),
            noise_scale: sys.noise_scale,
        };
        let us = ens.controls.slab(k);
        exec::fill_rows(exec, &mut tmp, width, |i, row| {
            let y = &ys[i * n..(i + 1) * n];
            let reg = proto.regressed(y);
            let parts = model.driver_parts(t, y, snap, &aff, &us[i * d..(i + 1) * d], &reg.alpha, &reg.q, &reg.r);
            let mut o = 0;
            for v in reg.alpha.iter().chain(&reg.q).chain(&reg.r) {
                row[o] = *v;
                o += 1;
            }
            for v in parts.local.iter().chain(parts.cvec.iter()).chain(parts.dvec.iter()) {
                row[o] = *v;
                o += 1;
            }
        });
        let off_c = n + n * n + atoms * n + n;
        let means = exec::mean(exec, count, kdim + n, |i, acc| {
            let row = &tmp[i * width..(i + 1) * width];
            for l in 0..kdim + n {
                acc[l] += row[off_c + l];
            }
        });
        let cbar = means[..kdim].to_vec();
        let dbar = means[kdim..].to_vec();
        {
            let tmp = &tmp;
            let cbar = &cbar;
            let dbar = &dbar;
            exec::fill_rows(exec, p.slab_mut(k), n, |i, row| {
                let y = &ys[i * n..(i + 1) * n];
                let tr = &tmp[i * width..(i + 1) * width];
                let local = &tr[n + n * n + atoms * n..];
                let pull = model.stats_pullback(y, cbar);
                for c in 0..n {
                    row[c] = tr[c] + dt * (local[c] + pull[c] + dbar[c]);
                }
            });
        }
        for i in 0..count {
            let tr = &tmp[i * width..(i + 1) * width];
            q.at_mut(k, i).copy_from_slice(&tr[n..n + n * n]);
            r.at_mut(k, i).copy_from_slice(&tr[n + n * n..n + n * n + atoms * n]);
        }
        if let Some((i, _)) = p.slab(k).chunks(n).enumerate().find(|(_, row)| row.iter().any(|v| !(v.abs() <= crate::simulate::BLOWUP_CAP))) {
            let magnitude = p.at(k, i).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            return Err(Error::BlowUp { step: k, particle: i, magnitude, iteration: None });
        }
        fields[k] = Some(StepField { cbar, dbar, ..proto });
    }
    let field = DecouplingField {
        model: model.clone(),
        grid,
        steps: fields.into_iter().map(|f| f.expect("every step visited")).collect(),
        terminal_snapshot: ens.snapshots[steps].clone(),
        terminal_cbar: gbar,
    };
    Ok((AdjointEnsemble { grid, p, q, r }, field))
}

/// Backward solve of the adjoint equation along `ens`.
pub fn solve_adjoint(
    model: &ModelSpec,
    jm: &JumpMeasure,
    ens: &ParticleEnsemble,
    noise: &NoiseBundle,
    cfg: &RegressionConfig,
    exec: Exec,
) -> Result<AdjointEnsemble> {
    solve_adjoint_with_field(model, jm, ens, noise, cfg, exec).map(|(a, _)| a)
}

/// Ratio `(E sup|P|^2 + E sum (|Q|^2 + sum_a lambda_a |R_a|^2) dt) / E[1 + |xi|^2 + sum |u|^2 dt]`.
pub fn energy_ratio(ens: &ParticleEnsemble, adj: &AdjointEnsemble, jm: &JumpMeasure) -> f64 {
    let n = ens.dim();
    let count = ens.particles();
    let steps = ens.grid.steps;
    let dt = ens.grid.dt();
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..count {
        let sup = (0..=steps).map(|k| sq(adj.p.at(k, i))).fold(0.0, f64::max);
        let mut integ = 0.0;
        let mut uint = 0.0;
        for k in 0..steps {
            integ += sq(adj.q.at(k, i));
            let r = adj.r.at(k, i);
            for (a, atom) in jm.atoms().iter().enumerate() {
                integ += atom.weight * sq(&r[a * n..(a + 1) * n]);
            }
            uint += sq(ens.controls.at(k, i));
        }
        num += sup + integ * dt;
        den += 1.0 + sq(ens.states.at(0, i)) + uint * dt;
    }
    num / den
}

/// Agreement of the two evaluation orders of the mean-field driver term at step `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FubiniReport {
    /// `max_i |grad phi(Y_i)^T mean_j c_j - mean_j D_y dH/dnu(Y_j)(Y_i)|`
    pub factored_vs_pairwise: f64,
    /// `|mean_i mean_j <D_y dH/dnu(Y_j)(Y_i), w_i> - mean_j mean_i <D_y dH/dnu(Y_j)(Y_i), w_i>|`
    pub swapped_order: f64,
}

/// Compares the factored mean-field driver with explicit pairwise averages (cost `O(N^2)`).
pub fn fubini_check(
    model: &ModelSpec,
    jm: &JumpMeasure,
    ens: &ParticleEnsemble,
    adj: &AdjointEnsemble,
    k: usize,
) -> FubiniReport {
    let n = model.n;
    let kd = model.stats_dim();
    let count = ens.particles();
    let t = ens.grid.time(k);
    let snap = &ens.snapshots[k];
    let aff = model.step_affine(t, jm);
    let ys = ens.states.slab(k);
    let cvecs: Vec<DVector<f64>> = (0..count)
        .map(|j| {
            model
                .driver_parts(t, &ys[j * n..(j + 1) * n], snap, &aff, ens.controls.at(k, j), adj.p.at(k, j), adj.q.at(k, j), adj.r.at(k, j))
                .cvec
        })
        .collect();
    let mut cbar = DVector::zeros(kd);
    for c in &cvecs {
        cbar += c;
    }
    cbar /= count as f64;
    let mut worst: f64 = 0.0;
    let mut pair = DMatrix::zeros(count, count);
    for i in 0..count {
        let yi = &ys[i * n..(i + 1) * n];
        let g = model.stats.grad(yi);
        let factored = g.tr_mul(&cbar);
        let mut pairwise = DVector::zeros(n);
        for j in 0..count {
            let term = g.tr_mul(&cvecs[j]);
            pair[(i, j)] = term.dot(&DVector::from_column_slice(yi));
            pairwise += term;
        }
        pairwise /= count as f64;
        worst = worst.max((factored - pairwise).amax());
    }
    let mut by_rows = 0.0;
    for i in 0..count {
        let mut s = 0.0;
        for j in 0..count {
            s += pair[(i, j)];
        }
        by_rows += s / count as f64;
    }
    let mut by_cols = 0.0;
    for j in 0..count {
        let mut s = 0.0;
        for i in 0..count {
            s += pair[(i, j)];
        }
        by_cols += s / count as f64;
    }
    FubiniReport { factored_vs_pairwise: worst, swapped_order: ((by_rows - by_cols) / count as f64).abs() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::FeedbackPolicy;
    use crate::lqoracle::LqSpec;
    use crate::measure::EmpiricalMeasure;
    use crate::simulate::simulate_forward;

    fn setup(spec: &LqSpec, n: usize, steps: usize, seed: u64) -> (ModelSpec, JumpMeasure, ParticleEnsemble, NoiseBundle) {
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let g = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let init = EmpiricalMeasure::sample_gaussian(n, &[0.5], &[0.5], seed).unwrap();
        let noise = NoiseBundle::new(seed, 1, &jm, &g);
        let ens = simulate_forward(&model, &jm, &init, &FeedbackPolicy::Zero, &g, &noise, Exec::Sequential).unwrap();
        (model, jm, ens, noise)
    }

    #[test]
    fn terminal_condition_of_mean_coupling() {
        // g(x, m) = x * mean(m) with N-particle lift G = mean_i x_i * mean; N dG/dx_i = 2 mean.
        let spec = LqSpec::scalar();
        let mut model = spec.model().unwrap();
        struct Coupled;
        impl crate::model::SmoothMap for Coupled {
            fn args(&self) -> crate::model::ArgDims {
                crate::model::ArgDims { x: 1, s: 1, v: 0 }
            }
            fn out_dim(&self) -> usize {
                1
            }
            fn eval(&self, _t: f64, z: &[f64]) -> DVector<f64> {
                DVector::from_element(1, z[0] * z[1])
            }
            fn jacobian(&self, _t: f64, z: &[f64]) -> DMatrix<f64> {
                DMatrix::from_row_slice(1, 2, &[z[1], z[0]])
            }
        }
        model.terminal_cost = std::sync::Arc::new(Coupled);
        let p = terminal_condition(&model, Exec::Sequential, &[0.0, 2.0]);
        assert_eq!(p, vec![2.0, 2.0]);
        model.terminal_cost = std::sync::Arc::new(crate::model::DiagQuadratic { wx: vec![1.0], ws: vec![0.0], wv: vec![] });
        assert_eq!(terminal_condition(&model, Exec::Sequential, &[0.5, -1.5]), vec![0.5, -1.5]);
    }

    #[test]
    fn constant_terminal_gradient_propagates_exactly() {
        // b = v, f = v^2/2, g = 3x: the driver vanishes and P = 3.
        let mut spec = LqSpec::scalar();
        spec.sigma0 = vec![1.0];
        let (mut model, jm, ens, noise) = setup(&spec, 500, 20, 4);
        struct Linear;
        impl crate::model::SmoothMap for Linear {
            fn args(&self) -> crate::model::ArgDims {
                crate::model::ArgDims { x: 1, s: 1, v: 0 }
            }
            fn out_dim(&self) -> usize {
                1
            }
            fn eval(&self, _t: f64, z: &[f64]) -> DVector<f64> {
                DVector::from_element(1, 3.0 * z[0])
            }
            fn jacobian(&self, _t: f64, _z: &[f64]) -> DMatrix<f64> {
                DMatrix::from_row_slice(1, 2, &[3.0, 0.0])
            }
        }
        model.terminal_cost = std::sync::Arc::new(Linear);
        let adj = solve_adjoint(&model, &jm, &ens, &noise, &RegressionConfig::default(), Exec::Sequential).unwrap();
        for k in 0..=20 {
            for i in 0..500 {
                assert!((adj.p.at(k, i)[0] - 3.0).abs() < 1e-10);
                if k < 20 {
                    assert!(adj.q.at(k, i)[0].abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn brownian_adjoint_is_the_state() {
        // b = v, sigma = 1, f = v^2/2, g = x^2/2 under zero control: P_k = Y_k and Q = 1.
        let mut spec = LqSpec::scalar();
        spec.sigma0 = vec![1.0];
        spec.h = vec![1.0];
        let (model, jm, ens, noise) = setup(&spec, 10_000, 50, 8);
        let adj = solve_adjoint(&model, &jm, &ens, &noise, &RegressionConfig::default(), Exec::Parallel).unwrap();
        let (mut err_p, mut err_q) = (0.0f64, 0.0f64);
        for k in 0..50 {
            for i in 0..10_000 {
                err_p = err_p.max((adj.p.at(k, i)[0] - ens.states.at(k, i)[0]).abs());
                err_q = err_q.max((adj.q.at(k, i)[0] - 1.0).abs());
            }
        }
        assert!(err_p < 1e-5, "{err_p}");
        assert!(err_q < 5e-2, "{err_q}");
    }

    #[test]
    fn fubini_orders_agree() {
        let (model, jm, ens, noise) = setup(&LqSpec::fixture_with_jump(), 150, 10, 3);
        let adj = solve_adjoint(&model, &jm, &ens, &noise, &RegressionConfig::default(), Exec::Sequential).unwrap();
        let rep = fubini_check(&model, &jm, &ens, &adj, 4);
        assert!(rep.factored_vs_pairwise < 1e-12 && rep.swapped_order < 1e-12, "{rep:?}");
    }

    #[test]
    fn decoupling_field_reproduces_particles() {
        let (model, jm, ens, noise) = setup(&LqSpec::fixture_with_jump(), 400, 10, 5);
        let (adj, field) =
            solve_adjoint_with_field(&model, &jm, &ens, &noise, &RegressionConfig::default(), Exec::Sequential).unwrap();
        for k in [0, 3, 9] {
            for i in [0, 17, 399] {
                let psi = field.psi(k, ens.states.at(k, i), ens.controls.at(k, i));
                assert!((psi[0] - adj.p.at(k, i)[0]).abs() < 1e-13);
            }
        }
        let pt = field.psi_terminal(ens.states.at(10, 3));
        assert!((pt[0] - adj.p.at(10, 3)[0]).abs() < 1e-13);
    }
}
