//! Sufficiency conditions, the gap coefficient, finite-difference checks of
//! derivative callbacks and a sampler for empirical structural constants.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{pack, ArgDims, AssumptionConstants, DiffusionColumn, ModelSpec, SmoothMap};
use crate::error::{Error, Result};

/// Outcome of the two sufficiency inequalities; margins are left minus right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub holds_i: bool,
    pub holds_ii: bool,
    pub margin_i: f64,
    pub margin_ii: f64,
}

impl ConditionReport {
    pub fn holds(&self) -> bool {
        self.holds_i && self.holds_ii
    }
}

/// `num / den` with a vanishing numerator winning over an underflowing denominator.
fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn convexity_factor(c: &AssumptionConstants) -> f64 {
    let l2 = c.big_l * c.big_l;
    2.0 * c.lambda_x + 2.0 * c.lambda_m - ratio(5.0 * (c.l as f64 + 1.0) * l2 * c.l0, c.lambda0)
}

/// Evaluates conditions (i) and (ii). Condition (ii) additionally requires its
/// state-convexity factor to be positive, which keeps the report monotone in
/// `lambda_v` and `lambda_x + lambda_m`.
pub fn check_sufficiency_condition(c: &AssumptionConstants) -> ConditionReport {
    let l2 = c.big_l * c.big_l;
    let first = 2.0 * c.lambda_v - ratio(l2 * c.l2, c.lambda0);
    let second = convexity_factor(c);
    let rhs = ratio(4.0 * (c.l as f64 + 1.0) * l2 * l2 * c.l1 * c.l1, c.lambda0 * c.lambda0);
    let margin_ii = first * second - rhs;
    ConditionReport { holds_i: first > 0.0, holds_ii: second > 0.0 && margin_ii > 0.0, margin_i: first, margin_ii }
}

/// Coefficient `c` of the quadratic gap `J(v) - J(u) >= c int ||v - u||^2 dt`.
pub fn certificate_coefficient(c: &AssumptionConstants) -> f64 {
    let l2 = c.big_l * c.big_l;
    let mut coef = c.lambda_v - ratio(l2 * c.l2, 2.0 * c.lambda0);
    if c.l1 != 0.0 {
        let denom = c.lambda0 * (c.lambda0 * convexity_factor(c));
        coef -= 2.0 * (c.l as f64 + 1.0) * l2 * l2 * c.l1 * c.l1 / denom;
    }
    coef
}

/// Worst disagreement found for one derivative callback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub callback: String,
    pub worst_probe: usize,
    pub max_error: f64,
    pub count: usize,
}

struct Probe {
    x: Vec<f64>,
    cloud: Vec<f64>,
    stats: Vec<f64>,
    rng_v: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

const PROBE_CLOUD: usize = 50;

fn make_probe(model: &ModelSpec, rng: &mut ChaCha8Rng) -> Probe {
    let n = model.n;
    let center = normal_vec(rng, n, 1.0);
    let mut cloud = Vec::with_capacity(PROBE_CLOUD * n);
    for _ in 0..PROBE_CLOUD {
        for c in center.iter() {
            cloud.push(c + rng.sample::<f64, _>(StandardNormal));
        }
    }
    let stats = cloud_stats(model, &cloud);
    Probe { x: normal_vec(rng, n, 1.0), cloud, stats, rng_v: normal_vec(rng, model.control_dim().max(1), 1.0) }
}

fn cloud_stats(model: &ModelSpec, cloud: &[f64]) -> Vec<f64> {
    let n = model.n;
    let count = cloud.len() / n;
    let mut s = DVector::zeros(model.stats.dim());
    for y in cloud.chunks(n) {
        s += model.stats.phi(y);
    }
    (s / count as f64).as_slice().to_vec()
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / (1.0 + f.abs())
}

#[derive(Default)]
struct Tally(Vec<Violation>);

impl Tally {
    fn record(&mut self, name: &str, probe: usize, err: f64, tol: f64) {
        if !(err <= tol) {
            let err = if err.is_nan() { f64::INFINITY } else { err };
            match self.0.iter_mut().find(|v| v.callback == name) {
                Some(v) => {
                    v.count += 1;
                    if err > v.max_error {
                        v.max_error = err;
                        v.worst_probe = probe;
                    }
                }
                None => self.0.push(Violation { callback: name.into(), worst_probe: probe, max_error: err, count: 1 }),
            }
        }
    }
}

fn finite_or_fail(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::CallbackFailure { name: name.into(), detail: "returned a non-finite value".into() })
    }
}

#[allow(clippy::too_many_arguments)]
fn check_map(
    model: &ModelSpec,
    name: &str,
    map: &dyn SmoothMap,
    probe: &Probe,
    idx: usize,
    h: f64,
    tol: f64,
    tally: &mut Tally,
) -> Result<()> {
    let a: ArgDims = map.args();
    let v = &probe.rng_v[..a.v.min(probe.rng_v.len())];
    let v: Vec<f64> = (0..a.v).map(|i| v.get(i).copied().unwrap_or(0.3)).collect();
    let z = pack(&probe.x, &probe.stats, &v);
    let t = 0.37;
    let f0 = map.eval(t, &z);
    finite_or_fail(name, f0.as_slice())?;
    let jac = map.jacobian(t, &z);
    finite_or_fail(&format!("{name}_jacobian"), jac.as_slice())?;
    let fd_col = |b: usize| {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[b] += h;
        zm[b] -= h;
        (map.eval(t, &zp) - map.eval(t, &zm)) / (2.0 * h)
    };
    for (block, range) in [("dx", a.x_range()), ("dv", a.v_range())] {
        let mut worst: f64 = 0.0;
        for b in range {
            let fd = fd_col(b);
            for o in 0..map.out_dim() {
                worst = worst.max(rel_err(jac[(o, b)], fd[o]));
            }
        }
        tally.record(&format!("{name}_{block}"), idx, worst, tol);
    }
    // Measure derivative through one-particle perturbations of the probe cloud.
    if a.s > 0 {
        let n = model.n;
        let y0 = &probe.cloud[..n];
        let js = jac.columns_range(a.s_range()).into_owned();
        let analytic = js * model.stats.grad(y0);
        let mut worst: f64 = 0.0;
        for c in 0..n {
            let moved = |e: f64| {
                let mut cl = probe.cloud.clone();
                cl[c] += e;
                let s = cloud_stats(model, &cl);
                map.eval(t, &pack(&probe.x, &s, &v))
            };
            let fd = (moved(h) - moved(-h)) * (PROBE_CLOUD as f64 / (2.0 * h));
            for o in 0..map.out_dim() {
                worst = worst.max(rel_err(analytic[(o, c)], fd[o]));
            }
        }
        tally.record(&format!("{name}_dnu"), idx, worst, tol);
    }
    if let Some(hs) = map.hessians(t, &z) {
        let mut worst: f64 = 0.0;
        for b in 0..a.total() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[b] += h;
            zm[b] -= h;
            let fd = (map.jacobian(t, &zp) - map.jacobian(t, &zm)) / (2.0 * h);
            for (o, ho) in hs.iter().enumerate() {
                for r in 0..a.total() {
                    worst = worst.max(rel_err(ho[(r, b)], fd[(o, r)]));
                }
            }
        }
        tally.record(&format!("{name}_hessian"), idx, worst, tol);
    }
    Ok(())
}

/// Compares every analytic derivative callback against central finite differences
/// at `probes` random points and reports callbacks whose relative error exceeds `tol`.
pub fn verify_derivative_consistency(
    model: &ModelSpec,
    probes: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<Vec<Violation>> {
    if probes == 0 || !(h > 0.0) || !(tol > 0.0) {
        return Err(Error::domain("need probes >= 1, h > 0 and tol > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for idx in 0..probes {
        let probe = make_probe(model, &mut rng);
        check_map(model, "drift", model.drift.as_ref(), &probe, idx, h, tol, &mut tally)?;
        check_map(model, "running_cost", model.running_cost.as_ref(), &probe, idx, h, tol, &mut tally)?;
        check_map(model, "terminal_cost", model.terminal_cost.as_ref(), &probe, idx, h, tol, &mut tally)?;
        for (j, col) in model.columns.iter().enumerate() {
            if let DiffusionColumn::Controlled { coeff, cost } = col {
                check_map(model, &format!("diffusion{}", j + 1), coeff.as_ref(), &probe, idx, h, tol, &mut tally)?;
                check_map(model, &format!("running_cost{}", j + 1), cost.as_ref(), &probe, idx, h, tol, &mut tally)?;
            }
        }
        // Statistics map.
        let y = &probe.x;
        let g = model.stats.grad(y);
        finite_or_fail("stats_grad", g.as_slice())?;
        let mut worst: f64 = 0.0;
        let mut worst_h: f64 = 0.0;
        let hs = model.stats.hessians(y);
        for c in 0..model.n {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[c] += h;
            ym[c] -= h;
            let fd = (model.stats.phi(&yp) - model.stats.phi(&ym)) / (2.0 * h);
            for l in 0..model.stats.dim() {
                worst = worst.max(rel_err(g[(l, c)], fd[l]));
            }
            if let Some(hs) = &hs {
                let fdg = (model.stats.grad(&yp) - model.stats.grad(&ym)) / (2.0 * h);
                for (l, hl) in hs.iter().enumerate() {
                    for r in 0..model.n {
                        worst_h = worst_h.max(rel_err(hl[(r, c)], fdg[(l, r)]));
                    }
                }
            }
        }
        tally.record("stats_grad", idx, worst, tol);
        tally.record("stats_hessian", idx, worst_h, tol);
    }
    Ok(tally.0)
}

/// Sampled lower estimates of the structural constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConstants {
    pub big_l: f64,
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub lambda0: f64,
    /// Disagreements with the constants supplied in the model.
    pub warnings: Vec<String>,
}

fn block(m: &DMatrix<f64>, r: std::ops::Range<usize>, c: std::ops::Range<usize>) -> DMatrix<f64> {
    m.view((r.start, c.start), (r.len(), c.len())).into_owned()
}

/// Samples weighted second-derivative norms of the drift and controlled columns over
/// states and controls in `[-radius, radius]` and Gaussian probe clouds.
pub fn estimate_constants(model: &ModelSpec, probes: usize, radius: f64, seed: u64) -> Result<EmpiricalConstants> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.n;
    let mut est = EmpiricalConstants { big_l: 0.0, l0: 0.0, l1: 0.0, l2: 0.0, lambda0: f64::INFINITY, warnings: vec![] };
    let t = 0.0;
    for _ in 0..probes {
        let center: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..radius)).collect();
        let spread = rng.gen_range(0.05..1.5);
        let mut cloud = Vec::with_capacity(PROBE_CLOUD * n);
        for _ in 0..PROBE_CLOUD {
            for c in &center {
                cloud.push(c + spread * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let stats = cloud_stats(model, &cloud);
        let m1 = cloud.chunks(n).map(|y| y.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / PROBE_CLOUD as f64;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..radius)).collect();
        let y = &cloud[..n];
        let y2 = &cloud[n..2 * n];
        let gy = model.stats.grad(y);
        let gy2 = model.stats.grad(y2);
        let sh = model.stats.hessians(y);
        let mut maps: Vec<(&dyn SmoothMap, bool)> = vec![(model.drift.as_ref(), true)];
        for col in &model.columns {
            if let DiffusionColumn::Controlled { coeff, .. } = col {
                maps.push((coeff.as_ref(), false));
            }
        }
        for (map, is_drift) in maps {
            let a = map.args();
            let v: Vec<f64> = (0..a.v).map(|_| rng.gen_range(-radius..radius)).collect();
            let z = pack(&x, &stats, &v);
            let w = 1.0 + norm(&x) + m1 + norm(&v);
            let jac = map.jacobian(t, &z);
            let jx = block(&jac, 0..map.out_dim(), a.x_range());
            let jv = block(&jac, 0..map.out_dim(), a.v_range());
            let js = block(&jac, 0..map.out_dim(), a.s_range());
            est.big_l = est.big_l.max(jx.norm()).max(jv.norm()).max((&js * &gy).norm());
            if is_drift && a.v > 0 {
                let gram = &jv * jv.transpose();
                let eig = SymmetricEigen::new(gram).eigenvalues.min();
                est.lambda0 = est.lambda0.min(eig);
            }
            let Some(hs) = map.hessians(t, &z) else {
                est.warnings.push("second derivatives missing; L0, L1, L2 not estimated".into());
                continue;
            };
            let (mut xx, mut xv, mut vv, mut yx, mut yv, mut yy, mut yy2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for (o, ho) in hs.iter().enumerate() {
                let hxx = block(ho, a.x_range(), a.x_range());
                let hxv = block(ho, a.x_range(), a.v_range());
                let hvv = block(ho, a.v_range(), a.v_range());
                let hsx = block(ho, a.s_range(), a.x_range());
                let hsv = block(ho, a.s_range(), a.v_range());
                let hss = block(ho, a.s_range(), a.s_range());
                xx += hxx.norm_squared();
                xv += hxv.norm_squared();
                vv += hvv.norm_squared();
                yx += (gy.transpose() * hsx).norm_squared();
                yv += (gy.transpose() * hsv).norm_squared();
                yy2 += (gy.transpose() * hss * &gy2).norm_squared();
                if let Some(sh) = &sh {
                    let mut d2 = DMatrix::<f64>::zeros(n, n);
                    for (l, hl) in sh.iter().enumerate() {
                        d2 += hl * jac[(o, a.x + l)];
                    }
                    yy += d2.norm_squared();
                }
            }
            est.l0 = est.l0.max(w * xx.sqrt()).max(w * yx.sqrt()).max(w * yy.sqrt()).max(w * yy2.sqrt());
            est.l1 = est.l1.max(w * xv.sqrt()).max(w * yv.sqrt());
            est.l2 = est.l2.max(w * vv.sqrt());
        }
    }
    if !est.lambda0.is_finite() {
        est.lambda0 = 0.0;
    }
    let c = &model.constants;
    let mut warn = |name: &str, supplied: f64, sampled: f64, upper: bool| {
        let bad = if upper { supplied + 1e-12 < sampled } else { supplied > sampled + 1e-12 };
        if bad {
            est.warnings.push(format!("{name}: supplied {supplied:.6} but sampled {sampled:.6}"));
        }
    };
    warn("L", c.big_l, est.big_l, true);
    warn("L0", c.l0, est.l0, true);
    warn("L1", c.l1, est.l1, true);
    warn("L2", c.l2, est.l2, true);
    warn("lambda0", c.lambda0, est.lambda0, false);
    Ok(est)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqoracle::LqSpec;
    use crate::model::ExampleDrift;
    use std::sync::Arc;

    fn constants(lv: f64, lx: f64, lm: f64, big: f64, l0: f64, l1: f64, l2: f64, lam0: f64, l: usize) -> AssumptionConstants {
        AssumptionConstants { big_l: big, l0, l1, l2, lambda0: lam0, lambda_v: lv, lambda_x: lx, lambda_m: lm, l }
    }

    #[test]
    fn linear_case_needs_only_positive_convexity() {
        let r = check_sufficiency_condition(&constants(0.1, 0.05, 0.05, 7.0, 0.0, 0.0, 0.0, 0.3, 0));
        assert!(r.holds_i && r.holds_ii);
    }

    #[test]
    fn zero_control_convexity_fails_first_condition() {
        let r = check_sufficiency_condition(&constants(0.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 1.0, 0));
        assert!(!r.holds_i);
    }

    #[test]
    fn hand_evaluated_conditions() {
        let r = check_sufficiency_condition(&constants(10.0, 20.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1));
        assert!(r.holds_i && r.holds_ii);
        assert_eq!(r.margin_i, 19.0);
        // (20 - 1) * (40 - 10) - 8
        assert_eq!(r.margin_ii, 562.0);
    }

    #[test]
    fn coefficient_collapses_in_linear_case() {
        let c = constants(0.35, 0.5, 0.0, 3.0, 0.0, 0.0, 0.0, 1.0, 0);
        assert_eq!(certificate_coefficient(&c), 0.35);
    }

    #[test]
    fn lq_callbacks_are_consistent() {
        let model = LqSpec::fixture_with_jump().model().unwrap();
        assert!(verify_derivative_consistency(&model, 10, 1e-5, 1e-6, 1).unwrap().is_empty());
    }

    #[test]
    fn injected_fault_is_named() {
        let mut model = LqSpec::fixture_with_jump().model().unwrap();
        model.drift = Arc::new(crate::model::PerturbedJacobian { inner: model.drift.clone(), row: 0, col: 0, offset: 0.1 });
        let v = verify_derivative_consistency(&model, 10, 1e-5, 1e-6, 1).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].callback, "drift_dx");
    }

    #[test]
    fn example_drift_callbacks_are_consistent() {
        let model = crate::model::example_model(0.5, &LqSpec::example_costs()).unwrap();
        let v = verify_derivative_consistency(&model, 20, 1e-5, 1e-6, 3).unwrap();
        assert!(v.is_empty(), "{v:?}");
        let _ = ExampleDrift::new(0.5).unwrap();
    }

    #[test]
    fn sampled_constants_vanish_for_linear_drift() {
        let model = LqSpec::fixture_with_jump().model().unwrap();
        let e = estimate_constants(&model, 200, 3.0, 2).unwrap();
        assert_eq!((e.l0, e.l1, e.l2), (0.0, 0.0, 0.0));
        assert!((e.lambda0 - 1.0).abs() < 1e-12);
    }
}
