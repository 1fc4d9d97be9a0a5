use mfjump::exec::{self, Exec};
use mfjump::grid::TimeGrid;
use mfjump::measure::{mf_expectation, wasserstein2, EmpiricalMeasure};
use mfjump::model::{certificate_coefficient, check_sufficiency_condition, AssumptionConstants, JumpMeasure};
use mfjump::noise::{NoiseBundle, StepNoise};
use proptest::prelude::*;

fn constants() -> impl Strategy<Value = AssumptionConstants> {
    (0.0..3.0f64, 0.0..0.5f64, 0.0..0.5f64, 0.0..0.5f64, 0.1..3.0f64, 0.0..2.0f64, 0.0..2.0f64, -0.5..0.5f64, 0usize..3)
        .prop_map(|(big_l, l0, l1, l2, lambda0, lambda_v, lambda_x, lambda_m, l)| AssumptionConstants {
            big_l,
            l0,
            l1,
            l2,
            lambda0,
            lambda_v,
            lambda_x,
            lambda_m,
            l,
        })
}

fn cloud(dim: usize, max: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec(-5.0..5.0f64, dim..=dim * max)
        .prop_map(move |mut v| {
            v.truncate(v.len() / dim * dim);
            EmpiricalMeasure::new(dim, v).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sufficiency_is_monotone_in_convexity(c in constants(), dv in 0.0..1.0f64, dx in 0.0..1.0f64) {
        let more = AssumptionConstants { lambda_v: c.lambda_v + dv, lambda_x: c.lambda_x + dx, ..c };
        let (a, b) = (check_sufficiency_condition(&c), check_sufficiency_condition(&more));
        prop_assert!(!a.holds() || b.holds());
        prop_assert!(b.margin_i >= a.margin_i);
        if a.holds() {
            prop_assert!(certificate_coefficient(&more) >= certificate_coefficient(&c) - 1e-12);
        }
    }

    #[test]
    fn sufficiency_is_anti_monotone_in_couplings(c in constants(), d in 0.0..0.5f64) {
        let worse = AssumptionConstants { l0: c.l0 + d, l1: c.l1 + d, l2: c.l2 + d, ..c };
        prop_assert!(!check_sufficiency_condition(&worse).holds() || check_sufficiency_condition(&c).holds());
    }

    #[test]
    fn w2_is_a_metric_in_one_dimension(a in cloud(1, 30), b in cloud(1, 30), c in cloud(1, 30)) {
        let size = a.len().min(b.len()).min(c.len());
        let cut = |m: &EmpiricalMeasure| EmpiricalMeasure::new(1, m.points()[..size].to_vec()).unwrap();
        let (a, b, c) = (cut(&a), cut(&b), cut(&c));
        let ab = wasserstein2(&a, &b).unwrap();
        prop_assert!((ab - wasserstein2(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(wasserstein2(&a, &a).unwrap() == 0.0);
        prop_assert!(ab <= wasserstein2(&a, &c).unwrap() + wasserstein2(&c, &b).unwrap() + 1e-9);
    }

    #[test]
    fn w2_is_a_metric_in_two_dimensions(a in cloud(2, 8), b in cloud(2, 8), c in cloud(2, 8)) {
        let size = a.len().min(b.len()).min(c.len());
        let cut = |m: &EmpiricalMeasure| EmpiricalMeasure::new(2, m.points()[..2 * size].to_vec()).unwrap();
        let (a, b, c) = (cut(&a), cut(&b), cut(&c));
        let ab = wasserstein2(&a, &b).unwrap();
        prop_assert!((ab - wasserstein2(&b, &a).unwrap()).abs() <= 1e-9);
        prop_assert!(ab <= wasserstein2(&a, &c).unwrap() + wasserstein2(&c, &b).unwrap() + 1e-9);
        // A common translation moves every point by the same vector.
        let shifted = b.shifted(&[0.3, -0.2]);
        prop_assert!((wasserstein2(&b, &shifted).unwrap() - 0.13f64.sqrt()).abs() <= 1e-9);
    }

    #[test]
    fn mf_expectation_is_linear(mu in cloud(2, 40), s in -3.0..3.0f64, t in -3.0..3.0f64) {
        let f = |y: &[f64]| vec![y[0] * y[1], y[0].sin()];
        let g = |y: &[f64]| vec![y[1], 1.0];
        let combo = mf_expectation(&mu, 2, |y| f(y).iter().zip(g(y)).map(|(a, b)| s * a + t * b).collect());
        let (ef, eg) = (mf_expectation(&mu, 2, f), mf_expectation(&mu, 2, g));
        for k in 0..2 {
            prop_assert!((combo[k] - (s * ef[k] + t * eg[k])).abs() <= 1e-9 * (1.0 + combo[k].abs()));
        }
        prop_assert_eq!(eg[1], 1.0);
    }

    #[test]
    fn ordered_sums_ignore_the_execution_mode(xs in prop::collection::vec(-1e6..1e6f64, 0..3000)) {
        let a = exec::sum_scalar(Exec::Sequential, xs.len(), |i| xs[i]);
        let b = exec::sum_scalar(Exec::Parallel, xs.len(), |i| xs[i]);
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn noise_depends_only_on_its_key(seed in any::<u64>(), particle in 0usize..1000, step in 0usize..50) {
        let jm = JumpMeasure::single(1.0, 2.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let a = NoiseBundle::new(seed, 2, &jm, &grid);
        let b = NoiseBundle::new(seed, 2, &jm, &grid);
        let (mut x, mut y) = (StepNoise::new(2, 1), StepNoise::new(2, 1));
        a.fill(particle, step, &mut x);
        b.fill(particle, step, &mut y);
        prop_assert_eq!(&x.db, &y.db);
        prop_assert_eq!(&x.dn, &y.dn);
    }
}
