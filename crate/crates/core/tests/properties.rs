use proptest::prelude::*;

use rwdfusion::estimate::{aipw_from_predictions, percentile_ci, AteEstimate, StrataEstimates};
use rwdfusion::fusion::{
    anchored_thresholding, double_shrink, inverse_variance_pool, mse_minimizing, shrink_s1, shrink_s2, soft_threshold,
    test_then_pool,
};

fn est(tau: f64, var: f64) -> AteEstimate {
    AteEstimate::normal("x", tau, var, 100, Vec::new())
}

fn strata(tau_r: Vec<f64>, tau_o: Vec<f64>, s2r: Vec<f64>, s2o: Vec<f64>) -> StrataEstimates {
    let k = tau_r.len();
    StrataEstimates {
        tau_r,
        tau_o,
        sigma2_r: s2r,
        sigma2_o: s2o,
        w: vec![1.0 / k as f64; k],
        counts_r: vec![75; k],
        counts_o: vec![300; k],
        names: (0..k).map(|j| format!("s{j}")).collect(),
    }
}

fn strata_inputs() -> impl Strategy<Value = StrataEstimates> {
    (
        prop::collection::vec(-3.0..3.0f64, 4),
        prop::collection::vec(-3.0..3.0f64, 4),
        prop::collection::vec(0.01..1.0f64, 4),
        prop::collection::vec(0.001..0.5f64, 4),
    )
        .prop_map(|(r, o, vr, vo)| strata(r, o, vr, vo))
}

/// 20-row fixture: outcome, treatment (both arms present), propensity.
fn fixture() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-5.0..5.0f64, 20),
        prop::collection::vec(prop::bool::ANY, 20),
        prop::collection::vec(0.05..0.95f64, 20),
    )
        .prop_map(|(y, mut a, e)| {
            a[0] = true;
            a[1] = false;
            (y, a.into_iter().map(|t| if t { 1.0 } else { 0.0 }).collect(), e)
        })
}

proptest! {
    #[test]
    fn soft_threshold_contracts(x in -100.0..100.0f64, t in 0.0..50.0f64) {
        let s = soft_threshold(x, t);
        prop_assert!(s.abs() <= x.abs());
        prop_assert!(s * x >= 0.0);
        prop_assert!((s.abs() - (x.abs() - t).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn learning_weights_in_unit_interval(
        tr in -5.0..5.0f64, to in -5.0..5.0f64, vr in 1e-4..2.0f64, vo in 1e-4..2.0f64, gamma in 0.1..5.0f64,
    ) {
        let (r, o) = (est(tr, vr), est(to, vo));
        for out in [mse_minimizing(&r, &o), anchored_thresholding(&r, &o, gamma), test_then_pool(&r, &o, 0.025)] {
            let w = out.diagnostics.learning_weight.unwrap();
            prop_assert!((0.0..=1.0).contains(&w), "weight {w}");
            // a convex combination stays between the inputs unless a bias is removed
            if out.diagnostics.bias_estimate.is_none_or(|d| d == 0.0) {
                prop_assert!(out.estimate.tau_hat >= tr.min(to) - 1e-12 && out.estimate.tau_hat <= tr.max(to) + 1e-12);
            }
        }
    }

    #[test]
    fn mse_weight_is_closed_form(tr in -5.0..5.0f64, to in -5.0..5.0f64, vr in 1e-4..2.0f64, vo in 1e-4..2.0f64) {
        let lambda = mse_minimizing(&est(tr, vr), &est(to, vo)).diagnostics.learning_weight.unwrap();
        let expected = vr / ((tr - to).powi(2) + vr + vo);
        prop_assert!((lambda - expected).abs() < 1e-12);
    }

    #[test]
    fn anchored_large_bias_offset(tr in -1.0..1.0f64, vr in 0.01..1.0f64, vo in 0.001..0.5f64, gamma in 0.1..4.0f64, sign in prop::bool::ANY) {
        let big = if sign { 1e6 } else { -1e6 };
        let out = anchored_thresholding(&est(tr, vr), &est(tr + big, vo), gamma);
        let omega = vr / (vr + vo);
        let expected = omega * gamma * (vr + vo).sqrt() * big.signum();
        let got = out.estimate.tau_hat - tr;
        prop_assert!((got - expected).abs() < 1e-6 * (1.0 + expected.abs()), "{got} vs {expected}");
    }

    #[test]
    fn double_shrink_interpolates(s in strata_inputs(), phi2 in 0.0..2.0f64, omega2 in 0.0..5.0f64) {
        let out = double_shrink(&s, phi2, omega2).unwrap();
        for j in 0..s.k() {
            let (vr, vo) = (s.sigma2_r[j], s.sigma2_o[j]);
            let lambda = (phi2 + vo) / (phi2 + vo + vr);
            let target = lambda * s.tau_r[j] + (1.0 - lambda) * s.tau_o[j];
            let got = out.diagnostics.stratum_estimates[j];
            prop_assert!(got.abs() <= target.abs() + 1e-12);
            prop_assert!(got * target >= 0.0);
        }
        let w = out.diagnostics.learning_weight.unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn shrinkage_factors_bounded(s in strata_inputs()) {
        for out in [shrink_s1(&s, None).unwrap(), shrink_s2(&s).unwrap()] {
            prop_assert!(out.diagnostics.shrinkage_factors.iter().all(|f| (0.0..=1.0).contains(f)));
            let w = out.diagnostics.learning_weight.unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&w));
            // each fused stratum lies between its two inputs
            for j in 0..s.k() {
                let v = out.diagnostics.stratum_estimates[j];
                let (lo, hi) = (s.tau_r[j].min(s.tau_o[j]), s.tau_r[j].max(s.tau_o[j]));
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn shrinkage_recovers_trial_under_huge_disagreement(s in strata_inputs()) {
        let far = StrataEstimates { tau_o: s.tau_r.iter().map(|t| t + 1e7).collect(), ..s.clone() };
        let trial = s.weighted(&s.tau_r);
        for out in [shrink_s1(&far, None).unwrap(), shrink_s2(&far).unwrap()] {
            prop_assert!((out.estimate.tau_hat - trial).abs() < 1e-4);
        }
        let same = StrataEstimates { tau_o: s.tau_r.clone(), ..s };
        for out in [shrink_s1(&same, None).unwrap(), shrink_s2(&same).unwrap()] {
            prop_assert!((out.estimate.tau_hat - same.weighted(&same.tau_o)).abs() < 1e-12);
        }
    }

    #[test]
    fn aipw_with_zero_outcome_model_is_horvitz_thompson((y, a, e) in fixture()) {
        let zero = vec![0.0; 20];
        let got = aipw_from_predictions("aipw", &y, &a, &e, &zero, &zero).unwrap();
        let ht: f64 = (0..20).map(|i| a[i] * y[i] / e[i] - (1.0 - a[i]) * y[i] / (1.0 - e[i])).sum::<f64>() / 20.0;
        prop_assert!((got.tau_hat - ht).abs() < 1e-10);
    }

    #[test]
    fn aipw_with_arm_means_is_difference_in_means((y, a, _) in fixture()) {
        let n1 = a.iter().sum::<f64>();
        let n0 = 20.0 - n1;
        let mean1 = (0..20).map(|i| a[i] * y[i]).sum::<f64>() / n1;
        let mean0 = (0..20).map(|i| (1.0 - a[i]) * y[i]).sum::<f64>() / n0;
        let e = vec![n1 / 20.0; 20];
        let got = aipw_from_predictions("aipw", &y, &a, &e, &[mean0; 20], &[mean1; 20]).unwrap();
        prop_assert!((got.tau_hat - (mean1 - mean0)).abs() < 1e-10);
    }

    #[test]
    fn aipw_influence_invariants((y, a, e) in fixture(), m0 in prop::collection::vec(-2.0..2.0f64, 20), m1 in prop::collection::vec(-2.0..2.0f64, 20)) {
        let got = aipw_from_predictions("aipw", &y, &a, &e, &m0, &m1).unwrap();
        let mean = got.influence.iter().sum::<f64>() / 20.0;
        prop_assert!(mean.abs() < 1e-10);
        let sandwich = got.influence.iter().map(|v| v * v).sum::<f64>() / 400.0;
        prop_assert!((got.var_hat - sandwich).abs() < 1e-12);
        prop_assert!(got.ci.0 <= got.tau_hat && got.tau_hat <= got.ci.1);
    }

    #[test]
    fn pooling_variance_never_exceeds_inputs(tr in -5.0..5.0f64, to in -5.0..5.0f64, vr in 1e-4..2.0f64, vo in 1e-4..2.0f64) {
        let p = inverse_variance_pool("pool", tr, vr, to, vo, 10);
        prop_assert!(p.var_hat <= vr.min(vo) + 1e-15);
    }

    #[test]
    fn percentile_interval_is_ordered(v in prop::collection::vec(-10.0..10.0f64, 2..200)) {
        let (lo, hi) = percentile_ci(&v, 0.95);
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && lo <= hi && hi <= max);
    }
}
