//! Small Monte Carlo checks of the estimators' statistical behaviour.

use rwdfusion::bench::DEFAULT_PSI_GRID;
use rwdfusion::estimate::{estimate_ate, AipwConfig};
use rwdfusion::fusion::nco_effect;
use rwdfusion::nuisance::{fit_propensity, Family, LearnerSpec};
use rwdfusion::synthgen::{generate, replication, stream, true_ate, Column, ScenarioConfig, Source};

const REPS: u64 = 300;

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn rct_estimates(cfg: &ScenarioConfig, aipw: &AipwConfig) -> (Vec<f64>, Vec<f64>) {
    (0..REPS)
        .map(|r| {
            let (rct, _) = replication(cfg, r).unwrap();
            let e = estimate_ate(&rct, aipw, &mut stream(cfg.seed, r, 99)).unwrap();
            (e.tau_hat, e.var_hat)
        })
        .unzip()
}

#[test]
fn logistic_propensity_recovers_coefficients() {
    let cfg = ScenarioConfig { n_o: 50_000, ..Default::default() };
    let rwd = generate(&cfg, Source::Rwd, &mut stream(7, 0, 1)).unwrap();
    let spec = LearnerSpec::single(Family::Logistic, vec![Column::X1, Column::X2, Column::X3]);
    let fit = fit_propensity(&rwd, &spec, &mut stream(7, 0, 2)).unwrap();
    let p = cfg.rwd_ps;
    for (got, want) in fit.coef.iter().zip([p.intercept, p.x1, p.x2, p.x3]) {
        assert!((got - want).abs() < 0.06, "coefficients {:?}", fit.coef);
    }
}

#[test]
fn doubly_robust_with_wrong_outcome_model() {
    let cfg = ScenarioConfig::default();
    let covs = vec![Column::X1, Column::X2, Column::X3, Column::X4];
    let aipw = AipwConfig {
        outcome: LearnerSpec::single(Family::MeanOnly, covs),
        fixed_propensity: Some(0.5),
        ..Default::default()
    };
    let (tau, _) = rct_estimates(&cfg, &aipw);
    let (m, sd) = mean_sd(&tau);
    let se = sd / (REPS as f64).sqrt();
    assert!((m - true_ate(&cfg)).abs() <= 2.0 * se, "bias {} vs MC se {se}", m - true_ate(&cfg));
}

#[test]
fn sandwich_variance_matches_monte_carlo_variance() {
    let cfg = ScenarioConfig::default();
    let (tau, var) = rct_estimates(&cfg, &AipwConfig::default());
    let (m, sd) = mean_sd(&tau);
    let mean_var = var.iter().sum::<f64>() / var.len() as f64;
    let ratio = sd * sd / mean_var;
    assert!((ratio - 1.0).abs() <= 0.2, "MC var / mean var_hat = {ratio}");
    // and the trial estimate centres on the analytic truth
    assert!((m - true_ate(&cfg)).abs() <= 0.02, "mean {m}");
}

#[test]
fn negative_control_has_no_effect_in_trial() {
    let cfg = ScenarioConfig::default();
    let est: Vec<f64> = (0..REPS)
        .map(|r| {
            let (rct, _) = replication(&cfg, r).unwrap();
            nco_effect(&rct, Column::N3, &AipwConfig::default(), &mut stream(cfg.seed, r, 98)).unwrap().tau_hat
        })
        .collect();
    let (m, sd) = mean_sd(&est);
    let se = sd / (REPS as f64).sqrt();
    assert!(m.abs() <= 2.0 * se, "n3 effect {m} vs MC se {se}");
}

#[test]
fn observational_bias_grows_with_confounding() {
    let reps = 100;
    let mut biases = Vec::new();
    for psi in DEFAULT_PSI_GRID {
        let cfg = ScenarioConfig { psi, ..Default::default() };
        let est: Vec<f64> = (0..reps)
            .map(|r| {
                let (_, rwd) = replication(&cfg, r).unwrap();
                estimate_ate(&rwd, &AipwConfig::default(), &mut stream(cfg.seed, r, 97)).unwrap().tau_hat
            })
            .collect();
        let (m, sd) = mean_sd(&est);
        biases.push((m - true_ate(&cfg), sd / (reps as f64).sqrt()));
    }
    let (b0, se0) = biases[0];
    assert!(b0.abs() <= 2.0 * se0, "bias at psi=0: {b0} (se {se0})");
    for w in biases.windows(2) {
        assert!(w[1].0 > w[0].0, "bias not increasing: {biases:?}");
    }
}
