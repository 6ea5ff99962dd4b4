//! Doubly robust (AIPW) ATE estimation, stratified estimates and the
//! nonparametric bootstrap shared by the fusion estimators.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::nuisance::{fit_outcome_for, fit_propensity, Arm, LearnerSpec, NuisanceFit};
use crate::synthgen::{stream, Column, Dataset, ScenarioConfig, Stream};

/// Two-sided 95% normal critical value.
pub const Z95: f64 = 1.96;
pub const DEFAULT_BOOTSTRAP_B: usize = 200;
pub const MIN_BOOTSTRAP_B: usize = 50;
pub const MIN_STRATUM_ROWS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AteEstimate {
    pub tau_hat: f64,
    pub var_hat: f64,
    pub n: usize,
    /// Per-unit influence values (empty for estimators without one).
    pub influence: Vec<f64>,
    pub ci: (f64, f64),
    pub method: String,
}

impl AteEstimate {
    /// Estimate with a symmetric normal 95% interval.
    pub fn normal(method: &str, tau_hat: f64, var_hat: f64, n: usize, influence: Vec<f64>) -> Self {
        let half = Z95 * var_hat.max(0.0).sqrt();
        AteEstimate {
            tau_hat,
            var_hat,
            n,
            influence,
            ci: (tau_hat - half, tau_hat + half),
            method: method.to_string(),
        }
    }

    pub fn sd(&self) -> f64 {
        self.var_hat.max(0.0).sqrt()
    }

    pub fn ci_length(&self) -> f64 {
        self.ci.1 - self.ci.0
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }

    pub fn with_ci(mut self, ci: (f64, f64)) -> Self {
        self.ci = ci;
        self
    }

    pub fn renamed(mut self, method: &str) -> Self {
        self.method = method.to_string();
        self
    }
}

/// AIPW from per-row nuisance predictions.
pub fn aipw_from_predictions(
    method: &str,
    y: &[f64],
    a: &[f64],
    e: &[f64],
    m0: &[f64],
    m1: &[f64],
) -> Result<AteEstimate> {
    let n = y.len();
    if n == 0 {
        return Err(Error::TooFewRows { need: 1, got: 0 });
    }
    let mut summand = Vec::with_capacity(n);
    for i in 0..n {
        let ei = e[i];
        if !(ei > 0.0 && ei < 1.0) {
            return Err(Error::Config(format!("propensity {ei} outside (0, 1) at row {i}")));
        }
        let s = a[i] * (y[i] - m1[i]) / ei - (1.0 - a[i]) * (y[i] - m0[i]) / (1.0 - ei) + (m1[i] - m0[i]);
        summand.push(s);
    }
    let tau = summand.iter().sum::<f64>() / n as f64;
    let influence: Vec<f64> = summand.into_iter().map(|s| s - tau).collect();
    let var = influence.iter().map(|v| v * v).sum::<f64>() / (n as f64 * n as f64);
    Ok(AteEstimate::normal(method, tau, var, n, influence))
}

/// AIPW with fitted nuisances, for outcome `y`.
pub fn aipw(data: &Dataset, outcome_fits: (&NuisanceFit, &NuisanceFit), propensity: &NuisanceFit) -> Result<AteEstimate> {
    aipw_for(data, Column::Y, outcome_fits, propensity)
}

/// AIPW with an arbitrary response column (used for negative controls).
pub fn aipw_for(
    data: &Dataset,
    response: Column,
    (m0, m1): (&NuisanceFit, &NuisanceFit),
    propensity: &NuisanceFit,
) -> Result<AteEstimate> {
    let e = propensity.predict(data);
    let p0 = m0.predict(data);
    let p1 = m1.predict(data);
    aipw_from_predictions("aipw", data.column(response), &data.a, &e, &p0, &p1)
}

/// Learner configuration for one AIPW fit.
#[derive(Debug, Clone, PartialEq)]
pub struct AipwConfig {
    pub outcome: LearnerSpec,
    pub propensity: LearnerSpec,
    /// Use a known propensity instead of fitting one (trial randomization).
    pub fixed_propensity: Option<f64>,
}

impl Default for AipwConfig {
    fn default() -> Self {
        AipwConfig {
            outcome: LearnerSpec::outcome(vec![Column::X1, Column::X2, Column::X3, Column::X4]),
            propensity: LearnerSpec::propensity(vec![Column::X1, Column::X2, Column::X3]),
            fixed_propensity: None,
        }
    }
}

/// Fitted nuisances `(m0, m1, e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AipwFit {
    pub m0: NuisanceFit,
    pub m1: NuisanceFit,
    pub e: NuisanceFit,
}

impl AipwFit {
    pub fn estimate(&self, data: &Dataset, response: Column) -> Result<AteEstimate> {
        aipw_for(data, response, (&self.m0, &self.m1), &self.e)
    }
}

pub fn fit_nuisances<R: Rng>(data: &Dataset, cfg: &AipwConfig, response: Column, rng: &mut R) -> Result<AipwFit> {
    let e = match cfg.fixed_propensity {
        Some(p) => {
            let mut f = NuisanceFit::constant_propensity(p);
            f.bound = Some(cfg.propensity.propensity_bound);
            f
        }
        None => fit_propensity(data, &cfg.propensity, rng)?,
    };
    let m0 = fit_outcome_for(data, response, Arm::Control, &cfg.outcome, rng)?;
    let m1 = fit_outcome_for(data, response, Arm::Treated, &cfg.outcome, rng)?;
    Ok(AipwFit { m0, m1, e })
}

/// Fit nuisances on `data` and return its AIPW estimate.
pub fn estimate_ate<R: Rng>(data: &Dataset, cfg: &AipwConfig, rng: &mut R) -> Result<AteEstimate> {
    fit_nuisances(data, cfg, Column::Y, rng)?.estimate(data, Column::Y)
}

/// Partition by the signs of two columns: `K = 4` strata, indexed
/// `2 * [first > 0] + [second > 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignSplit {
    pub first: Column,
    pub second: Column,
}

impl Default for SignSplit {
    fn default() -> Self {
        SignSplit { first: Column::X1, second: Column::X3 }
    }
}

impl SignSplit {
    pub const K: usize = 4;

    pub fn stratum(&self, data: &Dataset, i: usize) -> usize {
        let f = (data.column(self.first)[i] > 0.0) as usize;
        let s = (data.column(self.second)[i] > 0.0) as usize;
        2 * f + s
    }

    pub fn labels(&self, data: &Dataset) -> Vec<usize> {
        (0..data.len()).map(|i| self.stratum(data, i)).collect()
    }

    pub fn name(&self, k: usize) -> String {
        let sign = |b: bool| if b { '+' } else { '-' };
        format!("{}{}{}{}", self.first, sign(k >= 2), self.second, sign(k % 2 == 1))
    }

    /// Rows of each stratum.
    pub fn groups(&self, data: &Dataset) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); Self::K];
        for i in 0..data.len() {
            g[self.stratum(data, i)].push(i);
        }
        g
    }

    /// Analytic stratum effects under the generator: the effect depends on
    /// covariates only through `x3`, and `E[x3 | x3 > 0] = sqrt(2 / pi)`.
    pub fn true_effects(&self, cfg: &ScenarioConfig) -> Vec<f64> {
        let half_normal_mean = (2.0 / std::f64::consts::PI).sqrt();
        (0..Self::K)
            .map(|k| {
                let mut ex3 = crate::synthgen::X3_MEAN;
                if self.first == Column::X3 {
                    ex3 = if k >= 2 { half_normal_mean } else { -half_normal_mean };
                } else if self.second == Column::X3 {
                    ex3 = if k % 2 == 1 { half_normal_mean } else { -half_normal_mean };
                }
                cfg.msm.beta_a + cfg.msm.beta_ax3 * ex3
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrataEstimates {
    pub tau_r: Vec<f64>,
    pub tau_o: Vec<f64>,
    /// Diagonal of the trial covariance.
    pub sigma2_r: Vec<f64>,
    pub sigma2_o: Vec<f64>,
    /// Trial stratum shares `n_{r,k} / n_r`.
    pub w: Vec<f64>,
    pub counts_r: Vec<usize>,
    pub counts_o: Vec<usize>,
    pub names: Vec<String>,
}

impl StrataEstimates {
    pub fn k(&self) -> usize {
        self.tau_r.len()
    }

    pub fn weighted(&self, v: &[f64]) -> f64 {
        self.w.iter().zip(v).map(|(w, t)| w * t).sum()
    }
}

fn stratum_estimate<R: Rng>(
    data: &Dataset,
    rows: &[usize],
    name: &str,
    source: &str,
    cfg: &AipwConfig,
    rng: &mut R,
) -> Result<AteEstimate> {
    let fail = |reason: String| Error::Stratum { stratum: format!("{name} ({source})"), reason };
    if rows.len() < MIN_STRATUM_ROWS {
        return Err(fail(format!("{} units, need {MIN_STRATUM_ROWS}", rows.len())));
    }
    let sub = data.subset(rows);
    let treated = sub.treated_count();
    if treated == 0 || treated == sub.len() {
        return Err(fail("only one treatment arm present".into()));
    }
    let est = estimate_ate(&sub, cfg, rng).map_err(|e| fail(e.to_string()))?;
    if !(est.var_hat > 0.0) {
        return Err(fail("zero variance estimate".into()));
    }
    Ok(est)
}

/// Independent per-stratum AIPW estimates in both sources.
pub fn stratified_aipw<R: Rng>(
    rct: &Dataset,
    rwd: &Dataset,
    rule: &SignSplit,
    rct_cfg: &AipwConfig,
    rwd_cfg: &AipwConfig,
    rng: &mut R,
) -> Result<StrataEstimates> {
    let gr = rule.groups(rct);
    let go = rule.groups(rwd);
    let k = SignSplit::K;
    let mut out = StrataEstimates {
        tau_r: Vec::with_capacity(k),
        tau_o: Vec::with_capacity(k),
        sigma2_r: Vec::with_capacity(k),
        sigma2_o: Vec::with_capacity(k),
        w: Vec::with_capacity(k),
        counts_r: Vec::with_capacity(k),
        counts_o: Vec::with_capacity(k),
        names: Vec::with_capacity(k),
    };
    for s in 0..k {
        let name = rule.name(s);
        let er = stratum_estimate(rct, &gr[s], &name, "rct", rct_cfg, rng)?;
        let eo = stratum_estimate(rwd, &go[s], &name, "rwd", rwd_cfg, rng)?;
        out.tau_r.push(er.tau_hat);
        out.tau_o.push(eo.tau_hat);
        out.sigma2_r.push(er.var_hat);
        out.sigma2_o.push(eo.var_hat);
        out.counts_r.push(gr[s].len());
        out.counts_o.push(go[s].len());
        out.w.push(gr[s].len() as f64 / rct.len() as f64);
        out.names.push(name);
    }
    Ok(out)
}

/// How bootstrap resamples are drawn within each source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    Simple,
    /// Resample within the strata of the rule, preserving stratum counts.
    Stratified(SignSplit),
}

fn resample_indices<R: Rng>(data: &Dataset, resampling: Resampling, rng: &mut R) -> Vec<usize> {
    let n = data.len();
    match resampling {
        Resampling::Simple => (0..n).map(|_| rng.random_range(0..n)).collect(),
        Resampling::Stratified(rule) => {
            let mut idx = Vec::with_capacity(n);
            for g in rule.groups(data) {
                for _ in 0..g.len() {
                    idx.push(g[rng.random_range(0..g.len())]);
                }
            }
            idx
        }
    }
}

/// Draws `b` bootstrap replicates of a vector-valued estimator, resampling
/// the trial and observational data separately. A failed replicate is
/// redrawn; more than `5 b` attempts is an error.
pub fn bootstrap_draws<F, R>(
    estimator: F,
    rct: &Dataset,
    rwd: &Dataset,
    b: usize,
    resampling: Resampling,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Dataset, &Dataset, &mut Stream) -> Result<Vec<f64>>,
    R: RngCore,
{
    if b < MIN_BOOTSTRAP_B {
        return Err(Error::Config(format!("bootstrap needs B >= {MIN_BOOTSTRAP_B} (got {b})")));
    }
    let base = rng.next_u64();
    let mut draws = Vec::with_capacity(b);
    let mut attempt = 0u64;
    let mut last_err = None;
    while draws.len() < b {
        if attempt >= 5 * b as u64 {
            return Err(Error::Bootstrap(format!(
                "only {} of {b} resamples succeeded in {attempt} attempts; last error: {}",
                draws.len(),
                last_err.map(|e: Error| e.to_string()).unwrap_or_default()
            )));
        }
        let mut rs = stream(base, attempt, 0);
        let r = rct.subset(&resample_indices(rct, resampling, &mut rs));
        let o = rwd.subset(&resample_indices(rwd, resampling, &mut rs));
        match estimator(&r, &o, &mut stream(base, attempt, 1)) {
            Ok(v) if v.iter().all(|x| x.is_finite()) => draws.push(v),
            Ok(_) => last_err = Some(Error::Bootstrap("non-finite estimate".into())),
            Err(e) => last_err = Some(e),
        }
        attempt += 1;
    }
    Ok(draws)
}

/// Percentile 95% interval of a scalar estimator.
pub fn bootstrap_ci<F, R>(estimator: F, rct: &Dataset, rwd: &Dataset, b: usize, resampling: Resampling, rng: &mut R) -> Result<(f64, f64)>
where
    F: Fn(&Dataset, &Dataset, &mut Stream) -> Result<f64>,
    R: RngCore,
{
    let draws = bootstrap_draws(|r, o, s| estimator(r, o, s).map(|v| vec![v]), rct, rwd, b, resampling, rng)?;
    let v: Vec<f64> = draws.into_iter().map(|d| d[0]).collect();
    Ok(percentile_ci(&v, 0.95))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Central percentile interval at `level`.
pub fn percentile_ci(values: &[f64], level: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail))
}
