//! Estimators that borrow information from observational data to sharpen a
//! trial estimate: weighting/pooling rules, stratum shrinkage, bias
//! correction, a tempered (power) likelihood, a cross-validated design
//! selector and prognostic covariate adjustment.
//!
//! Each estimator returns an [`AteEstimate`] plus [`FusionDiagnostics`].
//! Estimators whose interval comes from the bootstrap still report a
//! plug-in variance that treats their data-driven weights as fixed; the
//! registry ([`run_method`]) replaces the interval with the bootstrap one.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::{ChiSquared, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::estimate::{
    bootstrap_draws, estimate_ate, fit_nuisances, percentile_ci, stratified_aipw, AipwConfig, AipwFit, AteEstimate,
    Resampling, SignSplit, StrataEstimates, DEFAULT_BOOTSTRAP_B, MIN_BOOTSTRAP_B,
};
use crate::linalg::{dot, Gram, SpdFactor};
use crate::nuisance::{fit_outcome, fit_outcome_for, fold_labels, Arm, LearnerSpec, NuisanceFit};
use crate::synthgen::{stream, Column, Dataset, Stream};

/// Which observational rows may be borrowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BorrowMode {
    #[default]
    BothArms,
    /// Only observational controls (external control arm).
    ControlOnly,
}

impl BorrowMode {
    pub fn name(self) -> &'static str {
        match self {
            BorrowMode::BothArms => "both",
            BorrowMode::ControlOnly => "control-only",
        }
    }

    fn borrowable(self, rwd: &Dataset) -> Dataset {
        match self {
            BorrowMode::BothArms => rwd.clone(),
            BorrowMode::ControlOnly => rwd.filter(|i| rwd.a[i] == 0.0),
        }
    }
}

impl FromStr for BorrowMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" | "both-arms" => Ok(BorrowMode::BothArms),
            "control-only" | "control" => Ok(BorrowMode::ControlOnly),
            other => Err(Error::Parse(format!("unknown mode `{other}` (expected both | control-only)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHyper {
    /// Threshold multiplier; `None` means `sqrt(log min(n_r, n_o))`.
    pub gamma: Option<f64>,
    /// Shrinkage constant `a`; `None` means `K - 2`.
    pub shrink_a: Option<f64>,
    pub eta_grid: Vec<f64>,
    pub posterior_draws: usize,
    pub test_alpha: f64,
    pub cv_folds: usize,
    pub nco_column: Option<Column>,
    /// Prior variance of the stratum biases (double shrinkage).
    pub phi2: f64,
    /// Prior variance of the stratum effects (double shrinkage).
    pub omega2: f64,
    pub mode: BorrowMode,
    /// Add `x4^2` to the power-likelihood outcome model.
    pub quadratic_outcome: bool,
    pub bootstrap_b: usize,
    pub strata: SignSplit,
    /// Known bias of the observational estimate (oracle only).
    pub oracle_delta: Option<f64>,
}

impl Default for FusionHyper {
    fn default() -> Self {
        FusionHyper {
            gamma: None,
            shrink_a: None,
            eta_grid: default_eta_grid(),
            posterior_draws: 2000,
            test_alpha: 0.025,
            cv_folds: 5,
            nco_column: None,
            phi2: 0.04,
            omega2: 1.0,
            mode: BorrowMode::BothArms,
            quadratic_outcome: false,
            bootstrap_b: DEFAULT_BOOTSTRAP_B,
            strata: SignSplit::default(),
            oracle_delta: None,
        }
    }
}

/// The 0.05 lattice with extra points below it. Borrowing gains grow
/// linearly in eta while the bias cost grows quadratically, so the argmax
/// is almost never exactly 0 and the first nonzero point matters.
pub fn default_eta_grid() -> Vec<f64> {
    let mut g = vec![0.0, 0.0025, 0.005, 0.01, 0.02, 0.03, 0.04];
    g.extend(eta_grid(0.05).into_iter().skip(1));
    g
}

/// `0, step, 2 step, ..., 1`.
pub fn eta_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

impl FusionHyper {
    pub fn validate(&self) -> Result<()> {
        let g = &self.eta_grid;
        if g.first() != Some(&0.0) {
            return Err(Error::Config("eta grid must start at 0 (the trial-only fallback)".into()));
        }
        if g.last() != Some(&1.0) {
            return Err(Error::Config("eta grid must end at 1".into()));
        }
        if g.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("eta grid must be strictly ascending".into()));
        }
        if let Some(gm) = self.gamma {
            if !(gm > 0.0) {
                return Err(Error::Config(format!("gamma must be positive (got {gm})")));
            }
        }
        if let Some(a) = self.shrink_a {
            if !(a > 0.0) {
                return Err(Error::Config(format!("shrink_a must be positive (got {a})")));
            }
        }
        if self.posterior_draws == 0 {
            return Err(Error::Config("posterior_draws must be at least 1".into()));
        }
        if !(self.test_alpha > 0.0 && self.test_alpha < 1.0) {
            return Err(Error::Config("test_alpha must lie in (0, 1)".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if !(self.phi2 >= 0.0) || !(self.omega2 >= 0.0) {
            return Err(Error::Config("phi2 and omega2 must be non-negative".into()));
        }
        if self.bootstrap_b < MIN_BOOTSTRAP_B {
            return Err(Error::Config(format!("bootstrap_b must be at least {MIN_BOOTSTRAP_B}")));
        }
        Ok(())
    }
}

/// Method-specific by-products.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusionDiagnostics {
    /// Weight given to observational data: lambda, omega, eta, the share of
    /// folds choosing the pooled design, or a stratum-weighted shrinkage
    /// share, depending on the method.
    pub learning_weight: Option<f64>,
    /// Estimated bias of the observational estimate, after any thresholding.
    pub bias_estimate: Option<f64>,
    pub test_statistic: Option<f64>,
    /// `Some(true)` when a test-then-pool rule pooled.
    pub pooled: Option<bool>,
    pub shrinkage_factors: Vec<f64>,
    /// Per-stratum fused estimates.
    pub stratum_estimates: Vec<f64>,
    /// Fitted bias-correction / confounding coefficients.
    pub coefficients: Vec<f64>,
    /// Folds actually used by cross-validated procedures.
    pub folds: Option<usize>,
    /// Fallbacks taken, in order.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub estimate: AteEstimate,
    pub diagnostics: FusionDiagnostics,
}

impl FusionOutput {
    fn new(estimate: AteEstimate, diagnostics: FusionDiagnostics) -> Self {
        FusionOutput { estimate, diagnostics }
    }
}

pub fn default_gamma(n_r: usize, n_o: usize) -> f64 {
    (n_r.min(n_o) as f64).ln().sqrt()
}

/// `sign(x) (|x| - t)_+`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x.abs() >= t {
        x.signum() * (x.abs() - t)
    } else {
        0.0
    }
}

/// Inverse-variance weighted mean of two independent estimates.
pub fn inverse_variance_pool(method: &str, tau_r: f64, var_r: f64, tau_o: f64, var_o: f64, n: usize) -> AteEstimate {
    let (wr, wo) = (1.0 / var_r, 1.0 / var_o);
    let tau = if wo == 0.0 { tau_r } else { (wr * tau_r + wo * tau_o) / (wr + wo) };
    AteEstimate::normal(method, tau, 1.0 / (wr + wo), n, Vec::new())
}

/// Convex combination minimizing the plug-in MSE.
pub fn mse_minimizing(est_r: &AteEstimate, est_o: &AteEstimate) -> FusionOutput {
    let (vr, vo) = (est_r.var_hat, est_o.var_hat);
    let d = est_r.tau_hat - est_o.tau_hat;
    let denom = d * d + vr + vo;
    let lambda = if denom > 0.0 { vr / denom } else { 0.0 };
    let tau = lambda * est_o.tau_hat + (1.0 - lambda) * est_r.tau_hat;
    let var = (1.0 - lambda).powi(2) * vr + lambda * lambda * vo;
    let est = AteEstimate::normal("mse_minimizing", tau, var, est_r.n + est_o.n, Vec::new());
    FusionOutput::new(
        est,
        FusionDiagnostics { learning_weight: Some(lambda), bias_estimate: Some(-d), ..Default::default() },
    )
}

/// Precision-weighted pool after subtracting a soft-thresholded bias
/// estimate.
pub fn anchored_thresholding(est_r: &AteEstimate, est_o: &AteEstimate, gamma: f64) -> FusionOutput {
    let (vr, vo) = (est_r.var_hat, est_o.var_hat);
    let delta = est_o.tau_hat - est_r.tau_hat;
    let t = gamma * (vr + vo).sqrt();
    let delta_g = soft_threshold(delta, t);
    let omega = vr / (vr + vo);
    let tau = (1.0 - omega) * est_r.tau_hat + omega * (est_o.tau_hat - delta_g);
    let var = if delta_g == 0.0 { (1.0 - omega).powi(2) * vr + omega * omega * vo } else { vr };
    let est = AteEstimate::normal("anchored_thresholding", tau, var, est_r.n + est_o.n, Vec::new());
    FusionOutput::new(
        est,
        FusionDiagnostics { learning_weight: Some(omega), bias_estimate: Some(delta_g), ..Default::default() },
    )
}

/// Two-sided Wald test of equal effects; pool only when not rejected.
pub fn test_then_pool(est_r: &AteEstimate, est_o: &AteEstimate, alpha: f64) -> FusionOutput {
    let (vr, vo) = (est_r.var_hat, est_o.var_hat);
    let z = (est_r.tau_hat - est_o.tau_hat) / (vr + vo).sqrt();
    let crit = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let mut diag = FusionDiagnostics { test_statistic: Some(z), ..Default::default() };
    if z.abs() > crit {
        diag.pooled = Some(false);
        diag.learning_weight = Some(0.0);
        return FusionOutput::new(est_r.clone().renamed("test_then_pool"), diag);
    }
    diag.pooled = Some(true);
    diag.learning_weight = Some((1.0 / vo) / (1.0 / vr + 1.0 / vo));
    let est = inverse_variance_pool("test_then_pool", est_r.tau_hat, vr, est_o.tau_hat, vo, est_r.n + est_o.n);
    FusionOutput::new(est, diag)
}

fn check_strata(s: &StrataEstimates) -> Result<()> {
    if s.k() < 3 {
        return Err(Error::Config(format!("shrinkage needs at least 3 strata (got {})", s.k())));
    }
    if s.sigma2_r.iter().chain(&s.sigma2_o).any(|v| !(*v > 0.0)) {
        return Err(Error::Config("stratum variances must be positive".into()));
    }
    Ok(())
}

/// Shrinks each stratum from the trial estimate toward the observational
/// one by factor `f_k`: `tau_k = tau_o,k + f_k (tau_r,k - tau_o,k)`.
fn shrink_with(name: &str, s: &StrataEstimates, factors: Vec<f64>) -> FusionOutput {
    let k = s.k();
    let fused: Vec<f64> = (0..k).map(|j| s.tau_o[j] + factors[j] * (s.tau_r[j] - s.tau_o[j])).collect();
    let var: f64 = (0..k)
        .map(|j| s.w[j].powi(2) * (factors[j].powi(2) * s.sigma2_r[j] + (1.0 - factors[j]).powi(2) * s.sigma2_o[j]))
        .sum();
    let n = s.counts_r.iter().sum::<usize>() + s.counts_o.iter().sum::<usize>();
    let est = AteEstimate::normal(name, s.weighted(&fused), var, n, Vec::new());
    let borrowed: f64 = (0..k).map(|j| s.w[j] * (1.0 - factors[j])).sum();
    FusionOutput::new(
        est,
        FusionDiagnostics {
            learning_weight: Some(borrowed),
            shrinkage_factors: factors,
            stratum_estimates: fused,
            ..Default::default()
        },
    )
}

/// Positive-part Green–Strawderman shrinkage with constant `a`
/// (default `K - 2`).
pub fn shrink_s1(s: &StrataEstimates, a: Option<f64>) -> Result<FusionOutput> {
    check_strata(s)?;
    let a = a.unwrap_or(s.k() as f64 - 2.0);
    let q: f64 = (0..s.k()).map(|j| (s.tau_r[j] - s.tau_o[j]).powi(2) / s.sigma2_r[j].powi(2)).sum();
    let factors = s
        .sigma2_r
        .iter()
        .map(|v| if q > 0.0 { (1.0 - a / (v * q)).max(0.0) } else { 0.0 })
        .collect();
    Ok(shrink_with("shrink_s1", s, factors))
}

/// Shrinkage with the SURE-minimizing factor
/// `(I - tr(S^2) S / (d' S^2 d))_+` for diagonal `S`.
pub fn shrink_s2(s: &StrataEstimates) -> Result<FusionOutput> {
    check_strata(s)?;
    let tr: f64 = s.sigma2_r.iter().map(|v| v * v).sum();
    let denom: f64 = (0..s.k()).map(|j| s.sigma2_r[j].powi(2) * (s.tau_r[j] - s.tau_o[j]).powi(2)).sum();
    let factors = s
        .sigma2_r
        .iter()
        .map(|v| if denom > 0.0 { (1.0 - tr * v / denom).max(0.0) } else { 0.0 })
        .collect();
    Ok(shrink_with("shrink_s2", s, factors))
}

/// Per-stratum `a_k (lambda_k tau_r,k + (1 - lambda_k) tau_o,k)` with
/// supplied prior variances of the bias (`phi2`) and of the effect
/// (`omega2`).
pub fn double_shrink(s: &StrataEstimates, phi2: f64, omega2: f64) -> Result<FusionOutput> {
    check_strata(s)?;
    if !(phi2 >= 0.0) || !(omega2 >= 0.0) {
        return Err(Error::Config(format!("phi2 and omega2 must be non-negative (got {phi2}, {omega2})")));
    }
    let k = s.k();
    let mut fused = Vec::with_capacity(k);
    let mut factors = Vec::with_capacity(k);
    let mut var = 0.0;
    let mut borrowed = 0.0;
    for j in 0..k {
        let (vr, vo) = (s.sigma2_r[j], s.sigma2_o[j]);
        let tot = phi2 + vo + vr;
        let a = omega2 * tot / (vr * (phi2 + vo) + omega2 * tot);
        let lambda = (phi2 + vo) / tot;
        fused.push(a * (lambda * s.tau_r[j] + (1.0 - lambda) * s.tau_o[j]));
        factors.push(a);
        var += s.w[j].powi(2) * a * a * (lambda * lambda * vr + (1.0 - lambda).powi(2) * vo);
        borrowed += s.w[j] * (1.0 - lambda);
    }
    let n = s.counts_r.iter().sum::<usize>() + s.counts_o.iter().sum::<usize>();
    let est = AteEstimate::normal("double_shrink", s.weighted(&fused), var, n, Vec::new());
    Ok(FusionOutput::new(
        est,
        FusionDiagnostics {
            learning_weight: Some(borrowed),
            shrinkage_factors: factors,
            stratum_estimates: fused,
            ..Default::default()
        },
    ))
}

const MAIN_COVARIATES: [Column; 4] = [Column::X1, Column::X2, Column::X3, Column::X4];

fn linear_row(data: &Dataset, i: usize, covs: &[Column], out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend(covs.iter().map(|c| data.column(*c)[i]));
}

/// Linear regression of `y` on `covs` (with intercept) within one arm.
fn arm_ols(data: &Dataset, arm: f64, covs: &[Column]) -> Result<Vec<f64>> {
    let mut g = Gram::new(1 + covs.len());
    let mut buf = Vec::new();
    for i in (0..data.len()).filter(|&i| data.a[i] == arm) {
        linear_row(data, i, covs, &mut buf);
        g.add(&buf, data.y[i], 1.0);
    }
    g.solve()
        .ok_or_else(|| Error::RankDeficient(format!("linear outcome model in observational arm a={arm}")))
}

/// Observational CATE `w(x)` plus a linear correction fitted on the trial
/// against the transformed outcome `q y` (`q = +-2`).
pub fn experiment_grounding(rct: &Dataset, rwd: &Dataset) -> Result<FusionOutput> {
    if rct.is_empty() || rwd.is_empty() {
        return Err(Error::TooFewRows { need: 1, got: 0 });
    }
    let b1 = arm_ols(rwd, 1.0, &MAIN_COVARIATES)?;
    let b0 = arm_ols(rwd, 0.0, &MAIN_COVARIATES)?;
    let corr_covs = [Column::X1, Column::X2, Column::X3];
    let n = rct.len();
    let mut g = Gram::new(4);
    let mut omega = Vec::with_capacity(n);
    let mut q_y = Vec::with_capacity(n);
    let mut buf = Vec::new();
    for i in 0..n {
        linear_row(rct, i, &MAIN_COVARIATES, &mut buf);
        let w = dot(&buf, &b1) - dot(&buf, &b0);
        let q = if rct.a[i] == 1.0 { 2.0 } else { -2.0 };
        omega.push(w);
        q_y.push(q * rct.y[i]);
        linear_row(rct, i, &corr_covs, &mut buf);
        g.add(&buf, q * rct.y[i] - w, 1.0);
    }
    let beta = g.solve().ok_or_else(|| Error::RankDeficient("trial design for the bias correction".into()))?;
    let mut summand = Vec::with_capacity(n);
    for i in 0..n {
        linear_row(rct, i, &corr_covs, &mut buf);
        summand.push(omega[i] + dot(&buf, &beta));
    }
    let tau = summand.iter().sum::<f64>() / n as f64;
    // With an intercept in the correction, the fitted values average to the
    // mean of q y, so that is the estimator's influence function.
    let mean_qy = q_y.iter().sum::<f64>() / n as f64;
    let influence: Vec<f64> = q_y.iter().map(|v| v - mean_qy).collect();
    let var = influence.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64;
    let est = AteEstimate::normal("experiment_grounding", tau, var, n + rwd.len(), influence);
    Ok(FusionOutput::new(est, FusionDiagnostics { coefficients: beta, ..Default::default() }))
}

/// Heteroskedasticity-robust variance of `c' beta` for least squares with
/// design rows `rows` (row-major, `p` columns) and residuals `resid`.
pub fn robust_linear_variance(factor: &SpdFactor, rows: &[f64], p: usize, resid: &[f64], c: &[f64]) -> f64 {
    let g = factor.solve(c);
    rows.chunks_exact(p).zip(resid).map(|(x, e)| (dot(&g, x) * e).powi(2)).sum()
}

/// Pooled least squares with linear effect and linear confounding terms
/// active only in the observational rows.
pub fn confounding_function(rct: &Dataset, rwd: &Dataset, e_o: &NuisanceFit) -> Result<FusionOutput> {
    const P: usize = 11;
    let e_hat = e_o.predict(rwd);
    let n = rct.len() + rwd.len();
    let mut rows = Vec::with_capacity(n * P);
    let mut y = Vec::with_capacity(n);
    // Effect terms use treatment centered by its propensity in each source,
    // so the observational baseline may absorb any function of x times the
    // effect; otherwise the nonlinearity of e_o would identify the effect
    // from the observational rows under a merely linear baseline.
    let mut push = |d: &Dataset, i: usize, s: f64, e: f64| {
        let (x1, x2, x3) = (d.x1[i], d.x2[i], d.x3[i]);
        let c = d.a[i] - e;
        let r = (1.0 - s) * c;
        rows.extend_from_slice(&[1.0, x1, x2, x3, s, c, c * x3, r, r * x1, r * x2, r * x3]);
        y.push(d.y[i]);
    };
    let share_r = rct.mean(Column::A);
    for i in 0..rct.len() {
        push(rct, i, 1.0, share_r);
    }
    for i in 0..rwd.len() {
        push(rwd, i, 0.0, e_hat[i]);
    }
    let mut g = Gram::new(P);
    for (x, &yi) in rows.chunks_exact(P).zip(&y) {
        g.add(x, yi, 1.0);
    }
    let factor = g.factor().ok_or_else(|| {
        Error::Collinear("the effect terms are a linear combination of the confounding-function terms".into())
    })?;
    let beta = factor.solve(&g.xty);
    let mean_x3 = rct.mean(Column::X3);
    let tau = beta[5] + beta[6] * mean_x3;
    let resid: Vec<f64> = rows.chunks_exact(P).zip(&y).map(|(x, yi)| yi - dot(x, &beta)).collect();
    let mut c = [0.0; P];
    c[5] = 1.0;
    c[6] = mean_x3;
    let var = robust_linear_variance(&factor, &rows, P, &resid, &c);
    let est = AteEstimate::normal("confounding_function", tau, var, n, Vec::new());
    Ok(FusionOutput::new(est, FusionDiagnostics { coefficients: beta[7..].to_vec(), ..Default::default() }))
}

fn pl_basis(d: &Dataset, i: usize, quadratic: bool, out: &mut Vec<f64>) {
    out.clear();
    let (a, x3) = (d.a[i], d.x3[i]);
    out.extend_from_slice(&[1.0, a, a * x3, d.x1[i], d.x2[i], x3, d.x4[i]]);
    if quadratic {
        out.push(d.x4[i] * d.x4[i]);
    }
}

/// Student-t log density with `nu` degrees of freedom and scale `s`.
fn t_log_density(r: f64, nu: f64, scale2: f64) -> f64 {
    ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI * scale2).ln()
        - (nu + 1.0) / 2.0 * (1.0 + r * r / (nu * scale2)).ln()
}

/// Summary of one tempered fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperedFit {
    pub eta: f64,
    pub coef: Vec<f64>,
    /// Weighted residual sum of squares.
    pub rss: f64,
    /// Posterior degrees of freedom `sum(w) - p`.
    pub dof: f64,
    /// Exact leave-one-out log predictive density over the trial rows.
    pub elpd: f64,
}

/// Weighted least squares with trial weight 1 and observational weight
/// `eta`, with flat-prior normal–inverse-gamma posterior; returns the
/// factor for posterior draws.
fn tempered_fit(g_r: &Gram, g_o: &Gram, eta: f64, rct_rows: &[f64], y_r: &[f64]) -> Option<(TemperedFit, SpdFactor)> {
    let p = g_r.p;
    let g = if eta == 0.0 { g_r.clone() } else { g_r.plus(&g_o.scaled(eta)) };
    let factor = g.factor()?;
    let coef = factor.solve(&g.xty);
    let rss = g.rss(&coef);
    let dof = g.sum_w - p as f64;
    if !(dof > 2.0) {
        return None;
    }
    let mut elpd = 0.0;
    for (x, &yi) in rct_rows.chunks_exact(p).zip(y_r) {
        let h = factor.inv_quad(x);
        let e = yi - dot(x, &coef);
        let s_loo = rss - e * e / (1.0 - h);
        let nu = dof - 1.0;
        let scale2 = s_loo / (nu * (1.0 - h));
        elpd += t_log_density(e / (1.0 - h), nu, scale2);
    }
    Some((TemperedFit { eta, coef, rss, dof, elpd }, factor))
}

/// Power likelihood with the learning rate chosen by leave-one-out
/// predictive density on the trial, then posterior draws of the ATE.
pub fn power_likelihood<R: Rng>(rct: &Dataset, rwd: &Dataset, hyper: &FusionHyper, rng: &mut R) -> Result<FusionOutput> {
    hyper.validate()?;
    let borrowed = hyper.mode.borrowable(rwd);
    let p = if hyper.quadratic_outcome { 8 } else { 7 };
    let mut buf = Vec::with_capacity(p);
    let mut g_r = Gram::new(p);
    let mut rct_rows = Vec::with_capacity(rct.len() * p);
    for i in 0..rct.len() {
        pl_basis(rct, i, hyper.quadratic_outcome, &mut buf);
        g_r.add(&buf, rct.y[i], 1.0);
        rct_rows.extend_from_slice(&buf);
    }
    let mut g_o = Gram::new(p);
    for i in 0..borrowed.len() {
        pl_basis(&borrowed, i, hyper.quadratic_outcome, &mut buf);
        g_o.add(&buf, borrowed.y[i], 1.0);
    }
    let mut best: Option<(TemperedFit, SpdFactor)> = None;
    for &eta in &hyper.eta_grid {
        if let Some((fit, f)) = tempered_fit(&g_r, &g_o, eta, &rct_rows, &rct.y) {
            if best.as_ref().is_none_or(|(b, _)| fit.elpd > b.elpd) {
                best = Some((fit, f));
            }
        }
    }
    let (fit, factor) = best.ok_or_else(|| Error::RankDeficient("power-likelihood outcome model".into()))?;
    let mut c = vec![0.0; p];
    c[1] = 1.0;
    c[2] = rct.mean(Column::X3);
    let loc = dot(&c, &fit.coef);
    let spread = factor.inv_quad(&c);
    let chi = ChiSquared::new(fit.dof).map_err(|e| Error::Config(e.to_string()))?;
    let draws: Vec<f64> = (0..hyper.posterior_draws)
        .map(|_| {
            let sigma2 = fit.rss / rng.sample(chi);
            let z: f64 = rng.sample(StandardNormal);
            loc + (sigma2 * spread).sqrt() * z
        })
        .collect();
    let m = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / m;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let ci = percentile_ci(&draws, 0.95);
    let est = AteEstimate::normal("power_likelihood", mean, var, rct.len() + borrowed.len(), Vec::new()).with_ci(ci);
    Ok(FusionOutput::new(
        est,
        FusionDiagnostics { learning_weight: Some(fit.eta), coefficients: fit.coef, ..Default::default() },
    ))
}

/// AIPW estimate of the treatment "effect" on a negative-control outcome.
pub fn nco_effect<R: Rng>(data: &Dataset, nco: Column, cfg: &AipwConfig, rng: &mut R) -> Result<AteEstimate> {
    let fit = fit_nuisances(data, cfg, nco, rng)?;
    Ok(fit.estimate(data, nco)?.renamed("nco_effect"))
}

fn is_size_error(e: &Error) -> bool {
    matches!(e, Error::TooFewRows { .. } | Error::EmptyArm { .. } | Error::SingleArm(_))
}

struct FoldChoice {
    pooled: bool,
    tau: f64,
    var: f64,
}

/// Learner settings for the trial and observational (or pooled) fits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Learners {
    pub rct: AipwConfig,
    pub rwd: AipwConfig,
    /// Prognostic model for PROCOVA.
    pub prognostic: LearnerSpec,
}

fn selector_fold(
    rct: &Dataset,
    rwd: &Dataset,
    labels: (&[usize], &[usize]),
    v: usize,
    hyper: &FusionHyper,
    learners: &Learners,
    seed: u64,
) -> Result<FoldChoice> {
    let (lr, lo) = labels;
    let train_r = rct.filter(|i| lr[i] != v);
    let val_r = rct.filter(|i| lr[i] == v);
    let train_o = hyper.mode.borrowable(&rwd.filter(|i| lo[i] != v));
    let val_o = hyper.mode.borrowable(&rwd.filter(|i| lo[i] == v));
    let pooled_train = train_r.concat(&train_o);

    let fit_r = fit_nuisances(&train_r, &learners.rct, Column::Y, &mut stream(seed, v as u64, 1))?;
    let est_r = fit_r.estimate(&train_r, Column::Y)?;
    let fit_p = fit_nuisances(&pooled_train, &learners.rwd, Column::Y, &mut stream(seed, v as u64, 2))?;
    let est_p = fit_p.estimate(&pooled_train, Column::Y)?;

    let mut bias = est_p.tau_hat - est_r.tau_hat;
    if let Some(nco) = hyper.nco_column {
        let mut rng = stream(seed, v as u64, 3);
        let m0 = fit_outcome_for(&pooled_train, nco, Arm::Control, &learners.rwd.outcome, &mut rng)?;
        let m1 = fit_outcome_for(&pooled_train, nco, Arm::Treated, &learners.rwd.outcome, &mut rng)?;
        let phi = AipwFit { m0, m1, e: fit_p.e.clone() }.estimate(&pooled_train, nco)?;
        bias += phi.tau_hat;
    }
    let pooled = est_p.var_hat + bias * bias < est_r.var_hat;
    let val = if pooled {
        let d = val_r.concat(&val_o);
        fit_p.estimate(&d, Column::Y)?
    } else {
        fit_r.estimate(&val_r, Column::Y)?
    };
    Ok(FoldChoice { pooled, tau: val.tau_hat, var: val.var_hat })
}

/// Cross-validated choice between the trial-only and the pooled design,
/// trading estimated variance against the squared estimated bias
/// (optionally augmented by a negative-control "effect").
pub fn experiment_selector<R: RngCore>(
    rct: &Dataset,
    rwd: &Dataset,
    hyper: &FusionHyper,
    learners: &Learners,
    rng: &mut R,
) -> Result<FusionOutput> {
    hyper.validate()?;
    let seed = rng.next_u64();
    let mut diag = FusionDiagnostics::default();
    let mut folds = hyper.cv_folds;
    loop {
        let mut lrng = stream(seed, 0, 0);
        let lr = fold_labels(rct.len(), folds, &mut lrng);
        let lo = fold_labels(rwd.len(), folds, &mut lrng);
        let mut choices = Vec::with_capacity(folds);
        let mut failure = None;
        for v in 0..folds {
            match selector_fold(rct, rwd, (&lr, &lo), v, hyper, learners, seed) {
                Ok(c) => choices.push(c),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        match failure {
            None => {
                let vf = folds as f64;
                let tau = choices.iter().map(|c| c.tau).sum::<f64>() / vf;
                let var = choices.iter().map(|c| c.var).sum::<f64>() / (vf * vf);
                let share = choices.iter().filter(|c| c.pooled).count() as f64 / vf;
                diag.learning_weight = Some(share);
                diag.folds = Some(folds);
                let est = AteEstimate::normal("experiment_selector", tau, var, rct.len() + rwd.len(), Vec::new());
                return Ok(FusionOutput::new(est, diag));
            }
            Some(e) if is_size_error(&e) && folds > 2 => {
                diag.notes.push(format!("reduced folds from {folds} to {}: {e}", folds - 1));
                folds -= 1;
            }
            Some(e) => return Err(e),
        }
    }
}

/// Trial regression adjusting for covariates and a prognostic score
/// learned on observational controls.
pub fn procova<R: Rng>(rct: &Dataset, rwd: &Dataset, spec: &LearnerSpec, rng: &mut R) -> Result<FusionOutput> {
    let prog = fit_outcome(rwd, Arm::Control, spec, rng)?;
    let m = prog.predict(rct);
    let n = rct.len();
    let center = |v: &[f64]| -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| x - mean).collect()
    };
    let a_c = center(&rct.a);
    let covs: Vec<Vec<f64>> = MAIN_COVARIATES.iter().map(|c| center(rct.column(*c))).collect();
    let m_c = center(&m);

    let mut diag = FusionDiagnostics::default();
    // 0: full model; 1: without the score interaction; 2: without the score
    for stage in 0..3 {
        let with_score = stage < 2;
        let with_score_int = stage == 0;
        let p = 2 + 2 * covs.len() + with_score as usize + with_score_int as usize;
        let mut rows = Vec::with_capacity(n * p);
        for i in 0..n {
            rows.push(1.0);
            rows.push(a_c[i]);
            rows.extend(covs.iter().map(|c| c[i]));
            if with_score {
                rows.push(m_c[i]);
            }
            rows.extend(covs.iter().map(|c| a_c[i] * c[i]));
            if with_score_int {
                rows.push(a_c[i] * m_c[i]);
            }
        }
        let mut g = Gram::new(p);
        for (x, &yi) in rows.chunks_exact(p).zip(&rct.y) {
            g.add(x, yi, 1.0);
        }
        let Some(factor) = g.factor() else {
            diag.notes.push(
                if stage == 0 { "dropped prognostic-score interaction" } else { "dropped prognostic score" }.into(),
            );
            continue;
        };
        let beta = factor.solve(&g.xty);
        let resid: Vec<f64> = rows.chunks_exact(p).zip(&rct.y).map(|(x, yi)| yi - dot(x, &beta)).collect();
        let mut c = vec![0.0; p];
        c[1] = 1.0;
        // HC1 small-sample scaling
        let var = robust_linear_variance(&factor, &rows, p, &resid, &c) * n as f64 / (n - p) as f64;
        let est = AteEstimate::normal("procova", beta[1], var, n, Vec::new());
        diag.coefficients = beta;
        return Ok(FusionOutput::new(est, diag));
    }
    Err(Error::Collinear("trial covariates are collinear even without the prognostic score".into()))
}

/// Registry of estimators addressable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    RctOnly,
    RwdOnly,
    Oracle,
    MseMinimizing,
    AnchoredThresholding,
    TestThenPool,
    ShrinkS1,
    ShrinkS2,
    DoubleShrink,
    ExperimentGrounding,
    ConfoundingFunction,
    PowerLikelihood,
    ExperimentSelector,
    Procova,
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::RctOnly,
        Method::RwdOnly,
        Method::Oracle,
        Method::MseMinimizing,
        Method::AnchoredThresholding,
        Method::TestThenPool,
        Method::ShrinkS1,
        Method::ShrinkS2,
        Method::DoubleShrink,
        Method::ExperimentGrounding,
        Method::ConfoundingFunction,
        Method::PowerLikelihood,
        Method::ExperimentSelector,
        Method::Procova,
    ];

    /// Methods that trade bias for variance by borrowing the observational
    /// estimate.
    pub const TRADE_OFF: [Method; 6] = [
        Method::MseMinimizing,
        Method::PowerLikelihood,
        Method::ShrinkS1,
        Method::ShrinkS2,
        Method::ExperimentSelector,
        Method::TestThenPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RctOnly => "rct_only",
            Method::RwdOnly => "rwd_only",
            Method::Oracle => "oracle",
            Method::MseMinimizing => "mse_minimizing",
            Method::AnchoredThresholding => "anchored_thresholding",
            Method::TestThenPool => "test_then_pool",
            Method::ShrinkS1 => "shrink_s1",
            Method::ShrinkS2 => "shrink_s2",
            Method::DoubleShrink => "double_shrink",
            Method::ExperimentGrounding => "experiment_grounding",
            Method::ConfoundingFunction => "confounding_function",
            Method::PowerLikelihood => "power_likelihood",
            Method::ExperimentSelector => "experiment_selector",
            Method::Procova => "procova",
        }
    }

    pub fn index(self) -> usize {
        Method::ALL.iter().position(|m| *m == self).unwrap()
    }

    /// Interval from the shared bootstrap rather than analytic theory.
    pub fn bootstrapped(self) -> bool {
        matches!(
            self,
            Method::MseMinimizing
                | Method::AnchoredThresholding
                | Method::ShrinkS1
                | Method::ShrinkS2
                | Method::DoubleShrink
                | Method::ExperimentGrounding
                | Method::ConfoundingFunction
        )
    }

    pub fn needs_strata(self) -> bool {
        matches!(self, Method::ShrinkS1 | Method::ShrinkS2 | Method::DoubleShrink)
    }

    pub fn registry() -> String {
        Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }

    /// Parses a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let m: Method = tok.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod { name: s.to_string(), available: Method::registry() })
    }
}

/// Single-source estimates shared by the methods.
#[derive(Debug, Clone)]
pub struct Baselines {
    pub est_r: AteEstimate,
    pub est_o: AteEstimate,
    pub fit_o: AipwFit,
    /// Stratum estimates when requested; a failure is kept so only the
    /// stratified methods fail.
    pub strata: Option<std::result::Result<StrataEstimates, (String, String)>>,
}

impl Baselines {
    pub fn compute<R: RngCore>(
        rct: &Dataset,
        rwd: &Dataset,
        learners: &Learners,
        hyper: &FusionHyper,
        with_strata: bool,
        rng: &mut R,
    ) -> Result<Baselines> {
        let seed = rng.next_u64();
        let est_r = estimate_ate(rct, &learners.rct, &mut stream(seed, 0, 0))?.renamed("rct_only");
        let fit_o = fit_nuisances(rwd, &learners.rwd, Column::Y, &mut stream(seed, 0, 1))?;
        let est_o = fit_o.estimate(rwd, Column::Y)?.renamed("rwd_only");
        let strata = with_strata.then(|| {
            stratified_aipw(rct, rwd, &hyper.strata, &learners.rct, &learners.rwd, &mut stream(seed, 0, 2)).map_err(
                |e| match e {
                    Error::Stratum { stratum, reason } => (stratum, reason),
                    other => (String::from("?"), other.to_string()),
                },
            )
        });
        Ok(Baselines { est_r, est_o, fit_o, strata })
    }

    pub fn strata(&self) -> Result<&StrataEstimates> {
        match &self.strata {
            Some(Ok(s)) => Ok(s),
            Some(Err((stratum, reason))) => Err(Error::Stratum { stratum: stratum.clone(), reason: reason.clone() }),
            None => Err(Error::Config("stratum estimates were not computed".into())),
        }
    }
}

/// Point estimate (and analytic or posterior interval) of `method`.
pub fn point_estimate<R: RngCore>(
    method: Method,
    rct: &Dataset,
    rwd: &Dataset,
    base: &Baselines,
    learners: &Learners,
    hyper: &FusionHyper,
    rng: &mut R,
) -> Result<FusionOutput> {
    let (r, o) = (&base.est_r, &base.est_o);
    let gamma = hyper.gamma.unwrap_or_else(|| default_gamma(rct.len(), rwd.len()));
    let out = match method {
        Method::RctOnly => FusionOutput::new(r.clone(), FusionDiagnostics::default()),
        Method::RwdOnly => FusionOutput::new(o.clone(), FusionDiagnostics::default()),
        Method::Oracle => {
            let delta = hyper
                .oracle_delta
                .ok_or_else(|| Error::Config("oracle needs the true observational bias".into()))?;
            let est = inverse_variance_pool("oracle", r.tau_hat, r.var_hat, o.tau_hat - delta, o.var_hat, r.n + o.n);
            let wo = (1.0 / o.var_hat) / (1.0 / r.var_hat + 1.0 / o.var_hat);
            FusionOutput::new(
                est,
                FusionDiagnostics { learning_weight: Some(wo), bias_estimate: Some(delta), ..Default::default() },
            )
        }
        Method::MseMinimizing => mse_minimizing(r, o),
        Method::AnchoredThresholding => anchored_thresholding(r, o, gamma),
        Method::TestThenPool => test_then_pool(r, o, hyper.test_alpha),
        Method::ShrinkS1 => shrink_s1(base.strata()?, hyper.shrink_a)?,
        Method::ShrinkS2 => shrink_s2(base.strata()?)?,
        Method::DoubleShrink => double_shrink(base.strata()?, hyper.phi2, hyper.omega2)?,
        Method::ExperimentGrounding => experiment_grounding(rct, rwd)?,
        Method::ConfoundingFunction => confounding_function(rct, rwd, &base.fit_o.e)?,
        Method::PowerLikelihood => power_likelihood(rct, rwd, hyper, rng)?,
        Method::ExperimentSelector => experiment_selector(rct, rwd, hyper, learners, rng)?,
        Method::Procova => procova(rct, rwd, &learners.prognostic, rng)?,
    };
    let mut out = out;
    out.estimate.method = method.name().to_string();
    Ok(out)
}

/// Percentile intervals for several bootstrapped methods from one shared
/// set of resamples. Resampling is within sign strata whenever a
/// stratified method is requested.
pub fn shared_bootstrap<R: RngCore>(
    methods: &[Method],
    rct: &Dataset,
    rwd: &Dataset,
    learners: &Learners,
    hyper: &FusionHyper,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    if methods.is_empty() {
        return Ok(Vec::new());
    }
    let with_strata = methods.iter().any(|m| m.needs_strata());
    let resampling = if with_strata { Resampling::Stratified(hyper.strata) } else { Resampling::Simple };
    let draws = bootstrap_draws(
        |r, o, s: &mut Stream| {
            let base = Baselines::compute(r, o, learners, hyper, with_strata, s)?;
            methods
                .iter()
                .map(|m| point_estimate(*m, r, o, &base, learners, hyper, s).map(|out| out.estimate.tau_hat))
                .collect()
        },
        rct,
        rwd,
        hyper.bootstrap_b,
        resampling,
        rng,
    )?;
    Ok((0..methods.len())
        .map(|j| percentile_ci(&draws.iter().map(|d| d[j]).collect::<Vec<_>>(), 0.95))
        .collect())
}

/// Runs one method end to end, including its bootstrap interval.
pub fn run_method<R: RngCore>(
    method: Method,
    rct: &Dataset,
    rwd: &Dataset,
    learners: &Learners,
    hyper: &FusionHyper,
    rng: &mut R,
) -> Result<FusionOutput> {
    hyper.validate()?;
    let seed = rng.next_u64();
    let base = Baselines::compute(rct, rwd, learners, hyper, method.needs_strata(), &mut stream(seed, 0, 0))?;
    let mut out = point_estimate(method, rct, rwd, &base, learners, hyper, &mut stream(seed, 0, 1))?;
    if method.bootstrapped() {
        let ci = shared_bootstrap(&[method], rct, rwd, learners, hyper, &mut stream(seed, 0, 2))?;
        out.estimate.ci = ci[0];
    }
    Ok(out)
}
