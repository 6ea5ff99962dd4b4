//! Outcome-regression and propensity models.
//!
//! A small discrete super learner: every candidate in the library is scored
//! by K-fold cross-validation and the winner is refit on all rows.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, Gram};
use crate::synthgen::{expit, Column, Dataset};

pub const DEFAULT_PROPENSITY_BOUND: f64 = 0.025;
pub const IRLS_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 50;
pub const MIN_ARM_ROWS: usize = 10;

/// Candidate model families, ordered from simplest to richest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    MeanOnly,
    Linear,
    LinearPlusSquares,
    Logistic,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::MeanOnly => "mean-only",
            Family::Linear => "linear",
            Family::LinearPlusSquares => "linear-plus-squares",
            Family::Logistic => "logistic",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean-only" | "mean" => Ok(Family::MeanOnly),
            "linear" => Ok(Family::Linear),
            "linear-plus-squares" => Ok(Family::LinearPlusSquares),
            "logistic" => Ok(Family::Logistic),
            other => Err(Error::Parse(format!("unknown learner family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    /// Candidate families scored by cross-validation.
    pub library: Vec<Family>,
    pub covariates: Vec<Column>,
    pub cv_folds: usize,
    /// Propensity predictions are clipped to `[bound, 1 - bound]`.
    pub propensity_bound: f64,
}

impl LearnerSpec {
    pub fn outcome(covariates: Vec<Column>) -> Self {
        LearnerSpec {
            library: vec![Family::MeanOnly, Family::Linear, Family::LinearPlusSquares],
            covariates,
            cv_folds: 5,
            propensity_bound: DEFAULT_PROPENSITY_BOUND,
        }
    }

    pub fn propensity(covariates: Vec<Column>) -> Self {
        LearnerSpec {
            library: vec![Family::MeanOnly, Family::Logistic],
            covariates,
            cv_folds: 5,
            propensity_bound: DEFAULT_PROPENSITY_BOUND,
        }
    }

    /// A single family, no selection.
    pub fn single(family: Family, covariates: Vec<Column>) -> Self {
        LearnerSpec { library: vec![family], ..LearnerSpec::outcome(covariates) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if self.library.is_empty() {
            return Err(Error::Config("learner library is empty".into()));
        }
        if self.covariates.is_empty() && self.library.iter().any(|f| *f != Family::MeanOnly) {
            return Err(Error::Config("covariate set is empty".into()));
        }
        if !(self.propensity_bound > 0.0 && self.propensity_bound <= 0.5) {
            return Err(Error::Config("propensity bound must lie in (0, 0.5]".into()));
        }
        Ok(())
    }
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::outcome(vec![Column::X1, Column::X2, Column::X3, Column::X4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Control,
    Treated,
    Both,
}

impl Arm {
    fn contains(self, a: f64) -> bool {
        match self {
            Arm::Control => a == 0.0,
            Arm::Treated => a == 1.0,
            Arm::Both => true,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Arm::Control => "control",
            Arm::Treated => "treated",
            Arm::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitDiagnostics {
    /// Cross-validated loss per candidate; infinite when the candidate could
    /// not be fit.
    pub cv_loss: Vec<(Family, f64)>,
    /// A richer candidate was requested but the design was rank deficient.
    pub rank_fallback: bool,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFit {
    pub family: Family,
    pub covariates: Vec<Column>,
    pub coef: Vec<f64>,
    /// `Some(bound)` for propensity fits.
    pub bound: Option<f64>,
    pub diagnostics: FitDiagnostics,
}

/// Feature row for `family` (intercept first; squares of continuous
/// covariates last, so the linear basis is a prefix of the quadratic one).
fn basis_into(family: Family, covs: &[Column], data: &Dataset, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if family == Family::MeanOnly {
        return;
    }
    for c in covs {
        out.push(data.column(*c)[i]);
    }
    if family == Family::LinearPlusSquares {
        for c in covs.iter().filter(|c| !c.is_binary()) {
            let v = data.column(*c)[i];
            out.push(v * v);
        }
    }
}

fn basis_len(family: Family, covs: &[Column]) -> usize {
    match family {
        Family::MeanOnly => 1,
        Family::Linear | Family::Logistic => 1 + covs.len(),
        Family::LinearPlusSquares => 1 + covs.len() + covs.iter().filter(|c| !c.is_binary()).count(),
    }
}

impl NuisanceFit {
    /// Known propensity (e.g. a fixed trial randomization probability).
    pub fn constant_propensity(p: f64) -> Self {
        NuisanceFit {
            family: Family::MeanOnly,
            covariates: Vec::new(),
            coef: vec![logit(p)],
            bound: Some(DEFAULT_PROPENSITY_BOUND),
            diagnostics: FitDiagnostics { converged: true, ..Default::default() },
        }
    }

    /// Constant outcome prediction.
    pub fn constant_outcome(c: f64) -> Self {
        NuisanceFit {
            family: Family::MeanOnly,
            covariates: Vec::new(),
            coef: vec![c],
            bound: None,
            diagnostics: FitDiagnostics { converged: true, ..Default::default() },
        }
    }

    /// Linear predictor for row `i`.
    fn linear_predictor(&self, data: &Dataset, i: usize, buf: &mut Vec<f64>) -> f64 {
        let fam = if self.family == Family::Logistic { Family::Linear } else { self.family };
        basis_into(fam, &self.covariates, data, i, buf);
        buf.iter().zip(&self.coef).map(|(x, b)| x * b).sum()
    }

    fn finish(&self, eta: f64) -> f64 {
        match self.bound {
            Some(b) => expit(eta).clamp(b, 1.0 - b),
            None => eta,
        }
    }

    pub fn predict_row(&self, data: &Dataset, i: usize) -> f64 {
        let mut buf = Vec::with_capacity(self.coef.len());
        self.finish(self.linear_predictor(data, i, &mut buf))
    }

    pub fn predict(&self, data: &Dataset) -> Vec<f64> {
        let mut buf = Vec::with_capacity(self.coef.len());
        (0..data.len()).map(|i| self.finish(self.linear_predictor(data, i, &mut buf))).collect()
    }

    /// Unclipped propensity, for diagnostics.
    pub fn predict_raw(&self, data: &Dataset) -> Vec<f64> {
        let mut buf = Vec::with_capacity(self.coef.len());
        (0..data.len())
            .map(|i| {
                let eta = self.linear_predictor(data, i, &mut buf);
                if self.bound.is_some() {
                    expit(eta)
                } else {
                    eta
                }
            })
            .collect()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fold labels `0..k` in random order with balanced counts.
pub fn fold_labels<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    labels
}

fn arm_rows(data: &Dataset, arm: Arm) -> Vec<usize> {
    (0..data.len()).filter(|&i| arm.contains(data.a[i])).collect()
}

/// Outcome regression of `y` on the learner covariates within `arm`.
pub fn fit_outcome<R: Rng>(data: &Dataset, arm: Arm, spec: &LearnerSpec, rng: &mut R) -> Result<NuisanceFit> {
    fit_outcome_for(data, Column::Y, arm, spec, rng)
}

/// Outcome regression for an arbitrary response column (e.g. an NCO).
pub fn fit_outcome_for<R: Rng>(
    data: &Dataset,
    response: Column,
    arm: Arm,
    spec: &LearnerSpec,
    rng: &mut R,
) -> Result<NuisanceFit> {
    spec.validate()?;
    let rows = arm_rows(data, arm);
    if rows.is_empty() {
        return Err(Error::EmptyArm { arm: arm.name() });
    }
    if rows.len() < MIN_ARM_ROWS {
        return Err(Error::TooFewRows { need: MIN_ARM_ROWS, got: rows.len() });
    }
    let y = data.column(response);
    let mut library: Vec<Family> = spec.library.iter().copied().filter(|f| *f != Family::Logistic).collect();
    if !library.contains(&Family::MeanOnly) {
        library.insert(0, Family::MeanOnly);
    }
    library.sort();
    library.dedup();

    // Every candidate basis is a prefix of the richest one, so one Gram per
    // fold serves all candidates.
    let richest = *library.last().unwrap();
    let p_max = basis_len(richest, &spec.covariates);
    let k = spec.cv_folds.min(rows.len());
    let labels = fold_labels(rows.len(), k, rng);
    let mut folds = vec![Gram::new(p_max); k];
    let mut buf = Vec::with_capacity(p_max);
    for (j, &i) in rows.iter().enumerate() {
        basis_into(richest, &spec.covariates, data, i, &mut buf);
        folds[labels[j]].add(&buf, y[i], 1.0);
    }
    let total = folds.iter().skip(1).fold(folds[0].clone(), |acc, g| acc.plus(g));

    let mut diagnostics = FitDiagnostics { converged: true, ..Default::default() };
    let mut best: Option<(Family, f64)> = None;
    for &fam in &library {
        let p = basis_len(fam, &spec.covariates);
        let mut sse = 0.0;
        let mut ok = true;
        for fold in &folds {
            let train = total.minus(fold).leading(p);
            match train.solve() {
                Some(b) => sse += fold.leading(p).rss(&b),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        let loss = if ok { sse / rows.len() as f64 } else { f64::INFINITY };
        if !ok && fam != Family::MeanOnly {
            diagnostics.rank_fallback = true;
        }
        diagnostics.cv_loss.push((fam, loss));
        if loss.is_finite() && best.is_none_or(|(_, l)| loss < l) {
            best = Some((fam, loss));
        }
    }
    let (mut family, _) = best.ok_or_else(|| Error::RankDeficient("mean-only outcome model".into()))?;
    let coef = match total.leading(basis_len(family, &spec.covariates)).solve() {
        Some(b) => b,
        None => {
            diagnostics.rank_fallback = true;
            family = Family::MeanOnly;
            total.leading(1).solve().ok_or_else(|| Error::RankDeficient("mean-only outcome model".into()))?
        }
    };
    Ok(NuisanceFit { family, covariates: spec.covariates.clone(), coef, bound: None, diagnostics })
}

struct LogisticFit {
    coef: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Logistic regression by iteratively reweighted least squares on a
/// column-major design (`cols[0]` is the intercept).
fn irls(cols: &[Vec<f64>], a: &[f64], start: Option<&[f64]>) -> Option<LogisticFit> {
    let p = cols.len();
    let n = a.len();
    let mean = a.iter().sum::<f64>() / n as f64;
    if p == 1 {
        // intercept-only MLE is the logit of the treated share
        return Some(LogisticFit { coef: vec![logit(mean.clamp(1e-12, 1.0 - 1e-12))], iterations: 0, converged: true });
    }
    let mut beta = match start {
        Some(b) => b.to_vec(),
        None => {
            let mut b = vec![0.0; p];
            b[0] = logit(mean.clamp(1e-6, 1.0 - 1e-6));
            b
        }
    };
    let mut eta = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut wz = vec![0.0; n];
    let mut wx = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < IRLS_MAX_ITER {
        iterations += 1;
        linear_predictor(cols, &beta, &mut eta);
        for i in 0..n {
            let mu = expit(eta[i]);
            let wi = (mu * (1.0 - mu)).max(1e-10);
            w[i] = wi;
            wz[i] = wi * eta[i] + (a[i] - mu);
        }
        let mut g = Gram::new(p);
        for j in 0..p {
            for ((o, wi), xj) in wx.iter_mut().zip(&w).zip(&cols[j]) {
                *o = wi * xj;
            }
            for k in 0..=j {
                g.xtx[j * p + k] = dot(&wx, &cols[k]);
            }
            g.xty[j] = dot(&wz, &cols[j]);
        }
        let Some(next) = g.solve() else {
            // separation drove the weights to zero; keep the last iterate
            break;
        };
        let change = next.iter().zip(&beta).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        beta = next;
        if change < IRLS_TOL {
            converged = true;
            break;
        }
    }
    if beta.iter().all(|b| b.is_finite()) {
        Some(LogisticFit { coef: beta, iterations, converged })
    } else {
        None
    }
}

fn linear_predictor(cols: &[Vec<f64>], beta: &[f64], out: &mut [f64]) {
    out.fill(beta[0]);
    for (c, b) in cols.iter().zip(beta).skip(1) {
        for (o, x) in out.iter_mut().zip(c) {
            *o += b * x;
        }
    }
}

fn log_loss(cols: &[Vec<f64>], a: &[f64], beta: &[f64]) -> f64 {
    let mut eta = vec![0.0; a.len()];
    linear_predictor(&cols[..beta.len()], beta, &mut eta);
    eta.iter()
        .zip(a)
        .map(|(&e, &ai)| {
            let mu = expit(e).clamp(1e-12, 1.0 - 1e-12);
            -(ai * mu.ln() + (1.0 - ai) * (1.0 - mu).ln())
        })
        .sum()
}

/// Propensity model `P(a = 1 | x)`, selected between an intercept-only and a
/// main-effects logistic regression by cross-validated log loss. Predictions
/// are clipped to `[bound, 1 - bound]`.
pub fn fit_propensity<R: Rng>(data: &Dataset, spec: &LearnerSpec, rng: &mut R) -> Result<NuisanceFit> {
    spec.validate()?;
    let n = data.len();
    let treated = data.treated_count();
    if treated == 0 || treated == n {
        return Err(Error::SingleArm(n));
    }
    let mut library: Vec<Family> = spec
        .library
        .iter()
        .map(|f| if *f == Family::MeanOnly { Family::MeanOnly } else { Family::Logistic })
        .collect();
    if !library.contains(&Family::MeanOnly) {
        library.insert(0, Family::MeanOnly);
    }
    library.sort();
    library.dedup();

    let p_full = basis_len(Family::Logistic, &spec.covariates);
    let mut cols = vec![vec![1.0; n]];
    cols.extend(spec.covariates.iter().map(|c| data.column(*c).to_vec()));
    let take = |rows: &[usize], p: usize| -> (Vec<Vec<f64>>, Vec<f64>) {
        let d = cols[..p].iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect();
        (d, rows.iter().map(|&i| data.a[i]).collect())
    };
    debug_assert_eq!(cols.len(), p_full);

    let all: Vec<usize> = (0..n).collect();
    let full: Vec<Option<LogisticFit>> = library
        .iter()
        .map(|&fam| {
            let p = basis_len(fam, &spec.covariates);
            let (d, a) = take(&all, p);
            irls(&d, &a, None)
        })
        .collect();

    let mut diagnostics = FitDiagnostics::default();
    let mut best: Option<(usize, f64)> = None;
    if library.len() > 1 {
        let k = spec.cv_folds.min(n);
        let labels = fold_labels(n, k, rng);
        for (c, &fam) in library.iter().enumerate() {
            let p = basis_len(fam, &spec.covariates);
            let mut loss = 0.0;
            let mut ok = full[c].is_some();
            for v in 0..k {
                if !ok {
                    break;
                }
                let train: Vec<usize> = (0..n).filter(|&i| labels[i] != v).collect();
                let test: Vec<usize> = (0..n).filter(|&i| labels[i] == v).collect();
                let (dt, at) = take(&train, p);
                let (dv, av) = take(&test, p);
                // warm start from the full-data fit
                match irls(&dt, &at, full[c].as_ref().map(|f| f.coef.as_slice())) {
                    Some(fit) => loss += log_loss(&dv, &av, &fit.coef),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            let loss = if ok { loss / n as f64 } else { f64::INFINITY };
            if !ok {
                diagnostics.rank_fallback = true;
            }
            diagnostics.cv_loss.push((fam, loss));
            if loss.is_finite() && best.is_none_or(|(_, l)| loss < l) {
                best = Some((c, loss));
            }
        }
    } else if full[0].is_some() {
        best = Some((0, f64::NAN));
    }
    let (c, _) = best.ok_or_else(|| Error::RankDeficient("propensity model".into()))?;
    let family = library[c];
    let fit = full.into_iter().nth(c).flatten().ok_or_else(|| Error::RankDeficient("propensity model".into()))?;
    diagnostics.iterations = fit.iterations;
    diagnostics.converged = fit.converged;
    Ok(NuisanceFit {
        family,
        covariates: if family == Family::MeanOnly { Vec::new() } else { spec.covariates.clone() },
        coef: fit.coef,
        bound: Some(spec.propensity_bound),
        diagnostics,
    })
}

impl Gram {
    /// Leading `k x k` block (the system for a prefix of the basis).
    pub fn leading(&self, k: usize) -> Gram {
        let p = self.p;
        let mut xtx = Vec::with_capacity(k * k);
        for i in 0..k {
            xtx.extend_from_slice(&self.xtx[i * p..i * p + k]);
        }
        Gram {
            p: k,
            xtx,
            xty: self.xty[..k].to_vec(),
            yty: self.yty,
            sum_w: self.sum_w,
            rows: self.rows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, stream, ScenarioConfig, Source};

    fn toy(n: usize, seed: u64) -> Dataset {
        let cfg = ScenarioConfig { n_r: n, ..Default::default() };
        generate(&cfg, Source::Rct, &mut stream(seed, 0, 0)).unwrap()
    }

    #[test]
    fn constant_outcome_selects_mean() {
        let mut d = toy(200, 1);
        d.y = vec![3.25; d.len()];
        let fit = fit_outcome(&d, Arm::Both, &LearnerSpec::default(), &mut stream(1, 0, 9)).unwrap();
        assert_eq!(fit.family, Family::MeanOnly);
        for v in fit.predict(&d) {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_linear_slope() {
        let mut d = toy(200, 2);
        d.y = d.x1.iter().map(|x| 2.0 * x).collect();
        let spec = LearnerSpec::outcome(vec![Column::X1]);
        let fit = fit_outcome(&d, Arm::Both, &spec, &mut stream(2, 0, 9)).unwrap();
        assert_ne!(fit.family, Family::MeanOnly);
        assert!((fit.coef[1] - 2.0).abs() < 1e-8, "{:?}", fit.coef);
    }

    #[test]
    fn squares_beat_linear_on_curvature() {
        let mut d = toy(2000, 3);
        let mut rng = stream(3, 0, 1);
        d.y = d.x4.iter().map(|x| x * x + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let spec = LearnerSpec::outcome(vec![Column::X4]);
        let fit = fit_outcome(&d, Arm::Both, &spec, &mut stream(3, 0, 9)).unwrap();
        let loss = |f: Family| fit.diagnostics.cv_loss.iter().find(|(g, _)| *g == f).unwrap().1;
        assert!(loss(Family::LinearPlusSquares) < loss(Family::Linear));
        assert_eq!(fit.family, Family::LinearPlusSquares);
    }

    #[test]
    fn selected_candidate_never_worse_than_mean() {
        let d = toy(300, 4);
        let fit = fit_outcome(&d, Arm::Treated, &LearnerSpec::default(), &mut stream(4, 0, 9)).unwrap();
        let losses = &fit.diagnostics.cv_loss;
        let mean = losses.iter().find(|(f, _)| *f == Family::MeanOnly).unwrap().1;
        let chosen = losses.iter().find(|(f, _)| *f == fit.family).unwrap().1;
        assert!(chosen <= mean);
    }

    #[test]
    fn empty_arm_is_an_error() {
        let mut d = toy(50, 5);
        d.a = vec![0.0; d.len()];
        let err = fit_outcome(&d, Arm::Treated, &LearnerSpec::default(), &mut stream(5, 0, 9)).unwrap_err();
        assert!(matches!(err, Error::EmptyArm { .. }));
        let err = fit_propensity(&d, &LearnerSpec::propensity(vec![Column::X1]), &mut stream(5, 0, 9)).unwrap_err();
        assert!(matches!(err, Error::SingleArm(_)));
    }

    #[test]
    fn duplicate_covariate_falls_back() {
        let d = toy(100, 6);
        let spec = LearnerSpec::outcome(vec![Column::X1, Column::X1]);
        let fit = fit_outcome(&d, Arm::Both, &spec, &mut stream(6, 0, 9)).unwrap();
        assert_eq!(fit.family, Family::MeanOnly);
        assert!(fit.diagnostics.rank_fallback);
    }

    #[test]
    fn intercept_only_propensity_matches_fraction() {
        let d = toy(400, 7);
        let spec = LearnerSpec { library: vec![Family::MeanOnly], ..LearnerSpec::propensity(vec![]) };
        let fit = fit_propensity(&d, &spec, &mut stream(7, 0, 9)).unwrap();
        let frac = d.treated_count() as f64 / d.len() as f64;
        assert!((fit.predict_row(&d, 0) - frac).abs() < 1e-9);
    }

    #[test]
    fn clipping_at_bound() {
        let mut fit = NuisanceFit::constant_propensity(0.003);
        let d = toy(20, 8);
        assert!((fit.predict_row(&d, 0) - 0.025).abs() < 1e-15);
        fit.coef[0] = logit(0.999);
        assert!((fit.predict_row(&d, 0) - 0.975).abs() < 1e-15);
    }

    #[test]
    fn separation_is_capped_and_clipped() {
        let mut d = toy(100, 9);
        d.a = d.x1.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        let spec = LearnerSpec { library: vec![Family::Logistic], ..LearnerSpec::propensity(vec![Column::X1]) };
        let fit = fit_propensity(&d, &spec, &mut stream(9, 0, 9)).unwrap();
        assert!(fit.diagnostics.iterations <= IRLS_MAX_ITER);
        for p in fit.predict(&d) {
            assert!((0.025..=0.975).contains(&p));
        }
    }

    #[test]
    fn refit_is_deterministic() {
        let d = toy(300, 10);
        let spec = LearnerSpec::propensity(vec![Column::X1, Column::X2, Column::X3]);
        let a = fit_propensity(&d, &spec, &mut stream(10, 0, 9)).unwrap();
        let b = fit_propensity(&d, &spec, &mut stream(10, 0, 9)).unwrap();
        assert_eq!(a, b);
    }
}
