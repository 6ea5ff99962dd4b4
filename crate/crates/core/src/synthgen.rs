//! Synthetic RCT / real-world-data generator.
//!
//! Potential outcomes follow a marginal structural model in `x3` and the
//! hidden confounders `u1 + u2`; a latent trivariate Gaussian copula couples
//! `x1`, `x2` and the outcome residual. The observational arm assignment
//! loads on the hidden confounders with strength `psi`.
//!
//! Every normal is parameterized by its variance.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Random stream used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Deterministic substream for `(seed, index, tag)`.
///
/// Streams depend only on their coordinates, so results do not change with
/// the number of worker threads.
pub fn stream(seed: u64, index: u64, tag: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(64).wrapping_add(tag));
    rng
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Copula correlation implied by a logit: `2 expit(l) - 1`.
pub fn logit_to_rho(logit: f64) -> f64 {
    2.0 * expit(logit) - 1.0
}

/// `E[X3]`; the effect modifier is a centered normal.
pub const X3_MEAN: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Rct,
    Rwd,
}

impl Source {
    /// Value of the source flag `s` (1 = trial, 0 = observational).
    pub fn flag(self) -> f64 {
        match self {
            Source::Rct => 1.0,
            Source::Rwd => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsmCoeffs {
    pub intercept: f64,
    pub beta_a: f64,
    pub beta_ax3: f64,
    pub beta_x3: f64,
}

impl Default for MsmCoeffs {
    fn default() -> Self {
        MsmCoeffs { intercept: 0.5, beta_a: 0.2, beta_ax3: 0.1, beta_x3: 1.0 }
    }
}

/// Logistic coefficients of the observational treatment assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropensityCoeffs {
    pub intercept: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

impl Default for PropensityCoeffs {
    fn default() -> Self {
        PropensityCoeffs { intercept: -0.5, x1: 1.0, x2: 1.0, x3: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n_r: usize,
    pub n_o: usize,
    pub psi: f64,
    pub alpha_r: f64,
    pub alpha_o: f64,
    /// Logits of the copula correlations `(x1,x2)`, `(x1,y)`, `(x2,y)`.
    pub copula_logits: [f64; 3],
    pub msm: MsmCoeffs,
    pub rwd_ps: PropensityCoeffs,
    /// Variances of `u1` and `u2`.
    pub u_vars: (f64, f64),
    pub nco_sd: f64,
    pub seed: u64,
    pub reps: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_r: 300,
            n_o: 1200,
            psi: 0.0,
            alpha_r: 0.0,
            alpha_o: 0.0,
            copula_logits: [0.1, 2.0, 1.0],
            msm: MsmCoeffs::default(),
            rwd_ps: PropensityCoeffs::default(),
            u_vars: (1.0, 0.1),
            nco_sd: std::f64::consts::SQRT_2,
            seed: 20240601,
            reps: 300,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_r < 20 || self.n_o < 20 {
            return Err(Error::Config(format!(
                "n_r and n_o must be at least 20 (got {}, {})",
                self.n_r, self.n_o
            )));
        }
        if self.reps < 1 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if !(self.u_vars.0 > 0.0 && self.u_vars.1 > 0.0) {
            return Err(Error::Config(format!("u_vars must be positive (got {:?})", self.u_vars)));
        }
        if !(self.nco_sd > 0.0) {
            return Err(Error::Config("nco_sd must be positive".into()));
        }
        self.copula_factor().map(|_| ())
    }

    /// Latent correlation matrix of `(z1, z2, z3)`.
    pub fn copula_matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.copula_logits.map(logit_to_rho);
        [[1.0, a, b], [a, 1.0, c], [b, c, 1.0]]
    }

    /// Lower Cholesky factor of the copula matrix.
    pub fn copula_factor(&self) -> Result<[[f64; 3]; 3]> {
        let m = self.copula_matrix();
        let mut l = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    let d = m[i][i] - s;
                    if !(d > 1e-12) {
                        return Err(Error::Config(format!(
                            "copula correlation matrix is not positive definite for logits {:?}",
                            self.copula_logits
                        )));
                    }
                    l[i][i] = d.sqrt();
                } else {
                    l[i][j] = (m[i][j] - s) / l[j][j];
                }
            }
        }
        Ok(l)
    }

    pub fn sample_size(&self, source: Source) -> usize {
        match source {
            Source::Rct => self.n_r,
            Source::Rwd => self.n_o,
        }
    }

    pub fn alpha(&self, source: Source) -> f64 {
        match source {
            Source::Rct => self.alpha_r,
            Source::Rwd => self.alpha_o,
        }
    }
}

/// Analytic average treatment effect `beta_a + beta_ax3 E[X3]`.
pub fn true_ate(cfg: &ScenarioConfig) -> f64 {
    cfg.msm.beta_a + cfg.msm.beta_ax3 * X3_MEAN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Column {
    X1,
    X2,
    X3,
    X4,
    U1,
    U2,
    A,
    Y,
    Y0,
    Y1,
    N1,
    N2,
    N3,
    S,
}

impl Column {
    pub const ALL: [Column; 14] = [
        Column::X1,
        Column::X2,
        Column::X3,
        Column::X4,
        Column::U1,
        Column::U2,
        Column::A,
        Column::Y,
        Column::Y0,
        Column::Y1,
        Column::N1,
        Column::N2,
        Column::N3,
        Column::S,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Column::X1 => "x1",
            Column::X2 => "x2",
            Column::X3 => "x3",
            Column::X4 => "x4",
            Column::U1 => "u1",
            Column::U2 => "u2",
            Column::A => "a",
            Column::Y => "y",
            Column::Y0 => "y0",
            Column::Y1 => "y1",
            Column::N1 => "n1",
            Column::N2 => "n2",
            Column::N3 => "n3",
            Column::S => "s",
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Column::X2 | Column::A | Column::S)
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Column {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Column::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownColumn(s.to_string()))
    }
}

/// Covariates plus the latent outcome residual `z3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    pub x4: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub z3: Vec<f64>,
}

impl Covariates {
    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }
}

/// Covariates with both potential outcomes and the negative-control outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub covariates: Covariates,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub n1: Vec<f64>,
    pub n2: Vec<f64>,
    pub n3: Vec<f64>,
}

/// Column-oriented table of units. Binary columns hold 0.0 / 1.0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    pub x4: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub n1: Vec<f64>,
    pub n2: Vec<f64>,
    pub n3: Vec<f64>,
    pub s: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn column(&self, c: Column) -> &[f64] {
        match c {
            Column::X1 => &self.x1,
            Column::X2 => &self.x2,
            Column::X3 => &self.x3,
            Column::X4 => &self.x4,
            Column::U1 => &self.u1,
            Column::U2 => &self.u2,
            Column::A => &self.a,
            Column::Y => &self.y,
            Column::Y0 => &self.y0,
            Column::Y1 => &self.y1,
            Column::N1 => &self.n1,
            Column::N2 => &self.n2,
            Column::N3 => &self.n3,
            Column::S => &self.s,
        }
    }

    fn column_mut(&mut self, c: Column) -> &mut Vec<f64> {
        match c {
            Column::X1 => &mut self.x1,
            Column::X2 => &mut self.x2,
            Column::X3 => &mut self.x3,
            Column::X4 => &mut self.x4,
            Column::U1 => &mut self.u1,
            Column::U2 => &mut self.u2,
            Column::A => &mut self.a,
            Column::Y => &mut self.y,
            Column::Y0 => &mut self.y0,
            Column::Y1 => &mut self.y1,
            Column::N1 => &mut self.n1,
            Column::N2 => &mut self.n2,
            Column::N3 => &mut self.n3,
            Column::S => &mut self.s,
        }
    }

    /// Builds a dataset from observed columns only; latent and counterfactual
    /// columns are filled with NaN. Intended for callers supplying real data.
    pub fn from_observed(
        x: [&[f64]; 4],
        a: &[f64],
        y: &[f64],
        source: Source,
    ) -> Result<Dataset> {
        let n = y.len();
        if a.len() != n || x.iter().any(|c| c.len() != n) {
            return Err(Error::Config("all columns must have the same length".into()));
        }
        if a.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("treatment must be 0 or 1".into()));
        }
        let nan = vec![f64::NAN; n];
        Ok(Dataset {
            x1: x[0].to_vec(),
            x2: x[1].to_vec(),
            x3: x[2].to_vec(),
            x4: x[3].to_vec(),
            u1: nan.clone(),
            u2: nan.clone(),
            a: a.to_vec(),
            y: y.to_vec(),
            y0: nan.clone(),
            y1: nan.clone(),
            n1: nan.clone(),
            n2: nan.clone(),
            n3: nan,
            s: vec![source.flag(); n],
        })
    }

    /// Rows at `idx`, in order (repeats allowed).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::default();
        for c in Column::ALL {
            let src = self.column(c);
            *out.column_mut(c) = idx.iter().map(|&i| src[i]).collect();
        }
        out
    }

    /// Row-wise concatenation (explicit pooling).
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut out = self.clone();
        for c in Column::ALL {
            out.column_mut(c).extend_from_slice(other.column(c));
        }
        out
    }

    /// Rows where `keep` holds.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.subset(&idx)
    }

    pub fn treated_count(&self) -> usize {
        self.a.iter().filter(|&&v| v == 1.0).count()
    }

    /// Source when the flag is constant, `None` for pooled data.
    pub fn source(&self) -> Option<Source> {
        let first = *self.s.first()?;
        if self.s.iter().all(|&v| v == first) {
            Some(if first == 1.0 { Source::Rct } else { Source::Rwd })
        } else {
            None
        }
    }

    pub fn mean(&self, c: Column) -> f64 {
        let col = self.column(c);
        col.iter().sum::<f64>() / col.len() as f64
    }

    /// Writes the observed columns as CSV. With `debug_oracle` the latent
    /// confounders and both potential outcomes are appended.
    pub fn write_csv<W: Write>(&self, mut w: W, debug_oracle: bool) -> Result<()> {
        let mut cols = vec![
            Column::X1,
            Column::X2,
            Column::X3,
            Column::X4,
            Column::A,
            Column::Y,
            Column::N1,
            Column::N2,
            Column::N3,
            Column::S,
        ];
        if debug_oracle {
            cols.extend([Column::U1, Column::U2, Column::Y0, Column::Y1]);
        }
        let header: Vec<&str> = cols.iter().map(|c| c.name()).collect();
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            for (k, c) in cols.iter().enumerate() {
                if k > 0 {
                    line.push(',');
                }
                let v = self.column(*c)[i];
                if c.is_binary() {
                    line.push_str(if v == 1.0 { "1" } else { "0" });
                } else {
                    line.push_str(&format!("{v}"));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Draws covariates, hidden confounders and the copula residual `z3`.
///
/// `(z1, z2, z3)` is trivariate normal with the copula correlations;
/// `x1 = z1` and `x2 = 1{z2 > 0}`.
pub fn sample_covariates<R: Rng>(cfg: &ScenarioConfig, n: usize, rng: &mut R) -> Result<Covariates> {
    if n == 0 {
        return Err(Error::Config("sample size must be positive".into()));
    }
    let l = cfg.copula_factor()?;
    let sd_u1 = cfg.u_vars.0.sqrt();
    let sd_u2 = cfg.u_vars.1.sqrt();
    let mut c = Covariates {
        x1: Vec::with_capacity(n),
        x2: Vec::with_capacity(n),
        x3: Vec::with_capacity(n),
        x4: Vec::with_capacity(n),
        u1: Vec::with_capacity(n),
        u2: Vec::with_capacity(n),
        z3: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let e: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let z1 = l[0][0] * e[0];
        let z2 = l[1][0] * e[0] + l[1][1] * e[1];
        let z3 = l[2][0] * e[0] + l[2][1] * e[1] + l[2][2] * e[2];
        c.x1.push(z1);
        c.x2.push(if z2 > 0.0 { 1.0 } else { 0.0 });
        c.z3.push(z3);
        c.x3.push(rng.sample(StandardNormal));
        c.x4.push(rng.sample(StandardNormal));
        c.u1.push(sd_u1 * rng.sample::<f64, _>(StandardNormal));
        c.u2.push(sd_u2 * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(c)
}

/// Mean of `Y(a)` given the covariates and hidden confounders, excluding the
/// copula residual.
pub fn outcome_mean(cfg: &ScenarioConfig, alpha: f64, a: f64, x3: f64, x4: f64, u: f64) -> f64 {
    let m = &cfg.msm;
    m.intercept + m.beta_a * a + m.beta_ax3 * a * x3 + m.beta_x3 * x3 + alpha * x4 * x4 + u
}

/// Materializes both potential outcomes (sharing the residual `z3`) and the
/// three negative-control outcomes.
pub fn sample_outcomes<R: Rng>(
    cfg: &ScenarioConfig,
    covariates: Covariates,
    source: Source,
    rng: &mut R,
) -> Outcomes {
    let n = covariates.len();
    let alpha = cfg.alpha(source);
    let c = &covariates;
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut n1 = Vec::with_capacity(n);
    let mut n2 = Vec::with_capacity(n);
    let mut n3 = Vec::with_capacity(n);
    for i in 0..n {
        let u = c.u1[i] + c.u2[i];
        y0.push(outcome_mean(cfg, alpha, 0.0, c.x3[i], c.x4[i], u) + c.z3[i]);
        y1.push(outcome_mean(cfg, alpha, 1.0, c.x3[i], c.x4[i], u) + c.z3[i]);
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let e3: f64 = rng.sample(StandardNormal);
        n1.push(1.0 + c.x2[i] + c.x3[i] + c.u1[i] + cfg.nco_sd * e1);
        n2.push(1.0 + c.x2[i] + c.x3[i] + c.u2[i] + cfg.nco_sd * e2);
        n3.push(cfg.nco_sd * e3);
    }
    Outcomes { covariates, y0, y1, n1, n2, n3 }
}

/// Probability of treatment in the observational source.
pub fn rwd_propensity(cfg: &ScenarioConfig, x1: f64, x2: f64, x3: f64, u: f64) -> f64 {
    let p = &cfg.rwd_ps;
    expit(p.intercept + p.x1 * x1 + p.x2 * x2 + p.x3 * x3 + cfg.psi * u)
}

/// Assigns treatment (fair coin in the trial, confounded logistic in the
/// observational source) and reveals the matching potential outcome.
pub fn assign_treatment<R: Rng>(
    cfg: &ScenarioConfig,
    outcomes: Outcomes,
    source: Source,
    rng: &mut R,
) -> Dataset {
    let Outcomes { covariates: c, y0, y1, n1, n2, n3 } = outcomes;
    let n = c.len();
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let p = match source {
            Source::Rct => 0.5,
            Source::Rwd => rwd_propensity(cfg, c.x1[i], c.x2[i], c.x3[i], c.u1[i] + c.u2[i]),
        };
        let treated = rng.random::<f64>() < p;
        a.push(if treated { 1.0 } else { 0.0 });
        y.push(if treated { y1[i] } else { y0[i] });
    }
    Dataset {
        x1: c.x1,
        x2: c.x2,
        x3: c.x3,
        x4: c.x4,
        u1: c.u1,
        u2: c.u2,
        a,
        y,
        y0,
        y1,
        n1,
        n2,
        n3,
        s: vec![source.flag(); n],
    }
}

/// Full dataset for one source.
pub fn generate<R: Rng>(cfg: &ScenarioConfig, source: Source, rng: &mut R) -> Result<Dataset> {
    let covs = sample_covariates(cfg, cfg.sample_size(source), rng)?;
    let outcomes = sample_outcomes(cfg, covs, source, rng);
    Ok(assign_treatment(cfg, outcomes, source, rng))
}

/// Trial and observational datasets of replication `rep`.
pub fn replication(cfg: &ScenarioConfig, rep: u64) -> Result<(Dataset, Dataset)> {
    let rct = generate(cfg, Source::Rct, &mut stream(cfg.seed, rep, 0))?;
    let rwd = generate(cfg, Source::Rwd, &mut stream(cfg.seed, rep, 1))?;
    Ok((rct, rwd))
}
