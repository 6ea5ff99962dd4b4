//! Monte Carlo benchmark: replications over a grid of confounding strengths
//! (and outcome curvatures), comparison metrics relative to the trial-only
//! estimator, and CSV / SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimate::SignSplit;
use crate::fusion::{point_estimate, shared_bootstrap, Baselines, FusionHyper, Learners, Method};
use crate::synthgen::{replication, stream, true_ate, ScenarioConfig};

/// Offset separating the oracle pre-pass streams from the cell streams.
const ORACLE_SEED_OFFSET: u64 = 0x05EE_D0F0_AC1E;
pub const ORACLE_REPS_FACTOR: usize = 10;

/// Default confounding strengths. Chosen so that the relative bias of the
/// observational estimate runs from 0 to about 10 trial standard
/// deviations, with several points in the 2–5 range.
pub const DEFAULT_PSI_GRID: [f64; 8] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.8, 1.5];

/// `(alpha_o, alpha_r)` cells of the prognostic-score table.
pub const DEFAULT_ALPHA_PAIRS: [(f64, f64); 4] = [(0.0, 0.0), (2.0, 2.0), (0.5, 2.0), (0.0, 2.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub psi: Vec<f64>,
    /// `(alpha_o, alpha_r)` pairs, each run at `psi = 0` with PROCOVA only
    /// (skipped unless PROCOVA is among the methods).
    pub alpha_pairs: Vec<(f64, f64)>,
    pub methods: Vec<Method>,
    /// Base scenario (sample sizes, seed, reps, coefficients).
    pub scenario: ScenarioConfig,
    pub hyper: FusionHyper,
    pub learners: Learners,
    pub threads: Option<usize>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            psi: DEFAULT_PSI_GRID.to_vec(),
            alpha_pairs: DEFAULT_ALPHA_PAIRS.to_vec(),
            methods: Method::ALL.to_vec(),
            scenario: ScenarioConfig::default(),
            hyper: FusionHyper::default(),
            learners: Learners::default(),
            threads: None,
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods".into()));
        }
        if self.psi.is_empty() {
            return Err(Error::Config("psi grid is empty".into()));
        }
        if self.psi.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("psi grid must be strictly ascending".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.scenario.validate()?;
        self.hyper.validate()
    }

    /// Settings for reduced CI runs: a third of the replications and
    /// `B = 100`.
    pub fn fast(mut self) -> Self {
        self.scenario.reps = (self.scenario.reps / 3).max(1);
        self.hyper.bootstrap_b = 100;
        self
    }
}

/// One method's output on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRecord {
    pub tau: f64,
    pub var: f64,
    pub ci: (f64, f64),
    pub weight: Option<f64>,
    pub stratum_estimates: Vec<f64>,
}

/// Everything kept from one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub rct: Option<MethodRecord>,
    pub rwd: Option<MethodRecord>,
    /// Trial stratum estimates (when a stratified method ran).
    pub strata_r: Option<Vec<f64>>,
    /// Indexed like the cell's method list.
    pub methods: Vec<std::result::Result<MethodRecord, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: Method,
    pub psi: f64,
    pub alpha_o: f64,
    pub alpha_r: f64,
    pub r_bias: f64,
    pub r_rmse: f64,
    pub coverage: f64,
    pub rel_ci_length: f64,
    pub mean_weight: Option<f64>,
    pub failures: usize,
    pub reps: usize,
    /// Monte Carlo mean of `tau_hat - truth`.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub scenario: ScenarioConfig,
    pub truth: f64,
    pub stratum_truth: Vec<f64>,
    pub methods: Vec<Method>,
    pub reps: Vec<RepOutcome>,
    pub rows: Vec<MetricsRow>,
    /// Observational bias used by the oracle, if it ran.
    pub oracle_delta: Option<f64>,
}

fn record(out: &crate::fusion::FusionOutput) -> MethodRecord {
    MethodRecord {
        tau: out.estimate.tau_hat,
        var: out.estimate.var_hat,
        ci: out.estimate.ci,
        weight: out.diagnostics.learning_weight,
        stratum_estimates: out.diagnostics.stratum_estimates.clone(),
    }
}

/// Stream tags within a replication.
const TAG_BASELINES: u64 = 2;
const TAG_BOOTSTRAP: u64 = 3;
const TAG_METHOD: u64 = 8;

fn run_replication(cfg: &ScenarioConfig, rep: u64, methods: &[Method], hyper: &FusionHyper, learners: &Learners) -> RepOutcome {
    let fail_all = |msg: String| RepOutcome {
        rct: None,
        rwd: None,
        strata_r: None,
        methods: methods.iter().map(|_| Err(msg.clone())).collect(),
    };
    let (rct, rwd) = match replication(cfg, rep) {
        Ok(d) => d,
        Err(e) => return fail_all(e.to_string()),
    };
    let with_strata = methods.iter().any(|m| m.needs_strata());
    let base = match Baselines::compute(&rct, &rwd, learners, hyper, with_strata, &mut stream(cfg.seed, rep, TAG_BASELINES)) {
        Ok(b) => b,
        Err(e) => return fail_all(e.to_string()),
    };
    let mut results: Vec<std::result::Result<MethodRecord, String>> = methods
        .iter()
        .map(|m| {
            point_estimate(*m, &rct, &rwd, &base, learners, hyper, &mut stream(cfg.seed, rep, TAG_METHOD + m.index() as u64))
                .map(|o| record(&o))
                .map_err(|e| e.to_string())
        })
        .collect();
    let boot: Vec<usize> = (0..methods.len()).filter(|&j| methods[j].bootstrapped() && results[j].is_ok()).collect();
    if !boot.is_empty() {
        let list: Vec<Method> = boot.iter().map(|&j| methods[j]).collect();
        match shared_bootstrap(&list, &rct, &rwd, learners, hyper, &mut stream(cfg.seed, rep, TAG_BOOTSTRAP)) {
            Ok(cis) => {
                for (&j, ci) in boot.iter().zip(cis) {
                    if let Ok(r) = &mut results[j] {
                        r.ci = ci;
                    }
                }
            }
            Err(e) => {
                for &j in &boot {
                    results[j] = Err(e.to_string());
                }
            }
        }
    }
    let rec = |e: &crate::estimate::AteEstimate| MethodRecord {
        tau: e.tau_hat,
        var: e.var_hat,
        ci: e.ci,
        weight: None,
        stratum_estimates: Vec::new(),
    };
    RepOutcome {
        rct: Some(rec(&base.est_r)),
        rwd: Some(rec(&base.est_o)),
        strata_r: base.strata.as_ref().and_then(|s| s.as_ref().ok()).map(|s| s.tau_r.clone()),
        methods: results,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0)).sqrt()
}

/// Monte Carlo bias `E[tau_o] - truth` of the observational estimate from a
/// dedicated pre-pass with independent streams.
pub fn oracle_delta(cfg: &ScenarioConfig, reps: usize, learners: &Learners) -> Result<f64> {
    let pre = ScenarioConfig { seed: cfg.seed.wrapping_add(ORACLE_SEED_OFFSET), reps, ..cfg.clone() };
    let taus: Vec<Option<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(pre.seed, rep, 1);
            let rwd = crate::synthgen::generate(&pre, crate::synthgen::Source::Rwd, &mut rng).ok()?;
            crate::estimate::estimate_ate(&rwd, &learners.rwd, &mut stream(pre.seed, rep, TAG_BASELINES)).ok().map(|e| e.tau_hat)
        })
        .collect();
    let ok: Vec<f64> = taus.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::Config("oracle pre-pass produced no estimates".into()));
    }
    Ok(mean(&ok) - true_ate(cfg))
}

/// Runs all replications of one scenario and aggregates the metrics.
pub fn run_cell(cfg: &ScenarioConfig, methods: &[Method], hyper: &FusionHyper, learners: &Learners) -> Result<Cell> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods".into()));
    }
    let mut hyper = hyper.clone();
    hyper.quadratic_outcome = cfg.alpha_r != 0.0 || cfg.alpha_o != 0.0;
    if methods.contains(&Method::Oracle) && hyper.oracle_delta.is_none() {
        hyper.oracle_delta = Some(oracle_delta(cfg, cfg.reps * ORACLE_REPS_FACTOR, learners)?);
    }
    let reps: Vec<RepOutcome> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep, methods, &hyper, learners))
        .collect();
    let truth = true_ate(cfg);
    let rows = aggregate(cfg, truth, methods, &reps)?;
    Ok(Cell {
        scenario: cfg.clone(),
        truth,
        stratum_truth: hyper.strata.true_effects(cfg),
        methods: methods.to_vec(),
        reps,
        rows,
        oracle_delta: hyper.oracle_delta.filter(|_| methods.contains(&Method::Oracle)),
    })
}

fn aggregate(cfg: &ScenarioConfig, truth: f64, methods: &[Method], reps: &[RepOutcome]) -> Result<Vec<MetricsRow>> {
    let tau_r: Vec<f64> = reps.iter().filter_map(|r| r.rct.as_ref().map(|m| m.tau)).collect();
    let tau_o: Vec<f64> = reps.iter().filter_map(|r| r.rwd.as_ref().map(|m| m.tau)).collect();
    if tau_r.is_empty() {
        return Err(Error::Config("every replication failed".into()));
    }
    let rmse = |v: &[f64]| (v.iter().map(|t| (t - truth).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    let rmse_r = rmse(&tau_r);
    let len_r = mean(&reps.iter().filter_map(|r| r.rct.as_ref().map(|m| m.ci.1 - m.ci.0)).collect::<Vec<_>>());
    let r_bias = (mean(&tau_o) - truth) / sd(&tau_r);
    let mut rows = Vec::with_capacity(methods.len());
    for (j, m) in methods.iter().enumerate() {
        let ok: Vec<&MethodRecord> = reps.iter().filter_map(|r| r.methods[j].as_ref().ok()).collect();
        let failures = reps.len() - ok.len();
        let taus: Vec<f64> = ok.iter().map(|r| r.tau).collect();
        let weights: Vec<f64> = ok.iter().filter_map(|r| r.weight).collect();
        let nan_if_empty = |f: &dyn Fn() -> f64| if ok.is_empty() { f64::NAN } else { f() };
        rows.push(MetricsRow {
            method: *m,
            psi: cfg.psi,
            alpha_o: cfg.alpha_o,
            alpha_r: cfg.alpha_r,
            r_bias,
            r_rmse: nan_if_empty(&|| rmse(&taus) / rmse_r),
            coverage: nan_if_empty(&|| {
                ok.iter().filter(|r| r.ci.0 <= truth && truth <= r.ci.1).count() as f64 / ok.len() as f64
            }),
            rel_ci_length: nan_if_empty(&|| mean(&ok.iter().map(|r| r.ci.1 - r.ci.0).collect::<Vec<_>>()) / len_r),
            mean_weight: (!weights.is_empty()).then(|| mean(&weights)),
            failures,
            reps: reps.len(),
            bias: nan_if_empty(&|| mean(&taus) - truth),
        });
    }
    Ok(rows)
}

/// Full grid result.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub psi_cells: Vec<Cell>,
    pub alpha_cells: Vec<Cell>,
}

impl Report {
    pub fn rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.psi_cells.iter().flat_map(|c| c.rows.iter())
    }

    pub fn table2_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.alpha_cells.iter().flat_map(|c| c.rows.iter())
    }

    /// Rows of `method` across the psi grid, in grid order.
    pub fn curve(&self, method: Method) -> Vec<&MetricsRow> {
        self.rows().filter(|r| r.method == method).collect()
    }
}

/// Runs every psi cell and every alpha cell of the grid.
pub fn run_grid(grid: &ExperimentGrid) -> Result<Report> {
    grid.validate()?;
    let body = || -> Result<Report> {
        let mut psi_cells = Vec::with_capacity(grid.psi.len());
        for &psi in &grid.psi {
            let cfg = ScenarioConfig { psi, ..grid.scenario.clone() };
            psi_cells.push(run_cell(&cfg, &grid.methods, &grid.hyper, &grid.learners)?);
        }
        let mut alpha_cells = Vec::with_capacity(grid.alpha_pairs.len());
        let pairs: &[(f64, f64)] = if grid.methods.contains(&Method::Procova) { &grid.alpha_pairs } else { &[] };
        for &(alpha_o, alpha_r) in pairs {
            let cfg = ScenarioConfig { psi: 0.0, alpha_o, alpha_r, ..grid.scenario.clone() };
            alpha_cells.push(run_cell(&cfg, &[Method::Procova], &grid.hyper, &grid.learners)?);
        }
        Ok(Report { psi_cells, alpha_cells })
    };
    match grid.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

pub const METRICS_HEADER: &str = "method,psi,rBias,rRMSE,coverage,rel_ci_length,mean_weight,failures";
pub const TABLE2_HEADER: &str = "alpha_o,alpha_r,method,rRMSE,coverage,rel_ci_length,failures";

pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method,
            fmt_f(r.psi),
            fmt_f(r.r_bias),
            fmt_f(r.r_rmse),
            fmt_f(r.coverage),
            fmt_f(r.rel_ci_length),
            r.mean_weight.map(fmt_f).unwrap_or_else(|| "NA".into()),
            r.failures
        );
    }
    s
}

pub fn table2_csv<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> String {
    let mut s = String::from(TABLE2_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            fmt_f(r.alpha_o),
            fmt_f(r.alpha_r),
            r.method,
            fmt_f(r.r_rmse),
            fmt_f(r.coverage),
            fmt_f(r.rel_ci_length),
            r.failures
        );
    }
    s
}

const PALETTE: [&str; 14] = [
    "#1f77b4", "#7f7f7f", "#000000", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#bcbd22",
    "#17becf", "#393b79", "#637939", "#ad494a",
];

/// Minimal line chart with fixed axes.
pub fn svg_chart(title: &str, y_label: &str, y_range: (f64, f64), reference: Option<f64>, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, ml, mr, mt, mb) = (720.0, 440.0, 60.0, 190.0, 36.0, 46.0);
    let x_max = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .filter(|x| x.is_finite())
        .fold(10.0f64, f64::max)
        .ceil();
    let (y0, y1) = y_range;
    let px = |x: f64| ml + (x / x_max) * (w - ml - mr);
    let py = |y: f64| mt + (1.0 - (y.clamp(y0, y1) - y0) / (y1 - y0)) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">{title}</text>"#, ml);
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - ml - mr,
        h - mt - mb
    );
    for i in 0..=5 {
        let x = x_max * i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x:.0}</text>"#, px(x), h - mb + 16.0);
        let y = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.2}</text>"#, ml - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">relative bias of the observational estimate</text>"#, (ml + w - mr) / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{y_label}</text>"#, (mt + h - mb) / 2.0, (mt + h - mb) / 2.0);
    if let Some(r) = reference {
        let _ = writeln!(
            s,
            r#"<line x1="{ml}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
            w - mr,
            py(r),
            py(r)
        );
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#, path.join(" "));
        }
        let ly = mt + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, w - mr + 10.0, w - mr + 30.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{name}</text>"#, w - mr + 36.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `metrics.csv`, `table2.csv` (when the alpha grid ran) and one SVG
/// per figure family into `out`.
pub fn emit(report: &Report, out: &Path) -> Result<Vec<String>> {
    if report.rows().next().is_none() && report.table2_rows().next().is_none() {
        return Err(Error::Config("no methods".into()));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        fs::write(out.join(name), body)?;
        written.push(name.to_string());
        Ok(())
    };
    put("metrics.csv", metrics_csv(report.rows()))?;
    if !report.alpha_cells.is_empty() {
        put("table2.csv", table2_csv(report.table2_rows()))?;
    }
    let mut by_method: BTreeMap<Method, Vec<&MetricsRow>> = BTreeMap::new();
    for r in report.rows() {
        by_method.entry(r.method).or_default().push(r);
    }
    let series = |f: &dyn Fn(&MetricsRow) -> Option<f64>| -> Vec<(String, Vec<(f64, f64)>)> {
        by_method
            .iter()
            .map(|(m, rows)| (m.to_string(), rows.iter().filter_map(|r| f(r).map(|y| (r.r_bias, y))).collect()))
            .filter(|(_, pts): &(String, Vec<(f64, f64)>)| !pts.is_empty())
            .collect()
    };
    put("rrmse.svg", svg_chart("Relative RMSE", "rRMSE", (0.0, 3.0), Some(1.0), &series(&|r| Some(r.r_rmse))))?;
    put("coverage.svg", svg_chart("Coverage of 95% intervals", "coverage", (0.0, 1.0), Some(0.95), &series(&|r| Some(r.coverage))))?;
    put(
        "ci_length.svg",
        svg_chart("Relative CI length", "relative CI length", (0.0, 3.0), Some(1.0), &series(&|r| Some(r.rel_ci_length))),
    )?;
    put("learning_weight.svg", svg_chart("Mean learning weight", "weight", (0.0, 1.0), None, &series(&|r| r.mean_weight)))?;
    Ok(written)
}

/// Sum over strata of the Monte Carlo MSE of the trial stratum estimates
/// and of a shrinkage method's stratum estimates.
pub fn stratum_risks(cell: &Cell, method: Method) -> Option<(f64, f64)> {
    let j = cell.methods.iter().position(|m| *m == method)?;
    let k = SignSplit::K;
    let (mut sr, mut sm, mut n) = (vec![0.0; k], vec![0.0; k], 0usize);
    for rep in &cell.reps {
        let (Some(tr), Ok(rec)) = (&rep.strata_r, &rep.methods[j]) else { continue };
        if rec.stratum_estimates.len() != k {
            continue;
        }
        for s in 0..k {
            sr[s] += (tr[s] - cell.stratum_truth[s]).powi(2);
            sm[s] += (rec.stratum_estimates[s] - cell.stratum_truth[s]).powi(2);
        }
        n += 1;
    }
    (n > 0).then(|| (sr.iter().sum::<f64>() / n as f64, sm.iter().sum::<f64>() / n as f64))
}

/// Mean of a method's estimate minus the truth, and the mean large-bias
/// limit `omega * gamma * sqrt(var_r + var_o)` of anchored thresholding.
pub fn anchored_bias_check(cell: &Cell, gamma: f64) -> Option<(f64, f64)> {
    let j = cell.methods.iter().position(|m| *m == Method::AnchoredThresholding)?;
    let mut diffs = Vec::new();
    let mut limits = Vec::new();
    for rep in &cell.reps {
        let (Some(r), Some(o), Ok(at)) = (&rep.rct, &rep.rwd, &rep.methods[j]) else { continue };
        diffs.push(at.tau - cell.truth);
        let omega = r.var / (r.var + o.var);
        limits.push(omega * gamma * (r.var + o.var).sqrt() * (o.tau - r.tau).signum());
    }
    (!diffs.is_empty()).then(|| (mean(&diffs), mean(&limits)))
}
