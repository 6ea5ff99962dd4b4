//! Acceptance run at desk scale: one PASS/FAIL line per criterion.
//!
//! Runs the default grid (300 replications, B = 200, every method), three
//! selector grids with negative controls, a determinism rerun and the
//! non-Monte-Carlo test suites. Expect roughly half an hour on one core.
//! The grid's CSV and SVG files are kept under the target directory.

use std::process::Command;
use std::time::Instant;

use rwdfusion::bench::{anchored_bias_check, emit, metrics_csv, run_grid, stratum_risks, table2_csv, ExperimentGrid, MetricsRow, Report};
use rwdfusion::checks::{evaluate, Check};
use rwdfusion::fusion::{default_gamma, Method};
use rwdfusion::synthgen::Column;

struct Criterion {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

impl Criterion {
    fn new(id: usize, name: &'static str, parts: Vec<(bool, String)>) -> Self {
        let passed = !parts.is_empty() && parts.iter().all(|(ok, _)| *ok);
        let detail = parts
            .into_iter()
            .map(|(ok, d)| if ok { d } else { format!("[fails] {d}") })
            .collect::<Vec<_>>()
            .join("; ");
        Criterion { id, name, passed, detail }
    }
}

/// Metrics-level checks whose name starts with one of `prefixes`.
fn checks_named(all: &[Check], prefixes: &[&str]) -> Vec<(bool, String)> {
    all.iter()
        .filter(|c| prefixes.iter().any(|p| c.name.starts_with(p)))
        .map(|c| (c.passed == Some(true), format!("{}: {}", c.name, c.detail)))
        .collect()
}

fn curve(rows: &[MetricsRow], m: Method) -> Vec<&MetricsRow> {
    rows.iter().filter(|r| r.method == m).collect()
}

/// Ranks (1 = smallest), averaging ties.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn selector_grid(nco: Option<Column>) -> ExperimentGrid {
    let mut g = ExperimentGrid { methods: vec![Method::RctOnly, Method::ExperimentSelector], ..Default::default() };
    g.hyper.nco_column = nco;
    g
}

fn selector_curve(report: &Report) -> Vec<(f64, f64, f64)> {
    report
        .curve(Method::ExperimentSelector)
        .iter()
        .map(|r| (r.psi, r.mean_weight.unwrap_or(f64::NAN), r.coverage))
        .collect()
}

fn unit_suites() -> (bool, String) {
    let start = Instant::now();
    let out = Command::new(env!("CARGO"))
        .args(["test", "--workspace", "--lib", "--test", "properties", "--test", "cli", "--test", "capi"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output();
    let secs = start.elapsed().as_secs_f64();
    match out {
        Ok(o) => {
            let text = String::from_utf8_lossy(&o.stdout);
            let passed: usize = text
                .lines()
                .filter_map(|l| l.strip_prefix("test result: ok. "))
                .filter_map(|l| l.split(' ').next()?.parse::<usize>().ok())
                .sum();
            (o.status.success() && secs < 60.0, format!("unit/property/CLI/C suites: {passed} tests, exit {:?}, {secs:.1} s (incl. build)", o.status.code()))
        }
        Err(e) => (false, format!("could not launch cargo: {e}")),
    }
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let grid = ExperimentGrid::default();
    let report = run_grid(&grid).expect("default grid runs");
    let rows: Vec<MetricsRow> = report.rows().cloned().collect();
    let table2: Vec<MetricsRow> = report.table2_rows().cloned().collect();
    let checks = evaluate(&rows, &table2, 1.0);
    eprintln!("default grid: {:.0} s", start.elapsed().as_secs_f64());
    let keep = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    emit(&report, &keep).expect("outputs written");
    eprintln!("outputs in {}", keep.display());

    let mut out = Vec::new();

    // 1. truth recovery
    out.push(Criterion::new(1, "truth recovery", checks_named(&checks, &["trial-only"])));

    // 2. oracle curve
    out.push(Criterion::new(2, "oracle curve", checks_named(&checks, &["oracle curve"])));

    // 3. trade-off shape
    out.push(Criterion::new(3, "trade-off shape", checks_named(&checks, &["trade-off shape"])));

    // 4. anchored thresholding: metrics plus the large-bias limit
    let mut parts = checks_named(&checks, &["anchored thresholding"]);
    let last = report.psi_cells.last().unwrap();
    let gamma = grid.hyper.gamma.unwrap_or_else(|| default_gamma(grid.scenario.n_r, grid.scenario.n_o));
    if let Some((bias, limit)) = anchored_bias_check(last, gamma) {
        let ok = (bias - limit).abs() <= 0.25 * limit.abs();
        parts.push((ok, format!("bias at largest psi {bias:.4} vs limit {limit:.4}")));
    }
    out.push(Criterion::new(4, "anchored thresholding pathology", parts));

    // 5. bias-correction null
    out.push(Criterion::new(5, "bias-correction null", checks_named(&checks, &["bias-correction null"])));

    // 6. prognostic score
    out.push(Criterion::new(6, "PROCOVA table and coverage", checks_named(&checks, &["prognostic score"])));

    // 7. learning weights
    out.push(Criterion::new(7, "learning-weight monotonicity", checks_named(&checks, &["weight decreasing"])));

    // 8. experiment selector, with and without negative controls
    let mut parts = checks_named(&checks, &["selector proportion"]);
    let base = selector_curve(&report);
    let with = |c: Column| selector_curve(&run_grid(&selector_grid(Some(c))).expect("selector grid runs"));
    let (n1, n2, n3) = (with(Column::N1), with(Column::N2), with(Column::N3));
    let mid = 1..base.len() - 1;
    let at_least = mid.clone().filter(|&i| n3[i].1 >= base[i].1).count();
    let share = at_least as f64 / mid.len() as f64;
    parts.push((
        share >= 0.7,
        format!("n3 proportion >= no-NCO at {at_least}/{} interior psi cells", mid.len()),
    ));
    let worst = |c: &[(f64, f64, f64)]| c.iter().map(|x| x.2).fold(f64::INFINITY, f64::min);
    let (w1, w2) = (worst(&n1), worst(&n2));
    parts.push((w1 >= w2, format!("worst coverage n1 {w1:.3} vs n2 {w2:.3}")));
    out.push(Criterion::new(8, "experiment selector", parts));

    // 9. aggregate stratum risk of the SURE shrinker
    let mut parts = Vec::new();
    for cell in &report.psi_cells {
        if let Some((r, s2)) = stratum_risks(cell, Method::ShrinkS2) {
            parts.push((s2 <= 1.1 * r, format!("psi {}: {s2:.4} vs {r:.4}", cell.scenario.psi)));
        }
    }
    out.push(Criterion::new(9, "shrinkage aggregate risk", parts));

    // 10. determinism across thread counts (reduced grid)
    let mut small = ExperimentGrid::default();
    small.scenario.reps = 12;
    small.hyper.bootstrap_b = 50;
    small.psi = vec![0.0, 0.5, 1.5];
    let csvs: Vec<(String, String)> = [1, 4]
        .into_iter()
        .map(|t| {
            let r = run_grid(&ExperimentGrid { threads: Some(t), ..small.clone() }).expect("reduced grid runs");
            (metrics_csv(r.rows()), table2_csv(r.table2_rows()))
        })
        .collect();
    out.push(Criterion::new(
        10,
        "determinism",
        vec![(csvs[0] == csvs[1], format!("metrics and table2 identical with 1 and 4 threads: {}", csvs[0] == csvs[1]))],
    ));

    // 11. unit/property suites plus the grid-level invariants
    let mut parts = vec![unit_suites()];
    let rb: Vec<f64> = curve(&rows, Method::RctOnly).iter().map(|r| r.r_bias).collect();
    parts.push((rb.windows(2).all(|w| w[1] >= w[0]), format!("rBias nondecreasing over psi: {rb:.2?}")));
    let zero = &report.psi_cells[0];
    let three = report
        .psi_cells
        .iter()
        .min_by(|a, b| (a.rows[0].r_bias - 3.0).abs().total_cmp(&(b.rows[0].r_bias - 3.0).abs()))
        .unwrap();
    let rmse_at = |cell: &rwdfusion::bench::Cell| -> Vec<f64> {
        Method::TRADE_OFF.iter().map(|m| cell.rows.iter().find(|r| r.method == *m).map_or(f64::NAN, |r| r.r_rmse)).collect()
    };
    let rho = pearson(&ranks(&rmse_at(zero)), &ranks(&rmse_at(three)));
    parts.push((rho < 0.0, format!("rank correlation rBias 0 vs {:.1}: {rho:.2}", three.rows[0].r_bias)));
    out.push(Criterion::new(11, "unit and property suites", parts));

    for c in &out {
        println!("{} {:>2} {:<32} {}", if c.passed { "PASS" } else { "FAIL" }, c.id, c.name, c.detail);
    }
    eprintln!("acceptance total: {:.0} s", start.elapsed().as_secs_f64());
    let failed: Vec<usize> = out.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    assert!(failed.is_empty(), "criteria failing: {failed:?}");
}
