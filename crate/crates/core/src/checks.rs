//! Threshold checks on aggregated metrics, shared by the `report` and
//! `check` subcommands. Checks needing per-replication data (bias limits,
//! stratum risks) are not covered here.

use std::fmt;

use crate::bench::{MetricsRow, METRICS_HEADER, TABLE2_HEADER};
use crate::error::{Error, Result};
use crate::fusion::Method;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// `None` when the methods it needs were not run.
    pub passed: Option<bool>,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        write!(f, "{tag:4}  {:<34} {}", self.name, self.detail)
    }
}

/// Expected PROCOVA relative RMSE per `(alpha_o, alpha_r)` cell, with
/// tolerance.
pub const TABLE2_TARGETS: [((f64, f64), f64, f64); 4] =
    [((0.0, 0.0), 1.00, 0.03), ((2.0, 2.0), 0.84, 0.06), ((0.5, 2.0), 0.89, 0.06), ((0.0, 2.0), 1.77, 0.25)];

fn field(tok: &str) -> f64 {
    tok.parse().unwrap_or(f64::NAN)
}

fn header_check(text: &str, header: &str) -> Result<()> {
    match text.lines().next() {
        Some(h) if h.trim() == header => Ok(()),
        other => Err(Error::Parse(format!("unexpected header `{}` (expected `{header}`)", other.unwrap_or("")))),
    }
}

/// Reads a `metrics.csv` back. Columns it does not carry come back as NaN.
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    header_check(text, METRICS_HEADER)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let t: Vec<&str> = l.split(',').collect();
            if t.len() != 8 {
                return Err(Error::Parse(format!("metrics row with {} fields: `{l}`", t.len())));
            }
            Ok(MetricsRow {
                method: t[0].parse()?,
                psi: field(t[1]),
                alpha_o: f64::NAN,
                alpha_r: f64::NAN,
                r_bias: field(t[2]),
                r_rmse: field(t[3]),
                coverage: field(t[4]),
                rel_ci_length: field(t[5]),
                mean_weight: Some(field(t[6])).filter(|w| w.is_finite()),
                failures: t[7].parse().map_err(|_| Error::Parse(format!("bad failure count `{}`", t[7])))?,
                reps: 0,
                bias: f64::NAN,
            })
        })
        .collect()
}

/// Reads a `table2.csv` back.
pub fn read_table2(text: &str) -> Result<Vec<MetricsRow>> {
    header_check(text, TABLE2_HEADER)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let t: Vec<&str> = l.split(',').collect();
            if t.len() != 7 {
                return Err(Error::Parse(format!("table2 row with {} fields: `{l}`", t.len())));
            }
            Ok(MetricsRow {
                method: t[2].parse()?,
                psi: 0.0,
                alpha_o: field(t[0]),
                alpha_r: field(t[1]),
                r_bias: f64::NAN,
                r_rmse: field(t[3]),
                coverage: field(t[4]),
                rel_ci_length: field(t[5]),
                mean_weight: None,
                failures: t[6].parse().map_err(|_| Error::Parse(format!("bad failure count `{}`", t[6])))?,
                reps: 0,
                bias: f64::NAN,
            })
        })
        .collect()
}

fn curve(rows: &[MetricsRow], m: Method) -> Vec<&MetricsRow> {
    let mut c: Vec<&MetricsRow> = rows.iter().filter(|r| r.method == m).collect();
    c.sort_by(|a, b| a.psi.total_cmp(&b.psi));
    c
}

struct Builder {
    out: Vec<Check>,
}

impl Builder {
    fn push(&mut self, name: &str, passed: Option<bool>, detail: String) {
        self.out.push(Check { name: name.to_string(), passed, detail });
    }
}

/// Number of strict increases in a sequence (violations of "decreasing").
fn increases(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] >= w[0]).count()
}

/// Evaluates every metrics-level threshold. `widen` scales the tolerances
/// (1 at full size, 1.5 for reduced runs).
pub fn evaluate(rows: &[MetricsRow], table2: &[MetricsRow], widen: f64) -> Vec<Check> {
    let mut b = Builder { out: Vec::new() };

    let r = curve(rows, Method::RctOnly);
    if r.is_empty() {
        b.push("trial-only coverage", None, "rct_only not run".into());
    } else {
        let (lo, hi) = (0.95 - 0.03 * widen, 0.95 + 0.025 * widen);
        let worst = r.iter().map(|x| x.coverage).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), v| (a.min(v), c.max(v)));
        b.push(
            "trial-only coverage",
            Some(worst.0 >= lo && worst.1 <= hi),
            format!("range [{:.3}, {:.3}] vs [{lo:.3}, {hi:.3}]", worst.0, worst.1),
        );
        let bias = r[0].bias;
        if bias.is_finite() {
            b.push("trial-only mean at psi=0", Some(bias.abs() <= 0.02 * widen), format!("bias {bias:+.4}"));
        }
    }

    let o = curve(rows, Method::Oracle);
    if o.is_empty() {
        b.push("oracle curve", None, "oracle not run".into());
    } else {
        let first = o[0].r_rmse;
        let max = o.iter().map(|x| x.r_rmse).fold(f64::NEG_INFINITY, f64::max);
        let ok = (first - 0.447).abs() <= 0.06 * widen && max <= 1.0 + 0.05 * widen;
        b.push("oracle curve", Some(ok), format!("rRMSE at first psi {first:.3}, max {max:.3}"));
    }

    for m in Method::TRADE_OFF {
        let c = curve(rows, m);
        let name = format!("trade-off shape: {m}");
        if c.len() < 2 {
            b.push(&name, None, "not run on a grid".into());
            continue;
        }
        let near_zero = c.iter().min_by(|a, b| a.r_bias.abs().total_cmp(&b.r_bias.abs())).unwrap();
        let last = c[c.len() - 1];
        let danger = c.iter().filter(|x| (2.0..=5.0).contains(&x.r_bias)).map(|x| x.r_rmse).fold(f64::NEG_INFINITY, f64::max);
        let ok = near_zero.r_rmse < 0.95 && (last.r_rmse - 1.0).abs() <= 0.1 * widen && danger > 1.0;
        b.push(
            &name,
            Some(ok),
            format!("{:.3} at rBias {:.2}; {:.3} at largest psi; max {:.3} in rBias [2,5]", near_zero.r_rmse, near_zero.r_bias, last.r_rmse, danger),
        );
    }

    let at = curve(rows, Method::AnchoredThresholding);
    if at.len() < 2 {
        b.push("anchored thresholding pathology", None, "not run on a grid".into());
    } else {
        let tail = &at[at.len() - 2..];
        let ok = tail.iter().all(|x| x.r_rmse > 1.0 && x.coverage < 0.90);
        let d: Vec<String> = tail.iter().map(|x| format!("psi {}: rRMSE {:.3} cov {:.3}", x.psi, x.r_rmse, x.coverage)).collect();
        b.push("anchored thresholding pathology", Some(ok), d.join("; "));
    }

    for m in [Method::ExperimentGrounding, Method::ConfoundingFunction] {
        let c = curve(rows, m);
        let name = format!("bias-correction null: {m}");
        if c.is_empty() {
            b.push(&name, None, "not run".into());
            continue;
        }
        let min = c.iter().map(|x| x.r_rmse).fold(f64::INFINITY, f64::min);
        let mut ok = min >= 1.0 - 0.03 * widen;
        let mut detail = format!("min rRMSE {min:.3}");
        if m == Method::ExperimentGrounding {
            let len = c.iter().map(|x| x.rel_ci_length).fold(f64::INFINITY, f64::min);
            ok &= len >= 1.0;
            detail.push_str(&format!(", min rel CI length {len:.3}"));
        }
        b.push(&name, Some(ok), detail);
    }

    if table2.is_empty() {
        b.push("prognostic score table", None, "alpha grid not run".into());
    } else {
        let mut ok = true;
        let mut parts = Vec::new();
        for ((ao, ar), target, tol) in TABLE2_TARGETS {
            if let Some(row) = table2.iter().find(|x| x.method == Method::Procova && x.alpha_o == ao && x.alpha_r == ar) {
                ok &= (row.r_rmse - target).abs() <= tol * widen;
                parts.push(format!("({ao},{ar}) {:.0}% vs {:.0}%", 100.0 * row.r_rmse, 100.0 * target));
            }
        }
        b.push("prognostic score table", Some(ok && !parts.is_empty()), parts.join("; "));
    }
    let p = curve(rows, Method::Procova);
    if !p.is_empty() {
        let (lo, hi) = (0.95 - 0.03 * widen, 0.95 + 0.025 * widen);
        let ok = p.iter().all(|x| (lo..=hi).contains(&x.coverage));
        let min = p.iter().map(|x| x.coverage).fold(f64::INFINITY, f64::min);
        let max = p.iter().map(|x| x.coverage).fold(f64::NEG_INFINITY, f64::max);
        b.push("prognostic score coverage", Some(ok), format!("range [{min:.3}, {max:.3}] vs [{lo:.3}, {hi:.3}]"));
    }

    for m in [Method::MseMinimizing, Method::PowerLikelihood] {
        let c = curve(rows, m);
        let name = format!("weight decreasing: {m}");
        let w: Vec<f64> = c.iter().filter_map(|x| x.mean_weight).collect();
        if w.len() < 2 {
            b.push(&name, None, "not run on a grid".into());
            continue;
        }
        let bad = increases(&w);
        let mut ok = bad <= 1;
        if m == Method::PowerLikelihood {
            ok &= w[w.len() - 1] < 0.1;
        }
        let shown: Vec<String> = w.iter().map(|x| format!("{x:.3}")).collect();
        b.push(&name, Some(ok), format!("[{}], {bad} increase(s)", shown.join(", ")));
    }

    let s = curve(rows, Method::ExperimentSelector);
    let sw: Vec<f64> = s.iter().filter_map(|x| x.mean_weight).collect();
    if sw.len() < 2 {
        b.push("selector proportion", None, "not run on a grid".into());
    } else {
        let ok = sw[0] >= 0.8 && sw[sw.len() - 1] <= 0.1;
        b.push("selector proportion", Some(ok), format!("{:.3} at first psi, {:.3} at largest", sw[0], sw[sw.len() - 1]));
    }
    b.out
}
