//! Flat `key = value` configuration for experiment grids.
//!
//! One setting per line, `#` starts a comment, lists are comma-separated.
//! Keys mirror the field names of [`ScenarioConfig`](crate::synthgen::ScenarioConfig), [`ExperimentGrid`] and
//! [`FusionHyper`]; an unknown key is an error rather than a silent no-op.
//! `auto` stands for "use the built-in rule" on optional settings.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::bench::ExperimentGrid;
use crate::error::{Error, Result};
use crate::estimate::SignSplit;
use crate::fusion::Method;
use crate::synthgen::Column;

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{key} = {value}: {why}"))
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| bad(key, v, e))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|t| !t.is_empty()).map(|t| scalar(key, t)).collect()
}

fn fixed<const N: usize>(key: &str, v: &str) -> Result<[f64; N]> {
    let xs: Vec<f64> = list(key, v)?;
    xs.try_into().map_err(|xs: Vec<f64>| bad(key, v, format!("expected {N} values, got {}", xs.len())))
}

fn auto<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if v == "auto" {
        Ok(None)
    } else {
        scalar(key, v).map(Some)
    }
}

fn nco(key: &str, v: &str) -> Result<Option<Column>> {
    match v {
        "none" => Ok(None),
        "n1" | "n2" | "n3" => Ok(Some(v.parse()?)),
        _ => Err(bad(key, v, "expected n1 | n2 | n3 | none")),
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "auto".into(), |v| v.to_string())
}

/// Parses a config file body. Settings not mentioned keep their defaults.
pub fn parse(text: &str) -> Result<ExperimentGrid> {
    let mut g = ExperimentGrid::default();
    let mut seen = std::collections::HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
        let (key, v) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
        set(&mut g, key, v)?;
    }
    g.scenario.psi = g.psi.first().copied().unwrap_or(0.0);
    g.validate()?;
    Ok(g)
}

/// Applies one `key = value` setting.
pub fn set(g: &mut ExperimentGrid, key: &str, v: &str) -> Result<()> {
    let s = &mut g.scenario;
    let h = &mut g.hyper;
    match key {
        "n_r" => s.n_r = scalar(key, v)?,
        "n_o" => s.n_o = scalar(key, v)?,
        "alpha_r" => s.alpha_r = scalar(key, v)?,
        "alpha_o" => s.alpha_o = scalar(key, v)?,
        "copula_logits" => s.copula_logits = fixed::<3>(key, v)?,
        "msm.intercept" => s.msm.intercept = scalar(key, v)?,
        "msm.beta_a" => s.msm.beta_a = scalar(key, v)?,
        "msm.beta_ax3" => s.msm.beta_ax3 = scalar(key, v)?,
        "msm.beta_x3" => s.msm.beta_x3 = scalar(key, v)?,
        "rwd_ps.intercept" => s.rwd_ps.intercept = scalar(key, v)?,
        "rwd_ps.x1" => s.rwd_ps.x1 = scalar(key, v)?,
        "rwd_ps.x2" => s.rwd_ps.x2 = scalar(key, v)?,
        "rwd_ps.x3" => s.rwd_ps.x3 = scalar(key, v)?,
        "u_vars" => {
            let [a, b] = fixed::<2>(key, v)?;
            s.u_vars = (a, b);
        }
        "nco_sd" => s.nco_sd = scalar(key, v)?,
        "seed" => s.seed = scalar(key, v)?,
        "reps" => s.reps = scalar(key, v)?,
        "psi" => g.psi = list(key, v)?,
        "alpha_pairs" => {
            g.alpha_pairs = v
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| {
                    let (o, r) = t.split_once(':').ok_or_else(|| bad(key, v, "pairs are written alpha_o:alpha_r"))?;
                    Ok((scalar(key, o.trim())?, scalar(key, r.trim())?))
                })
                .collect::<Result<_>>()?
        }
        "methods" => g.methods = Method::parse_list(v)?,
        "threads" => g.threads = auto(key, v)?,
        "gamma" => h.gamma = auto(key, v)?,
        "shrink_a" => h.shrink_a = auto(key, v)?,
        "eta_grid" => h.eta_grid = list(key, v)?,
        "posterior_draws" => h.posterior_draws = scalar(key, v)?,
        "test_alpha" => h.test_alpha = scalar(key, v)?,
        "cv_folds" => h.cv_folds = scalar(key, v)?,
        "nco" => h.nco_column = nco(key, v)?,
        "phi2" => h.phi2 = scalar(key, v)?,
        "omega2" => h.omega2 = scalar(key, v)?,
        "mode" => h.mode = scalar(key, v)?,
        "bootstrap_b" => h.bootstrap_b = scalar(key, v)?,
        "strata" => {
            let cols: Vec<Column> = list(key, v)?;
            let [first, second] = cols[..] else { return Err(bad(key, v, "expected two columns")) };
            h.strata = SignSplit { first, second };
        }
        "oracle_delta" => h.oracle_delta = auto(key, v)?,
        "propensity_bound" => {
            let b: f64 = scalar(key, v)?;
            for spec in [&mut g.learners.rct, &mut g.learners.rwd] {
                spec.propensity.propensity_bound = b;
                spec.outcome.propensity_bound = b;
            }
            g.learners.prognostic.propensity_bound = b;
        }
        "rct_propensity" => {
            g.learners.rct.fixed_propensity = if v == "fit" { None } else { Some(scalar(key, v)?) }
        }
        _ => return Err(Error::Parse(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

/// Renders every configurable setting; `parse(&render(g))` reproduces `g`.
pub fn render(g: &ExperimentGrid) -> String {
    let s = &g.scenario;
    let h = &g.hyper;
    let mut o = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(o, "{k} = {v}");
    };
    kv("n_r", s.n_r.to_string());
    kv("n_o", s.n_o.to_string());
    kv("alpha_r", s.alpha_r.to_string());
    kv("alpha_o", s.alpha_o.to_string());
    kv("copula_logits", join(&s.copula_logits));
    kv("msm.intercept", s.msm.intercept.to_string());
    kv("msm.beta_a", s.msm.beta_a.to_string());
    kv("msm.beta_ax3", s.msm.beta_ax3.to_string());
    kv("msm.beta_x3", s.msm.beta_x3.to_string());
    kv("rwd_ps.intercept", s.rwd_ps.intercept.to_string());
    kv("rwd_ps.x1", s.rwd_ps.x1.to_string());
    kv("rwd_ps.x2", s.rwd_ps.x2.to_string());
    kv("rwd_ps.x3", s.rwd_ps.x3.to_string());
    kv("u_vars", join(&[s.u_vars.0, s.u_vars.1]));
    kv("nco_sd", s.nco_sd.to_string());
    kv("seed", s.seed.to_string());
    kv("reps", s.reps.to_string());
    kv("psi", join(&g.psi));
    kv("alpha_pairs", g.alpha_pairs.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(", "));
    kv("methods", g.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(", "));
    kv("threads", g.threads.map_or_else(|| "auto".into(), |t| t.to_string()));
    kv("gamma", opt(h.gamma));
    kv("shrink_a", opt(h.shrink_a));
    kv("eta_grid", join(&h.eta_grid));
    kv("posterior_draws", h.posterior_draws.to_string());
    kv("test_alpha", h.test_alpha.to_string());
    kv("cv_folds", h.cv_folds.to_string());
    kv("nco", h.nco_column.map_or("none", |c| c.name()).to_string());
    kv("phi2", h.phi2.to_string());
    kv("omega2", h.omega2.to_string());
    kv("mode", h.mode.name().to_string());
    kv("bootstrap_b", h.bootstrap_b.to_string());
    kv("strata", format!("{}, {}", h.strata.first.name(), h.strata.second.name()));
    kv("oracle_delta", opt(h.oracle_delta));
    kv("propensity_bound", g.learners.rct.propensity.propensity_bound.to_string());
    kv("rct_propensity", g.learners.rct.fixed_propensity.map_or_else(|| "fit".into(), |p| p.to_string()));
    o
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::BorrowMode;

    #[test]
    fn defaults_round_trip() {
        let g = ExperimentGrid::default();
        assert_eq!(parse(&render(&g)).unwrap(), g);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(parse("# nothing\n\n").unwrap(), ExperimentGrid::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("reps = 5\nrepz = 6\n").unwrap_err().to_string();
        assert!(err.contains("repz"), "{err}");
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(parse("reps = 5\nreps = 6").is_err());
    }

    #[test]
    fn values_are_type_checked() {
        let err = parse("reps = many").unwrap_err().to_string();
        assert!(err.contains("reps = many"), "{err}");
        assert!(parse("copula_logits = 1, 2").is_err());
        assert!(parse("nco = x1").is_err());
        assert!(parse("methods = rct_only, nope").is_err());
    }

    #[test]
    fn overrides_apply() {
        let g = parse("psi = 0.5, 1\nalpha_pairs = 0:2, 0.5:2\nnco = n3\ngamma = 2\nmode = control-only\nrct_propensity = 0.5").unwrap();
        assert_eq!(g.psi, vec![0.5, 1.0]);
        assert_eq!(g.scenario.psi, 0.5);
        assert_eq!(g.alpha_pairs, vec![(0.0, 2.0), (0.5, 2.0)]);
        assert_eq!(g.hyper.nco_column, Some(Column::N3));
        assert_eq!(g.hyper.gamma, Some(2.0));
        assert_eq!(g.hyper.mode, BorrowMode::ControlOnly);
        assert_eq!(g.learners.rct.fixed_propensity, Some(0.5));
        assert_eq!(parse(&render(&g)).unwrap(), g);
    }

    #[test]
    fn invalid_grid_rejected() {
        assert!(parse("psi = 1, 0.5").is_err());
        assert!(parse("eta_grid = 0.1, 1").is_err());
    }
}
