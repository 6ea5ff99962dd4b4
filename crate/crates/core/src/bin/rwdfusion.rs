use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rwdfusion::bench::{emit, run_grid, ExperimentGrid};
use rwdfusion::checks::{evaluate, read_metrics, read_table2, Check};
use rwdfusion::config;
use rwdfusion::synthgen::replication;
use rwdfusion::Error;

#[derive(Parser)]
#[command(name = "rwdfusion", version, about = "Trial + real-world data fusion estimators and their simulation benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write one replication's trial and observational datasets as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Replication index to export.
        #[arg(long, default_value_t = 0)]
        rep: u64,
    },
    /// Run the grid and write metrics, tables and plots.
    Run(Common),
    /// Summarize an existing run against the acceptance thresholds.
    Report(Common),
    /// Run, then exit nonzero if any threshold fails.
    Check(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    /// Comma-separated method names.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated confounding strengths.
    #[arg(long)]
    psi: Option<String>,
    #[arg(long)]
    alpha_r: Option<String>,
    #[arg(long)]
    alpha_o: Option<String>,
    /// both | control-only
    #[arg(long)]
    mode: Option<String>,
    /// n1 | n2 | n3 | none
    #[arg(long)]
    nco: Option<String>,
    /// A third of the replications and 100 bootstrap draws.
    #[arg(long)]
    fast: bool,
    #[arg(long)]
    threads: Option<String>,
    /// Also export latent variables and potential outcomes.
    #[arg(long)]
    debug_oracle: bool,
}

/// Errors the user caused (exit 2) versus failures while running (exit 1).
enum Failure {
    Usage(String),
    Run(String),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Bootstrap(_) => Failure::Run(e.to_string()),
            Error::Config(_) | Error::Parse(_) | Error::UnknownMethod { .. } | Error::UnknownColumn(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl Common {
    fn grid(&self) -> Result<ExperimentGrid, Failure> {
        let mut g = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
                config::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
            }
            None => ExperimentGrid::default(),
        };
        if self.fast {
            g = g.fast();
        }
        let overrides = [
            ("seed", &self.seed),
            ("reps", &self.reps),
            ("methods", &self.methods),
            ("psi", &self.psi),
            ("alpha_r", &self.alpha_r),
            ("alpha_o", &self.alpha_o),
            ("mode", &self.mode),
            ("nco", &self.nco),
            ("threads", &self.threads),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config::set(&mut g, key, v)?;
            }
        }
        g.scenario.psi = g.psi.first().copied().unwrap_or(0.0);
        g.validate()?;
        Ok(g)
    }
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| Failure::Run(format!("cannot write {}: {e}", path.display())))
}

fn mkdir(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::Run(format!("cannot create {}: {e}", out.display())))
}

fn print_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{c}");
    }
    checks.iter().all(|c| c.passed != Some(false))
}

fn simulate(common: &Common, rep: u64) -> Result<(), Failure> {
    let g = common.grid()?;
    mkdir(&common.out)?;
    let (rct, rwd) = replication(&g.scenario, rep)?;
    for (name, data) in [("rct.csv", &rct), ("rwd.csv", &rwd)] {
        let mut buf = Vec::new();
        data.write_csv(&mut buf, common.debug_oracle)?;
        let path = common.out.join(name);
        fs::write(&path, buf).map_err(|e| Failure::Run(format!("cannot write {}: {e}", path.display())))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run(common: &Common) -> Result<(ExperimentGrid, rwdfusion::bench::Report), Failure> {
    let g = common.grid()?;
    mkdir(&common.out)?;
    write(&common.out.join("config.txt"), &config::render(&g))?;
    let report = run_grid(&g)?;
    for f in emit(&report, &common.out)? {
        println!("{}", common.out.join(f).display());
    }
    Ok((g, report))
}

fn report(common: &Common) -> Result<(), Failure> {
    let g = common.grid()?;
    let metrics_path = common.out.join("metrics.csv");
    let text = fs::read_to_string(&metrics_path)
        .map_err(|e| Failure::Usage(format!("cannot read {} (run first): {e}", metrics_path.display())))?;
    let rows = read_metrics(&text)?;
    let table2 = match fs::read_to_string(common.out.join("table2.csv")) {
        Ok(t) => read_table2(&t)?,
        Err(_) => Vec::new(),
    };
    println!("{:<24} {:>6} {:>7} {:>7} {:>8} {:>7} {:>7} {:>5}", "method", "psi", "rBias", "rRMSE", "coverage", "rel_ci", "weight", "fail");
    for r in &rows {
        println!(
            "{:<24} {:>6.2} {:>7.2} {:>7.3} {:>8.3} {:>7.3} {:>7} {:>5}",
            r.method.name(),
            r.psi,
            r.r_bias,
            r.r_rmse,
            r.coverage,
            r.rel_ci_length,
            r.mean_weight.map_or_else(|| "-".into(), |w| format!("{w:.3}")),
            r.failures
        );
    }
    println!();
    print_checks(&evaluate(&rows, &table2, if common.fast { 1.5 } else { 1.0 }));
    let cfg_path = common.out.join("config.txt");
    write(&cfg_path, &config::render(&g))?;
    println!("\nconfig written to {}", cfg_path.display());
    Ok(())
}

fn check(common: &Common) -> Result<(), Failure> {
    let (_, rep) = run(common)?;
    let rows: Vec<_> = rep.rows().cloned().collect();
    let table2: Vec<_> = rep.table2_rows().cloned().collect();
    if print_checks(&evaluate(&rows, &table2, if common.fast { 1.5 } else { 1.0 })) {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Simulate { common, rep } => simulate(common, *rep),
        Cmd::Run(c) => run(c).map(|_| ()),
        Cmd::Report(c) => report(c),
        Cmd::Check(c) => check(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Checks) => {
            eprintln!("one or more checks failed");
            ExitCode::from(1)
        }
    }
}
