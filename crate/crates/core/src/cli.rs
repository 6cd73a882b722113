//! Subcommand dispatch for the `herding` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{
    self, herding_suite, meanfield_over_seeds, observe, observed_decay, Check, CheckStatus,
};
use crate::functionals::decay_params;
use crate::io::{self, write_atomic, write_json, FORMAT_VERSION, NUMBER_FORMAT};
use crate::kernel::kernel_bounds;
use crate::transport::{w1_exact, W1Record};

#[derive(Debug, Parser)]
#[command(name = "herding", version, about = "Kinetic herding model simulation and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads; affects wall time only.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the particle system and write the trajectory and functionals.
    Simulate(RunArgs),
    /// Compute the exponential-rate constants and the rate condition.
    CheckParams(RunArgs),
    /// Exact W1 distance between two measure files.
    Wasserstein(RunArgs),
    /// W1 convergence table across system sizes and seeds.
    Meanfield(RunArgs),
    /// Run every herding invariant on one simulation.
    Suite(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::CheckParams(_) => "check-params",
            Command::Wasserstein(_) => "wasserstein",
            Command::Meanfield(_) => "meanfield",
            Command::Suite(_) => "suite",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::CheckParams(a)
            | Command::Wasserstein(a)
            | Command::Meanfield(a)
            | Command::Suite(a) => a,
        }
    }
}

/// What a command produced, before it is written to `summary.json`.
pub struct Outcome {
    pub checks: Vec<Check>,
    pub details: serde_json::Value,
    /// Printed to stdout.
    pub message: String,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    format_version: u32,
    command: &'a str,
    status: &'a str,
    passed: bool,
    checks: &'a [Check],
    details: &'a serde_json::Value,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    crate_version: &'a str,
    command: &'a str,
    number_format: &'a str,
    seeds: Vec<u64>,
    files: &'a [&'a str],
    config: &'a RunConfig,
}

/// Exit codes: 0 when every check passes or is not applicable, 1 when a check
/// fails, 2 on a configuration, input or numerical error.
pub fn main_with(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return 2;
        }
    }
    let args = cli.command.args();
    let config = RunConfig::load(&args.config);
    let out = match &config {
        Ok(c) => c.output_dir(args.out.as_deref()),
        Err(_) => args.out.clone().unwrap_or_else(|| PathBuf::from("out")),
    };
    let result = config.and_then(|c| run(&cli.command, &c, &out));
    let name = cli.command.name();
    match result {
        Ok(outcome) => {
            let passed = outcome.passed();
            let summary = Summary {
                format_version: FORMAT_VERSION,
                command: name,
                status: if passed { "pass" } else { "fail" },
                passed,
                checks: &outcome.checks,
                details: &outcome.details,
            };
            if let Err(e) = write_json(&out.join("summary.json"), &summary) {
                eprintln!("error: {e}");
                return 2;
            }
            // a closed stdout must not turn a finished run into a panic
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", outcome.message);
            for c in &outcome.checks {
                let status = match c.status {
                    CheckStatus::Pass => "pass",
                    CheckStatus::Fail => "FAIL",
                    CheckStatus::NotApplicable => "n/a",
                };
                let _ = writeln!(stdout, "{status:>4}  {}  {}", c.name, c.note);
            }
            if passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            let details = json!({ "error": e.to_string() });
            let summary = Summary {
                format_version: FORMAT_VERSION,
                command: name,
                status: "error",
                passed: false,
                checks: &[],
                details: &details,
            };
            let _ = write_json(&out.join("summary.json"), &summary);
            2
        }
    }
}

pub fn run(command: &Command, config: &RunConfig, out: &Path) -> Result<Outcome> {
    let (outcome, files) = match command {
        Command::Simulate(_) => simulate(config, out)?,
        Command::CheckParams(_) => check_params(config, out)?,
        Command::Wasserstein(_) => wasserstein(config, out)?,
        Command::Meanfield(_) => meanfield(config, out)?,
        Command::Suite(_) => suite(config, out)?,
    };
    let mut seeds: Vec<u64> = config.initial.iter().filter_map(|i| i.seed).collect();
    if let (Command::Meanfield(_), Some(m)) = (command, &config.meanfield) {
        seeds = m.seeds.clone();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        number_format: NUMBER_FORMAT,
        seeds,
        files: &files,
        config,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(outcome)
}

type Produced = (Outcome, Vec<&'static str>);

fn simulate(config: &RunConfig, out: &Path) -> Result<Produced> {
    let (params, kernel, integ) = (config.model()?, config.kernel()?, config.integration()?);
    let init = config.initial_state()?;
    let mut obs = observe(&init, params, kernel, integ.dt, integ.t_end, integ.record_every)?;
    let (bounds, decay) = observed_decay(&obs, params, kernel)?;
    let alpha = decay.as_ref().map_or(0.0, |d| d.alpha);
    obs.set_alpha(alpha, params);
    write_atomic(
        &out.join("trajectory.csv"),
        io::states_to_csv(&obs.recorded).as_bytes(),
    )?;
    write_atomic(
        &out.join("functionals.csv"),
        io::functionals_to_csv(&obs.recorded_samples()).as_bytes(),
    )?;
    let details = json!({
        "n": init.n(),
        "d": init.d(),
        "steps": obs.samples.len() - 1,
        "t_final": obs.samples.last().map(|s| s.t),
        "diameter": obs.diameter,
        "bounds": bounds,
        "alpha_used_for_K": alpha,
        "decay": decay.as_ref().ok(),
        "decay_note": decay.as_ref().err(),
    });
    let outcome = Outcome {
        checks: Vec::new(),
        details,
        message: format!(
            "simulated {} agents to t={}",
            init.n(),
            obs.samples.last().map_or(init.t, |s| s.t)
        ),
    };
    Ok((outcome, vec!["trajectory.csv", "functionals.csv"]))
}

fn check_params(config: &RunConfig, out: &Path) -> Result<Produced> {
    let (params, kernel) = (config.model()?, config.kernel()?);
    let r_max = match config.check_params.and_then(|c| c.r_max) {
        Some(r) => r,
        None => {
            let init = config.initial_state().map_err(|e| {
                Error::Config(format!(
                    "check_params needs `check_params.r_max` or an initial state: {e}"
                ))
            })?;
            let diameter = crate::dynamics::position_diameter(&init);
            if diameter > 0.0 {
                experiments::DIAMETER_HEADROOM * diameter
            } else {
                f64::EPSILON
            }
        }
    };
    let bounds = kernel_bounds(kernel, r_max)?;
    let (checks, details, message) = match decay_params(params, &bounds) {
        Ok(d) => {
            let status = if d.condition_holds { "holds" } else { "fails" };
            let message = format!(
                "rate condition {status}: lhs {} vs rhs {} (margin {}); beta = {}",
                d.c12_lhs, d.c12_rhs, d.c12_margin, d.beta
            );
            (vec![], serde_json::to_value(d)?, message)
        }
        Err(Error::NotApplicable(why)) => {
            let message = format!("rate unavailable: {why}");
            let details = json!({
                "rate_available": false,
                "reason": why,
                "params": params,
                "bounds": bounds,
            });
            (vec![], details, message)
        }
        Err(e) => return Err(e),
    };
    write_json(&out.join("decay_params.json"), &details)?;
    Ok((
        Outcome {
            checks,
            details,
            message,
        },
        vec!["decay_params.json"],
    ))
}

fn wasserstein(config: &RunConfig, out: &Path) -> Result<Produced> {
    let w = config.wasserstein()?;
    let mu = io::read_measure_csv(&w.a)?;
    let nu = io::read_measure_csv(&w.b)?;
    let record = W1Record {
        n: mu.len(),
        m: nu.len(),
        t: None,
        w1: w1_exact(&mu, &nu)?,
    };
    write_json(&out.join("w1.json"), &record)?;
    Ok((
        Outcome {
            checks: Vec::new(),
            details: serde_json::to_value(&record)?,
            message: format!("W1 = {}", record.w1),
        },
        vec!["w1.json"],
    ))
}

fn meanfield(config: &RunConfig, out: &Path) -> Result<Produced> {
    let (params, kernel, m) = (config.model()?, config.kernel()?, config.meanfield()?);
    let dt = config.integration()?.dt;
    let report = meanfield_over_seeds(
        config.distribution()?,
        &m.seeds,
        &m.sizes,
        params,
        kernel,
        dt,
        &m.checkpoints,
    )?;
    let mut table = String::from("seed,n,t,w1\n");
    for t in &report.tables {
        for (s, n) in t.sizes.iter().enumerate() {
            for (c, time) in t.times.iter().enumerate() {
                table.push_str(&format!("{},{n},{time},{}\n", t.seed, t.w1[s][c]));
            }
        }
    }
    let mut median = String::from("n,t,w1\n");
    for (s, n) in m.sizes.iter().enumerate() {
        for (c, time) in m.checkpoints.iter().enumerate() {
            median.push_str(&format!("{n},{time},{}\n", report.median[s][c]));
        }
    }
    write_atomic(&out.join("meanfield.csv"), table.as_bytes())?;
    write_atomic(&out.join("meanfield_median.csv"), median.as_bytes())?;

    let mut checks = Vec::new();
    if let Some(last) = m.checkpoints.len().checked_sub(1) {
        let name = "meanfield_decreasing";
        let column: Vec<f64> = report.median.iter().map(|row| row[last]).collect();
        if column.iter().all(|&w| w == 0.0) {
            checks.push(Check::not_applicable(name, "all distances are zero"));
        } else if m.sizes.len() < 2 {
            checks.push(Check::not_applicable(name, "needs at least two sizes"));
        } else {
            // largest step up between consecutive sizes; negative when strictly decreasing
            let worst = column
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut check = Check::at_most(
                name,
                worst,
                0.0,
                format!(
                    "median W1 to the largest size strictly decreasing in n at t={}",
                    m.checkpoints[last]
                ),
            );
            if worst >= 0.0 {
                check.status = CheckStatus::Fail;
            }
            checks.push(check);
        }
    }
    let details = json!({
        "sizes": m.sizes,
        "checkpoints": m.checkpoints,
        "median": report.median,
        "strictly_decreasing": report.strictly_decreasing,
    });
    Ok((
        Outcome {
            checks,
            details,
            message: format!(
                "mean-field table over {} seeds and {} sizes",
                m.seeds.len(),
                m.sizes.len()
            ),
        },
        vec!["meanfield.csv", "meanfield_median.csv"],
    ))
}

fn suite(config: &RunConfig, out: &Path) -> Result<Produced> {
    let (params, kernel, integ) = (config.model()?, config.kernel()?, config.integration()?);
    let init = config.initial_state()?;
    let options = config.suite_options();
    let report = herding_suite(
        &init,
        params,
        kernel,
        integ.dt,
        integ.t_end,
        integ.record_every,
        &options,
    )?;
    write_atomic(
        &out.join("functionals.csv"),
        io::functionals_to_csv(&report.observation.recorded_samples()).as_bytes(),
    )?;
    let details = json!({
        "bounds": report.bounds,
        "decay": report.decay,
        "decay_note": report.decay_note,
        "fit": report.fit,
        "tail": report.tail,
    });
    let failed = report
        .checks
        .iter()
        .filter(|c| c.status == CheckStatus::Fail)
        .count();
    Ok((
        Outcome {
            message: format!("{} checks, {failed} failed", report.checks.len()),
            checks: report.checks,
            details,
        },
        vec!["functionals.csv"],
    ))
}
