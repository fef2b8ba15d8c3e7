//! Command-line driver.
//!
//! Every subcommand that takes `--out` writes tidy CSV/JSON files plus a
//! `manifest.json` listing the resolved scenario, the numeric parameters and
//! the SHA-256 of each output. Exit codes: 0 success, 1 invalid input,
//! 2 numerical failure, 3 comparison failure, 64 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::charfun::{invert_density, CharFunEvaluator, DensityParams, DEFAULT_DENSITY_POINTS};
use crate::error::{Error, Result};
use crate::hjb::{solve_backward, HjbSolution, DEFAULT_GRID};
use crate::io::{self, CsvTable};
use crate::mc::{compare_report, simulate_paths, SimConfig};
use crate::model::{parse_scenario, ScenarioSpec};
use crate::moments::{
    propagate_moments, solve_meanfield_fixedpoint, MomentPath, DEFAULT_PICARD_MAX_ITER, DEFAULT_PICARD_TOL,
};
use crate::recover::{evaluate_fit, fit_parameters, ObservedSeries};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_COMPARE_FAIL: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

pub const THREADS_ENV: &str = "MFG_MOMENTS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mfg-moments", version, about = "Moments, densities and parameter recovery for jump-diffusion mean field games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and check a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Backward HJB solve and forward moments.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Densities at the requested times by FFT inversion.
    Density {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_DENSITY_POINTS)]
        xgrid: usize,
    },
    /// Monte Carlo simulation of the controlled state.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mc: McArgs,
        /// Also write every path's state at the record times.
        #[arg(long)]
        endpoints: bool,
    },
    /// Solve, simulate, and score the simulation against the analytic values.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mc: McArgs,
        #[arg(long, value_delimiter = ',')]
        omegas: Option<Vec<f64>>,
        /// Repeat the simulation at dt/2 and report the discretisation drift.
        #[arg(long)]
        refine: bool,
    },
    /// Fit cost parameters to an observed moment series.
    Recover {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "auto")]
        branch: String,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
}

#[derive(Debug, Args)]
struct McArgs {
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize)]
struct Parameters {
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    xgrid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    omegas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    refine: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    branch: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

/// Record of one run: enough to reproduce every output byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_sha256: Option<String>,
    parameters: Parameters,
    pub outputs: Vec<OutputFile>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let sha256 = io::write_file(&self.dir.join(name), contents)?;
        self.files.push(OutputFile {
            file: name.to_string(),
            sha256,
        });
        Ok(())
    }

    fn csv(&mut self, name: &str, table: &CsvTable) -> Result<()> {
        self.write(name, &table.render())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
        self.write(name, &text)
    }

    fn finish(self, command: &str, scenario: Option<&ScenarioSpec>, input_sha256: Option<String>, parameters: Parameters) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            scenario: scenario.map(|s| s.to_json()),
            input_sha256,
            parameters,
            outputs: self.files,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Schema(e.to_string()))?;
        io::write_file(&self.dir.join("manifest.json"), &text)?;
        Ok(())
    }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn execute<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let pool = match thread_pool() {
        Ok(pool) => pool,
        Err(e) => return report(e),
    };
    match pool.install(|| run(cli.command)) {
        Ok(code) => code,
        Err(e) => report(e),
    }
}

fn report(e: Error) -> i32 {
    eprintln!("error: {e}");
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_NUMERICAL
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Argument(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Simulation(format!("thread pool: {e}")))
}

fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    parse_scenario(&io::read_to_string(path)?)
}

/// Backward solve plus forward moments; mean-field scenarios go through the fixed point.
fn solve_forward(spec: &ScenarioSpec, grid: usize) -> Result<(HjbSolution, MomentPath)> {
    if spec.is_meanfield() {
        let mf = solve_meanfield_fixedpoint(spec, grid, DEFAULT_PICARD_TOL, DEFAULT_PICARD_MAX_ITER)?;
        Ok((mf.hjb, mf.moments))
    } else {
        let sol = solve_backward(spec, grid)?;
        let path = propagate_moments(&sol, spec)?;
        Ok((sol, path))
    }
}

pub fn density_file_name(t: f64) -> String {
    format!("density_t{t:.6}.csv")
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Validate { scenario } => {
            let spec = load_scenario(&scenario)?;
            println!(
                "valid scenario: dimension={}, T={}, jump={}",
                spec.dimension,
                io::fmt_num(spec.horizon),
                spec.jump.type_name()
            );
            Ok(EXIT_OK)
        }
        Command::Solve { common } => {
            let spec = load_scenario(&common.scenario)?;
            let (sol, path) = solve_forward(&spec, common.grid)?;
            let mut out = Outputs::create(&common.out)?;
            out.csv("hjb.csv", &sol.to_table())?;
            out.csv("moments.csv", &path.to_table())?;
            let params = Parameters {
                grid: Some(common.grid),
                ..Default::default()
            };
            out.finish("solve", Some(&spec), None, params)?;
            Ok(EXIT_OK)
        }
        Command::Density { common, times, xgrid } => {
            let spec = load_scenario(&common.scenario)?;
            let (sol, _) = solve_forward(&spec, common.grid)?;
            let ev = CharFunEvaluator::new(&spec, &sol)?;
            let mut out = Outputs::create(&common.out)?;
            for &t in &times {
                let params = DensityParams {
                    points: xgrid,
                    ..Default::default()
                };
                let grid = invert_density(&ev, t, params)?;
                out.csv(&density_file_name(t), &grid.to_table())?;
            }
            let params = Parameters {
                grid: Some(common.grid),
                xgrid: Some(xgrid),
                times: Some(times),
                ..Default::default()
            };
            out.finish("density", Some(&spec), None, params)?;
            Ok(EXIT_OK)
        }
        Command::Simulate { common, mc, endpoints } => {
            let spec = load_scenario(&common.scenario)?;
            let (sol, _) = solve_forward(&spec, common.grid)?;
            let times = mc.times.unwrap_or_default();
            let cfg = SimConfig {
                n_paths: mc.paths,
                dt: mc.dt,
                seed: mc.seed,
                record_times: times.clone(),
                keep_endpoints: endpoints,
            };
            let sim = simulate_paths(&spec, &sol, &cfg)?;
            let mut out = Outputs::create(&common.out)?;
            out.csv("simulated_moments.csv", &sim.to_table())?;
            if endpoints {
                out.csv("endpoints.csv", &sim.endpoints_table()?)?;
            }
            let params = Parameters {
                grid: Some(common.grid),
                paths: Some(mc.paths),
                dt: Some(mc.dt),
                seed: Some(mc.seed),
                times: Some(times),
                ..Default::default()
            };
            out.finish("simulate", Some(&spec), None, params)?;
            Ok(EXIT_OK)
        }
        Command::Compare {
            common,
            mc,
            omegas,
            refine,
        } => {
            let spec = load_scenario(&common.scenario)?;
            let (sol, path) = solve_forward(&spec, common.grid)?;
            let times = mc
                .times
                .unwrap_or_else(|| vec![spec.horizon / 2.0, spec.horizon]);
            let omegas = omegas.unwrap_or_else(|| vec![0.5, 1.0, 2.0]);
            let cfg = SimConfig {
                n_paths: mc.paths,
                dt: mc.dt,
                seed: mc.seed,
                record_times: times.clone(),
                keep_endpoints: !omegas.is_empty(),
            };
            let sim = simulate_paths(&spec, &sol, &cfg)?;
            let fine = if refine {
                let cfg = SimConfig {
                    dt: mc.dt / 2.0,
                    keep_endpoints: false,
                    ..cfg.clone()
                };
                Some(simulate_paths(&spec, &sol, &cfg)?)
            } else {
                None
            };
            let ev = CharFunEvaluator::new(&spec, &sol)?;
            let report = compare_report(&ev, &sol, &sim, &omegas, fine.as_ref())?;
            let mut out = Outputs::create(&common.out)?;
            out.csv("hjb.csv", &sol.to_table())?;
            out.csv("moments.csv", &path.to_table())?;
            out.csv("simulated_moments.csv", &sim.to_table())?;
            out.json("report.json", &report)?;
            let params = Parameters {
                grid: Some(common.grid),
                paths: Some(mc.paths),
                dt: Some(mc.dt),
                seed: Some(mc.seed),
                times: Some(times),
                omegas: Some(omegas),
                refine: Some(refine),
                ..Default::default()
            };
            out.finish("compare", Some(&spec), None, params)?;
            for c in report.comparisons.iter().filter(|c| !c.pass) {
                eprintln!("FAIL {} at t={}: z={}", c.quantity, io::fmt_num(c.t), io::fmt_num(c.z));
            }
            Ok(if report.pass { EXIT_OK } else { EXIT_COMPARE_FAIL })
        }
        Command::Recover { input, out, branch } => {
            let text = io::read_to_string(&input)?;
            let series = ObservedSeries::from_table(&CsvTable::parse(&text)?)?;
            let params = fit_parameters(&series, Some(&branch))?;
            let diagnostics = evaluate_fit(&params, &series)?;
            let mut files = Outputs::create(&out)?;
            files.json("recovered.json", &params)?;
            files.csv("fit_residuals.csv", &diagnostics.to_table())?;
            let manifest_params = Parameters {
                branch: Some(branch),
                ..Default::default()
            };
            files.finish("recover", None, Some(io::sha256_hex(text.as_bytes())), manifest_params)?;
            Ok(EXIT_OK)
        }
    }
}
