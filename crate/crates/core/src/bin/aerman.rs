use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use aerman::controller::Clf;
use aerman::sim::{read_flat_samples, simulate_closed_loop, write_csv, write_flat_conversion, write_json, Scenario};
use aerman::verify::{self, Budget, Suite};
use aerman::{AMParams, Error, Result};

/// Simulation, flatness conversion and self-checks for aerial manipulators.
#[derive(Parser)]
#[command(name = "aerman", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    All,
    Oracle,
    Flatness,
    Controller,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::All => Suite::All,
            SuiteArg::Oracle => Suite::Oracle,
            SuiteArg::Flatness => Suite::Flatness,
            SuiteArg::Controller => Suite::Controller,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop scenario.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Override the scenario duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Convert a sampled flat trajectory into states and inputs.
    Flatness {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Numerical self-checks.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Vehicle parameters; defaults to the built-in two-link model.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Solve the Riccati equation of the k-joint error system.
    Care {
        #[arg(long)]
        k: usize,
        /// Weight matrix as whitespace or comma separated rows; a single row is a diagonal.
        #[arg(long)]
        q: Option<PathBuf>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn read_weight(path: &Path, n: usize) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("'{s}' is not a number"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    match rows.as_slice() {
        [d] if d.len() == n => Ok(DMatrix::from_diagonal(&d.clone().into())),
        _ if rows.len() == n && rows.iter().all(|r| r.len() == n) => Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j])),
        _ => Err(Error::Config(format!("weight must be {n} numbers or {n}x{n}"))),
    }
}

fn simulate(config: &Path, out: &Path, format: Format, duration: Option<f64>) -> Result<ExitCode> {
    let mut scenario = Scenario::load(config)?;
    if let Some(d) = duration {
        scenario = scenario.with_duration(d)?;
    }
    let start = Instant::now();
    let traj = simulate_closed_loop(&scenario)?;
    let s = &traj.summary;
    match format {
        Format::Csv => write_csv(&traj, create(out)?)?,
        Format::Json => write_json(&traj, create(out)?)?,
    }
    eprintln!(
        "{}: {} control steps in {:.2?}, final |h| = {:.3e}, max(V' + lambda V) = {:.3e}, c = {:.3e}",
        s.name,
        s.control_steps,
        start.elapsed(),
        s.final_h_norm,
        s.max_model_decrease_violation,
        s.zoh_constant
    );
    match &s.abort {
        Some(reason) => {
            eprintln!("rollout aborted: {reason}");
            Ok(ExitCode::from(3))
        }
        None => Ok(ExitCode::SUCCESS),
    }
}

fn flatness(trajectory: &Path, params: &Path, out: &Path) -> Result<ExitCode> {
    let params = AMParams::load(params)?;
    let samples = read_flat_samples(BufReader::new(File::open(trajectory)?), params.k())?;
    write_flat_conversion(&params, &samples, create(out)?)?;
    eprintln!("converted {} samples", samples.len());
    Ok(ExitCode::SUCCESS)
}

fn run_verify(suite: Suite, seed: u64, params: Option<&Path>, json: Option<&Path>) -> Result<ExitCode> {
    let params = match params {
        Some(p) => AMParams::load(p)?,
        None => AMParams::planar_two_link(),
    };
    let report = verify::run(&params, suite, seed, Budget::default())?;
    println!("{report}");
    if let Some(path) = json {
        serde_json::to_writer_pretty(create(path)?, &report)?;
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn care(k: usize, q: Option<&Path>) -> Result<ExitCode> {
    let n = 11 + 2 * k;
    let weight = match q {
        Some(path) => read_weight(path, n)?,
        None => DMatrix::identity(n, n),
    };
    let clf = Clf::new(k, weight, None)?;
    let (lo, hi) = clf.p_eigen_range();
    println!("P ({n}x{n}):");
    for row in clf.p.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>12.6}")).collect();
        println!("{}", cells.join(" "));
    }
    println!("eig(P) in [{lo:.6e}, {hi:.6e}]");
    println!("lambda = {:.6e}", clf.lambda);
    println!("residual = {:.3e}", clf.residual());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, format, duration } => simulate(&config, &out, format, duration),
        Command::Flatness { trajectory, params, out } => flatness(&trajectory, &params, &out),
        Command::Verify { suite, seed, params, json } => run_verify(suite.into(), seed, params.as_deref(), json.as_deref()),
        Command::Care { k, q } => care(k, q.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
