//! `bdf2dc`: convergence tables, starter matrices, perturbation probes, DOC
//! reports and adaptive runs from the command line.
//!
//! Exit status: 0 on success, 1 if any study cell failed, 2 on invalid
//! arguments.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdf2dc::adaptive::{AdaptiveConfig, Estimator};
use bdf2dc::bench::{
    adaptive_demo_table, doc_report_table, run_adaptive_demo, run_convergence_study, run_derivative_study,
    run_doc_report, run_perturbation_probe, run_starting_matrix, starting_matrix_table, MeshFamily, OutputFormat,
    PerturbationSpec, RatioSource, StudySpec, Table,
};
use bdf2dc::implicit_solver::{SolverConfig, SolverKind};
use bdf2dc::schemes::{ErrorMeasure, Stage};
use bdf2dc::starters::StarterKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bdf2dc", version, about = "Variable-step BDF2 deferred-correction studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Errors and observed orders over a sequence of meshes.
    Converge(StudyArgs),
    /// One convergence table per starter assignment.
    Starters(StudyArgs),
    /// Deviation of randomly perturbed runs from the nominal run.
    Perturb(StudyArgs),
    /// DOC kernel and decay-factor diagnostics for a ratio sequence.
    DocReport(StudyArgs),
    /// Adaptive runs of example3.
    Adaptive(StudyArgs),
}

#[derive(Args, Debug, Clone)]
struct StudyArgs {
    /// Plain `key = value` file; keys mirror the long flags, command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// example1 | example2 | example3.
    #[arg(long, default_value = "example1")]
    problem: String,
    /// uniform | graded | random | geometric (doc-report also accepts constant).
    #[arg(long, default_value = "uniform")]
    mesh: String,
    /// Grading exponent of the graded mesh.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Seed of the random mesh and of perturbation noise.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Step ratio of the geometric mesh (or of a constant ratio sequence).
    #[arg(long, default_value_t = 3.0)]
    ratio: f64,
    /// Number of steps; repeat or separate with commas.
    #[arg(long = "N", value_delimiter = ',')]
    n: Vec<usize>,
    /// Final time; adaptive accepts several.
    #[arg(long, value_delimiter = ',')]
    horizon: Vec<f64>,
    /// Last stage of the cascade: bdf2 | dc3 | dc34 | dc4p.
    #[arg(long, default_value = "dc3")]
    chain: String,
    /// Starters, one for all stages or one per stage (comma separated);
    /// `starters` takes this flag repeatedly.
    #[arg(long)]
    start: Vec<String>,
    /// auto | fixed-point | newton.
    #[arg(long)]
    solver: Option<String>,
    /// Implicit solver tolerance.
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Error measure: max (over levels) | final.
    #[arg(long, default_value = "max")]
    error: String,
    /// csv | md.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Output file (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Initial value for example3; adaptive accepts several.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    v0: Vec<f64>,
    /// Perturbation amplitudes (perturb).
    #[arg(long, value_delimiter = ',')]
    amplitude: Vec<f64>,
    /// Per-stage perturbation multipliers (perturb).
    #[arg(long, value_delimiter = ',')]
    stage_scale: Vec<f64>,
    /// Add wall-clock columns (output is then no longer reproducible).
    #[arg(long)]
    timing: bool,
    /// Report errors of the discrete time derivative (converge).
    #[arg(long)]
    derivative: bool,
    /// Estimator stage pair for adaptive runs: e23 | e34 | e24p.
    #[arg(long, default_value = "e23")]
    estimator: String,
    /// Adaptive acceptance tolerance.
    #[arg(long, default_value_t = 0.1)]
    adaptive_tol: f64,
    /// Adaptive safety factor.
    #[arg(long, default_value_t = 1e3)]
    safety: f64,
    #[arg(long, default_value_t = 1e-3)]
    tau_min: f64,
    #[arg(long, default_value_t = 0.1)]
    tau_max: f64,
    /// Rejections allowed per level before the run fails.
    #[arg(long, default_value_t = 20)]
    max_rejects: usize,
    /// Also run the uniform mesh with tau = tau_min.
    #[arg(long)]
    uniform_baseline: bool,
    /// Directory for accepted-mesh CSV files of adaptive runs.
    #[arg(long)]
    mesh_dir: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Spec(String),
    Io(io::Error),
}

impl From<bdf2dc::Error> for Failure {
    fn from(e: bdf2dc::Error) -> Self {
        Self::Spec(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

fn spec_err(msg: impl Into<String>) -> Failure {
    Failure::Spec(msg.into())
}

const REPEATABLE: [&str; 6] = ["N", "horizon", "start", "v0", "amplitude", "stage-scale"];
const SWITCHES: [&str; 3] = ["timing", "derivative", "uniform-baseline"];

/// Turns a config file into flags for every key not already given on the command line.
fn config_tokens(path: &Path, given: &[String]) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| spec_err(format!("cannot read {}: {e}", path.display())))?;
    let mut tokens = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| spec_err(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
        let key = key.trim().replace('_', "-");
        let key = if key.eq_ignore_ascii_case("n") { "N".to_string() } else { key };
        let value = value.trim();
        if key == "config" {
            return Err(spec_err("config files cannot include other config files"));
        }
        let flag = format!("--{key}");
        if given.iter().any(|g| g == &flag || g.starts_with(&format!("{flag}="))) {
            continue;
        }
        if SWITCHES.contains(&key.as_str()) {
            match value {
                "true" | "yes" | "1" => tokens.push(flag),
                "false" | "no" | "0" => {}
                other => return Err(spec_err(format!("{key}: expected true or false, got `{other}`"))),
            }
        } else if REPEATABLE.contains(&key.as_str()) && key != "start" {
            for v in value.split(|c: char| c == ',' || c.is_whitespace()).filter(|v| !v.is_empty()) {
                tokens.push(format!("{flag}={v}"));
            }
        } else if key == "start" {
            for v in value.split(';').map(str::trim).filter(|v| !v.is_empty()) {
                tokens.push(format!("{flag}={v}"));
            }
        } else {
            tokens.push(format!("{flag}={value}"));
        }
    }
    Ok(tokens)
}

fn expand_config(args: Vec<String>) -> Result<Vec<String>, Failure> {
    let pos = args.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else {
        return Ok(args);
    };
    let path = if let Some(p) = args[pos].strip_prefix("--config=") {
        PathBuf::from(p)
    } else {
        PathBuf::from(args.get(pos + 1).ok_or_else(|| spec_err("--config needs a path"))?)
    };
    let tokens = config_tokens(&path, &args)?;
    let mut out = args;
    out.extend(tokens);
    Ok(out)
}

fn parse_starters(s: &str) -> Result<Vec<StarterKind>, Failure> {
    s.split([',', '+'])
        .map(|x| x.trim().parse::<StarterKind>().map_err(Failure::from))
        .collect()
}

impl StudyArgs {
    fn format(&self) -> Result<OutputFormat, Failure> {
        Ok(self.format.parse()?)
    }

    fn solver(&self, default: SolverKind) -> Result<SolverConfig, Failure> {
        let kind = match &self.solver {
            Some(s) => s.parse()?,
            None => default,
        };
        if !(self.tol > 0.0) {
            return Err(spec_err(format!("--tol must be positive, got {}", self.tol)));
        }
        Ok(SolverConfig::default().with_kind(kind).with_tol(self.tol))
    }

    fn single<T: Copy>(values: &[T], flag: &str) -> Result<Option<T>, Failure> {
        match values {
            [] => Ok(None),
            [x] => Ok(Some(*x)),
            _ => Err(spec_err(format!("--{flag} takes a single value here"))),
        }
    }

    fn starters(&self, default: &[StarterKind]) -> Result<Vec<StarterKind>, Failure> {
        match self.start.as_slice() {
            [] => Ok(default.to_vec()),
            [s] => parse_starters(s),
            _ => Err(spec_err("--start may be given once here (use commas for several stages)")),
        }
    }

    fn study(&self) -> Result<StudySpec, Failure> {
        Ok(StudySpec {
            problem: self.problem.clone(),
            v0: Self::single(&self.v0, "v0")?.unwrap_or(0.5),
            horizon: Self::single(&self.horizon, "horizon")?,
            mesh: MeshFamily::parse(&self.mesh, self.gamma, self.seed, self.ratio)?,
            ns: self.n.clone(),
            top: self.chain.parse::<Stage>()?,
            starters: self.starters(&[StarterKind::Exact])?,
            solver: self.solver(SolverKind::Auto)?,
            measure: self.error.parse::<ErrorMeasure>()?,
            timing: self.timing,
        })
    }
}

fn emit(args: &StudyArgs, table: &Table) -> Result<(), Failure> {
    let format = args.format()?;
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path)?;
            table.write(format, io::BufWriter::new(file))?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            table.write(format, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

/// Returns whether any cell failed.
fn run(command: Command) -> Result<bool, Failure> {
    match command {
        Command::Converge(a) => {
            let spec = a.study()?;
            a.format()?;
            if a.derivative {
                let t = run_derivative_study(&spec)?;
                emit(&a, &t)?;
                return Ok(false);
            }
            let t = run_convergence_study(&spec)?;
            emit(&a, &t.to_table())?;
            Ok(t.has_failures())
        }
        Command::Starters(a) => {
            let base = StudyArgs { start: Vec::new(), ..a.clone() }.study()?;
            a.format()?;
            if a.start.is_empty() {
                return Err(spec_err("starters needs at least one --start assignment"));
            }
            let assignments = a.start.iter().map(|s| parse_starters(s)).collect::<Result<Vec<_>, _>>()?;
            let groups = run_starting_matrix(&base, &assignments)?;
            emit(&a, &starting_matrix_table(&groups))?;
            Ok(groups.iter().any(|g| g.table.has_failures()))
        }
        Command::Perturb(a) => {
            let spec = a.study()?;
            a.format()?;
            let perturb = PerturbationSpec {
                amplitudes: if a.amplitude.is_empty() { vec![1e-8] } else { a.amplitude.clone() },
                stage_scales: if a.stage_scale.is_empty() { vec![1.0] } else { a.stage_scale.clone() },
                seed: a.seed,
            };
            let report = run_perturbation_probe(&spec, &perturb)?;
            emit(&a, &report.to_table())?;
            Ok(report.has_failures())
        }
        Command::DocReport(a) => {
            a.format()?;
            let n = StudyArgs::single(&a.n, "N")?.ok_or_else(|| spec_err("doc-report needs --N"))?;
            let source = if a.mesh == "constant" {
                RatioSource::Constant { ratio: a.ratio, n }
            } else {
                RatioSource::Mesh {
                    family: MeshFamily::parse(&a.mesh, a.gamma, a.seed, a.ratio)?,
                    horizon: StudyArgs::single(&a.horizon, "horizon")?.unwrap_or(1.0),
                    n,
                }
            };
            let rows = run_doc_report(&source)?;
            emit(&a, &doc_report_table(&rows))?;
            Ok(false)
        }
        Command::Adaptive(a) => {
            a.format()?;
            let config = AdaptiveConfig {
                safety: a.safety,
                tol: a.adaptive_tol,
                tau_min: a.tau_min,
                tau_max: a.tau_max,
                t1: a.tau_min,
                estimator: a.estimator.parse::<Estimator>()?,
                max_rejects_per_level: a.max_rejects,
            };
            let spec = bdf2dc::bench::AdaptiveDemoSpec {
                v0s: if a.v0.is_empty() { vec![0.5] } else { a.v0.clone() },
                horizons: if a.horizon.is_empty() { vec![100.0] } else { a.horizon.clone() },
                config,
                starters: a.starters(&[StarterKind::Bdf1, StarterKind::Rk2])?,
                solver: a.solver(SolverKind::FixedPoint)?,
                uniform_baseline: a.uniform_baseline,
                timing: a.timing,
            };
            let rows = run_adaptive_demo(&spec)?;
            if let Some(dir) = &a.mesh_dir {
                fs::create_dir_all(dir)?;
                for r in &rows {
                    if let Some(run) = &r.run {
                        let name = format!("adaptive_v0_{}_T_{}.csv", r.v0, r.horizon);
                        run.write_mesh_csv(io::BufWriter::new(fs::File::create(dir.join(name))?))?;
                    }
                }
            }
            emit(&a, &adaptive_demo_table(&rows))?;
            Ok(rows.iter().any(|r| r.failure.is_some() || matches!(r.uniform, Some(Err(_)))))
        }
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(Failure::Spec(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli.command) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("error: at least one study cell failed (see the failure column)");
            ExitCode::from(1)
        }
        Err(Failure::Spec(msg)) => {
            eprintln!("error: invalid specification: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
