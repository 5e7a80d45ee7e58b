//! Study runners behind the `bdf2dc` command line: convergence tables,
//! starter matrices, perturbation probes, DOC reports and adaptive runs.
//!
//! Every runner returns plain data plus a [`Table`] view that renders to CSV
//! or aligned markdown. Independent cells run in parallel; results keep the
//! input order, and wall times are only recorded when asked for, so output
//! is byte-identical across runs.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adaptive::{adaptive_integrate, AdaptiveConfig, AdaptiveRun};
use crate::doc_diagnostics::{derivative_error_study, doc_report, DocReportRow};
use crate::error::{invalid, Error, Result};
use crate::implicit_solver::SolverConfig;
use crate::mesh::Mesh;
use crate::problems::{by_name, OdeProblem, State};
use crate::schemes::{
    integrate, integrate_with, observed_order, ErrorMeasure, IntegrationOptions, SchemeChain, Stage, Trajectory,
};
use crate::starters::StarterKind;

/// Rendering target for tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Markdown,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(invalid(format!("unknown format `{other}` (csv|md)"))),
        }
    }
}

/// A rectangular table of preformatted cells.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()
    }

    pub fn write_markdown<W: Write>(&self, mut out: W) -> io::Result<()> {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.headers[c].len(), 3])
                    .max()
                    .unwrap_or(3)
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            format!("| {} |", padded.join(" | "))
        };
        writeln!(out, "{}", line(&self.headers))?;
        let rule: Vec<String> = widths.iter().map(|w| format!("{}:", "-".repeat(w - 1))).collect();
        writeln!(out, "| {} |", rule.join(" | "))?;
        for row in &self.rows {
            writeln!(out, "{}", line(row))?;
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, format: OutputFormat, out: W) -> io::Result<()> {
        match format {
            OutputFormat::Csv => self.write_csv(out),
            OutputFormat::Markdown => self.write_markdown(out),
        }
    }

    pub fn render(&self, format: OutputFormat) -> String {
        let mut buf = Vec::new();
        self.write(format, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("cells are UTF-8")
    }
}

fn sci(x: f64) -> String {
    format!("{x:.4e}")
}

fn fixed(x: f64) -> String {
    let x = if x.abs() < 5e-5 { 0.0 } else { x };
    format!("{x:.4}")
}

fn opt(x: Option<f64>, f: fn(f64) -> String) -> String {
    x.map(f).unwrap_or_default()
}

/// Mesh family and its parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeshFamily {
    Uniform,
    Graded { gamma: f64 },
    Random { seed: u64 },
    Geometric { ratio: f64 },
}

impl MeshFamily {
    /// Builds a family from its CLI name and the flag values for its parameter.
    pub fn parse(name: &str, gamma: f64, seed: u64, ratio: f64) -> Result<Self> {
        match name {
            "uniform" => Ok(Self::Uniform),
            "graded" => Ok(Self::Graded { gamma }),
            "random" => Ok(Self::Random { seed }),
            "geometric" => Ok(Self::Geometric { ratio }),
            other => Err(invalid(format!(
                "unknown mesh `{other}` (uniform|graded|random|geometric)"
            ))),
        }
    }

    pub fn build(&self, horizon: f64, n: usize) -> Result<Mesh> {
        match *self {
            Self::Uniform => Mesh::uniform(horizon, n),
            Self::Graded { gamma } => Mesh::graded(horizon, n, gamma),
            Self::Random { seed } => Mesh::random(horizon, n, seed),
            Self::Geometric { ratio } => Mesh::geometric(horizon, n, ratio),
        }
    }
}

impl fmt::Display for MeshFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform => write!(f, "uniform"),
            Self::Graded { gamma } => write!(f, "graded(gamma={gamma})"),
            Self::Random { seed } => write!(f, "random(seed={seed})"),
            Self::Geometric { ratio } => write!(f, "geometric(ratio={ratio})"),
        }
    }
}

/// Everything a convergence study needs.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    pub problem: String,
    /// Initial value for `example3`; ignored elsewhere.
    pub v0: f64,
    /// Overrides the problem's default horizon.
    pub horizon: Option<f64>,
    pub mesh: MeshFamily,
    /// Strictly increasing level counts.
    pub ns: Vec<usize>,
    /// Last stage of the cascade.
    pub top: Stage,
    /// One starter for all stages, or one per stage.
    pub starters: Vec<StarterKind>,
    pub solver: SolverConfig,
    pub measure: ErrorMeasure,
    /// Record wall-clock time per cell.
    pub timing: bool,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            problem: "example1".into(),
            v0: 0.5,
            horizon: None,
            mesh: MeshFamily::Uniform,
            ns: Vec::new(),
            top: Stage::Dc3,
            starters: vec![StarterKind::Exact],
            solver: SolverConfig::default(),
            measure: ErrorMeasure::MaxOverLevels,
            timing: false,
        }
    }
}

impl StudySpec {
    pub fn problem(&self) -> Result<OdeProblem> {
        by_name(&self.problem, self.v0)
    }

    pub fn chain(&self) -> Result<SchemeChain> {
        SchemeChain::cascade(self.top, &self.starters)
    }

    pub fn horizon_for(&self, problem: &OdeProblem) -> f64 {
        self.horizon.unwrap_or_else(|| problem.horizon())
    }

    /// Checks the spec and resolves problem, chain and horizon.
    pub fn resolve(&self) -> Result<(OdeProblem, SchemeChain, f64)> {
        if self.ns.is_empty() {
            return Err(invalid("at least one N is required"));
        }
        if self.ns.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid(format!("N sequence must be strictly increasing, got {:?}", self.ns)));
        }
        let problem = self.problem()?;
        if !problem.has_exact() {
            return Err(Error::MissingExactSolution(problem.name().to_string()));
        }
        let chain = self.chain()?;
        let horizon = self.horizon_for(&problem);
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok((problem, chain, horizon))
    }
}

/// One N of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    /// Largest step of the mesh, `tau(N)`.
    pub max_step: f64,
    /// `T / N`.
    pub nominal_step: f64,
    /// One error per stage; empty when the cell failed.
    pub errors: Vec<f64>,
    /// Order against the previous row, one per stage.
    pub orders: Vec<Option<f64>>,
    pub wall_time: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub problem: String,
    pub mesh: String,
    pub starter_label: String,
    pub stages: Vec<Stage>,
    pub measure: ErrorMeasure,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    fn stage_index(&self, stage: Stage) -> Option<usize> {
        self.stages.iter().position(|&s| s == stage)
    }

    /// Errors of `stage`, `None` for failed rows.
    pub fn errors(&self, stage: Stage) -> Vec<Option<f64>> {
        let Some(s) = self.stage_index(stage) else {
            return Vec::new();
        };
        self.rows.iter().map(|r| r.errors.get(s).copied()).collect()
    }

    /// Orders of `stage` between consecutive rows.
    pub fn orders(&self, stage: Stage) -> Vec<Option<f64>> {
        let Some(s) = self.stage_index(stage) else {
            return Vec::new();
        };
        self.rows.iter().skip(1).map(|r| r.orders[s]).collect()
    }

    /// Order of `stage` at the last doubling.
    pub fn last_order(&self, stage: Stage) -> Option<f64> {
        self.orders(stage).last().copied().flatten()
    }

    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.failure.is_some())
    }

    pub fn to_table(&self) -> Table {
        let timing = self.rows.iter().any(|r| r.wall_time.is_some());
        let mut headers = vec!["N".to_string(), "max_step".to_string()];
        for s in &self.stages {
            headers.push(format!("err_{s}"));
            headers.push(format!("order_{s}"));
        }
        if timing {
            headers.push("time_s".into());
        }
        headers.push("failure".into());
        let mut t = Table::new(headers);
        for r in &self.rows {
            let mut row = vec![r.n.to_string(), sci(r.max_step)];
            for s in 0..self.stages.len() {
                row.push(opt(r.errors.get(s).copied(), sci));
                row.push(opt(r.orders[s], fixed));
            }
            if timing {
                row.push(opt(r.wall_time, |x| format!("{x:.3}")));
            }
            row.push(r.failure.clone().unwrap_or_default());
            t.push(row);
        }
        t
    }
}

/// Step sizes used in the order formula: the max steps, or `T/N` when the
/// max step does not change between the two meshes (fixed-ratio meshes).
fn order_steps(prev: &ConvergenceRow, cur: &ConvergenceRow) -> (f64, f64) {
    if (prev.max_step / cur.max_step - 1.0).abs() < 1e-12 {
        (prev.nominal_step, cur.nominal_step)
    } else {
        (prev.max_step, cur.max_step)
    }
}

fn fill_orders(rows: &mut [ConvergenceRow], stages: usize) {
    for i in 0..rows.len() {
        rows[i].orders = vec![None; stages];
        if i == 0 {
            continue;
        }
        let (prev, cur) = (&rows[i - 1], &rows[i]);
        if prev.errors.len() != stages || cur.errors.len() != stages {
            continue;
        }
        let (tau_prev, tau_cur) = order_steps(prev, cur);
        let orders = (0..stages)
            .map(|s| Some(observed_order(prev.errors[s], cur.errors[s], tau_prev, tau_cur)))
            .collect();
        rows[i].orders = orders;
    }
}

fn run_cell(
    problem: &OdeProblem,
    mesh: &Result<Mesh>,
    chain: &SchemeChain,
    solver: &SolverConfig,
    measure: ErrorMeasure,
) -> Result<Vec<f64>> {
    let mesh = mesh.as_ref().map_err(Clone::clone)?;
    let tr = integrate(problem, mesh, chain, solver)?;
    chain
        .stages()
        .iter()
        .map(|&s| tr.error(problem, s, measure))
        .collect()
}

/// Integrates the chain on one mesh per N and tabulates errors and orders.
///
/// Only an invalid spec is an error; a failing cell is recorded in its row.
pub fn run_convergence_study(spec: &StudySpec) -> Result<ConvergenceTable> {
    let (problem, chain, horizon) = spec.resolve()?;
    let mut rows: Vec<ConvergenceRow> = spec
        .ns
        .par_iter()
        .map(|&n| {
            let mesh = spec.mesh.build(horizon, n);
            let max_step = mesh.as_ref().map(Mesh::max_step).unwrap_or(f64::NAN);
            let start = Instant::now();
            let result = run_cell(&problem, &mesh, &chain, &spec.solver, spec.measure);
            let wall_time = spec.timing.then(|| start.elapsed().as_secs_f64());
            let (errors, failure) = match result {
                Ok(e) => (e, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            ConvergenceRow {
                n,
                max_step,
                nominal_step: horizon / n as f64,
                errors,
                orders: Vec::new(),
                wall_time,
                failure,
            }
        })
        .collect();
    fill_orders(&mut rows, chain.len());
    Ok(ConvergenceTable {
        problem: problem.name().to_string(),
        mesh: spec.mesh.to_string(),
        starter_label: chain.starter_label(),
        stages: chain.stages().to_vec(),
        measure: spec.measure,
        rows,
    })
}

/// Orders each stage can reach with the given starters: a stage gains at most
/// one order (two for DC4p) over its source and is capped by its starter's
/// local order.
pub fn expected_orders(chain: &SchemeChain) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(chain.len());
    for (i, (&stage, &starter)) in chain.stages().iter().zip(chain.starters()).enumerate() {
        let mut order = stage.design_order();
        if let Some(src) = stage.source() {
            let j = chain.index_of(src).expect("validated chain");
            debug_assert!(j < i);
            order = order.min(out[j] + stage.design_order() - src.design_order());
        }
        if let Some(local) = starter.local_order() {
            order = order.min(local);
        }
        out.push(order);
    }
    out
}

/// One starter assignment of a starting matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StartingGroup {
    pub starters: Vec<StarterKind>,
    pub expected: Vec<u32>,
    pub table: ConvergenceTable,
}

/// Runs `base` once per starter assignment.
pub fn run_starting_matrix(base: &StudySpec, assignments: &[Vec<StarterKind>]) -> Result<Vec<StartingGroup>> {
    if assignments.is_empty() {
        return Err(invalid("at least one starter assignment is required"));
    }
    let specs: Vec<StudySpec> = assignments
        .iter()
        .map(|a| StudySpec { starters: a.clone(), ..base.clone() })
        .collect();
    for s in &specs {
        s.resolve()?;
    }
    specs
        .par_iter()
        .map(|s| {
            let chain = s.chain()?;
            Ok(StartingGroup {
                starters: chain.starters().to_vec(),
                expected: expected_orders(&chain),
                table: run_convergence_study(s)?,
            })
        })
        .collect()
}

pub fn starting_matrix_table(groups: &[StartingGroup]) -> Table {
    let Some(first) = groups.first() else {
        return Table::default();
    };
    let stages = &first.table.stages;
    let mut headers = vec!["starters".to_string(), "N".to_string()];
    for s in stages {
        headers.extend([format!("err_{s}"), format!("order_{s}"), format!("expected_{s}")]);
    }
    headers.push("failure".into());
    let mut t = Table::new(headers);
    for g in groups {
        for r in &g.table.rows {
            let mut row = vec![g.table.starter_label.clone(), r.n.to_string()];
            for s in 0..stages.len() {
                row.push(opt(r.errors.get(s).copied(), sci));
                row.push(opt(r.orders[s], fixed));
                row.push(g.expected[s].to_string());
            }
            row.push(r.failure.clone().unwrap_or_default());
            t.push(row);
        }
    }
    t
}

/// Per-level derivative errors `max_k |d_tau e^k|` on the spec's meshes.
pub fn run_derivative_study(spec: &StudySpec) -> Result<Table> {
    let (problem, chain, horizon) = spec.resolve()?;
    let meshes = spec.ns.iter().map(|&n| spec.mesh.build(horizon, n)).collect::<Result<Vec<_>>>()?;
    let study = derivative_error_study(&problem, &meshes, &chain, &spec.solver)?;
    let mut headers = vec!["N".to_string(), "max_step".to_string()];
    for s in &study.stages {
        headers.extend([format!("dt_err_{s}"), format!("order_{s}"), format!("final_dt_err_{s}")]);
    }
    let mut t = Table::new(headers);
    let orders: Vec<Vec<f64>> = study.stages.iter().map(|&s| study.orders(s)).collect();
    for (i, r) in study.rows.iter().enumerate() {
        let mut row = vec![r.n.to_string(), sci(r.max_step)];
        for s in 0..study.stages.len() {
            row.push(sci(r.max_over_levels[s]));
            row.push(if i == 0 { String::new() } else { fixed(orders[s][i - 1]) });
            row.push(sci(r.final_level[s]));
        }
        t.push(row);
    }
    Ok(t)
}

/// Bounded random perturbations added to each stage equation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    /// Amplitudes `a` to probe; each level's `eps` has components in `[-a, a]`.
    pub amplitudes: Vec<f64>,
    /// Per-stage multipliers of `a` (one value applies to all stages).
    pub stage_scales: Vec<f64>,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { amplitudes: vec![1e-8], stage_scales: vec![1.0], seed: 0 }
    }
}

impl PerturbationSpec {
    fn scale(&self, stage_index: usize) -> f64 {
        if self.stage_scales.len() == 1 {
            self.stage_scales[0]
        } else {
            self.stage_scales[stage_index]
        }
    }

    fn validate(&self, stages: usize) -> Result<()> {
        if self.amplitudes.is_empty() {
            return Err(invalid("at least one perturbation amplitude is required"));
        }
        if let Some(a) = self.amplitudes.iter().chain(&self.stage_scales).find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(invalid(format!("perturbation amplitudes must be finite and >= 0, got {a}")));
        }
        if self.stage_scales.len() != 1 && self.stage_scales.len() != stages {
            return Err(invalid(format!(
                "{} stage scales given for a {stages}-stage chain",
                self.stage_scales.len()
            )));
        }
        Ok(())
    }
}

/// Noise vector with components uniform in `[-amplitude, amplitude)`.
///
/// The draw depends only on `(seed, stage_index, level)`, so the same noise
/// pattern is reused across amplitudes and meshes of equal length.
pub fn perturbation_noise(seed: u64, stage_index: usize, level: usize, dim: usize, amplitude: f64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage_index as u64);
    rng.set_word_pos(2 * (level as u128) * (dim as u128));
    State::from_fn(dim, |_, _| amplitude * rng.gen_range(-1.0..1.0))
}

/// Deviation of a perturbed run from the nominal run.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationRow {
    pub n: usize,
    pub max_step: f64,
    pub amplitude: f64,
    /// `max_n |v~^n - v^n|_inf` per stage; empty when the cell failed.
    pub deviations: Vec<f64>,
    pub failure: Option<String>,
}

impl PerturbationRow {
    pub fn max_deviation(&self) -> Option<f64> {
        (!self.deviations.is_empty()).then(|| self.deviations.iter().copied().fold(0.0, f64::max))
    }

    /// Max deviation over the largest injected perturbation; starts are unperturbed.
    pub fn amplification(&self, largest_eps: f64) -> Option<f64> {
        self.max_deviation().map(|d| if largest_eps > 0.0 { d / largest_eps } else { d })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    pub problem: String,
    pub mesh: String,
    pub stages: Vec<Stage>,
    pub max_scale: f64,
    pub rows: Vec<PerturbationRow>,
}

impl PerturbationReport {
    pub fn deviation(&self, n: usize, amplitude: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.amplitude == amplitude)
            .and_then(PerturbationRow::max_deviation)
    }

    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.failure.is_some())
    }

    pub fn to_table(&self) -> Table {
        let mut headers = vec!["N".to_string(), "max_step".to_string(), "amplitude".to_string()];
        headers.extend(self.stages.iter().map(|s| format!("dev_{s}")));
        headers.extend(["max_dev".to_string(), "amplification".to_string(), "failure".to_string()]);
        let mut t = Table::new(headers);
        for r in &self.rows {
            let mut row = vec![r.n.to_string(), sci(r.max_step), sci(r.amplitude)];
            for s in 0..self.stages.len() {
                row.push(opt(r.deviations.get(s).copied(), sci));
            }
            row.push(opt(r.max_deviation(), sci));
            row.push(opt(r.amplification(r.amplitude * self.max_scale), sci));
            row.push(r.failure.clone().unwrap_or_default());
            t.push(row);
        }
        t
    }
}

fn max_deviation(nominal: &Trajectory, perturbed: &Trajectory) -> Vec<f64> {
    nominal
        .histories
        .iter()
        .zip(&perturbed.histories)
        .map(|(a, b)| {
            a.values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| (x - y).amax())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Integrates nominal and perturbed systems on each mesh of `spec` and
/// records the largest deviation per stage for every amplitude.
pub fn run_perturbation_probe(spec: &StudySpec, perturb: &PerturbationSpec) -> Result<PerturbationReport> {
    let (problem, chain, horizon) = spec.resolve()?;
    perturb.validate(chain.len())?;
    let cells: Vec<(usize, f64)> = spec
        .ns
        .iter()
        .flat_map(|&n| perturb.amplitudes.iter().map(move |&a| (n, a)))
        .collect();
    let nominal: Vec<(Result<Mesh>, Result<Trajectory>)> = spec
        .ns
        .par_iter()
        .map(|&n| {
            let mesh = spec.mesh.build(horizon, n);
            let tr = mesh.as_ref().map_err(Clone::clone).and_then(|m| integrate(&problem, m, &chain, &spec.solver));
            (mesh, tr)
        })
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(n, amplitude)| {
            let idx = spec.ns.iter().position(|&m| m == n).expect("cell from ns");
            let (mesh, nominal) = &nominal[idx];
            let max_step = mesh.as_ref().map(Mesh::max_step).unwrap_or(f64::NAN);
            let result = (|| -> Result<Vec<f64>> {
                let mesh = mesh.as_ref().map_err(Clone::clone)?;
                let nominal = nominal.as_ref().map_err(Clone::clone)?;
                let stage_chain = chain.clone();
                let p = perturb.clone();
                let noise = move |stage: Stage, level: usize, dim: usize| {
                    let i = stage_chain.index_of(stage).expect("stage of the chain");
                    perturbation_noise(p.seed, i, level, dim, amplitude * p.scale(i))
                };
                let options = IntegrationOptions { zero_corrections: false, perturbation: Some(Arc::new(noise)) };
                let perturbed = integrate_with(&problem, mesh, &chain, &spec.solver, options)?;
                Ok(max_deviation(nominal, &perturbed))
            })();
            let (deviations, failure) = match result {
                Ok(d) => (d, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            PerturbationRow { n, max_step, amplitude, deviations, failure }
        })
        .collect();
    Ok(PerturbationReport {
        problem: problem.name().to_string(),
        mesh: spec.mesh.to_string(),
        stages: chain.stages().to_vec(),
        max_scale: (0..chain.len()).map(|i| perturb.scale(i)).fold(0.0, f64::max),
        rows,
    })
}

/// Where the step ratios of a DOC report come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioSource {
    /// Interior ratios of a mesh with `n` steps.
    Mesh { family: MeshFamily, horizon: f64, n: usize },
    /// `n - 1` copies of `ratio` (levels `2..=n`).
    Constant { ratio: f64, n: usize },
}

impl RatioSource {
    pub fn ratios(&self) -> Result<Vec<f64>> {
        match *self {
            Self::Mesh { family, horizon, n } => Ok(family.build(horizon, n)?.interior_ratios().to_vec()),
            Self::Constant { ratio, n } => {
                if n < 2 {
                    return Err(invalid(format!("DOC report needs n >= 2, got {n}")));
                }
                Ok(vec![ratio; n - 1])
            }
        }
    }
}

pub fn run_doc_report(source: &RatioSource) -> Result<Vec<DocReportRow>> {
    doc_report(&source.ratios()?)
}

pub fn doc_report_table(rows: &[DocReportRow]) -> Table {
    let mut t = Table::new([
        "n",
        "r_n",
        "kernel_sum",
        "sum_residual",
        "min_kernel",
        "orthogonality_residual",
        "sigma2",
        "margin2",
        "sigma3",
        "margin3",
        "sigma4",
        "margin4",
        "within_bounds",
    ]);
    for r in rows {
        let s = &r.sigma;
        t.push(vec![
            r.n.to_string(),
            sci(r.ratio),
            format!("{:.15}", r.kernel_sum),
            sci(r.sum_residual),
            sci(r.min_kernel),
            sci(r.orthogonality),
            sci(s.sigma2),
            sci(s.bound2() - s.sigma2),
            sci(s.sigma3),
            sci(s.bound3() - s.sigma3),
            sci(s.sigma4),
            sci(s.bound4() - s.sigma4),
            s.within_bounds().to_string(),
        ]);
    }
    t
}

/// Adaptive runs of `example3` over a grid of initial values and horizons.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveDemoSpec {
    pub v0s: Vec<f64>,
    pub horizons: Vec<f64>,
    pub config: AdaptiveConfig,
    pub starters: Vec<StarterKind>,
    pub solver: SolverConfig,
    /// Also integrate on the uniform mesh with `tau = tau_min`.
    pub uniform_baseline: bool,
    pub timing: bool,
}

impl Default for AdaptiveDemoSpec {
    fn default() -> Self {
        Self {
            v0s: vec![0.5],
            horizons: vec![100.0],
            config: AdaptiveConfig::default(),
            starters: vec![StarterKind::Bdf1, StarterKind::Rk2],
            solver: SolverConfig::default().with_kind(crate::implicit_solver::SolverKind::FixedPoint),
            uniform_baseline: false,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformBaseline {
    pub levels: usize,
    pub final_error: f64,
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptiveDemoRow {
    pub v0: f64,
    pub horizon: f64,
    pub run: Option<AdaptiveRun>,
    /// Final value of the top stage.
    pub final_value: Option<f64>,
    /// `|v(T) - v^N|` of the top stage.
    pub final_error: Option<f64>,
    pub wall_time: Option<f64>,
    pub uniform: Option<std::result::Result<UniformBaseline, String>>,
    pub failure: Option<String>,
}

impl AdaptiveDemoRow {
    pub fn levels(&self) -> Option<usize> {
        self.run.as_ref().map(AdaptiveRun::levels)
    }

    pub fn rejects(&self) -> Option<usize> {
        self.run.as_ref().map(|r| r.rejections.len())
    }
}

fn top_stage_for(config: &AdaptiveConfig) -> Stage {
    config.estimator.stages().0
}

/// Runs every `(v0, T)` pair; failures are recorded per row.
pub fn run_adaptive_demo(spec: &AdaptiveDemoSpec) -> Result<Vec<AdaptiveDemoRow>> {
    spec.config.validate()?;
    if spec.v0s.is_empty() || spec.horizons.is_empty() {
        return Err(invalid("adaptive demo needs at least one v0 and one horizon"));
    }
    let top = top_stage_for(&spec.config);
    let chain = SchemeChain::cascade(top, &spec.starters)?;
    let cells: Vec<(f64, f64)> = spec
        .v0s
        .iter()
        .flat_map(|&v0| spec.horizons.iter().map(move |&t| (v0, t)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(v0, horizon)| {
            let problem = crate::problems::example3(v0);
            let exact = crate::problems::example3_exact(horizon, v0);
            let start = Instant::now();
            let result = adaptive_integrate(&problem, &chain, &spec.solver, &spec.config, horizon);
            let wall_time = spec.timing.then(|| start.elapsed().as_secs_f64());
            let uniform = spec.uniform_baseline.then(|| uniform_baseline(&problem, &chain, spec, horizon, exact));
            match result {
                Ok(run) => {
                    let last = run.trajectory.history(top).expect("top stage").last()[0];
                    AdaptiveDemoRow {
                        v0,
                        horizon,
                        final_value: Some(last),
                        final_error: Some((last - exact).abs()),
                        run: Some(run),
                        wall_time,
                        uniform,
                        failure: None,
                    }
                }
                Err(e) => AdaptiveDemoRow {
                    v0,
                    horizon,
                    run: None,
                    final_value: None,
                    final_error: None,
                    wall_time,
                    uniform,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect())
}

fn uniform_baseline(
    problem: &OdeProblem,
    chain: &SchemeChain,
    spec: &AdaptiveDemoSpec,
    horizon: f64,
    exact: f64,
) -> std::result::Result<UniformBaseline, String> {
    let levels = (horizon / spec.config.tau_min).round().max(2.0) as usize;
    let start = Instant::now();
    let mesh = Mesh::uniform(horizon, levels).map_err(|e| e.to_string())?;
    let tr = integrate(problem, &mesh, chain, &spec.solver).map_err(|e| e.to_string())?;
    let last = tr.history(chain.stages()[chain.len() - 1]).expect("top stage").last()[0];
    Ok(UniformBaseline {
        levels,
        final_error: (last - exact).abs(),
        wall_time: spec.timing.then(|| start.elapsed().as_secs_f64()),
    })
}

pub fn adaptive_demo_table(rows: &[AdaptiveDemoRow]) -> Table {
    let timing = rows.iter().any(|r| r.wall_time.is_some());
    let baseline = rows.iter().any(|r| r.uniform.is_some());
    let mut headers: Vec<String> = ["v0", "T", "levels", "rejects", "final_value", "final_error"]
        .map(String::from)
        .to_vec();
    if timing {
        headers.push("time_s".into());
    }
    if baseline {
        headers.extend(["uniform_levels", "uniform_final_error"].map(String::from));
        if timing {
            headers.push("uniform_time_s".into());
        }
    }
    headers.push("failure".into());
    let mut t = Table::new(headers);
    for r in rows {
        let mut row = vec![
            r.v0.to_string(),
            r.horizon.to_string(),
            r.levels().map(|n| n.to_string()).unwrap_or_default(),
            r.rejects().map(|n| n.to_string()).unwrap_or_default(),
            opt(r.final_value, |x| format!("{x:.15}")),
            opt(r.final_error, sci),
        ];
        if timing {
            row.push(opt(r.wall_time, |x| format!("{x:.3}")));
        }
        let mut failure = r.failure.clone().unwrap_or_default();
        if baseline {
            match &r.uniform {
                Some(Ok(u)) => {
                    row.push(u.levels.to_string());
                    row.push(sci(u.final_error));
                    if timing {
                        row.push(opt(u.wall_time, |x| format!("{x:.3}")));
                    }
                }
                other => {
                    row.push(String::new());
                    row.push(String::new());
                    if timing {
                        row.push(String::new());
                    }
                    if let Some(Err(e)) = other {
                        if !failure.is_empty() {
                            failure.push_str("; ");
                        }
                        failure.push_str(&format!("uniform: {e}"));
                    }
                }
            }
        }
        row.push(failure);
        t.push(row);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markdown_is_aligned() {
        let mut t = Table::new(["a", "long_header"]);
        t.push(vec!["123456".into(), "x".into()]);
        let md = t.render(OutputFormat::Markdown);
        let widths: Vec<usize> = md.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{md}");
        assert_eq!(t.render(OutputFormat::Csv), "a,long_header\n123456,x\n");
    }

    #[test]
    fn expected_order_classification() {
        use StarterKind::*;
        let cases = [
            (vec![Bdf1, Rk2, Rk3], vec![2, 3, 4]),
            (vec![Bdf1, Bdf1, Rk3], vec![2, 2, 3]),
            (vec![Rk2, Rk2, Rk2], vec![2, 3, 3]),
            (vec![Bdf1, Rk2, Bdf1], vec![2, 3, 2]),
            (vec![Exact], vec![2, 3, 4]),
        ];
        for (starters, expected) in cases {
            let chain = SchemeChain::cascade(Stage::Dc34, &starters).unwrap();
            assert_eq!(expected_orders(&chain), expected, "{starters:?}");
        }
        let chain = SchemeChain::cascade(Stage::Dc4p, &[Bdf1, Rk3]).unwrap();
        assert_eq!(expected_orders(&chain), vec![2, 4]);
    }

    #[test]
    fn single_row_has_no_order() {
        let spec = StudySpec { ns: vec![40], top: Stage::Bdf2, ..Default::default() };
        let t = run_convergence_study(&spec).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].orders, vec![None]);
        assert!(t.orders(Stage::Bdf2).is_empty());
    }

    #[test]
    fn invalid_specs() {
        let ok = StudySpec { ns: vec![10, 20], ..Default::default() };
        assert!(ok.resolve().is_ok());
        assert!(StudySpec { ns: vec![20, 10], ..ok.clone() }.resolve().is_err());
        assert!(StudySpec { ns: vec![], ..ok.clone() }.resolve().is_err());
        assert!(StudySpec { starters: vec![StarterKind::Bdf1; 3], ..ok.clone() }.resolve().is_err());
        assert!(StudySpec { problem: "nope".into(), ..ok }.resolve().is_err());
    }

    #[test]
    fn failing_cell_is_recorded() {
        let spec = StudySpec { ns: vec![2, 20, 40], mesh: MeshFamily::Graded { gamma: 2.0 }, ..Default::default() };
        let t = run_convergence_study(&spec).unwrap();
        assert!(t.rows[0].failure.is_some());
        assert!(t.rows[1].failure.is_none());
        assert_eq!(t.rows[1].orders, vec![None, None]);
        assert!(t.rows[2].orders.iter().all(Option::is_some));
        assert!(t.has_failures());
    }

    #[test]
    fn noise_is_keyed_and_bounded() {
        let a = perturbation_noise(7, 1, 10, 3, 1e-3);
        assert_eq!(a, perturbation_noise(7, 1, 10, 3, 1e-3));
        assert_ne!(a, perturbation_noise(7, 2, 10, 3, 1e-3));
        assert_ne!(a, perturbation_noise(7, 1, 11, 3, 1e-3));
        assert_ne!(a, perturbation_noise(8, 1, 10, 3, 1e-3));
        assert_eq!(perturbation_noise(7, 1, 10, 3, 2e-3), a * 2.0);
        for l in 0..200 {
            assert!(perturbation_noise(1, 0, l, 2, 0.5).amax() <= 0.5);
        }
    }

    #[test]
    fn zero_amplitude_reproduces_nominal() {
        let spec = StudySpec { ns: vec![64], top: Stage::Dc34, ..Default::default() };
        let p = PerturbationSpec { amplitudes: vec![0.0], ..Default::default() };
        let r = run_perturbation_probe(&spec, &p).unwrap();
        assert_eq!(r.rows[0].deviations, vec![0.0; 3]);
    }

    #[test]
    fn constant_ratio_source() {
        let rows = run_doc_report(&RatioSource::Constant { ratio: 1.0, n: 50 }).unwrap();
        assert_eq!(rows.len(), 49);
        assert!(rows.iter().all(|r| r.orthogonality <= 1e-13 && r.sigma.within_bounds()));
        assert!(run_doc_report(&RatioSource::Constant { ratio: 1.0, n: 1 }).is_err());
    }
}
