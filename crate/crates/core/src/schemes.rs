//! Variable-step BDF2, the deferred-correction operators, and the cascaded
//! BDF2 / DC3 / DC34 / DC4p integrators.
//!
//! All stages advance in lockstep: at each new level every stage of the chain
//! is solved in order, so a correcting stage always sees the level-`n` value
//! of the stage it corrects.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::implicit_solver::{solve, ImplicitStep, SolverConfig};
use crate::mesh::Mesh;
use crate::problems::{OdeProblem, State};
use crate::starters::{start, StarterKind};

/// BDF2 kernels `d_0`, `d_1` for a step ratio `r`; higher kernels vanish.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bdf2Kernels {
    pub d0: f64,
    pub d1: f64,
}

pub fn bdf2_kernels(r: f64) -> Result<Bdf2Kernels> {
    if !(r.is_finite() && r >= 0.0) {
        return Err(invalid(format!("step ratio must be nonnegative, got {r}")));
    }
    Ok(Bdf2Kernels {
        d0: (1.0 + 2.0 * r) / (1.0 + r),
        d1: -r / (1.0 + r),
    })
}

/// `D_2 v^n` from the last three values of `values` and the steps `tau_n`, `tau_{n-1}`.
pub fn bdf2_apply(values: &[State], tau_n: f64, tau_n1: f64) -> Result<State> {
    let m = values.len();
    if m < 3 {
        return Err(Error::InsufficientHistory { needed: 3, available: m });
    }
    let k = bdf2_kernels(tau_n / tau_n1)?;
    let (vn, vn1, vn2) = (&values[m - 1], &values[m - 2], &values[m - 3]);
    Ok((vn - vn1) * (k.d0 / tau_n) + (vn1 - vn2) * (k.d1 / tau_n1))
}

/// Newton divided difference `y[t_0, ..., t_m]` for 2 to 4 distinct nodes.
pub fn divided_difference(ts: &[f64], ys: &[State]) -> Result<State> {
    if ts.len() != ys.len() || !(2..=4).contains(&ts.len()) {
        return Err(invalid("divided difference needs 2 to 4 nodes with matching values"));
    }
    for i in 0..ts.len() {
        for j in 0..i {
            if ts[i] == ts[j] {
                return Err(invalid(format!("repeated node {} in divided difference", ts[i])));
            }
        }
    }
    let mut table: Vec<State> = ys.to_vec();
    for level in 1..ts.len() {
        for i in 0..ts.len() - level {
            table[i] = (&table[i + 1] - &table[i]) / (ts[i + level] - ts[i]);
        }
    }
    Ok(table.swap_remove(0))
}

/// Backward divided differences from the newest value, built from steps.
///
/// `f = [f^n, f^{n-1}, ...]`, `tau = [tau_n, tau_{n-1}, ...]`. Returns
/// `f[t_n, .., t_{n-m}]` for `m = f.len() - 1`.
fn backward_difference(f: &[&State], tau: &[f64]) -> State {
    let mut table: Vec<State> = f.iter().map(|v| (*v).clone()).collect();
    for level in 1..f.len() {
        for i in 0..f.len() - level {
            let span: f64 = tau[i..i + level].iter().sum();
            table[i] = (&table[i] - &table[i + 1]) / span;
        }
    }
    table.swap_remove(0)
}

/// `D_{2,3} f^n = (tau_n/3)(d_tau f^n - d_tau f^{n-1})`.
///
/// `f = [f^n, f^{n-1}, f^{n-2}]`, `tau = [tau_n, tau_{n-1}]`.
pub fn dc3_correction(f: [&State; 3], tau: [f64; 2]) -> State {
    let dn = (f[0] - f[1]) / tau[0];
    let dn1 = (f[1] - f[2]) / tau[1];
    (dn - dn1) * (tau[0] / 3.0)
}

/// `D_{3,4} f^n = (tau_n/12)(tau_n + tau_{n-1})(2 tau_n + tau_{n-1}) f[t_n, .., t_{n-3}]`.
///
/// `f = [f^n, .., f^{n-3}]`, `tau = [tau_n, tau_{n-1}, tau_{n-2}]`.
pub fn d34_correction(f: [&State; 4], tau: [f64; 3]) -> State {
    let coef = tau[0] / 12.0 * (tau[0] + tau[1]) * (2.0 * tau[0] + tau[1]);
    backward_difference(&f, &tau) * coef
}

/// `D_{2,4} f^n = D_{2,3} f^n + D_{3,4} f^n`.
pub fn dc4_correction(f: [&State; 4], tau: [f64; 3]) -> State {
    dc3_correction([f[0], f[1], f[2]], [tau[0], tau[1]]) + d34_correction(f, tau)
}

/// Corrections written through derivative estimates of the local
/// interpolant of `f`, before algebraic simplification. Slower and less
/// accurate in floating point; kept as a cross-check.
pub mod taylor_form {
    use super::*;

    /// `(v3/6)[-(1+r) tau_n^2 + r (tau_n + tau_{n-1})^2]` with `v3 = 2 f[t_n, t_{n-1}, t_{n-2}]`.
    pub fn dc3_correction(f: [&State; 3], tau: [f64; 2]) -> State {
        let r = tau[0] / tau[1];
        let v3 = backward_difference(&f, &tau) * 2.0;
        let s = tau[0] + tau[1];
        v3 * ((r * s * s - (1.0 + r) * tau[0] * tau[0]) / 6.0)
    }

    /// `(v3/6)[r s^2 - (1+r) tau_n^2] - (v4/24)[r s^3 - (1+r) tau_n^3]`, `s = tau_n + tau_{n-1}`,
    /// with `v3`, `v4` the second and third derivatives at `t_n` of the cubic
    /// interpolating `f` at the four latest levels.
    pub fn dc4_correction(f: [&State; 4], tau: [f64; 3]) -> State {
        let r = tau[0] / tau[1];
        let s = tau[0] + tau[1];
        let f3 = backward_difference(&f[..3], &tau[..2]);
        let f4 = backward_difference(&f, &tau);
        let v4 = &f4 * 6.0;
        let v3 = f3 * 2.0 + f4 * (2.0 * (2.0 * tau[0] + tau[1]));
        v3 * ((r * s * s - (1.0 + r) * tau[0] * tau[0]) / 6.0)
            - v4 * ((r * s * s * s - (1.0 + r) * tau[0].powi(3)) / 24.0)
    }
}

/// One scheme of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// `D_2 v_2 = f(v_2)`.
    Bdf2,
    /// `D_2 v_3 + D_{2,3} f(v_2) = f(v_3)`.
    Dc3,
    /// `D_2 v_4 + D_{2,4} f(v_3) = f(v_4)`.
    Dc34,
    /// `D_2 v_4' + D_{2,4} f(v_2) = f(v_4')`.
    Dc4p,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Bdf2, Stage::Dc3, Stage::Dc34, Stage::Dc4p];

    /// Stage whose trajectory feeds this stage's correction.
    pub fn source(self) -> Option<Stage> {
        match self {
            Self::Bdf2 => None,
            Self::Dc3 | Self::Dc4p => Some(Self::Bdf2),
            Self::Dc34 => Some(Self::Dc3),
        }
    }

    /// Number of levels after `t_0` taken from the starter.
    pub fn starting_levels(self) -> usize {
        match self {
            Self::Bdf2 | Self::Dc3 => 1,
            Self::Dc34 | Self::Dc4p => 2,
        }
    }

    /// Nominal convergence order on smooth meshes.
    pub fn design_order(self) -> u32 {
        match self {
            Self::Bdf2 => 2,
            Self::Dc3 => 3,
            Self::Dc34 | Self::Dc4p => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Bdf2 => "BDF2",
            Self::Dc3 => "DC3",
            Self::Dc34 => "DC34",
            Self::Dc4p => "DC4p",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bdf2" => Ok(Self::Bdf2),
            "dc3" => Ok(Self::Dc3),
            "dc34" => Ok(Self::Dc34),
            "dc4p" | "dc4" => Ok(Self::Dc4p),
            other => Err(invalid(format!("unknown scheme `{other}` (bdf2|dc3|dc34|dc4p)"))),
        }
    }
}

/// Ordered stages with one starter per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemeChain {
    stages: Vec<Stage>,
    starters: Vec<StarterKind>,
}

impl SchemeChain {
    pub fn new(stages: Vec<Stage>, starters: Vec<StarterKind>) -> Result<Self> {
        if stages.is_empty() {
            return Err(invalid("scheme chain is empty"));
        }
        if stages.len() != starters.len() {
            return Err(invalid(format!(
                "{} stages but {} starters",
                stages.len(),
                starters.len()
            )));
        }
        for (i, s) in stages.iter().enumerate() {
            if stages[..i].contains(s) {
                return Err(invalid(format!("stage {s} listed twice")));
            }
            if let Some(src) = s.source() {
                if !stages[..i].contains(&src) {
                    return Err(invalid(format!("{s} requires {src} earlier in the chain")));
                }
            }
        }
        Ok(Self { stages, starters })
    }

    /// The full cascade ending at `top` (`dc34` gives BDF2, DC3, DC34).
    ///
    /// A single starter is applied to every stage; otherwise one per stage.
    pub fn cascade(top: Stage, starters: &[StarterKind]) -> Result<Self> {
        let stages = match top {
            Stage::Bdf2 => vec![Stage::Bdf2],
            Stage::Dc3 => vec![Stage::Bdf2, Stage::Dc3],
            Stage::Dc34 => vec![Stage::Bdf2, Stage::Dc3, Stage::Dc34],
            Stage::Dc4p => vec![Stage::Bdf2, Stage::Dc4p],
        };
        let starters = match starters.len() {
            1 => vec![starters[0]; stages.len()],
            n if n == stages.len() => starters.to_vec(),
            n => {
                return Err(invalid(format!(
                    "chain {top} has {} stages but {n} starters were given",
                    stages.len()
                )))
            }
        };
        Self::new(stages, starters)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn starters(&self) -> &[StarterKind] {
        &self.starters
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn index_of(&self, stage: Stage) -> Option<usize> {
        self.stages.iter().position(|&s| s == stage)
    }

    pub fn starter_of(&self, stage: Stage) -> Option<StarterKind> {
        self.index_of(stage).map(|i| self.starters[i])
    }

    /// Triplet notation such as `BDF1+RK2+RK3`.
    pub fn starter_label(&self) -> String {
        self.starters.iter().map(|s| s.label()).collect::<Vec<_>>().join("+")
    }

    pub fn needs_exact_solution(&self) -> bool {
        self.starters.contains(&StarterKind::Exact)
    }
}

/// One stage's solution sequence and cached right-hand sides.
#[derive(Debug, Clone)]
pub struct StageHistory {
    pub stage: Stage,
    pub starter: StarterKind,
    pub values: Vec<State>,
    /// `f(t_k, values[k])`.
    pub f_cache: Vec<State>,
}

impl StageHistory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> &State {
        self.values.last().expect("history holds the initial value")
    }
}

/// Additive perturbation of a stage equation: `(stage, level, dimension) -> eps`.
pub type Perturbation = dyn Fn(Stage, usize, usize) -> State + Send + Sync;

#[derive(Clone, Default)]
pub struct IntegrationOptions {
    /// Drop every correction term (DC stages then repeat BDF2).
    pub zero_corrections: bool,
    /// Added to the right-hand side of each non-starting stage equation.
    pub perturbation: Option<Arc<Perturbation>>,
}

impl fmt::Debug for IntegrationOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegrationOptions")
            .field("zero_corrections", &self.zero_corrections)
            .field("perturbation", &self.perturbation.is_some())
            .finish()
    }
}

/// Incremental lockstep integrator over a growing set of levels.
pub struct Integrator<'a> {
    problem: &'a OdeProblem,
    chain: SchemeChain,
    solver: SolverConfig,
    options: IntegrationOptions,
    times: Vec<f64>,
    histories: Vec<StageHistory>,
    sources: Vec<Option<usize>>,
}

impl<'a> Integrator<'a> {
    pub fn new(
        problem: &'a OdeProblem,
        chain: SchemeChain,
        solver: SolverConfig,
        options: IntegrationOptions,
    ) -> Result<Self> {
        if chain.needs_exact_solution() && !problem.has_exact() {
            return Err(Error::MissingExactSolution(problem.name().to_string()));
        }
        let v0 = problem.initial().clone();
        let f0 = problem.rhs(0.0, &v0);
        let histories = chain
            .stages()
            .iter()
            .zip(chain.starters())
            .map(|(&stage, &starter)| StageHistory {
                stage,
                starter,
                values: vec![v0.clone()],
                f_cache: vec![f0.clone()],
            })
            .collect();
        let sources = chain
            .stages()
            .iter()
            .map(|s| s.source().and_then(|src| chain.index_of(src)))
            .collect();
        Ok(Self {
            problem,
            chain,
            solver,
            options,
            times: vec![0.0],
            histories,
            sources,
        })
    }

    pub fn chain(&self) -> &SchemeChain {
        &self.chain
    }

    /// Number of levels held, including `t_0`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn current_time(&self) -> f64 {
        *self.times.last().expect("level 0 always present")
    }

    pub fn histories(&self) -> &[StageHistory] {
        &self.histories
    }

    pub fn history(&self, stage: Stage) -> Option<&StageHistory> {
        self.chain.index_of(stage).map(|i| &self.histories[i])
    }

    /// Computes every stage at the new level `t_new`.
    ///
    /// On error nothing is appended.
    pub fn push_level(&mut self, t_new: f64) -> Result<()> {
        let t_prev = self.current_time();
        if !(t_new > t_prev) {
            return Err(invalid(format!("level {t_new} does not follow {t_prev}")));
        }
        self.times.push(t_new);
        let n = self.times.len() - 1;
        for i in 0..self.histories.len() {
            if let Err(e) = self.advance_stage(i, n) {
                for h in &mut self.histories[..i] {
                    h.values.pop();
                    h.f_cache.pop();
                }
                self.times.pop();
                return Err(Error::Step {
                    stage: self.chain.stages()[i].label().to_string(),
                    level: n,
                    source: Box::new(e),
                });
            }
        }
        Ok(())
    }

    /// Discards the newest level (never level 0).
    pub fn pop_level(&mut self) -> bool {
        if self.times.len() <= 1 {
            return false;
        }
        self.times.pop();
        for h in &mut self.histories {
            h.values.pop();
            h.f_cache.pop();
        }
        true
    }

    fn tau(&self, k: usize) -> f64 {
        self.times[k] - self.times[k - 1]
    }

    fn advance_stage(&mut self, i: usize, n: usize) -> Result<()> {
        let stage = self.chain.stages()[i];
        let t_n = self.times[n];
        let (value, f_value) = if n <= stage.starting_levels() {
            let h = &self.histories[i];
            let v = start(
                h.starter,
                self.problem,
                self.times[n - 1],
                &h.values[n - 1],
                self.tau(n),
                &self.solver,
            )?;
            let f = self.problem.rhs(t_n, &v);
            (v, f)
        } else {
            let tau_n = self.tau(n);
            let tau_n1 = self.tau(n - 1);
            let k = bdf2_kernels(tau_n / tau_n1)?;
            let a = k.d0 / tau_n;
            let h = &self.histories[i];
            let (vn1, vn2) = (&h.values[n - 1], &h.values[n - 2]);
            let mut b = vn1 * a - (vn1 - vn2) * (k.d1 / tau_n1);
            if !self.options.zero_corrections {
                if let Some(src) = self.sources[i] {
                    let f = &self.histories[src].f_cache;
                    let corr = match stage {
                        Stage::Dc3 => dc3_correction([&f[n], &f[n - 1], &f[n - 2]], [tau_n, tau_n1]),
                        Stage::Dc34 | Stage::Dc4p => dc4_correction(
                            [&f[n], &f[n - 1], &f[n - 2], &f[n - 3]],
                            [tau_n, tau_n1, self.tau(n - 2)],
                        ),
                        Stage::Bdf2 => unreachable!("BDF2 has no source stage"),
                    };
                    b -= corr;
                }
            }
            if let Some(p) = &self.options.perturbation {
                b += p(stage, n, self.problem.dimension());
            }
            let step = ImplicitStep { a, b, t: t_n, guess: vn1.clone() };
            let sol = solve(self.problem, &step, &self.solver)?;
            (sol.value, sol.f_value)
        };
        let h = &mut self.histories[i];
        h.values.push(value);
        h.f_cache.push(f_value);
        Ok(())
    }

    pub fn into_trajectory(self) -> Trajectory {
        Trajectory {
            times: self.times,
            histories: self.histories,
        }
    }
}

/// How a trajectory error is condensed to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorMeasure {
    /// `max_{1<=n<=N} |v(t_n) - v^n|_inf`.
    #[default]
    MaxOverLevels,
    /// `|v(t_N) - v^N|_inf`.
    FinalLevel,
}

impl FromStr for ErrorMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::MaxOverLevels),
            "final" => Ok(Self::FinalLevel),
            other => Err(invalid(format!("unknown error measure `{other}` (max|final)"))),
        }
    }
}

impl fmt::Display for ErrorMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MaxOverLevels => "max",
            Self::FinalLevel => "final",
        })
    }
}

/// `log(e_coarse / e_fine) / log(tau_coarse / tau_fine)`.
pub fn observed_order(e_coarse: f64, e_fine: f64, tau_coarse: f64, tau_fine: f64) -> f64 {
    (e_coarse / e_fine).ln() / (tau_coarse / tau_fine).ln()
}

/// Completed integration: the levels and one history per stage.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub histories: Vec<StageHistory>,
}

impl Trajectory {
    pub fn history(&self, stage: Stage) -> Option<&StageHistory> {
        self.histories.iter().find(|h| h.stage == stage)
    }

    /// `max_{1<=n<=N} |v(t_n) - v^n|_inf`.
    pub fn max_error(&self, problem: &OdeProblem, stage: Stage) -> Result<f64> {
        let h = self
            .history(stage)
            .ok_or_else(|| invalid(format!("stage {stage} not in trajectory")))?;
        let mut err: f64 = 0.0;
        for (k, &t) in self.times.iter().enumerate().skip(1) {
            let e = (problem.exact_or_err(t)? - &h.values[k]).amax();
            err = err.max(e);
        }
        Ok(err)
    }

    /// `|v(t_N) - v^N|_inf`.
    pub fn final_error(&self, problem: &OdeProblem, stage: Stage) -> Result<f64> {
        let h = self
            .history(stage)
            .ok_or_else(|| invalid(format!("stage {stage} not in trajectory")))?;
        let t = *self.times.last().expect("level 0 always present");
        Ok((problem.exact_or_err(t)? - h.last()).amax())
    }

    pub fn error(&self, problem: &OdeProblem, stage: Stage, measure: ErrorMeasure) -> Result<f64> {
        match measure {
            ErrorMeasure::MaxOverLevels => self.max_error(problem, stage),
            ErrorMeasure::FinalLevel => self.final_error(problem, stage),
        }
    }

    /// Writes `k,t_k,<stage>[_i]...,err_<stage>...` rows.
    pub fn write_csv<W: Write>(&self, problem: &OdeProblem, mut out: W) -> std::io::Result<()> {
        let dim = problem.dimension();
        let names: Vec<String> = self
            .histories
            .iter()
            .flat_map(|h| {
                (0..dim).map(move |c| {
                    if dim == 1 {
                        h.stage.label().to_string()
                    } else {
                        format!("{}_{c}", h.stage.label())
                    }
                })
            })
            .collect();
        let exact = problem.has_exact();
        let mut header = vec!["k".to_string(), "t_k".to_string()];
        header.extend(names.iter().cloned());
        if exact {
            header.extend(self.histories.iter().map(|h| format!("err_{}", h.stage.label())));
        }
        writeln!(out, "{}", header.join(","))?;
        for (k, &t) in self.times.iter().enumerate() {
            let mut row = vec![k.to_string(), format!("{t:e}")];
            for h in &self.histories {
                row.extend(h.values[k].iter().map(|x| format!("{x:e}")));
            }
            if let Some(v) = problem.exact(t).filter(|_| exact) {
                for h in &self.histories {
                    row.push(format!("{:e}", (&v - &h.values[k]).amax()));
                }
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Integrates every stage of `chain` across `mesh`.
pub fn integrate(
    problem: &OdeProblem,
    mesh: &Mesh,
    chain: &SchemeChain,
    solver: &SolverConfig,
) -> Result<Trajectory> {
    integrate_with(problem, mesh, chain, solver, IntegrationOptions::default())
}

pub fn integrate_with(
    problem: &OdeProblem,
    mesh: &Mesh,
    chain: &SchemeChain,
    solver: &SolverConfig,
    options: IntegrationOptions,
) -> Result<Trajectory> {
    let mut it = Integrator::new(problem, chain.clone(), *solver, options)?;
    for &t in &mesh.levels()[1..] {
        it.push_level(t)?;
    }
    Ok(it.into_trajectory())
}
