//! Adaptive step selection driven by the relative gap between two stages of
//! the cascade, e.g. `e_23 = |v_3^n - v_2^n| / |v_2^n|`.
//!
//! A level whose estimate exceeds `tol` is discarded and recomputed with
//! `tau <- max(tau_min, tau_ada)`; an accepted level sets the next step to
//! `min(max(tau_min, tau_ada), tau_max)`, where
//! `tau_ada = S_a tau_n sqrt(tol / e)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::implicit_solver::SolverConfig;
use crate::problems::OdeProblem;
use crate::schemes::{IntegrationOptions, Integrator, SchemeChain, Stage, StageHistory, Trajectory};

/// Estimates below this are treated as this value before the square root.
pub const ESTIMATE_FLOOR: f64 = 1e-300;

/// Which pair of stages forms the relative estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// `|v_3 - v_2| / |v_2|`.
    #[default]
    E23,
    /// `|v_4 - v_3| / |v_3|`.
    E34,
    /// `|v_4' - v_2| / |v_2|`.
    E24p,
}

impl Estimator {
    /// `(numerator stage, reference stage)`.
    pub fn stages(self) -> (Stage, Stage) {
        match self {
            Self::E23 => (Stage::Dc3, Stage::Bdf2),
            Self::E34 => (Stage::Dc34, Stage::Dc3),
            Self::E24p => (Stage::Dc4p, Stage::Bdf2),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e23" => Ok(Self::E23),
            "e34" => Ok(Self::E34),
            "e24p" => Ok(Self::E24p),
            other => Err(invalid(format!("unknown estimator `{other}` (e23|e34|e24p)"))),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::E23 => "e23",
            Self::E34 => "e34",
            Self::E24p => "e24p",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    /// Safety factor `S_a`.
    pub safety: f64,
    pub tol: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// First level `t_1`.
    pub t1: f64,
    pub estimator: Estimator,
    pub max_rejects_per_level: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            safety: 1e3,
            tol: 1e-1,
            tau_min: 1e-3,
            tau_max: 1e-1,
            t1: 1e-3,
            estimator: Estimator::E23,
            max_rejects_per_level: 20,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max && self.tau_max.is_finite()) {
            return Err(invalid(format!(
                "need 0 < tau_min <= tau_max, got [{}, {}]",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.safety > 0.0 && self.tol > 0.0) {
            return Err(invalid("safety factor and tolerance must be positive"));
        }
        if !(self.t1 > 0.0) {
            return Err(invalid(format!("first level must be positive, got {}", self.t1)));
        }
        Ok(())
    }
}

/// Relative stage gap at level `n`, in the max norm.
pub fn relative_estimator(kind: Estimator, histories: &[StageHistory], n: usize) -> Result<f64> {
    let (top, reference) = kind.stages();
    let find = |s: Stage| {
        histories
            .iter()
            .find(|h| h.stage == s)
            .ok_or_else(|| invalid(format!("estimator {kind} needs stage {s}")))
    };
    let (top, reference) = (find(top)?, find(reference)?);
    let available = top.len().min(reference.len());
    if n >= available {
        return Err(Error::InsufficientHistory { needed: n + 1, available });
    }
    let denom = reference.values[n].amax();
    if denom == 0.0 {
        return Err(Error::DegenerateEstimate { level: n });
    }
    Ok((&top.values[n] - &reference.values[n]).amax() / denom)
}

/// `S_a tau_n sqrt(tol / e)` with `e` floored at [`ESTIMATE_FLOOR`].
pub fn tau_ada(config: &AdaptiveConfig, tau_n: f64, estimate: f64) -> f64 {
    config.safety * tau_n * (config.tol / estimate.max(ESTIMATE_FLOOR)).sqrt()
}

/// Step proposals after a level with the given estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepProposal {
    pub tau_ada: f64,
    /// Next step if the level is accepted.
    pub accepted: f64,
    /// Retry step if the level is rejected.
    pub rejected: f64,
}

pub fn propose_step(config: &AdaptiveConfig, tau_n: f64, estimate: f64) -> StepProposal {
    let ada = tau_ada(config, tau_n, estimate);
    StepProposal {
        tau_ada: ada,
        accepted: ada.max(config.tau_min).min(config.tau_max),
        rejected: ada.max(config.tau_min),
    }
}

/// One accepted level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptedLevel {
    pub level: usize,
    pub t: f64,
    pub tau: f64,
    pub estimate: f64,
    /// Rejected attempts before this level was accepted.
    pub rejects: usize,
}

/// One rejected attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub level: usize,
    pub t_prev: f64,
    pub tau: f64,
    /// `inf` when the implicit solve itself failed.
    pub estimate: f64,
    pub solver_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AdaptiveRun {
    pub trajectory: Trajectory,
    /// Levels `1..=N`.
    pub accepted: Vec<AcceptedLevel>,
    pub rejections: Vec<Rejection>,
}

impl AdaptiveRun {
    /// Number of accepted steps `N`.
    pub fn levels(&self) -> usize {
        self.accepted.len()
    }

    /// Accepted steps after the fixed first level.
    pub fn adaptive_steps(&self) -> impl Iterator<Item = &AcceptedLevel> {
        self.accepted.iter().skip(1)
    }

    pub fn write_mesh_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "level,t,tau,estimate,rejects")?;
        writeln!(out, "0,0e0,,,0")?;
        for a in &self.accepted {
            writeln!(out, "{},{:e},{:e},{:e},{}", a.level, a.t, a.tau, a.estimate, a.rejects)?;
        }
        Ok(())
    }
}

/// Chooses the step actually attempted so that the run lands on `horizon`
/// without leaving a remainder shorter than `tau_min`.
fn fit_to_horizon(config: &AdaptiveConfig, tau: f64, remaining: f64) -> f64 {
    if remaining <= tau {
        remaining
    } else if remaining - tau < config.tau_min {
        if remaining <= config.tau_max {
            remaining
        } else {
            0.5 * remaining
        }
    } else {
        tau
    }
}

/// Integrates `chain` on `[0, horizon]` with adaptively chosen levels.
pub fn adaptive_integrate(
    problem: &OdeProblem,
    chain: &SchemeChain,
    solver: &SolverConfig,
    config: &AdaptiveConfig,
    horizon: f64,
) -> Result<AdaptiveRun> {
    config.validate()?;
    let (top, reference) = config.estimator.stages();
    if chain.index_of(top).is_none() || chain.index_of(reference).is_none() {
        return Err(invalid(format!(
            "estimator {} needs stages {top} and {reference} in the chain",
            config.estimator
        )));
    }
    if !(horizon > config.t1) {
        return Err(invalid(format!("horizon {horizon} must exceed t1 = {}", config.t1)));
    }
    let mut it = Integrator::new(problem, chain.clone(), *solver, IntegrationOptions::default())?;
    it.push_level(config.t1)?;
    let mut accepted = vec![AcceptedLevel {
        level: 1,
        t: config.t1,
        tau: config.t1,
        estimate: relative_estimator(config.estimator, it.histories(), 1)?,
        rejects: 0,
    }];
    let mut rejections = Vec::new();
    let mut tau_next = config.t1;

    while it.current_time() < horizon {
        let t_prev = it.current_time();
        let level = it.len();
        let mut tau = tau_next;
        let mut rejects = 0;
        loop {
            let remaining = horizon - t_prev;
            tau = fit_to_horizon(config, tau, remaining);
            let t_new = if tau == remaining { horizon } else { t_prev + tau };
            let (estimate, solver_error) = match it.push_level(t_new) {
                Ok(()) => (relative_estimator(config.estimator, it.histories(), level)?, None),
                Err(e) => (f64::INFINITY, Some(e.to_string())),
            };
            let proposal = propose_step(config, tau, estimate);
            if estimate <= config.tol {
                accepted.push(AcceptedLevel { level, t: t_new, tau, estimate, rejects });
                tau_next = proposal.accepted;
                break;
            }
            if solver_error.is_none() {
                it.pop_level();
            }
            rejections.push(Rejection {
                level,
                t_prev,
                tau,
                estimate,
                solver_error: solver_error.clone(),
            });
            rejects += 1;
            let retry = proposal.rejected;
            if rejects > config.max_rejects_per_level {
                return Err(Error::Adaptive {
                    t: t_prev,
                    reason: format!(
                        "{rejects} rejections at level {level} (last estimate {estimate:e}{})",
                        solver_error.map(|e| format!(", {e}")).unwrap_or_default()
                    ),
                });
            }
            if !(retry < tau) && tau > config.tau_min {
                return Err(Error::Adaptive {
                    t: t_prev,
                    reason: format!(
                        "rejected step {tau:e} (estimate {estimate:e}) would be retried with {retry:e}, which is not smaller"
                    ),
                });
            }
            tau = retry;
        }
    }
    Ok(AdaptiveRun {
        trajectory: it.into_trajectory(),
        accepted,
        rejections,
    })
}

/// True when `values` never move away from `target` and never cross it.
pub fn is_monotone_toward(values: &[f64], target: f64) -> bool {
    let side = (values[0] - target).signum();
    values.windows(2).all(|w| {
        let (a, b) = ((w[0] - target).abs(), (w[1] - target).abs());
        b <= a && ((w[1] - target).signum() == side || w[1] == target)
    })
}
