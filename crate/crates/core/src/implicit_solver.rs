//! Solvers for the per-step implicit equation `a v - f(t, v) = b`.
//!
//! Every BDF2-DC level and every SDIRK stage reduces to this form with
//! `a > 0` (for BDF2, `a = d_0 / tau_n`). Both solvers stop on the residual
//! measured in solution units, `|a v - f(t, v) - b|_inf / a`, which equals the
//! distance between consecutive fixed-point iterates.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::problems::{OdeProblem, State};

/// Which nonlinear iteration to use for implicit solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Newton when the problem has a Jacobian, fixed point otherwise.
    #[default]
    Auto,
    FixedPoint,
    Newton,
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "fixed-point" => Ok(Self::FixedPoint),
            "newton" => Ok(Self::Newton),
            other => Err(invalid(format!("unknown solver `{other}`"))),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::FixedPoint => "fixed-point",
            Self::Newton => "newton",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Termination tolerance.
    pub tol: f64,
    pub max_iter_fixed_point: usize,
    pub max_iter_newton: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::Auto,
            tol: 1e-12,
            max_iter_fixed_point: 100,
            max_iter_newton: 25,
        }
    }
}

impl SolverConfig {
    pub fn with_kind(mut self, kind: SolverKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// One implicit equation `a v - f(t, v) = b`.
#[derive(Debug, Clone)]
pub struct ImplicitStep {
    pub a: f64,
    pub b: State,
    pub t: f64,
    pub guess: State,
}

/// A converged implicit solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub value: State,
    /// `f(t, value)`, evaluated at the returned iterate.
    pub f_value: State,
    pub iterations: usize,
    /// `|a v - f(t, v) - b|_inf` at the returned iterate.
    pub residual: f64,
}

/// Residual `a v - f - b`.
pub fn residual(step: &ImplicitStep, v: &State, f: &State) -> State {
    v * step.a - f - &step.b
}

fn check_step(step: &ImplicitStep) -> Result<()> {
    if !(step.a.is_finite() && step.a > 0.0) {
        return Err(invalid(format!("implicit coefficient must be positive, got {}", step.a)));
    }
    if step.b.len() != step.guess.len() {
        return Err(invalid("right-hand side and initial guess differ in dimension"));
    }
    Ok(())
}

/// Fixed-point iteration `v <- (b + f(t, v)) / a`.
///
/// Converges when `|a v - f(t, v) - b|_inf <= tol * a`. Contraction requires
/// roughly `L_f / a < 1`, i.e. small steps relative to the Lipschitz constant.
pub fn solve_fixed_point<F>(step: &ImplicitStep, tol: f64, max_iter: usize, rhs: F) -> Result<Solution>
where
    F: Fn(f64, &State) -> State,
{
    check_step(step)?;
    let mut v = step.guess.clone();
    let mut last = f64::INFINITY;
    for iterations in 0..=max_iter {
        let f = rhs(step.t, &v);
        let r = residual(step, &v, &f).amax();
        if !r.is_finite() {
            return Err(Error::Divergence { iterations, residual: r });
        }
        if r <= tol * step.a {
            return Ok(Solution {
                value: v,
                f_value: f,
                iterations,
                residual: r,
            });
        }
        last = r;
        if iterations < max_iter {
            v = (&step.b + f) / step.a;
        }
    }
    Err(Error::Divergence {
        iterations: max_iter,
        residual: last,
    })
}

/// Newton iteration on `a v - f(t, v) - b = 0` with the linearization `a I - J`.
///
/// Converges when `|a v - f(t, v) - b|_inf <= tol * a * (1 + |v|_inf)`.
pub fn solve_newton<F, J>(
    step: &ImplicitStep,
    tol: f64,
    max_iter: usize,
    rhs: F,
    jac: J,
) -> Result<Solution>
where
    F: Fn(f64, &State) -> State,
    J: Fn(f64, &State) -> DMatrix<f64>,
{
    check_step(step)?;
    let d = step.guess.len();
    let mut v = step.guess.clone();
    let mut f = rhs(step.t, &v);
    let mut r = residual(step, &v, &f);
    for iterations in 0..=max_iter {
        let rn = r.amax();
        if !rn.is_finite() {
            return Err(Error::Divergence { iterations, residual: rn });
        }
        if rn <= tol * step.a * (1.0 + v.amax()) {
            return Ok(Solution {
                value: v,
                f_value: f,
                iterations,
                residual: rn,
            });
        }
        if iterations == max_iter {
            return Err(Error::Divergence { iterations, residual: rn });
        }
        let lin = DMatrix::identity(d, d) * step.a - jac(step.t, &v);
        let delta = lin.lu().solve(&r).ok_or(Error::SingularJacobian)?;
        v -= delta;
        f = rhs(step.t, &v);
        r = residual(step, &v, &f);
    }
    unreachable!("newton loop returns from inside")
}

/// Solves with the method selected by `config`.
pub fn solve(problem: &OdeProblem, step: &ImplicitStep, config: &SolverConfig) -> Result<Solution> {
    let rhs = |t: f64, v: &State| problem.rhs(t, v);
    let newton = match config.kind {
        SolverKind::Auto => problem.has_jacobian(),
        SolverKind::FixedPoint => false,
        SolverKind::Newton => {
            if !problem.has_jacobian() {
                return Err(invalid(format!(
                    "Newton solver requested but `{}` has no Jacobian",
                    problem.name()
                )));
            }
            true
        }
    };
    if newton {
        solve_newton(step, config.tol, config.max_iter_newton, rhs, |t, v| {
            problem.jacobian(t, v).expect("jacobian checked above")
        })
    } else {
        solve_fixed_point(step, config.tol, config.max_iter_fixed_point, rhs)
    }
}
