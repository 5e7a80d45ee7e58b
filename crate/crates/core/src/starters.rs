//! One-step starting schemes for the first level(s) of the multistep cascade.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::implicit_solver::{solve, ImplicitStep, SolverConfig};
use crate::problems::{OdeProblem, State};

/// How a starting value is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StarterKind {
    /// Sample the problem's exact solution.
    Exact,
    /// Backward Euler.
    Bdf1,
    /// Two-stage second-order L-stable SDIRK.
    Rk2,
    /// Two-stage third-order SDIRK.
    Rk3,
}

impl StarterKind {
    /// Local accuracy order of the produced value (`None` for exact).
    pub fn local_order(self) -> Option<u32> {
        match self {
            Self::Exact => None,
            Self::Bdf1 => Some(2),
            Self::Rk2 => Some(3),
            Self::Rk3 => Some(4),
        }
    }

    /// Label used in starter triplets such as `BDF1+RK2+RK3`.
    pub fn label(self) -> &'static str {
        match self {
            Self::Exact => "Exact",
            Self::Bdf1 => "BDF1",
            Self::Rk2 => "RK2",
            Self::Rk3 => "RK3",
        }
    }
}

impl FromStr for StarterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(Self::Exact),
            "bdf1" => Ok(Self::Bdf1),
            "rk2" => Ok(Self::Rk2),
            "rk3" => Ok(Self::Rk3),
            other => Err(invalid(format!("unknown starter `{other}` (exact|bdf1|rk2|rk3)"))),
        }
    }
}

impl fmt::Display for StarterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Bdf1 => "bdf1",
            Self::Rk2 => "rk2",
            Self::Rk3 => "rk3",
        })
    }
}

/// Butcher tableau of a two-stage singly diagonally implicit RK method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdirkTableau {
    /// Lower-triangular stage matrix.
    pub matrix: [[f64; 2]; 2],
    pub weights: [f64; 2],
    pub nodes: [f64; 2],
}

impl SdirkTableau {
    pub const STAGES: usize = 2;

    /// `gamma = (2 - sqrt 2)/2`, nodes `{gamma, 1}`, weights `{1 - gamma, gamma}`.
    pub fn sdirk2() -> Self {
        let g = (2.0 - std::f64::consts::SQRT_2) / 2.0;
        Self {
            matrix: [[g, 0.0], [1.0 - g, g]],
            weights: [1.0 - g, g],
            nodes: [g, 1.0],
        }
    }

    /// `gamma = (3 + sqrt 3)/6`, nodes `{gamma, 1 - gamma}`, weights `{1/2, 1/2}`.
    pub fn sdirk3() -> Self {
        let g = (3.0 + 3f64.sqrt()) / 6.0;
        Self {
            matrix: [[g, 0.0], [1.0 - 2.0 * g, g]],
            weights: [0.5, 0.5],
            nodes: [g, 1.0 - g],
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.matrix[0][0]
    }

    /// Stability function `R(z) = 1 + z b^T (I - z A)^{-1} 1`.
    pub fn stability_function(&self, z: f64) -> f64 {
        let g = self.diagonal();
        let k1 = 1.0 / (1.0 - z * g);
        let k2 = (1.0 + z * self.matrix[1][0] * k1) / (1.0 - z * g);
        1.0 + z * (self.weights[0] * k1 + self.weights[1] * k2)
    }
}

/// Backward Euler: `(v - v_prev)/tau = f(t_prev + tau, v)`.
pub fn bdf1_step(
    problem: &OdeProblem,
    t_prev: f64,
    v_prev: &State,
    tau: f64,
    solver: &SolverConfig,
) -> Result<State> {
    check_tau(tau)?;
    let a = 1.0 / tau;
    let step = ImplicitStep {
        a,
        b: v_prev * a,
        t: t_prev + tau,
        guess: v_prev.clone(),
    };
    Ok(solve(problem, &step, solver)?.value)
}

/// One step of a two-stage SDIRK method.
///
/// Each stage `Y_i = v + tau sum_j a_ij k_j` is solved as
/// `Y_i / (gamma tau) - f(t + c_i tau, Y_i) = (v + tau sum_{j<i} a_ij k_j) / (gamma tau)`
/// starting from the incoming value, and the stage slope is recovered from
/// the converged equation.
pub fn sdirk_step(
    tableau: &SdirkTableau,
    problem: &OdeProblem,
    t_prev: f64,
    v_prev: &State,
    tau: f64,
    solver: &SolverConfig,
) -> Result<State> {
    check_tau(tau)?;
    let a = 1.0 / (tableau.diagonal() * tau);
    let mut slopes: Vec<State> = Vec::with_capacity(SdirkTableau::STAGES);
    for i in 0..SdirkTableau::STAGES {
        let mut known = v_prev.clone();
        for (j, k) in slopes.iter().enumerate() {
            known += k * (tau * tableau.matrix[i][j]);
        }
        let b = &known * a;
        let step = ImplicitStep {
            a,
            b,
            t: t_prev + tableau.nodes[i] * tau,
            guess: v_prev.clone(),
        };
        let sol = solve(problem, &step, solver)?;
        slopes.push((sol.value - known) * a);
    }
    let mut v = v_prev.clone();
    for (w, k) in tableau.weights.iter().zip(&slopes) {
        v += k * (tau * w);
    }
    Ok(v)
}

pub fn sdirk2_step(
    problem: &OdeProblem,
    t_prev: f64,
    v_prev: &State,
    tau: f64,
    solver: &SolverConfig,
) -> Result<State> {
    sdirk_step(&SdirkTableau::sdirk2(), problem, t_prev, v_prev, tau, solver)
}

pub fn sdirk3_step(
    problem: &OdeProblem,
    t_prev: f64,
    v_prev: &State,
    tau: f64,
    solver: &SolverConfig,
) -> Result<State> {
    sdirk_step(&SdirkTableau::sdirk3(), problem, t_prev, v_prev, tau, solver)
}

/// The exact solution at `t`.
pub fn exact_start(problem: &OdeProblem, t: f64) -> Result<State> {
    problem.exact_or_err(t)
}

/// Produces the value at `t_prev + tau` from `(t_prev, v_prev)` with `kind`.
pub fn start(
    kind: StarterKind,
    problem: &OdeProblem,
    t_prev: f64,
    v_prev: &State,
    tau: f64,
    solver: &SolverConfig,
) -> Result<State> {
    match kind {
        StarterKind::Exact => exact_start(problem, t_prev + tau),
        StarterKind::Bdf1 => bdf1_step(problem, t_prev, v_prev, tau, solver),
        StarterKind::Rk2 => sdirk2_step(problem, t_prev, v_prev, tau, solver),
        StarterKind::Rk3 => sdirk3_step(problem, t_prev, v_prev, tau, solver),
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("starting step must be positive, got {tau}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{example1, example2, example3};
    use nalgebra::{DMatrix, DVector};

    fn s(x: f64) -> State {
        DVector::from_element(1, x)
    }

    fn zero_rhs() -> OdeProblem {
        OdeProblem::new("zero", s(3.0), 1.0, |_, v| v * 0.0)
            .with_jacobian(|_, _| DMatrix::zeros(1, 1))
    }

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn tableau_invariants() {
        for tab in [SdirkTableau::sdirk2(), SdirkTableau::sdirk3()] {
            for i in 0..2 {
                let row: f64 = tab.matrix[i].iter().sum();
                assert!((row - tab.nodes[i]).abs() < 1e-15);
            }
            assert!((tab.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn starters_keep_constants() {
        let p = zero_rhs();
        for kind in [StarterKind::Bdf1, StarterKind::Rk2, StarterKind::Rk3] {
            let v = start(kind, &p, 0.0, &s(3.0), 0.1, &cfg()).unwrap();
            assert_eq!(v[0], 3.0, "{kind}");
        }
    }

    #[test]
    fn bdf1_constant_slope() {
        let p = OdeProblem::new("one", s(0.0), 1.0, |_, v| v * 0.0 + DVector::from_element(1, 1.0));
        let v = bdf1_step(&p, 0.0, &s(2.0), 0.25, &cfg()).unwrap();
        assert!((v[0] - 2.25).abs() < 1e-14);
    }

    #[test]
    fn bdf1_example1_local_error() {
        let p = example1();
        let v = bdf1_step(&p, 0.0, &s(1.0), 0.01, &cfg()).unwrap();
        let err = (v[0] - 0.01f64.sin().exp()).abs();
        assert!(err < 6e-5 && err > 4e-5, "{err}");
    }

    #[test]
    fn sdirk2_is_l_stable() {
        let tab = SdirkTableau::sdirk2();
        let mut prev = f64::INFINITY;
        for z in [-1e2, -1e4, -1e6] {
            let r = tab.stability_function(z).abs();
            assert!(r < prev);
            prev = r;
        }
        assert!(prev < 1e-5);
        // via the actual step on v' = lambda v
        let lambda = -1e6;
        let p = OdeProblem::new("stiff", s(1.0), 1.0, move |_, v| v * lambda)
            .with_jacobian(move |_, _| DMatrix::from_element(1, 1, lambda));
        let v = sdirk2_step(&p, 0.0, &s(1.0), 1.0, &cfg()).unwrap();
        assert!(v[0].abs() < 1.0);
        assert!((v[0] - tab.stability_function(lambda)).abs() < 1e-12);
    }

    #[test]
    fn sdirk3_integrates_quadratic_forcing_exactly() {
        // v' = t^2 over [0.2, 0.5]
        let p = OdeProblem::new("t2", s(0.0), 1.0, |t, v| v * 0.0 + DVector::from_element(1, t * t));
        let v = sdirk3_step(&p, 0.2, &s(1.0), 0.3, &cfg()).unwrap();
        let expect = 1.0 + (0.5f64.powi(3) - 0.2f64.powi(3)) / 3.0;
        assert!((v[0] - expect).abs() < 1e-14);
    }

    /// Local error on example1 from t = 0, fitted under step halving.
    fn local_order(kind: StarterKind) -> f64 {
        let p = example1();
        let err = |tau: f64| {
            let v = start(kind, &p, 0.0, &s(1.0), tau, &cfg()).unwrap();
            (v[0] - tau.sin().exp()).abs()
        };
        (err(0.02) / err(0.01)).log2()
    }

    #[test]
    fn sdirk_local_orders() {
        let o2 = local_order(StarterKind::Rk2);
        let o3 = local_order(StarterKind::Rk3);
        assert!((o2 - 3.0).abs() < 0.15, "rk2 local order {o2}");
        assert!((o3 - 4.0).abs() < 0.15, "rk3 local order {o3}");
        let o1 = local_order(StarterKind::Bdf1);
        assert!((o1 - 2.0).abs() < 0.15, "bdf1 local order {o1}");
    }

    /// Global error of repeated one-step integration on [0, 1].
    fn global_slope(kind: StarterKind) -> f64 {
        let p = example1();
        let run = |n: usize| {
            let tau = 1.0 / n as f64;
            let mut v = s(1.0);
            let mut err: f64 = 0.0;
            for k in 0..n {
                v = start(kind, &p, k as f64 * tau, &v, tau, &cfg()).unwrap();
                let t = (k + 1) as f64 * tau;
                err = err.max((v[0] - t.sin().exp()).abs());
            }
            err
        };
        let ns = [20usize, 40, 80, 160];
        let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let y: Vec<f64> = ns.iter().map(|&n| run(n).ln()).collect();
        let mx = x.iter().sum::<f64>() / 4.0;
        let my = y.iter().sum::<f64>() / 4.0;
        let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        num / den
    }

    #[test]
    fn sdirk_global_orders() {
        let s2 = global_slope(StarterKind::Rk2);
        let s3 = global_slope(StarterKind::Rk3);
        assert!((s2 + 2.0).abs() < 0.1, "rk2 slope {s2}");
        assert!((s3 + 3.0).abs() < 0.15, "rk3 slope {s3}");
    }

    #[test]
    fn exact_start_values() {
        assert_eq!(exact_start(&example1(), 0.0).unwrap()[0], 1.0);
        assert_eq!(exact_start(&example2(), 0.0).unwrap(), DVector::from_vec(vec![2.0, 1.0, 1.0]));
        assert_eq!(exact_start(&example3(0.5), 0.0).unwrap()[0], 0.5);
        let bare = OdeProblem::new("bare", s(1.0), 1.0, |_, v| v.clone());
        assert!(matches!(exact_start(&bare, 0.0), Err(Error::MissingExactSolution(_))));
    }

    #[test]
    fn parse_names() {
        assert_eq!("rk2".parse::<StarterKind>().unwrap(), StarterKind::Rk2);
        assert_eq!("BDF1".parse::<StarterKind>().unwrap(), StarterKind::Bdf1);
        assert!("rk4".parse::<StarterKind>().is_err());
    }
}
