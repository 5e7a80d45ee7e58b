//! Initial value problems `dv/dt = f(t, v)`, `v(0) = v_0`, and the three
//! benchmark problems used by the studies.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solution vectors.
pub type State = DVector<f64>;

pub type RhsFn = dyn Fn(f64, &State) -> State + Send + Sync;
pub type JacobianFn = dyn Fn(f64, &State) -> DMatrix<f64> + Send + Sync;
pub type ExactFn = dyn Fn(f64) -> State + Send + Sync;

/// An ODE right-hand side with optional Jacobian and exact solution.
///
/// Cloning is cheap; the closures are shared.
#[derive(Clone)]
pub struct OdeProblem {
    name: String,
    initial: State,
    horizon: f64,
    rhs: Arc<RhsFn>,
    jacobian: Option<Arc<JacobianFn>>,
    exact: Option<Arc<ExactFn>>,
    lipschitz_hint: Option<f64>,
}

impl fmt::Debug for OdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeProblem")
            .field("name", &self.name)
            .field("dimension", &self.dimension())
            .field("horizon", &self.horizon)
            .field("has_jacobian", &self.jacobian.is_some())
            .field("has_exact", &self.exact.is_some())
            .finish()
    }
}

impl OdeProblem {
    pub fn new(
        name: impl Into<String>,
        initial: State,
        horizon: f64,
        rhs: impl Fn(f64, &State) -> State + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            initial,
            horizon,
            rhs: Arc::new(rhs),
            jacobian: None,
            exact: None,
            lipschitz_hint: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(f64, &State) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_exact(mut self, exact: impl Fn(f64) -> State + Send + Sync + 'static) -> Self {
        self.exact = Some(Arc::new(exact));
        self
    }

    pub fn with_lipschitz_hint(mut self, l: f64) -> Self {
        self.lipschitz_hint = Some(l);
        self
    }

    /// Same problem without its Jacobian (forces fixed-point solves).
    pub fn without_jacobian(mut self) -> Self {
        self.jacobian = None;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &State {
        &self.initial
    }

    /// Default integration horizon used by the studies.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn rhs(&self, t: f64, v: &State) -> State {
        (self.rhs)(t, v)
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn jacobian(&self, t: f64, v: &State) -> Option<DMatrix<f64>> {
        self.jacobian.as_ref().map(|j| j(t, v))
    }

    pub fn has_exact(&self) -> bool {
        self.exact.is_some()
    }

    pub fn exact(&self, t: f64) -> Option<State> {
        self.exact.as_ref().map(|e| e(t))
    }

    /// Exact solution, or [`Error::MissingExactSolution`].
    pub fn exact_or_err(&self, t: f64) -> Result<State> {
        self.exact(t)
            .ok_or_else(|| Error::MissingExactSolution(self.name.clone()))
    }

    pub fn lipschitz_hint(&self) -> Option<f64> {
        self.lipschitz_hint
    }
}

/// `v' = v cos t`, `v(t) = exp(sin t)`, on `[0, 10 pi]`.
pub fn example1() -> OdeProblem {
    OdeProblem::new(
        "example1",
        DVector::from_element(1, 1.0),
        10.0 * std::f64::consts::PI,
        |t, v| v * t.cos(),
    )
    .with_jacobian(|t, _| DMatrix::from_element(1, 1, t.cos()))
    .with_exact(|t| DVector::from_element(1, t.sin().exp()))
    .with_lipschitz_hint(1.0)
}

/// The stiff linear system `u' = A u` with eigenvalues `-1` and `+-100i`, on `[0, 5]`.
pub fn example2() -> OdeProblem {
    let a = example2_matrix();
    let jac = a.clone();
    OdeProblem::new(
        "example2",
        DVector::from_vec(vec![2.0, 1.0, 1.0]),
        5.0,
        move |_, u| &a * u,
    )
    .with_jacobian(move |_, _| jac.clone())
    .with_exact(|t| {
        let e = (-t).exp();
        let (s, c) = (100.0 * t).sin_cos();
        DVector::from_vec(vec![e + c + s, c + s, c - s])
    })
    .with_lipschitz_hint(101.0)
}

pub fn example2_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[-1.0, 1.0, 100.0, 0.0, 0.0, 100.0, 0.0, -100.0, 0.0],
    )
}

/// `v' = v - v^3` with `v(0) = v0`; the solution tends to `sign(v0)`.
pub fn example3(v0: f64) -> OdeProblem {
    OdeProblem::new(
        format!("example3(v0={v0})"),
        DVector::from_element(1, v0),
        100.0,
        |_, v| v.map(|x| x - x * x * x),
    )
    .with_jacobian(|_, v| DMatrix::from_element(1, 1, 1.0 - 3.0 * v[0] * v[0]))
    .with_exact(move |t| DVector::from_element(1, example3_exact(t, v0)))
}

pub fn example3_exact(t: f64, v0: f64) -> f64 {
    let e = (-2.0 * t).exp();
    v0 / (e + v0 * v0 * (1.0 - e)).sqrt()
}

/// Looks up a benchmark problem by CLI name (`example1|example2|example3`).
pub fn by_name(name: &str, v0: f64) -> Result<OdeProblem> {
    match name {
        "example1" => Ok(example1()),
        "example2" => Ok(example2()),
        "example3" => Ok(example3(v0)),
        other => Err(Error::InvalidParameter(format!("unknown problem `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> State {
        DVector::from_element(1, v)
    }

    #[test]
    fn example1_values() {
        let p = example1();
        assert_eq!(p.exact(0.0).unwrap()[0], 1.0);
        assert_eq!(p.rhs(0.0, &scalar(1.0))[0], 1.0);
        let e = p.exact(std::f64::consts::FRAC_PI_2).unwrap()[0];
        assert!((e - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn example2_values() {
        let p = example2();
        assert_eq!(p.exact(0.0).unwrap(), DVector::from_vec(vec![2.0, 1.0, 1.0]));
        assert_eq!(p.exact(0.0).unwrap(), *p.initial());
        let f = p.rhs(0.0, p.initial());
        assert_eq!(f, DVector::from_vec(vec![99.0, 100.0, -100.0]));
        let j1 = p.jacobian(0.0, p.initial()).unwrap();
        let j2 = p.jacobian(3.0, &DVector::zeros(3)).unwrap();
        assert_eq!(j1, example2_matrix());
        assert_eq!(j1, j2);
    }

    #[test]
    fn example3_values() {
        let p = example3(0.5);
        assert_eq!(p.exact(0.0).unwrap()[0], 0.5);
        assert_eq!(p.rhs(1.0, &scalar(0.5))[0], 0.375);
        for t in [0.0, 0.3, 7.0, 50.0] {
            assert!((example3_exact(t, 1.0) - 1.0).abs() < 1e-15);
        }
    }

    /// Central differences of the exact solution against the right-hand side.
    fn check_consistency(p: &OdeProblem, horizon: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let t = rng.gen_range(h..horizon - h);
            let d = (p.exact(t + h).unwrap() - p.exact(t - h).unwrap()) / (2.0 * h);
            let v = p.exact(t).unwrap();
            let f = p.rhs(t, &v);
            let scale = 1.0 + v.amax();
            let gap = (&d - &f).amax();
            assert!(gap <= 1e-6 * scale, "{} at t={t}: {gap}", p.name());
        }
    }

    #[test]
    fn exact_solutions_satisfy_the_ode() {
        check_consistency(&example1(), 10.0 * std::f64::consts::PI);
        check_consistency(&example2(), 5.0);
        for v0 in [-1.5, -0.5, 0.5, 1.5] {
            check_consistency(&example3(v0), 10.0);
        }
    }

    #[test]
    fn example3_monotone_toward_sign() {
        for v0 in [-1.5f64, -0.5, 0.5, 1.5] {
            let target = v0.signum();
            let mut prev = (v0 - target).abs();
            for k in 1..=400 {
                let t = k as f64 * 0.05;
                let d = (example3_exact(t, v0) - target).abs();
                assert!(d <= prev + 1e-15);
                prev = d;
            }
            assert!(prev < 1e-12);
        }
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(by_name("example2", 0.0).unwrap().dimension(), 3);
        assert!(by_name("example9", 0.0).is_err());
    }
}
