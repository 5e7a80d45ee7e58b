//! Discrete orthogonal convolution (DOC) kernels of variable-step BDF2 and the
//! decay factors that bound how starting errors fade.
//!
//! All functions take the interior step ratios `r_2, ..., r_n` (as returned by
//! [`Mesh::interior_ratios`]); `ratios[i - 2]` is `r_i`, so the level index is
//! `n = ratios.len() + 1`.

use std::io::Write;

use crate::error::{invalid, Result};
use crate::implicit_solver::SolverConfig;
use crate::mesh::Mesh;
use crate::problems::OdeProblem;
use crate::schemes::{bdf2_kernels, integrate, observed_order, SchemeChain, Stage};

/// The kernels `theta^{(n)}_{n-j}` for `j = n, n-1, ..., 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DocKernels {
    pub n: usize,
    /// `theta[m] = theta^{(n)}_m`, `0 <= m <= n - 2`.
    pub theta: Vec<f64>,
}

impl DocKernels {
    pub fn sum(&self) -> f64 {
        self.theta.iter().sum()
    }

    /// `theta^{(n)}_{n-j}`.
    pub fn at_level(&self, j: usize) -> f64 {
        self.theta[self.n - j]
    }
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(invalid("DOC kernels need at least one step ratio (n >= 2)"));
    }
    if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(invalid(format!("step ratios must be positive and finite, got {r}")));
    }
    Ok(())
}

fn ratio(ratios: &[f64], i: usize) -> f64 {
    ratios[i - 2]
}

fn d0(ratios: &[f64], i: usize) -> f64 {
    let r = ratio(ratios, i);
    (1.0 + 2.0 * r) / (1.0 + r)
}

/// BDF2 kernel `d^{(i)}_k`; zero for `k >= 2`.
fn bdf2_kernel(ratios: &[f64], i: usize, k: usize) -> f64 {
    let d = bdf2_kernels(ratio(ratios, i)).expect("ratios validated");
    match k {
        0 => d.d0,
        1 => d.d1,
        _ => 0.0,
    }
}

/// `r_i / (1 + 2 r_i)`.
fn decay(ratios: &[f64], i: usize) -> f64 {
    let r = ratio(ratios, i);
    r / (1.0 + 2.0 * r)
}

/// Kernels from the defining recursion
/// `theta_{n-j} = -(1/d_0^{(j)}) sum_{i=j+1}^n theta_{n-i} d^{(i)}_{i-j}`,
/// which keeps only the `i = j + 1` term since `d^{(i)}_k = 0` for `k >= 2`.
pub fn doc_recursive(ratios: &[f64]) -> Result<DocKernels> {
    check_ratios(ratios)?;
    let n = ratios.len() + 1;
    let mut theta = vec![0.0; n - 1];
    theta[0] = 1.0 / bdf2_kernel(ratios, n, 0);
    for j in (2..n).rev() {
        let m = n - j;
        theta[m] = -theta[m - 1] * bdf2_kernel(ratios, j + 1, 1) / bdf2_kernel(ratios, j, 0);
    }
    Ok(DocKernels { n, theta })
}

/// Kernels from the product formula `theta_{n-j} = (1/d_0^{(j)}) prod_{i=j+1}^n r_i/(1+2r_i)`.
pub fn doc_explicit(ratios: &[f64]) -> Result<DocKernels> {
    check_ratios(ratios)?;
    let n = ratios.len() + 1;
    let mut theta = vec![0.0; n - 1];
    let mut prod = 1.0;
    for j in (2..=n).rev() {
        theta[n - j] = prod / d0(ratios, j);
        prod *= decay(ratios, j);
    }
    Ok(DocKernels { n, theta })
}

/// `1 - prod_{i=2}^n r_i/(1+2r_i)`, the closed form of the kernel sum.
pub fn kernel_sum_closed_form(ratios: &[f64]) -> f64 {
    1.0 - (2..=ratios.len() + 1).map(|i| decay(ratios, i)).product::<f64>()
}

/// Maximum residuals of the two orthogonality identities at level `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalityResidual {
    /// `max_j |sum_{i=j}^n theta^{(n)}_{n-i} d^{(i)}_{i-j} - delta_{nj}|`.
    pub theta_d: f64,
    /// `max_j |sum_{i=j}^n d^{(n)}_{n-i} theta^{(i)}_{i-j} - delta_{nj}|`.
    pub d_theta: f64,
}

impl OrthogonalityResidual {
    pub fn max(&self) -> f64 {
        self.theta_d.max(self.d_theta)
    }
}

/// Evaluates both orthogonality identities for every `2 <= j <= n`.
///
/// Terms with a vanishing BDF2 kernel are skipped, so each sum has at most
/// two entries.
pub fn orthogonality_residual(ratios: &[f64]) -> Result<OrthogonalityResidual> {
    let kn = doc_recursive(ratios)?;
    let n = kn.n;
    let prev = if n > 2 { Some(doc_recursive(&ratios[..ratios.len() - 1])?) } else { None };
    let mut theta_d: f64 = 0.0;
    let mut d_theta: f64 = 0.0;
    for j in 2..=n {
        let delta = if j == n { 1.0 } else { 0.0 };
        let s1: f64 = (j..=n.min(j + 1))
            .map(|i| kn.at_level(i) * bdf2_kernel(ratios, i, i - j))
            .sum();
        theta_d = theta_d.max((s1 - delta).abs());
        // second identity: only i = n and i = n - 1 carry nonzero d^{(n)}_{n-i}
        let mut s2 = bdf2_kernel(ratios, n, 0) * kn.at_level(j);
        if let Some(p) = prev.as_ref().filter(|_| j < n) {
            s2 += bdf2_kernel(ratios, n, 1) * p.at_level(j);
        }
        d_theta = d_theta.max((s2 - delta).abs());
    }
    Ok(OrthogonalityResidual { theta_d, d_theta })
}

/// Decay factors at one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaFactors {
    pub n: usize,
    pub sigma2: f64,
    pub sigma3: f64,
    pub sigma4: f64,
}

impl SigmaFactors {
    /// `2^{1-n}`.
    pub fn bound2(&self) -> f64 {
        2f64.powi(1 - self.n as i32)
    }

    /// `2^{1-n} n`.
    pub fn bound3(&self) -> f64 {
        self.bound2() * self.n as f64
    }

    /// `2^{-n} n^2`.
    pub fn bound4(&self) -> f64 {
        2f64.powi(-(self.n as i32)) * (self.n * self.n) as f64
    }

    pub fn within_bounds(&self) -> bool {
        self.sigma2 <= self.bound2() && self.sigma3 <= self.bound3() && self.sigma4 <= self.bound4()
    }
}

/// `sigma_2^n = prod r/(1+2r)`, `sigma_3^n = sum_i theta^{(n)}_{n-i} sigma_2^i`,
/// `sigma_4^n = sum_i theta^{(n)}_{n-i} sigma_3^i`, for every level `2..=n`.
///
/// Quadratic in `n`: the kernels are rebuilt per level.
pub fn sigma_factors(ratios: &[f64]) -> Result<Vec<SigmaFactors>> {
    check_ratios(ratios)?;
    let n_max = ratios.len() + 1;
    // index by level; entries 0 and 1 unused
    let mut s2 = vec![0.0; n_max + 1];
    let mut s3 = vec![0.0; n_max + 1];
    let mut s4 = vec![0.0; n_max + 1];
    let mut prod = 1.0;
    let mut out = Vec::with_capacity(n_max - 1);
    for n in 2..=n_max {
        prod *= decay(ratios, n);
        s2[n] = prod;
        let k = doc_recursive(&ratios[..n - 1])?;
        s3[n] = (2..=n).map(|i| k.at_level(i) * s2[i]).sum();
        s4[n] = (2..=n).map(|i| k.at_level(i) * s3[i]).sum();
        out.push(SigmaFactors {
            n,
            sigma2: s2[n],
            sigma3: s3[n],
            sigma4: s4[n],
        });
    }
    Ok(out)
}

/// `sigma_3^n = sigma_2^n sum_{i=2}^n 1/d_0^{(i)}`.
pub fn sigma3_closed_form(ratios: &[f64]) -> f64 {
    let n = ratios.len() + 1;
    let s2: f64 = (2..=n).map(|i| decay(ratios, i)).product();
    s2 * (2..=n).map(|i| 1.0 / d0(ratios, i)).sum::<f64>()
}

/// One level of a DOC diagnostic report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DocReportRow {
    pub n: usize,
    pub ratio: f64,
    pub kernel_sum: f64,
    /// `|sum theta - (1 - prod r/(1+2r))|`.
    pub sum_residual: f64,
    pub min_kernel: f64,
    pub orthogonality: f64,
    pub sigma: SigmaFactors,
}

/// Per-level DOC diagnostics for `r_2..r_N`.
pub fn doc_report(ratios: &[f64]) -> Result<Vec<DocReportRow>> {
    let sigmas = sigma_factors(ratios)?;
    let mut rows = Vec::with_capacity(sigmas.len());
    for sigma in sigmas {
        let prefix = &ratios[..sigma.n - 1];
        let k = doc_recursive(prefix)?;
        let sum = k.sum();
        rows.push(DocReportRow {
            n: sigma.n,
            ratio: prefix[prefix.len() - 1],
            kernel_sum: sum,
            sum_residual: (sum - kernel_sum_closed_form(prefix)).abs(),
            min_kernel: k.theta.iter().copied().fold(f64::INFINITY, f64::min),
            orthogonality: orthogonality_residual(prefix)?.max(),
            sigma,
        });
    }
    Ok(rows)
}

pub fn write_doc_report_csv<W: Write>(rows: &[DocReportRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "n,r_n,kernel_sum,sum_residual,min_kernel,orthogonality_residual,sigma2,sigma3,sigma4,bound2,bound3,bound4"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.n,
            r.ratio,
            r.kernel_sum,
            r.sum_residual,
            r.min_kernel,
            r.orthogonality,
            r.sigma.sigma2,
            r.sigma.sigma3,
            r.sigma.sigma4,
            r.sigma.bound2(),
            r.sigma.bound3(),
            r.sigma.bound4()
        )?;
    }
    Ok(())
}

/// Errors of the discrete time derivative `d_tau e^n = (e^n - e^{n-1})/tau_n` on one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeErrorRow {
    pub n: usize,
    pub max_step: f64,
    /// `max_{1<=k<=n} |d_tau e^k|_inf`, one per stage.
    pub max_over_levels: Vec<f64>,
    /// `|d_tau e^n|_inf` at the last level, one per stage.
    pub final_level: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeErrorStudy {
    pub stages: Vec<Stage>,
    pub rows: Vec<DerivativeErrorRow>,
}

impl DerivativeErrorStudy {
    /// Observed orders between consecutive rows of the max-over-levels column.
    pub fn orders(&self, stage: Stage) -> Vec<f64> {
        let Some(s) = self.stages.iter().position(|&x| x == stage) else {
            return Vec::new();
        };
        self.rows
            .windows(2)
            .map(|w| observed_order(w[0].max_over_levels[s], w[1].max_over_levels[s], w[0].max_step, w[1].max_step))
            .collect()
    }
}

/// Integrates `chain` on each mesh and records derivative errors for every stage.
pub fn derivative_error_study(
    problem: &OdeProblem,
    meshes: &[Mesh],
    chain: &SchemeChain,
    solver: &SolverConfig,
) -> Result<DerivativeErrorStudy> {
    if !problem.has_exact() {
        return Err(crate::error::Error::MissingExactSolution(problem.name().to_string()));
    }
    let mut rows = Vec::with_capacity(meshes.len());
    for mesh in meshes {
        let tr = integrate(problem, mesh, chain, solver)?;
        let exact: Vec<_> = tr
            .times
            .iter()
            .map(|&t| problem.exact_or_err(t))
            .collect::<Result<_>>()?;
        let n = tr.times.len() - 1;
        let mut max_col = Vec::new();
        let mut fin_col = Vec::new();
        for h in &tr.histories {
            let mut mx: f64 = 0.0;
            let mut last = 0.0;
            for k in 1..=n {
                let e = &h.values[k] - &exact[k];
                let ep = &h.values[k - 1] - &exact[k - 1];
                let d = ((e - ep) / (tr.times[k] - tr.times[k - 1])).amax();
                mx = mx.max(d);
                last = d;
            }
            max_col.push(mx);
            fin_col.push(last);
        }
        rows.push(DerivativeErrorRow {
            n,
            max_step: mesh.max_step(),
            max_over_levels: max_col,
            final_level: fin_col,
        });
    }
    Ok(DerivativeErrorStudy {
        stages: chain.stages().to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::example1;
    use crate::starters::StarterKind;
    use nalgebra::{DMatrix, DVector};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs())
    }

    #[test]
    fn base_case() {
        let k = doc_recursive(&[0.7]).unwrap();
        assert_eq!(k.n, 2);
        assert!((k.theta[0] - 1.7 / 2.4).abs() < 1e-15);
        assert_eq!(orthogonality_residual(&[0.7]).unwrap().max(), 0.0);
    }

    #[test]
    fn uniform_closed_forms() {
        let ones = vec![1.0; 4];
        let k = doc_recursive(&ones).unwrap();
        for j in 2..=5 {
            let expect = 2.0 / 3.0 * (1.0f64 / 3.0).powi(5 - j as i32);
            assert!(rel(k.at_level(j), expect) < 1e-15);
        }
        let e = doc_explicit(&vec![1.0; 9]).unwrap();
        assert!(rel(e.sum(), 1.0 - 3f64.powi(-9)) < 1e-15);
        let s = sigma_factors(&vec![1.0; 9]).unwrap();
        for f in &s {
            let n = f.n as i32;
            assert!(rel(f.sigma2, 3f64.powi(1 - n)) < 1e-14);
            assert!(rel(f.sigma3, 3f64.powi(1 - n) * (n - 1) as f64 * 2.0 / 3.0) < 1e-14);
        }
        assert!(orthogonality_residual(&vec![1.0; 49]).unwrap().max() <= 1e-13);
    }

    #[test]
    fn explicit_last_entry_is_reciprocal_d0() {
        let r = [0.3, 5.0, 0.02];
        let k = doc_explicit(&r).unwrap();
        assert_eq!(k.theta[0], 1.0 / d0(&r, 4));
    }

    #[test]
    fn sigma3_matches_closed_form() {
        let r = [0.5, 3.0, 0.1, 12.0, 1.0];
        let s = sigma_factors(&r).unwrap();
        assert!(rel(s.last().unwrap().sigma3, sigma3_closed_form(&r)) < 1e-13);
        assert!(s.iter().all(|f| f.within_bounds()));
    }

    #[test]
    fn rejects_bad_ratios() {
        assert!(doc_recursive(&[]).is_err());
        assert!(doc_explicit(&[1.0, -1.0]).is_err());
        assert!(sigma_factors(&[f64::NAN]).is_err());
    }

    #[test]
    fn report_rows() {
        let mesh = Mesh::geometric(1.0, 12, 3.0).unwrap();
        let rows = doc_report(mesh.interior_ratios()).unwrap();
        assert_eq!(rows.len(), 11);
        for r in &rows {
            assert!(r.min_kernel > 0.0 && r.kernel_sum < 1.0);
            assert!(r.orthogonality <= 1e-14);
        }
        let mut buf = Vec::new();
        write_doc_report_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 12);
    }

    #[test]
    fn derivative_errors_vanish_for_quadratic_solutions() {
        // v = t^2 + 1: BDF2 is exact
        let p = OdeProblem::new("quad", DVector::from_element(1, 1.0), 1.0, |t, v| v * 0.0 + DVector::from_element(1, 2.0 * t))
            .with_jacobian(|_, _| DMatrix::zeros(1, 1))
            .with_exact(|t| DVector::from_element(1, t * t + 1.0));
        let meshes = vec![Mesh::random(1.0, 40, 5).unwrap()];
        let chain = SchemeChain::cascade(Stage::Bdf2, &[StarterKind::Exact]).unwrap();
        let st = derivative_error_study(&p, &meshes, &chain, &SolverConfig::default()).unwrap();
        assert!(st.rows[0].max_over_levels[0] <= 1e-11);
    }

    #[test]
    fn derivative_study_shape() {
        let meshes: Vec<Mesh> = [20, 40].iter().map(|&n| Mesh::graded(1.0, n, 2.0).unwrap()).collect();
        let chain = SchemeChain::cascade(Stage::Dc3, &[StarterKind::Bdf1, StarterKind::Rk2]).unwrap();
        let st = derivative_error_study(&example1(), &meshes, &chain, &SolverConfig::default()).unwrap();
        assert_eq!(st.rows.len(), 2);
        assert_eq!(st.orders(Stage::Bdf2).len(), 1);
        assert!(st.orders(Stage::Dc34).is_empty());
    }
}
