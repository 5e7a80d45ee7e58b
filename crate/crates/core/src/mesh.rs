//! Nonuniform time meshes `0 = t_0 < t_1 < ... < t_N = T`.
//!
//! Step sizes are `tau_k = t_k - t_{k-1}` for `1 <= k <= N` and adjacent step
//! ratios are `r_k = tau_k / tau_{k-1}` for `k >= 2`, with the convention
//! `r_1 = 0`. Both are stored 1-based: index 0 of [`Mesh::steps`] and the first
//! two entries of [`Mesh::ratios`] are placeholders.

use std::io::{self, Write};

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Steps below this fraction of the level they end at are rejected as degenerate.
pub const DEGENERATE_STEP_FRACTION: f64 = 1e-15;

/// An immutable, validated time mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    levels: Vec<f64>,
    steps: Vec<f64>,
    ratios: Vec<f64>,
    max_step: f64,
}

impl Mesh {
    /// Builds a mesh from explicit time levels.
    ///
    /// The levels must start at zero, be strictly increasing and contain at
    /// least two entries.
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(invalid("a mesh needs at least two time levels"));
        }
        if levels[0] != 0.0 {
            return Err(invalid(format!("mesh must start at t = 0, got {}", levels[0])));
        }
        let horizon = *levels.last().unwrap();
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("mesh horizon must be positive and finite, got {horizon}")));
        }
        let mut steps = Vec::with_capacity(levels.len());
        steps.push(0.0);
        for k in 1..levels.len() {
            let tau = levels[k] - levels[k - 1];
            let floor = DEGENERATE_STEP_FRACTION * levels[k].abs();
            if !(tau > floor) {
                return Err(invalid(format!(
                    "degenerate step tau_{k} = {tau:e} (levels must increase by more than {floor:e})"
                )));
            }
            steps.push(tau);
        }
        let mut ratios = vec![0.0; levels.len()];
        for k in 2..levels.len() {
            ratios[k] = steps[k] / steps[k - 1];
        }
        let max_step = steps[1..].iter().copied().fold(0.0, f64::max);
        Ok(Self {
            levels,
            steps,
            ratios,
            max_step,
        })
    }

    /// Uniform mesh with `n` equal steps.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if n < 2 {
            return Err(invalid(format!("uniform mesh needs N >= 2, got {n}")));
        }
        let nf = n as f64;
        let mut levels: Vec<f64> = (0..=n).map(|k| horizon * (k as f64 / nf)).collect();
        levels[n] = horizon;
        Self::from_levels(levels)
    }

    /// Graded mesh `t_k = T (k/N)^gamma`.
    pub fn graded(horizon: f64, n: usize, gamma: f64) -> Result<Self> {
        check_horizon(horizon)?;
        check_count(n)?;
        if !(gamma.is_finite() && gamma >= 1.0) {
            return Err(invalid(format!("grading exponent must be >= 1, got {gamma}")));
        }
        let nf = n as f64;
        let mut levels: Vec<f64> = (0..=n)
            .map(|k| horizon * (k as f64 / nf).powf(gamma))
            .collect();
        levels[n] = horizon;
        Self::from_levels(levels)
    }

    /// Random mesh `tau_k = eps_k T / sum(eps)` with `eps_k` uniform on (0, 1).
    ///
    /// The draws come from a ChaCha8 stream seeded with `seed`, so the mesh is
    /// reproducible across platforms. The last level is pinned to `T`.
    pub fn random(horizon: f64, n: usize, seed: u64) -> Result<Self> {
        check_horizon(horizon)?;
        check_count(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Open01)).collect();
        let total: f64 = draws.iter().sum();
        let mut levels = Vec::with_capacity(n + 1);
        levels.push(0.0);
        let mut acc = 0.0;
        for eps in &draws[..n - 1] {
            acc += eps;
            levels.push(horizon * (acc / total));
        }
        levels.push(horizon);
        Self::from_levels(levels)
    }

    /// Geometric mesh with `t_0 = 0` and `t_k = T ratio^(k-N)` for `k >= 1`.
    ///
    /// This gives `r_k = ratio` for `k >= 3` and `r_2 = ratio - 1`; the last
    /// step `T (1 - 1/ratio)` does not shrink as `N` grows.
    pub fn geometric(horizon: f64, n: usize, ratio: f64) -> Result<Self> {
        check_horizon(horizon)?;
        check_count(n)?;
        if !(ratio.is_finite() && ratio > 1.0) {
            return Err(invalid(format!("geometric ratio must exceed 1, got {ratio}")));
        }
        let mut levels = Vec::with_capacity(n + 1);
        levels.push(0.0);
        for k in 1..=n {
            levels.push(horizon * ratio.powi(k as i32 - n as i32));
        }
        levels[n] = horizon;
        Self::from_levels(levels)
    }

    /// Number of steps `N`.
    pub fn len(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> f64 {
        *self.levels.last().unwrap()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn t(&self, k: usize) -> f64 {
        self.levels[k]
    }

    /// `tau_k` for `1 <= k <= N`.
    pub fn tau(&self, k: usize) -> f64 {
        self.steps[k]
    }

    /// `r_k` for `k >= 1` (`r_1 = 0`).
    pub fn ratio(&self, k: usize) -> f64 {
        self.ratios[k]
    }

    /// Step sizes indexed by level; entry 0 is unused.
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Step ratios indexed by level; entries 0 and 1 are zero.
    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    /// The ratios `r_2, ..., r_N`.
    pub fn interior_ratios(&self) -> &[f64] {
        if self.ratios.len() > 2 {
            &self.ratios[2..]
        } else {
            &[]
        }
    }

    /// Maximum step size `tau = max_k tau_k`.
    pub fn max_step(&self) -> f64 {
        self.max_step
    }

    pub fn max_ratio(&self) -> f64 {
        self.interior_ratios().iter().copied().fold(0.0, f64::max)
    }

    /// Number of ratios exceeding the classical zero-stability limit `1 + sqrt(2)`.
    pub fn count_ratios_above_zero_stability_limit(&self) -> usize {
        let limit = 1.0 + std::f64::consts::SQRT_2;
        self.interior_ratios().iter().filter(|&&r| r > limit).count()
    }

    /// Writes `k,t_k,tau_k,r_k` rows (step and ratio are blank where undefined).
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "k,t_k,tau_k,r_k")?;
        for k in 0..self.levels.len() {
            let tau = if k >= 1 { format!("{:e}", self.steps[k]) } else { String::new() };
            let r = if k >= 1 { format!("{:e}", self.ratios[k]) } else { String::new() };
            writeln!(out, "{k},{:e},{tau},{r}", self.levels[k])?;
        }
        Ok(())
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if horizon.is_finite() && horizon > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("horizon must be positive and finite, got {horizon}")))
    }
}

fn check_count(n: usize) -> Result<()> {
    if n >= 3 {
        Ok(())
    } else {
        Err(invalid(format!("mesh needs N >= 3, got {n}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graded_gamma_one_is_uniform() {
        let g = Mesh::graded(1.0, 4, 1.0).unwrap();
        assert_eq!(g.levels(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        for k in 2..=4 {
            assert_eq!(g.ratio(k), 1.0);
        }
        let u = Mesh::uniform(1.0, 4).unwrap();
        assert_eq!(g.levels(), u.levels());
    }

    #[test]
    fn graded_gamma_two() {
        let g = Mesh::graded(1.0, 4, 2.0).unwrap();
        assert_eq!(g.levels(), &[0.0, 1.0 / 16.0, 4.0 / 16.0, 9.0 / 16.0, 1.0]);
        assert!((g.ratio(2) - 3.0).abs() < 1e-15);
        assert_eq!(g.ratio(1), 0.0);
    }

    #[test]
    fn graded_step_prefactor_matches_reported_value() {
        let g = Mesh::graded(10.0 * std::f64::consts::PI, 5120, 2.0).unwrap();
        let prefactor = g.max_step() / g.tau(1);
        // N^2 - (N-1)^2 = 2N - 1
        assert!((prefactor - 10239.0).abs() < 1e-6 * prefactor);
        assert!((prefactor / 1.02e4 - 1.0).abs() < 0.01);
    }

    #[test]
    fn graded_ratios_decrease_below_bound() {
        let gamma = 3.0;
        let g = Mesh::graded(2.0, 200, gamma).unwrap();
        let bound = 2f64.powf(gamma) - 1.0;
        let r = g.interior_ratios();
        assert!((r[0] - bound).abs() < 1e-12);
        for w in r.windows(2) {
            assert!(w[1] <= w[0] + 1e-14);
            assert!(w[1] >= 1.0);
        }
    }

    #[test]
    fn random_mesh_is_normalized_and_deterministic() {
        let a = Mesh::random(3.0, 100, 7).unwrap();
        let b = Mesh::random(3.0, 100, 7).unwrap();
        assert_eq!(a, b);
        let sum: f64 = a.steps()[1..].iter().sum();
        assert!((sum - 3.0).abs() <= 1e-14 * 3.0);
        assert_eq!(a.horizon(), 3.0);
        let c = Mesh::random(3.0, 100, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_mesh_has_many_large_ratios() {
        let m = Mesh::random(10.0 * std::f64::consts::PI, 5120, 2024).unwrap();
        let frac = m.count_ratios_above_zero_stability_limit() as f64 / 5119.0;
        assert!((0.10..=0.35).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn geometric_mesh() {
        let m = Mesh::geometric(1.0, 3, 3.0).unwrap();
        let expect = [0.0, 1.0 / 9.0, 1.0 / 3.0, 1.0];
        for (a, b) in m.levels().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let m = Mesh::geometric(1.0, 10, 3.0).unwrap();
        assert!((m.tau(10) - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.ratio(2) - 2.0).abs() < 1e-12);
        for k in 3..=10 {
            assert!((m.ratio(k) - 3.0).abs() < 1e-12, "r_{k} = {}", m.ratio(k));
        }
        assert!(Mesh::geometric(1.0, 10, 1.0).is_err());
    }

    #[test]
    fn uniform_mesh() {
        let m = Mesh::uniform(1.0, 2).unwrap();
        assert_eq!(m.levels(), &[0.0, 0.5, 1.0]);
        let t = 10.0 * std::f64::consts::PI;
        let m = Mesh::uniform(t, 1280).unwrap();
        assert!((m.max_step() - t / 1280.0).abs() < 1e-14);
        assert!(m.interior_ratios().iter().all(|&r| (r - 1.0).abs() < 1e-9));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Mesh::graded(1.0, 2, 2.0).is_err());
        assert!(Mesh::graded(-1.0, 10, 2.0).is_err());
        assert!(Mesh::graded(1.0, 10, 0.5).is_err());
        assert!(Mesh::from_levels(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(Mesh::from_levels(vec![0.1, 0.5, 1.0]).is_err());
        assert!(Mesh::from_levels(vec![0.0, 1.0, 1.0 + 1e-17, 2.0]).is_err());
        assert!(Mesh::from_levels(vec![0.0, 1e-19, 1.0]).is_ok());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let m = Mesh::uniform(1.0, 4).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "k,t_k,tau_k,r_k");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "0,0e0,,");
    }
}
