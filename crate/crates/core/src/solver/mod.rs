//! Transient solution of the forward equation `dπ/dt = πQ` and the backward
//! equation `dβ/dt = −Qβ` on an equispaced time grid.
//!
//! Both are linear autonomous systems `y' = J y` (with `J = Qᵀ` forward and
//! `J = Q` in reversed time backward), so the integrators here are specialised
//! to constant sparse `J`. Error control is componentwise: every accepted step
//! satisfies `|local error_i| <= rtol·|y_i| + atol` as estimated by the method.

pub mod bdf;
pub mod krylov;
pub mod lu;
pub mod rk;
pub mod sparse;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::SparseGenerator;
use sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Variable-order (1–5) backward differentiation formulas with sparse LU.
    Bdf,
    /// Explicit Dormand–Prince 5(4).
    Rk45,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bdf => "bdf",
            Method::Rk45 => "rk45",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bdf" => Ok(Method::Bdf),
            "rk45" => Ok(Method::Rk45),
            other => Err(format!("unknown solver '{other}' (expected bdf or rk45)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: Method::Bdf,
            rtol: 1e-6,
            atol: 1e-12,
            max_steps: 2_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub steps: usize,
    pub rejected: usize,
    pub matvecs: usize,
    pub factorizations: usize,
    /// Inner Krylov iterations, when the iterative linear solver is in use.
    pub linear_iterations: usize,
}

impl SolverStats {
    pub fn merge(&mut self, other: SolverStats) {
        self.steps += other.steps;
        self.rejected += other.rejected;
        self.matvecs += other.matvecs;
        self.factorizations += other.factorizations;
        self.linear_iterations += other.linear_iterations;
    }
}

/// `K` equispaced points on `[0, T]`, first exactly 0 and last exactly `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn equispaced(horizon: f64, points: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Query(format!("horizon must be positive, got {horizon}")));
        }
        if points < 2 {
            return Err(Error::Query(format!("time grid needs at least 2 points, got {points}")));
        }
        let last = (points - 1) as f64;
        let mut times: Vec<f64> = (0..points).map(|k| horizon * k as f64 / last).collect();
        times[points - 1] = horizon;
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
}

/// Solution vectors (including the sink entry) at every grid time.
#[derive(Clone, Debug)]
pub struct TimeGridSolution {
    pub grid: TimeGrid,
    pub vectors: Vec<Vec<f64>>,
    pub stats: SolverStats,
}

impl TimeGridSolution {
    pub fn at(&self, k: usize) -> &[f64] {
        &self.vectors[k]
    }

    pub fn last(&self) -> &[f64] {
        &self.vectors[self.vectors.len() - 1]
    }
}

/// Integrates `y' = J y` from `s = 0`, returning `y` at each of the increasing
/// output times (the first must be 0).
pub(crate) fn integrate(
    j_rows: &CsrMatrix,
    j_cols: &CsrMatrix,
    y0: &[f64],
    outputs: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<Vec<f64>>, SolverStats)> {
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(Error::Query("rtol and atol must be positive".into()));
    }
    match opts.method {
        Method::Bdf => bdf::integrate(j_rows, j_cols, y0, outputs, opts),
        Method::Rk45 => rk::integrate(j_rows, y0, outputs, opts),
    }
}

/// `π(t_k)` for every grid time, starting from `init` (which includes the sink entry).
pub fn solve_forward(
    generator: &SparseGenerator,
    init: &[f64],
    grid: &TimeGrid,
    opts: &SolverOptions,
) -> Result<TimeGridSolution> {
    check_len(generator, init)?;
    let q = generator.matrix();
    let qt = q.transpose();
    let (vectors, stats) = integrate(&qt, q, init, grid.times(), opts)?;
    Ok(TimeGridSolution {
        grid: grid.clone(),
        vectors,
        stats,
    })
}

/// `β(t_k)` for every grid time, integrating backwards from `terminal` at `T`.
pub fn solve_backward(
    generator: &SparseGenerator,
    terminal: &[f64],
    grid: &TimeGrid,
    opts: &SolverOptions,
) -> Result<TimeGridSolution> {
    check_len(generator, terminal)?;
    let q = generator.matrix();
    let qt = q.transpose();
    // equispaced: the reversed-time outputs coincide with the grid itself
    let (mut vectors, stats) = integrate(q, &qt, terminal, grid.times(), opts)?;
    vectors.reverse();
    Ok(TimeGridSolution {
        grid: grid.clone(),
        vectors,
        stats,
    })
}

fn check_len(generator: &SparseGenerator, v: &[f64]) -> Result<()> {
    if v.len() != generator.dim() {
        return Err(Error::DimensionMismatch {
            expected: generator.dim(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Componentwise max of `|e_i| / (atol + rtol·max(|a_i|, |b_i|))`.
pub(crate) fn error_norm(err: &[f64], a: &[f64], b: &[f64], rtol: f64, atol: f64) -> f64 {
    err.iter()
        .zip(a.iter().zip(b))
        .map(|(e, (x, y))| e.abs() / (atol + rtol * x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> SparseGenerator {
        // 0 -> 1 with rate 1; state 2 is the sink
        SparseGenerator::from_matrix(CsrMatrix::from_rows(
            3,
            vec![vec![(0, -1.0), (1, 1.0)], vec![], vec![]],
        ))
    }

    fn methods() -> [SolverOptions; 2] {
        let base = SolverOptions {
            rtol: 1e-9,
            atol: 1e-14,
            ..Default::default()
        };
        [
            SolverOptions { method: Method::Bdf, ..base },
            SolverOptions { method: Method::Rk45, ..base },
        ]
    }

    #[test]
    fn grid_endpoints_are_exact() {
        let g = TimeGrid::equispaced(0.3, 7).unwrap();
        assert_eq!(g.times()[0], 0.0);
        assert_eq!(g.horizon(), 0.3);
        assert!(g.times().windows(2).all(|w| w[0] < w[1]));
        assert!(TimeGrid::equispaced(1.0, 1).is_err());
        assert!(TimeGrid::equispaced(0.0, 3).is_err());
    }

    #[test]
    fn two_state_forward_and_backward() {
        let grid = TimeGrid::equispaced(1.0, 11).unwrap();
        for opts in methods() {
            let f = solve_forward(&two_state(), &[1.0, 0.0, 0.0], &grid, &opts).unwrap();
            let e = (-1.0f64).exp();
            assert!((f.last()[0] - e).abs() < 1e-8, "{:?}", opts.method);
            assert!((f.last()[1] - (1.0 - e)).abs() < 1e-8);
            let b = solve_backward(&two_state(), &[0.0, 1.0, 0.0], &grid, &opts).unwrap();
            assert!((b.at(0)[0] - (1.0 - e)).abs() < 1e-8);
            assert_eq!(b.last(), &[0.0, 1.0, 0.0]);
            // β(0, t) = 1 - exp(-(1 - t))
            for (k, &t) in grid.times().iter().enumerate() {
                assert!((b.at(k)[0] - (1.0 - (t - 1.0f64).exp())).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_generator_is_constant() {
        let g = SparseGenerator::from_matrix(CsrMatrix::zeros(4));
        let grid = TimeGrid::equispaced(5.0, 6).unwrap();
        for opts in methods() {
            let f = solve_forward(&g, &[0.25, 0.5, 0.25, 0.0], &grid, &opts).unwrap();
            assert!(f.vectors.iter().all(|v| v == &[0.25, 0.5, 0.25, 0.0]));
        }
    }

    #[test]
    fn all_ones_terminal_stays_one_without_sink_flow() {
        let grid = TimeGrid::equispaced(2.0, 5).unwrap();
        for opts in methods() {
            let b = solve_backward(&two_state(), &[1.0, 1.0, 0.0], &grid, &opts).unwrap();
            for v in &b.vectors {
                assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let grid = TimeGrid::equispaced(1.0, 3).unwrap();
        assert!(solve_forward(&two_state(), &[1.0], &grid, &SolverOptions::default()).is_err());
    }
}
