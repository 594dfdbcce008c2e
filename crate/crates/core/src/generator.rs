//! Sparse lumped generator over a [`LumpedSpace`], with every transition that
//! leaves the retained boxes redirected to a single absorbing sink.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{transition_set, LumpedSpace};
use crate::model::ReactionNetwork;
use crate::rates::{exit_rate, lumped_rate};
use crate::solver::sparse::CsrMatrix;

/// Relative size below which the residual sink flow of a row is treated as
/// rounding noise.
const SINK_NOISE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssemblyStats {
    pub rows: usize,
    /// Number of (row, reaction, candidate box) overlap tests performed.
    pub candidate_checks: usize,
}

/// Rate matrix over macro-states `0..n` plus the sink at index `n`.
#[derive(Clone, Debug)]
pub struct SparseGenerator {
    matrix: CsrMatrix,
    stats: AssemblyStats,
}

impl SparseGenerator {
    /// Lumped rates `Q[i,k] = Σ_j ᾱ_j(x̄_{i→k}) / vol(x̄_i)`; whatever part of the exit
    /// rate `Σ_j ᾱ_j(exit set)` does not reach a retained box goes to the sink.
    pub fn assemble(space: &LumpedSpace, network: &ReactionNetwork) -> Result<Self> {
        let n = space.len();
        let rows: Vec<(Vec<(usize, f64)>, usize)> = (0..n)
            .into_par_iter()
            .map(|i| assemble_row(space, network, i))
            .collect();
        let mut checks = 0;
        let mut entries = Vec::with_capacity(n + 1);
        for (row, c) in rows {
            checks += c;
            entries.push(row);
        }
        entries.push(Vec::new());
        Ok(Self {
            matrix: CsrMatrix::from_rows(n + 1, entries),
            stats: AssemblyStats {
                rows: n,
                candidate_checks: checks,
            },
        })
    }

    pub fn from_matrix(matrix: CsrMatrix) -> Self {
        Self {
            stats: AssemblyStats {
                rows: matrix.n().saturating_sub(1),
                candidate_checks: 0,
            },
            matrix,
        }
    }

    /// Dimension including the sink.
    pub fn dim(&self) -> usize {
        self.matrix.n()
    }

    pub fn sink(&self) -> usize {
        self.matrix.n() - 1
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.matrix.get(i, k)
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn stats(&self) -> AssemblyStats {
        self.stats
    }

    /// Zeroes every outgoing rate of the given rows.
    pub fn make_absorbing(&self, rows: &[usize]) -> SparseGenerator {
        let n = self.dim();
        let mut absorbing = vec![false; n];
        for &r in rows {
            absorbing[r] = true;
        }
        let entries = (0..n)
            .map(|i| {
                if absorbing[i] {
                    Vec::new()
                } else {
                    self.matrix.row(i).collect()
                }
            })
            .collect();
        SparseGenerator {
            matrix: CsrMatrix::from_rows(n, entries),
            stats: self.stats,
        }
    }

    /// Coordinate-list dump, one `row col rate` triple per line.
    pub fn to_coo_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.dim() {
            for (k, v) in self.matrix.row(i) {
                let _ = writeln!(out, "{i} {k} {v:e}");
            }
        }
        out
    }
}

fn assemble_row(space: &LumpedSpace, network: &ReactionNetwork, i: usize) -> (Vec<(usize, f64)>, usize) {
    let states = space.states();
    let src = &states[i];
    let vol = src.volume() as f64;
    let sink = space.len();
    let mut acc: Vec<(usize, f64)> = Vec::new();
    let mut sink_rate = 0.0;
    let mut total_exit = 0.0;
    let mut rebalance = false;
    let mut candidates = Vec::new();
    let mut checks = 0;
    for reaction in network.reactions() {
        let exit = exit_rate(reaction, src);
        if exit == 0.0 {
            continue;
        }
        total_exit += exit;
        let v = reaction.change();
        let lower: Vec<i64> = src.lower().iter().zip(v).map(|(a, b)| a + b).collect();
        let upper: Vec<i64> = src.upper().iter().zip(v).map(|(a, b)| a + b).collect();
        checks += space.overlapping(&lower, &upper, &mut candidates);
        let mut into = 0.0;
        for &k in &candidates {
            if k == i {
                continue;
            }
            if let Some(t) = transition_set(src, &states[k], v) {
                let rate = lumped_rate(reaction, &t);
                if rate > 0.0 {
                    into += rate;
                    acc.push((k, rate));
                }
            }
        }
        let lost = exit - into;
        if lost > SINK_NOISE * exit {
            sink_rate += lost;
        } else if lost != 0.0 {
            rebalance = true;
        }
    }
    if sink_rate > 0.0 {
        acc.push((sink, sink_rate));
    }
    // stable sort keeps reaction order within a column
    acc.sort_by_key(|e| e.0);
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(acc.len() + 1);
    for (k, r) in acc {
        match row.last_mut() {
            Some(last) if last.0 == k => last.1 += r,
            _ => row.push((k, r)),
        }
    }
    for e in row.iter_mut() {
        e.1 /= vol;
    }
    // rounding or quadrature mismatch between the exit and neighbour sums is
    // absorbed into the diagonal so the row still conserves mass
    let diag = if rebalance {
        -row.iter().map(|e| e.1).sum::<f64>()
    } else {
        -total_exit / vol
    };
    if diag != 0.0 {
        let pos = row.partition_point(|e| e.0 < i);
        row.insert(pos, (i, diag));
    }
    (row, checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{initial_grid, MacroState};
    use crate::model::{PropensitySpec, Reaction};
    use std::collections::BTreeMap;

    fn birth_death() -> ReactionNetwork {
        ReactionNetwork::new(
            vec!["X".into()],
            vec![
                Reaction::new("birth", vec![0], vec![1], PropensitySpec::MassAction { rate: 10.0 }).unwrap(),
                Reaction::new("death", vec![1], vec![0], PropensitySpec::MassAction { rate: 0.1 }).unwrap(),
            ],
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn micro_birth_death_on_three_states() {
        let space = initial_grid(&[2], 0, &[false]).unwrap();
        let q = SparseGenerator::assemble(&space, &birth_death()).unwrap();
        let s = q.sink();
        assert_eq!(s, 3);
        assert_eq!(q.get(0, 1), 10.0);
        assert_eq!(q.get(1, 2), 10.0);
        assert_eq!(q.get(1, 0), 0.1);
        assert_eq!(q.get(2, 1), 0.2);
        assert_eq!(q.get(2, s), 10.0);
        assert_eq!(q.get(0, 0), -10.0);
        assert_eq!(q.get(1, 1), -10.1);
        assert_eq!(q.get(2, 2), -10.2);
        assert_eq!(q.matrix().row(s).count(), 0);
    }

    #[test]
    fn single_box_birth_goes_to_sink() {
        let net = ReactionNetwork::new(
            vec!["X".into()],
            vec![Reaction::new("birth", vec![0], vec![1], PropensitySpec::MassAction { rate: 10.0 }).unwrap()],
            BTreeMap::new(),
        )
        .unwrap();
        let space = LumpedSpace::new(vec![MacroState::new(vec![0], vec![4]).unwrap()], vec![false]).unwrap();
        let q = SparseGenerator::assemble(&space, &net).unwrap();
        assert_eq!(q.get(0, 1), 2.0);
        assert_eq!(q.get(0, 0), -2.0);
    }

    #[test]
    fn rows_sum_to_zero_on_lumped_grid() {
        let space = initial_grid(&[200], 3, &[false]).unwrap();
        let q = SparseGenerator::assemble(&space, &birth_death()).unwrap();
        for i in 0..q.dim() {
            let s: f64 = q.matrix().row(i).map(|e| e.1).sum();
            assert!(s.abs() <= 1e-12, "row {i} sums to {s}");
            assert!(q.matrix().row(i).all(|(k, v)| k == i || v >= 0.0));
        }
    }

    #[test]
    fn absorbing_rows_are_cleared() {
        let space = initial_grid(&[50], 0, &[false]).unwrap();
        let q = SparseGenerator::assemble(&space, &birth_death()).unwrap();
        let a = q.make_absorbing(&[40]);
        assert_eq!(a.matrix().row(40).count(), 0);
        assert_eq!(a.get(39, 40), q.get(39, 40));
        let again = a.make_absorbing(&[a.sink()]);
        assert_eq!(again.matrix(), a.matrix());
    }

    #[test]
    fn coo_dump_lists_every_entry() {
        let space = initial_grid(&[2], 0, &[false]).unwrap();
        let q = SparseGenerator::assemble(&space, &birth_death()).unwrap();
        let text = q.to_coo_text();
        assert_eq!(text.lines().count(), q.matrix().nnz());
        assert!(text.lines().any(|l| l == "2 3 1e1"));
    }
}
