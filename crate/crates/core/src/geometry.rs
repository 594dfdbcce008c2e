//! Integer hyperrectangles ("macro-states") and grid partitions built from them.
//!
//! A [`MacroState`] is the set of all micro-states `x` with `lower <= x <= upper`
//! elementwise. Every operation here keeps results box-shaped; the set of
//! micro-states that *leave* a box under a reaction is generally not a box, so it
//! is only ever handled through its complement (see [`stay_set`] and
//! [`exit_count`]).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacroState {
    lower: Vec<i64>,
    upper: Vec<i64>,
}

impl MacroState {
    pub fn new(lower: Vec<i64>, upper: Vec<i64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (d, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if l < 0 {
                return Err(Error::NegativeState { dim: d, value: l });
            }
            if l > u {
                return Err(Error::InvalidModel(format!(
                    "empty macro-state: lower {l} > upper {u} in dimension {d}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The box holding exactly one micro-state.
    pub fn point(x: &[i64]) -> Result<Self> {
        Self::new(x.to_vec(), x.to_vec())
    }

    pub fn lower(&self) -> &[i64] {
        &self.lower
    }

    pub fn upper(&self) -> &[i64] {
        &self.upper
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, dim: usize) -> i64 {
        self.upper[dim] - self.lower[dim] + 1
    }

    /// Number of micro-states in the box.
    pub fn volume(&self) -> u64 {
        (0..self.dims()).map(|d| self.width(d) as u64).product()
    }

    pub fn is_micro(&self) -> bool {
        self.lower == self.upper
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.dims()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&xi, (&l, &u))| l <= xi && xi <= u)
    }

    pub fn overlaps(&self, other: &MacroState) -> bool {
        (0..self.dims()).all(|d| self.lower[d] <= other.upper[d] && other.lower[d] <= self.upper[d])
    }

    pub fn intersect(&self, other: &MacroState) -> Option<MacroState> {
        let mut lower = Vec::with_capacity(self.dims());
        let mut upper = Vec::with_capacity(self.dims());
        for d in 0..self.dims() {
            let l = self.lower[d].max(other.lower[d]);
            let u = self.upper[d].min(other.upper[d]);
            if l > u {
                return None;
            }
            lower.push(l);
            upper.push(u);
        }
        Some(Self { lower, upper })
    }

    /// Iterates over all micro-states in lexicographic order (last dimension fastest).
    pub fn micro_states(&self) -> MicroStates<'_> {
        MicroStates {
            current: Some(self.lower.clone()),
            boxed: self,
        }
    }
}

impl fmt::Display for MacroState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in 0..self.dims() {
            if d > 0 {
                write!(f, "x")?;
            }
            write!(f, "[{},{}]", self.lower[d], self.upper[d])?;
        }
        Ok(())
    }
}

pub struct MicroStates<'a> {
    current: Option<Vec<i64>>,
    boxed: &'a MacroState,
}

impl Iterator for MicroStates<'_> {
    type Item = Vec<i64>;

    fn next(&mut self) -> Option<Vec<i64>> {
        let out = self.current.take()?;
        let mut next = out.clone();
        let mut d = next.len();
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            if next[d] < self.boxed.upper[d] {
                next[d] += 1;
                self.current = Some(next);
                break;
            }
            next[d] = self.boxed.lower[d];
        }
        Some(out)
    }
}

/// Sub-box of `src` whose micro-states land in `dst` under the change vector `v`,
/// i.e. `((src + v) ∩ dst) - v`. `None` when no micro-state of `src` makes that jump.
pub fn transition_set(src: &MacroState, dst: &MacroState, v: &[i64]) -> Option<MacroState> {
    let n = src.dims();
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for d in 0..n {
        let l = src.lower[d].max(dst.lower[d] - v[d]);
        let u = src.upper[d].min(dst.upper[d] - v[d]);
        if l > u {
            return None;
        }
        lower.push(l);
        upper.push(u);
    }
    Some(MacroState { lower, upper })
}

/// Micro-states of `s` whose `v`-successor is still inside `s`.
pub fn stay_set(s: &MacroState, v: &[i64]) -> Option<MacroState> {
    transition_set(s, s, v)
}

/// Number of micro-states of `s` that leave `s` under `v`.
pub fn exit_count(s: &MacroState, v: &[i64]) -> u64 {
    s.volume() - stay_set(s, v).map_or(0, |b| b.volume())
}

/// Halves every lumped dimension of width > 1 into widths `⌈w/2⌉` and `⌊w/2⌋`.
/// Children are returned in lexicographic order of their lower corners.
pub fn split(s: &MacroState, unlumped: &[bool]) -> Vec<MacroState> {
    let n = s.dims();
    let pieces: Vec<Vec<(i64, i64)>> = (0..n)
        .map(|d| {
            let (l, u) = (s.lower[d], s.upper[d]);
            let w = u - l + 1;
            if w > 1 && !unlumped.get(d).copied().unwrap_or(false) {
                let left = (w + 1) / 2;
                vec![(l, l + left - 1), (l + left, u)]
            } else {
                vec![(l, u)]
            }
        })
        .collect();
    cartesian(&pieces)
}

fn cartesian(pieces: &[Vec<(i64, i64)>]) -> Vec<MacroState> {
    let mut out = vec![(Vec::new(), Vec::new())];
    for dim in pieces {
        let mut next = Vec::with_capacity(out.len() * dim.len());
        for (lo, hi) in &out {
            for &(l, u) in dim {
                let mut lo = lo.clone();
                let mut hi = hi.clone();
                lo.push(l);
                hi.push(u);
                next.push((lo, hi));
            }
        }
        out = next;
    }
    out.into_iter()
        .map(|(lower, upper)| MacroState { lower, upper })
        .collect()
}

/// A set of pairwise-disjoint macro-states. Everything outside it is the sink.
#[derive(Clone, Debug)]
pub struct LumpedSpace {
    states: Vec<MacroState>,
    unlumped: Vec<bool>,
    index: SpatialIndex,
}

impl LumpedSpace {
    pub fn new(states: Vec<MacroState>, unlumped: Vec<bool>) -> Result<Self> {
        let dims = unlumped.len();
        for s in &states {
            if s.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    got: s.dims(),
                });
            }
            for (d, &flag) in unlumped.iter().enumerate() {
                if flag && s.width(d) != 1 {
                    return Err(Error::InvalidModel(format!(
                        "macro-state {s} has width {} in unlumped dimension {d}",
                        s.width(d)
                    )));
                }
            }
        }
        let index = SpatialIndex::build(&states, dims);
        let space = Self {
            states,
            unlumped,
            index,
        };
        space.check_disjoint()?;
        Ok(space)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut candidates = Vec::new();
        for (i, s) in self.states.iter().enumerate() {
            self.index.query(s.lower(), s.upper(), &self.states, &mut candidates);
            if let Some(&k) = candidates.iter().find(|&&k| k != i) {
                return Err(Error::Overlap {
                    first: i.min(k),
                    second: i.max(k),
                });
            }
        }
        Ok(())
    }

    pub fn states(&self) -> &[MacroState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.unlumped.len()
    }

    pub fn unlumped(&self) -> &[bool] {
        &self.unlumped
    }

    /// Total number of micro-states covered.
    pub fn micro_count(&self) -> u64 {
        self.states.iter().map(MacroState::volume).sum()
    }

    pub fn is_micro(&self) -> bool {
        self.states.iter().all(MacroState::is_micro)
    }

    /// Index of the macro-state containing `x`, if retained.
    pub fn locate(&self, x: &[i64]) -> Option<usize> {
        if x.len() != self.dims() {
            return None;
        }
        let mut out = Vec::new();
        self.index.query(x, x, &self.states, &mut out);
        out.first().copied()
    }

    /// Indices of all retained macro-states overlapping the box `[lower, upper]`,
    /// ascending. Returns the number of candidate boxes inspected.
    pub fn overlapping(&self, lower: &[i64], upper: &[i64], out: &mut Vec<usize>) -> usize {
        self.index.query(lower, upper, &self.states, out)
    }

    /// Replaces every listed state by its children; all others are dropped.
    pub fn refine(&self, keep: &[usize]) -> Result<LumpedSpace> {
        let mut states = Vec::new();
        for &i in keep {
            states.extend(split(&self.states[i], &self.unlumped));
        }
        LumpedSpace::new(states, self.unlumped.clone())
    }
}

/// Tiles `∏ [0, bounds_d]` with boxes of side `2^m` in lumped dimensions and side
/// 1 in unlumped ones. The final tile of a dimension is narrower when
/// `bounds_d + 1` is not a multiple of the side.
pub fn initial_grid(bounds: &[i64], m: u32, unlumped: &[bool]) -> Result<LumpedSpace> {
    if bounds.len() != unlumped.len() {
        return Err(Error::DimensionMismatch {
            expected: bounds.len(),
            got: unlumped.len(),
        });
    }
    if let Some((d, &b)) = bounds.iter().enumerate().find(|(_, &b)| b < 0) {
        return Err(Error::NegativeState { dim: d, value: b });
    }
    let side = 1i64
        .checked_shl(m)
        .ok_or_else(|| Error::InvalidModel(format!("grid exponent {m} too large")))?;
    let pieces: Vec<Vec<(i64, i64)>> = bounds
        .iter()
        .zip(unlumped)
        .map(|(&b, &flat)| {
            let w = if flat { 1 } else { side };
            (0..=b)
                .step_by(w as usize)
                .map(|l| (l, (l + w - 1).min(b)))
                .collect()
        })
        .collect();
    LumpedSpace::new(cartesian(&pieces), unlumped.to_vec())
}

/// Uniform hash grid over box lower corners; the cell side in each dimension is
/// the widest box in that dimension, so every box touches at most two cells per
/// dimension and a query only inspects boxes near the query region.
#[derive(Clone, Debug)]
struct SpatialIndex {
    cell: Vec<i64>,
    cells: HashMap<Vec<i64>, Vec<usize>>,
}

impl SpatialIndex {
    fn build(states: &[MacroState], dims: usize) -> Self {
        let mut cell = vec![1i64; dims];
        for s in states {
            for (d, c) in cell.iter_mut().enumerate() {
                *c = (*c).max(s.width(d));
            }
        }
        let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, s) in states.iter().enumerate() {
            for key in cell_range(&cell, s.lower(), s.upper()) {
                cells.entry(key).or_default().push(i);
            }
        }
        Self { cell, cells }
    }

    fn query(&self, lower: &[i64], upper: &[i64], states: &[MacroState], out: &mut Vec<usize>) -> usize {
        out.clear();
        let mut checks = 0;
        for key in cell_range(&self.cell, lower, upper) {
            if let Some(ids) = self.cells.get(&key) {
                for &i in ids {
                    checks += 1;
                    let s = &states[i];
                    let hit = (0..lower.len()).all(|d| s.lower[d] <= upper[d] && lower[d] <= s.upper[d]);
                    if hit {
                        out.push(i);
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        checks
    }
}

fn cell_range(cell: &[i64], lower: &[i64], upper: &[i64]) -> Vec<Vec<i64>> {
    let pieces: Vec<(i64, i64)> = (0..cell.len())
        .map(|d| (lower[d].div_euclid(cell[d]), upper[d].div_euclid(cell[d])))
        .collect();
    let mut keys = vec![Vec::with_capacity(cell.len())];
    for &(a, b) in &pieces {
        let mut next = Vec::with_capacity(keys.len() * (b - a + 1) as usize);
        for k in &keys {
            for c in a..=b {
                let mut k = k.clone();
                k.push(c);
                next.push(k);
            }
        }
        keys = next;
    }
    keys
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(lower: &[i64], upper: &[i64]) -> MacroState {
        MacroState::new(lower.to_vec(), upper.to_vec()).unwrap()
    }

    #[test]
    fn volumes() {
        assert_eq!(b(&[0, 0], &[15, 15]).volume(), 256);
        assert_eq!(b(&[3], &[3]).volume(), 1);
        assert_eq!(b(&[0, 0, 2], &[7, 7, 2]).volume(), 64);
    }

    #[test]
    fn rejects_inverted_and_negative_boxes() {
        assert!(MacroState::new(vec![2], vec![1]).is_err());
        assert!(MacroState::new(vec![-1], vec![1]).is_err());
    }

    #[test]
    fn transition_set_examples() {
        let src = b(&[0, 0], &[3, 3]);
        let dst = b(&[4, 0], &[7, 3]);
        assert_eq!(transition_set(&src, &dst, &[1, 0]), Some(b(&[3, 0], &[3, 3])));
        assert_eq!(transition_set(&src, &src, &[0, 0]), Some(src.clone()));
        assert_eq!(transition_set(&b(&[0], &[3]), &b(&[10], &[12]), &[1]), None);
    }

    #[test]
    fn stay_and_exit() {
        assert_eq!(stay_set(&b(&[0], &[4]), &[1]), Some(b(&[0], &[3])));
        let sq = b(&[0, 0], &[3, 3]);
        assert_eq!(stay_set(&sq, &[1, 1]), Some(b(&[0, 0], &[2, 2])));
        assert_eq!(stay_set(&b(&[0], &[0]), &[1]), None);
        assert_eq!(stay_set(&b(&[0], &[0]), &[-2]), None);
        assert_eq!(exit_count(&sq, &[1, 1]), 7);
        assert_eq!(exit_count(&b(&[0], &[4]), &[1]), 1);
        assert_eq!(exit_count(&b(&[0], &[4]), &[0]), 0);
    }

    #[test]
    fn split_examples() {
        let kids = split(&b(&[0, 0], &[15, 15]), &[false, false]);
        assert_eq!(
            kids,
            vec![
                b(&[0, 0], &[7, 7]),
                b(&[0, 8], &[7, 15]),
                b(&[8, 0], &[15, 7]),
                b(&[8, 8], &[15, 15]),
            ]
        );
        assert_eq!(split(&b(&[0], &[0]), &[false]), vec![b(&[0], &[0])]);
        assert_eq!(
            split(&b(&[0, 2], &[7, 2]), &[false, true]),
            vec![b(&[0, 2], &[3, 2]), b(&[4, 2], &[7, 2])]
        );
        assert_eq!(split(&b(&[0], &[4]), &[false]), vec![b(&[0], &[2]), b(&[3], &[4])]);
    }

    #[test]
    fn initial_grid_examples() {
        let g = initial_grid(&[159, 159], 4, &[false, false]).unwrap();
        assert_eq!(g.len(), 100);
        assert!(g.states().iter().all(|s| s.volume() == 256));

        let g = initial_grid(&[3, 2], 0, &[false, false]).unwrap();
        assert_eq!(g.len(), 12);
        assert!(g.is_micro());

        let g = initial_grid(&[79, 79, 1, 1, 1], 3, &[false, false, true, true, true]).unwrap();
        assert_eq!(g.len(), 800);

        let g = initial_grid(&[20], 3, &[false]).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.states()[2], b(&[16], &[20]));
    }

    #[test]
    fn overlapping_spaces_are_rejected() {
        let err = LumpedSpace::new(vec![b(&[0], &[4]), b(&[4], &[6])], vec![false]).unwrap_err();
        assert!(matches!(err, Error::Overlap { first: 0, second: 1 }));
    }

    #[test]
    fn locate_finds_containing_box() {
        let g = initial_grid(&[159, 159], 4, &[false, false]).unwrap();
        let i = g.locate(&[64, 64]).unwrap();
        assert!(g.states()[i].contains(&[64, 64]));
        assert_eq!(g.locate(&[160, 0]), None);
    }

    #[test]
    fn micro_state_iteration_is_lexicographic() {
        let pts: Vec<_> = b(&[0, 1], &[1, 2]).micro_states().collect();
        assert_eq!(pts, vec![vec![0, 1], vec![0, 2], vec![1, 1], vec![1, 2]]);
    }

    fn arb_box(dims: usize) -> impl Strategy<Value = MacroState> {
        prop::collection::vec((0i64..12, 0i64..6), dims).prop_map(|v| {
            let lower = v.iter().map(|p| p.0).collect();
            let upper = v.iter().map(|p| p.0 + p.1).collect();
            MacroState::new(lower, upper).unwrap()
        })
    }

    proptest! {
        #[test]
        fn transition_set_matches_enumeration(
            (src, dst, v) in (1usize..4).prop_flat_map(|d| (
                arb_box(d), arb_box(d), prop::collection::vec(-3i64..=3, d)
            ))
        ) {
            let got = transition_set(&src, &dst, &v);
            let expected: Vec<Vec<i64>> = src
                .micro_states()
                .filter(|x| {
                    let y: Vec<i64> = x.iter().zip(&v).map(|(a, b)| a + b).collect();
                    dst.contains(&y)
                })
                .collect();
            match got {
                None => prop_assert!(expected.is_empty()),
                Some(t) => {
                    let listed: Vec<Vec<i64>> = t.micro_states().collect();
                    prop_assert_eq!(listed, expected);
                }
            }
            prop_assert_eq!(transition_set(&src, &src, &vec![0; v.len()]), Some(src.clone()));
        }

        #[test]
        fn split_partitions_parent(s in (1usize..4).prop_flat_map(arb_box)) {
            let kids = split(&s, &vec![false; s.dims()]);
            prop_assert_eq!(kids.iter().map(MacroState::volume).sum::<u64>(), s.volume());
            for (i, a) in kids.iter().enumerate() {
                for c in &kids[i + 1..] {
                    prop_assert!(!a.overlaps(c));
                }
                prop_assert!(a.micro_states().all(|x| s.contains(&x)));
            }
        }

        #[test]
        fn initial_grid_covers_each_state_once(
            bounds in prop::collection::vec(0i64..20, 1..3), m in 0u32..4
        ) {
            let flags = vec![false; bounds.len()];
            let g = initial_grid(&bounds, m, &flags).unwrap();
            let full = MacroState::new(vec![0; bounds.len()], bounds.clone()).unwrap();
            prop_assert_eq!(g.micro_count(), full.volume());
            for x in full.micro_states() {
                let hits = g.states().iter().filter(|s| s.contains(&x)).count();
                prop_assert_eq!(hits, 1);
                prop_assert!(g.states()[g.locate(&x).unwrap()].contains(&x));
            }
        }
    }
}
