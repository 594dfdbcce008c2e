//! Bridging distributions and the refine-and-truncate loop.
//!
//! On a lumped space the forward law `π̂` and the backward weights `β̂` are
//! combined into `γ̂ = π̂ β̂ / Z` with `Z = Σ π̂(·,0) β̂(·,0)`. Boxes whose `γ̂`
//! stays below `δ` at every grid time are dropped (their mass then flows into
//! the sink), the remaining boxes are halved, and the process repeats until
//! every box is a single micro-state. Because truncated paths are absorbed by a
//! sink with `β = 0`, the final `Z` is a lower bound on the true reachability
//! probability, up to integration error.

use rayon::prelude::*;
use serde::Serialize;

use crate::bayes::Likelihood;
use crate::dsl::{ModelDocument, Predicate, RefinementOptions, TerminalSpec};
use crate::error::{Error, Result};
use crate::generator::SparseGenerator;
use crate::geometry::{initial_grid, LumpedSpace, MacroState};
use crate::model::ReactionNetwork;
use crate::solver::{solve_backward, solve_forward, SolverOptions, SolverStats, TimeGrid, TimeGridSolution};

#[derive(Clone, Debug)]
pub enum Terminal {
    Point { state: Vec<i64>, first_passage: bool },
    Predicate(Predicate),
    Likelihood(Likelihood),
}

/// Everything the refinement loop needs, detached from the text format.
#[derive(Clone, Debug)]
pub struct Problem {
    pub network: ReactionNetwork,
    pub initial: Vec<(Vec<i64>, f64)>,
    pub terminal: Terminal,
    pub horizon: f64,
    pub options: RefinementOptions,
}

impl Problem {
    /// Observation terminals are resolved to a likelihood by [`crate::bayes::smooth`];
    /// here they become a constant weight until then.
    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let terminal = match &doc.terminal {
            TerminalSpec::Point { state, first_passage } => Terminal::Point {
                state: state.clone(),
                first_passage: *first_passage,
            },
            TerminalSpec::Predicate(p) => Terminal::Predicate(p.clone()),
            TerminalSpec::Observe(t) => Terminal::Likelihood(Likelihood {
                species: t.species,
                values: Vec::new(),
            }),
        };
        Ok(Self {
            network: doc.network.clone(),
            initial: doc.initial.support(),
            terminal,
            horizon: doc.horizon,
            options: doc.options.clone(),
        })
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            method: self.options.solver,
            rtol: self.options.rtol,
            atol: self.options.atol,
            ..SolverOptions::default()
        }
    }

    fn first_passage_goal(&self) -> Option<&[i64]> {
        match &self.terminal {
            Terminal::Point {
                state,
                first_passage: true,
            } => Some(state),
            _ => None,
        }
    }

    /// Initial law aggregated onto the boxes (sink entry last).
    pub fn initial_vector(&self, space: &LumpedSpace) -> Result<Vec<f64>> {
        let mut v = vec![0.0; space.len() + 1];
        for (x, p) in &self.initial {
            let i = space
                .locate(x)
                .ok_or_else(|| Error::Query(format!("initial state {x:?} is outside the truncation")))?;
            v[i] += p;
        }
        Ok(v)
    }

    /// Terminal weight of each box: the mean of the micro-state weight over the box.
    pub fn terminal_vector(&self, space: &LumpedSpace) -> Vec<f64> {
        let mut v = vec![0.0; space.len() + 1];
        match &self.terminal {
            Terminal::Point { state, .. } => {
                if let Some(i) = space.locate(state) {
                    v[i] = 1.0 / space.states()[i].volume() as f64;
                }
            }
            Terminal::Predicate(p) => {
                if let Some((lo, hi)) = p.region(space.dims()) {
                    let region = |s: &MacroState| -> f64 {
                        let mut count = 1.0;
                        for d in 0..lo.len() {
                            let a = s.lower()[d].max(lo[d]);
                            let b = s.upper()[d].min(hi[d]);
                            if a > b {
                                return 0.0;
                            }
                            count *= (b - a + 1) as f64;
                        }
                        count / s.volume() as f64
                    };
                    v[..space.len()]
                        .par_iter_mut()
                        .zip(space.states().par_iter())
                        .for_each(|(w, s)| *w = region(s));
                }
            }
            Terminal::Likelihood(l) => {
                if l.values.is_empty() {
                    v[..space.len()].iter_mut().for_each(|w| *w = 1.0);
                } else {
                    for (w, s) in v.iter_mut().zip(space.states()) {
                        *w = l.mean(s.lower()[l.species], s.upper()[l.species]);
                    }
                }
            }
        }
        v
    }

    /// Boxes exempt from truncation: those holding initial support and, for
    /// point terminals, the goal.
    fn exempt(&self, space: &LumpedSpace) -> Vec<usize> {
        let mut out: Vec<usize> = self.initial.iter().filter_map(|(x, _)| space.locate(x)).collect();
        if let Terminal::Point { state, .. } = &self.terminal {
            out.extend(space.locate(state));
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn check(&self) -> Result<()> {
        let dims = self.network.dims();
        crate::dsl::validate_options(&self.options, dims).map_err(Error::Query)?;
        if let Some(&d) = self.options.unlumped.iter().find(|&&d| d >= dims) {
            return Err(Error::Query(format!("unlumped dimension {d} out of range")));
        }
        let inside = |x: &[i64]| x.len() == dims && x.iter().zip(&self.options.bounds).all(|(v, b)| *v >= 0 && v <= b);
        for (x, _) in &self.initial {
            if !inside(x) {
                return Err(Error::Query(format!("initial state {x:?} lies outside the bounds")));
            }
        }
        if let Terminal::Point { state, .. } = &self.terminal {
            if !inside(state) {
                return Err(Error::Query(format!("terminal state {state:?} lies outside the bounds")));
            }
        }
        Ok(())
    }
}

/// Forward, backward and bridging probabilities of one space on the time grid.
#[derive(Clone, Debug)]
pub struct BridgingSolution {
    pub space: LumpedSpace,
    pub grid: TimeGrid,
    pub forward: TimeGridSolution,
    pub backward: TimeGridSolution,
    /// `gamma[k][i]`: bridging probability of box `i` at grid time `k`.
    pub gamma: Vec<Vec<f64>>,
    /// `Σ π̂(·,0) β̂(·,0)`.
    pub normalizer: f64,
    /// `max_k |Σ π̂(·,t_k) β̂(·,t_k) / Z − 1|`; zero in exact arithmetic on a
    /// micro-state space, larger under lumping.
    pub mass_drift: f64,
}

impl BridgingSolution {
    /// `Σ π̂(·,T) β̂(·,T)`; equals the normalizer up to integration error.
    pub fn terminal_reach(&self) -> f64 {
        dot(self.forward.last(), self.backward.last())
    }

    pub fn duality_gap(&self) -> f64 {
        (self.terminal_reach() - self.normalizer).abs()
    }

    pub fn sink_mass(&self) -> f64 {
        self.forward.last()[self.space.len()]
    }

    pub fn max_gamma(&self) -> Vec<f64> {
        max_over_time(&self.gamma, self.space.len())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max(0.0) * y.max(0.0)).sum()
}

fn max_over_time(gamma: &[Vec<f64>], n: usize) -> Vec<f64> {
    (0..n)
        .into_par_iter()
        .map(|i| gamma.iter().map(|g| g[i]).fold(0.0, f64::max))
        .collect()
}

/// `γ(x, t_k) ∝ π(x, t_k) β(x, t_k)` for every box (sink excluded), normalized
/// per grid time; negative integrator noise is clamped to zero here.
pub fn bridging_distribution(
    space: LumpedSpace,
    forward: TimeGridSolution,
    backward: TimeGridSolution,
    normalizer: f64,
) -> Result<BridgingSolution> {
    let n = space.len();
    if forward.grid != backward.grid || forward.vectors.len() != backward.vectors.len() {
        return Err(Error::Query("forward and backward solutions use different grids".into()));
    }
    if forward.vectors.first().map_or(0, Vec::len) != n + 1 || backward.vectors.first().map_or(0, Vec::len) != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + 1,
            got: forward.vectors.first().map_or(0, Vec::len),
        });
    }
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::Unreachable {
            normalizer,
            sink_mass: forward.last()[n],
        });
    }
    let (gamma, drift): (Vec<Vec<f64>>, Vec<f64>) = forward
        .vectors
        .par_iter()
        .zip(backward.vectors.par_iter())
        .map(|(p, b)| {
            let mass = dot(&p[..n], &b[..n]);
            let g = if mass > 0.0 {
                (0..n).map(|i| p[i].max(0.0) * b[i].max(0.0) / mass).collect()
            } else {
                vec![0.0; n]
            };
            (g, (mass / normalizer - 1.0).abs())
        })
        .unzip();
    let mass_drift = drift.into_iter().fold(0.0, f64::max);
    Ok(BridgingSolution {
        grid: forward.grid.clone(),
        space,
        forward,
        backward,
        gamma,
        normalizer,
        mass_drift,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub boxes: usize,
    pub micro_states: u64,
    pub normalizer: f64,
    pub terminal_reach: f64,
    pub duality_gap: f64,
    pub sink_mass: f64,
    pub max_gamma: f64,
    pub mass_drift: f64,
    /// Boxes kept (and split) for the next pass; equals `boxes` on the final pass.
    pub kept: usize,
    pub forward: SolverStats,
    pub backward: SolverStats,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RefinementTrace {
    pub iterations: Vec<IterationRecord>,
    /// Boxes summed over all passes.
    pub overall_states: usize,
    /// Micro-states summed over all passes.
    pub overall_micro_states: u64,
    pub final_states: usize,
    pub notes: Vec<String>,
    /// Box list of every pass, for plotting.
    #[serde(skip)]
    pub snapshots: Vec<Vec<MacroState>>,
}

/// One forward/backward pass on a fixed space.
pub fn solve_space(problem: &Problem, space: LumpedSpace) -> Result<BridgingSolution> {
    let mut generator = SparseGenerator::assemble(&space, &problem.network)?;
    if let Some(goal) = problem.first_passage_goal() {
        if let Some(g) = space.locate(goal) {
            generator = generator.make_absorbing(&[g]);
        }
    }
    let grid = TimeGrid::equispaced(problem.horizon, problem.options.time_points)?;
    let init = problem.initial_vector(&space)?;
    let term = problem.terminal_vector(&space);
    let opts = problem.solver_options();
    let (fwd, bwd) = rayon::join(
        || solve_forward(&generator, &init, &grid, &opts),
        || solve_backward(&generator, &term, &grid, &opts),
    );
    let (fwd, bwd) = (fwd?, bwd?);
    let normalizer = dot(fwd.at(0), bwd.at(0));
    bridging_distribution(space, fwd, bwd, normalizer)
}

/// The refinement loop: lumped passes that keep and split every box reaching
/// `δ` at some grid time, followed by a final pass at micro granularity.
pub fn refine(problem: &Problem) -> Result<(BridgingSolution, RefinementTrace)> {
    problem.check()?;
    let o = &problem.options;
    let mut space = initial_grid(&o.bounds, o.grid_exponent, &o.unlumped_mask(problem.network.dims()))?;
    let mut trace = RefinementTrace::default();
    if let Terminal::Predicate(p) = &problem.terminal {
        if let Some((_, hi)) = p.region(problem.network.dims()) {
            if hi.iter().zip(&o.bounds).any(|(h, b)| h > b) {
                trace.notes.push(format!(
                    "terminal region \"{}\" extends beyond the bounds; states outside are ignored (the bound stays a lower bound)",
                    p.text
                ));
            }
        }
    }
    for iteration in 0.. {
        trace.snapshots.push(space.states().to_vec());
        let boxes = space.len();
        let micro_states = space.micro_count();
        let is_final = space.is_micro();
        let solution = solve_space(problem, space)?;
        let max_gamma = solution.max_gamma();
        let peak = max_gamma.iter().copied().fold(0.0, f64::max);
        let kept: Vec<usize> = if is_final {
            (0..boxes).collect()
        } else {
            let exempt = problem.exempt(&solution.space);
            (0..boxes)
                .filter(|&i| max_gamma[i] >= o.delta || exempt.binary_search(&i).is_ok())
                .collect()
        };
        trace.iterations.push(IterationRecord {
            iteration,
            boxes,
            micro_states,
            normalizer: solution.normalizer,
            terminal_reach: solution.terminal_reach(),
            duality_gap: solution.duality_gap(),
            sink_mass: solution.sink_mass(),
            max_gamma: peak,
            mass_drift: solution.mass_drift,
            kept: kept.len(),
            forward: solution.forward.stats,
            backward: solution.backward.stats,
        });
        trace.overall_states += boxes;
        trace.overall_micro_states += micro_states;
        if is_final {
            trace.final_states = boxes;
            return Ok((solution, trace));
        }
        let terminal = problem.terminal_vector(&solution.space);
        if !kept.iter().any(|&i| terminal[i] > 0.0) {
            return Err(Error::AllTruncated { max_gamma: peak });
        }
        space = solution.space.refine(&kept)?;
    }
    unreachable!("the loop only exits by returning")
}

#[derive(Clone, Debug)]
pub struct RareEventResult {
    /// Lower bound on the probability of the terminal event.
    pub bound: f64,
    pub solution: Option<BridgingSolution>,
    pub trace: RefinementTrace,
}

/// Lower bound on the probability that the terminal constraint holds at `T`.
/// An event that cannot be reached inside the bounds has bound 0.
pub fn rare_event_bound(problem: &Problem) -> Result<RareEventResult> {
    match refine(problem) {
        Ok((solution, trace)) => Ok(RareEventResult {
            bound: solution.normalizer,
            solution: Some(solution),
            trace,
        }),
        Err(Error::Unreachable { normalizer, .. }) if normalizer == 0.0 => Ok(RareEventResult {
            bound: 0.0,
            solution: None,
            trace: RefinementTrace {
                notes: vec!["terminal event unreachable within the bounds".into()],
                ..Default::default()
            },
        }),
        Err(e) => Err(e),
    }
}

/// Expected time spent in each box under the bridging law: trapezoidal
/// integral of `γ(x, ·)` over the time grid.
pub fn occupation_time(solution: &BridgingSolution) -> Vec<f64> {
    let t = solution.grid.times();
    (0..solution.space.len())
        .into_par_iter()
        .map(|i| {
            t.windows(2)
                .enumerate()
                .map(|(k, w)| 0.5 * (w[1] - w[0]) * (solution.gamma[k][i] + solution.gamma[k + 1][i]))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_model;

    const TWO_STATE: &str = "\
species A B
reaction convert: A -> B @ mass_action(1)
init point (1, 0)
terminal point (0, 1) at 1
options bounds=(1, 1) rtol=1e-10 atol=1e-14
";

    #[test]
    fn two_state_bridge() {
        let doc = parse_model(TWO_STATE).unwrap();
        let problem = Problem::from_document(&doc).unwrap();
        let (sol, trace) = refine(&problem).unwrap();
        assert_eq!(trace.iterations.len(), 1);
        let e1 = (-1.0f64).exp();
        assert!((sol.normalizer - (1.0 - e1)).abs() < 1e-9);
        let b = sol.space.locate(&[0, 1]).unwrap();
        let a = sol.space.locate(&[1, 0]).unwrap();
        let want = (1.0 - (-0.5f64).exp()) / (1.0 - e1);
        assert!((sol.gamma[50][b] - want).abs() < 1e-8);
        assert!((sol.gamma[0][a] - 1.0).abs() < 1e-9);
        assert!((sol.gamma[100][b] - 1.0).abs() < 1e-9);
        for g in &sol.gamma {
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
        let occ = occupation_time(&sol);
        let exact = (1.0 - 2.0 * e1) / (1.0 - e1);
        assert!((occ[a] - exact).abs() < 1e-4);
        assert!(occ.iter().sum::<f64>() <= 1.0 + 1e-9);
    }

    #[test]
    fn unreachable_event_bounds_to_zero() {
        let text = "species A\nreaction d: A -> 0 @ mass_action(1)\ninit point (0)\n\
                    terminal pred \"A >= 5\" at 1\noptions bounds=(10)\n";
        let problem = Problem::from_document(&parse_model(text).unwrap()).unwrap();
        let r = rare_event_bound(&problem).unwrap();
        assert_eq!(r.bound, 0.0);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let doc = parse_model(TWO_STATE).unwrap();
        let problem = Problem::from_document(&doc).unwrap();
        let sol = solve_space(&problem, initial_grid(&[1, 1], 0, &[false, false]).unwrap()).unwrap();
        assert!(bridging_distribution(sol.space.clone(), sol.forward.clone(), sol.backward.clone(), 0.0).is_err());
        let mut other = sol.backward.clone();
        other.grid = TimeGrid::equispaced(2.0, 101).unwrap();
        assert!(bridging_distribution(sol.space.clone(), sol.forward.clone(), other, 1.0).is_err());
    }
}
