//! Noisy terminal observations: the aggregate binary-test likelihood, terminal
//! posteriors by Bayes' rule and smoothing through the refinement loop.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::bridge::{self, BridgingSolution, Problem, RefinementTrace, Terminal};
use crate::dsl::{InitialSpec, ModelDocument, TerminalSpec};
use crate::error::{Error, Result};
use crate::geometry::LumpedSpace;

/// Every individual is tested; an infected one reads positive with probability
/// `sensitivity`, any other with probability `fpr`. The observation is the
/// number of positives, so given `n` infected out of `N`,
/// `Y = TP + FP` with `TP ~ Bin(n, sensitivity)` and `FP ~ Bin(N − n, fpr)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryTest {
    pub sensitivity: f64,
    pub fpr: f64,
    pub observed: u64,
    /// Species whose count is the number of infected individuals.
    pub species: usize,
    /// Size of the tested population; when absent, the total count of the
    /// initial state is used.
    pub population: Option<u64>,
}

impl BinaryTest {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("sensitivity", self.sensitivity), ("fpr", self.fpr)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidModel(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if let Some(n) = self.population {
            if self.observed > n {
                return Err(Error::InvalidModel(format!(
                    "observed {} positives in a population of {n}",
                    self.observed
                )));
            }
        }
        Ok(())
    }

    /// Likelihood table `P(Y = observed | n)` for `n = 0..=population`.
    pub fn likelihood(&self, population: u64) -> Result<Likelihood> {
        self.validate()?;
        let table = LnFactorials::new(population);
        let values = (0..=population)
            .into_par_iter()
            .map(|n| convolved_pmf(&table, population, n, self.sensitivity, self.fpr, self.observed))
            .collect();
        Ok(Likelihood {
            species: self.species,
            values,
        })
    }

    /// Checks that `Σ_y P(Y = y | n) = 1` for (a spread of) latent counts `n`.
    pub fn check_rows(&self, population: u64) -> Result<()> {
        let table = LnFactorials::new(population);
        let stride = (population / 64).max(1) as usize;
        for n in (0..=population).step_by(stride).chain(std::iter::once(population)) {
            let total: f64 = (0..=population)
                .map(|y| convolved_pmf(&table, population, n, self.sensitivity, self.fpr, y))
                .sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!(
                    "likelihood row for n = {n} sums to {total}, not 1"
                )));
            }
        }
        Ok(())
    }
}

struct LnFactorials(Vec<f64>);

impl LnFactorials {
    fn new(n: u64) -> Self {
        let mut v = Vec::with_capacity(n as usize + 1);
        let mut acc = 0.0;
        v.push(0.0);
        for k in 1..=n {
            acc += (k as f64).ln();
            v.push(acc);
        }
        Self(v)
    }

    fn ln_choose(&self, n: u64, k: u64) -> f64 {
        self.0[n as usize] - self.0[k as usize] - self.0[(n - k) as usize]
    }
}

fn binomial_pmf(table: &LnFactorials, n: u64, k: u64, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (table.ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p()).exp()
}

/// `P(TP + FP = y)` with `TP ~ Bin(n, sens)`, `FP ~ Bin(total − n, fpr)`.
fn convolved_pmf(table: &LnFactorials, total: u64, n: u64, sens: f64, fpr: f64, y: u64) -> f64 {
    if n > total {
        return 0.0;
    }
    let rest = total - n;
    let lo = y.saturating_sub(rest);
    let hi = y.min(n);
    (lo..=hi)
        .map(|tp| binomial_pmf(table, n, tp, sens) * binomial_pmf(table, rest, y - tp, fpr))
        .sum()
}

/// Per-count likelihood of one observation, zero beyond the tabulated range.
#[derive(Clone, Debug, PartialEq)]
pub struct Likelihood {
    pub species: usize,
    pub values: Vec<f64>,
}

impl Likelihood {
    pub fn at(&self, n: i64) -> f64 {
        usize::try_from(n).ok().and_then(|i| self.values.get(i)).copied().unwrap_or(0.0)
    }

    /// Mean likelihood over the counts `a..=b`.
    pub fn mean(&self, a: i64, b: i64) -> f64 {
        let s: f64 = (a..=b).map(|n| self.at(n)).sum();
        s / (b - a + 1) as f64
    }
}

/// Terminal posterior over the boxes of a space.
#[derive(Clone, Debug)]
pub struct TerminalPosterior {
    /// Unnormalized likelihood per box (sink entry 0); the backward seed.
    pub weights: Vec<f64>,
    /// `prior · likelihood` per box.
    pub joint: Vec<f64>,
    pub normalizer: f64,
    pub posterior: Vec<f64>,
}

/// Bayes' rule on the current truncation: `posterior ∝ likelihood · prior`.
pub fn terminal_posterior(prior: &[f64], space: &LumpedSpace, likelihood: &Likelihood) -> Result<TerminalPosterior> {
    let n = space.len();
    let mut weights = Vec::with_capacity(n + 1);
    for s in space.states() {
        let d = likelihood.species;
        weights.push(likelihood.mean(s.lower()[d], s.upper()[d]));
    }
    weights.push(0.0);
    let joint: Vec<f64> = (0..n).map(|i| prior[i].max(0.0) * weights[i]).collect();
    let normalizer: f64 = joint.iter().sum();
    if !(normalizer > 0.0) {
        return Err(Error::IncompatibleObservation);
    }
    let posterior = joint.iter().map(|j| j / normalizer).collect();
    Ok(TerminalPosterior {
        weights,
        joint,
        normalizer,
        posterior,
    })
}

#[derive(Clone, Debug)]
pub struct PosteriorResult {
    pub bridging: BridgingSolution,
    pub trace: RefinementTrace,
    /// Forward law at the horizon on the final truncation (a sub-distribution).
    pub prior: Vec<f64>,
    pub likelihood: Likelihood,
    pub terminal: TerminalPosterior,
    /// Per species, `value → posterior mass` at the horizon.
    pub marginals: Vec<BTreeMap<i64, f64>>,
}

impl PosteriorResult {
    /// Joint posterior over all species except the observed one, paired with
    /// the corresponding prior mass.
    pub fn latent_joint(&self) -> BTreeMap<Vec<i64>, (f64, f64)> {
        let obs = self.likelihood.species;
        let mut out: BTreeMap<Vec<i64>, (f64, f64)> = BTreeMap::new();
        for (i, s) in self.bridging.space.states().iter().enumerate() {
            let key: Vec<i64> = s
                .lower()
                .iter()
                .enumerate()
                .filter(|(d, _)| *d != obs)
                .map(|(_, v)| *v)
                .collect();
            let e = out.entry(key).or_default();
            e.0 += self.prior[i].max(0.0);
            e.1 += self.terminal.posterior[i];
        }
        out
    }

    /// `n → (prior, likelihood, posterior)` for the observed species.
    pub fn observed_marginal(&self) -> BTreeMap<i64, (f64, f64, f64)> {
        let obs = self.likelihood.species;
        let mut out: BTreeMap<i64, (f64, f64, f64)> = BTreeMap::new();
        for (i, s) in self.bridging.space.states().iter().enumerate() {
            let n = s.lower()[obs];
            let e = out.entry(n).or_insert((0.0, self.likelihood.at(n), 0.0));
            e.0 += self.prior[i].max(0.0);
            e.2 += self.terminal.posterior[i];
        }
        out
    }
}

pub fn default_population(initial: &InitialSpec) -> u64 {
    initial
        .support()
        .iter()
        .map(|(x, _)| x.iter().sum::<i64>().max(0) as u64)
        .max()
        .unwrap_or(0)
}

/// Smoothing: refinement with the observation likelihood as terminal weight,
/// then the terminal posterior and its marginals on the final truncation.
pub fn smooth(doc: &ModelDocument) -> Result<PosteriorResult> {
    let TerminalSpec::Observe(test) = &doc.terminal else {
        return Err(Error::Query("smoothing needs an observation terminal".into()));
    };
    let population = test.population.unwrap_or_else(|| default_population(&doc.initial));
    test.check_rows(population)?;
    let likelihood = test.likelihood(population)?;
    let mut problem = Problem::from_document(doc)?;
    problem.terminal = Terminal::Likelihood(likelihood.clone());
    let (bridging, trace) = bridge::refine(&problem)?;
    let prior = bridging.forward.last().to_vec();
    let terminal = terminal_posterior(&prior, &bridging.space, &likelihood)?;
    let dims = bridging.space.dims();
    let mut marginals = vec![BTreeMap::new(); dims];
    for (i, s) in bridging.space.states().iter().enumerate() {
        for (d, m) in marginals.iter_mut().enumerate() {
            *m.entry(s.lower()[d]).or_insert(0.0) += terminal.posterior[i];
        }
    }
    Ok(PosteriorResult {
        bridging,
        trace,
        prior,
        likelihood,
        terminal,
        marginals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test(sens: f64, fpr: f64, y: u64) -> BinaryTest {
        BinaryTest {
            sensitivity: sens,
            fpr,
            observed: y,
            species: 0,
            population: Some(100),
        }
    }

    #[test]
    fn rows_sum_to_one() {
        test(0.99, 0.05, 30).check_rows(100).unwrap();
        test(1.0, 0.0, 30).check_rows(100).unwrap();
    }

    #[test]
    fn perfect_test_is_a_delta() {
        let l = test(1.0, 0.0, 30).likelihood(100).unwrap();
        for n in 0..=100 {
            assert_eq!(l.at(n), if n == 30 { 1.0 } else { 0.0 });
        }
        assert_eq!(l.at(101), 0.0);
        assert_eq!(l.at(-1), 0.0);
    }

    #[test]
    fn equal_rates_make_the_state_irrelevant() {
        let l = test(0.3, 0.3, 30).likelihood(100).unwrap();
        for n in 0..=100 {
            assert!((l.at(n) - l.at(0)).abs() <= 1e-13 * l.at(0), "{n}");
        }
    }

    #[test]
    fn flat_prior_gives_likelihood_shape() {
        let space = crate::geometry::initial_grid(&[100], 0, &[false]).unwrap();
        let l = test(0.99, 0.05, 30).likelihood(100).unwrap();
        let mut prior = vec![1.0 / 101.0; 101];
        prior.push(0.0);
        let tp = terminal_posterior(&prior, &space, &l).unwrap();
        let total: f64 = l.values.iter().sum();
        for n in 0..=100 {
            assert!((tp.posterior[n] - l.values[n] / total).abs() < 1e-14);
            assert!((tp.posterior[n] * tp.normalizer - prior[n] * l.values[n]).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_overlap_is_incompatible() {
        let space = crate::geometry::initial_grid(&[10], 0, &[false]).unwrap();
        let l = test(1.0, 0.0, 30).likelihood(100).unwrap();
        let prior = vec![1.0 / 11.0; 12];
        assert!(matches!(terminal_posterior(&prior, &space, &l), Err(Error::IncompatibleObservation)));
    }

    #[test]
    fn invalid_rates_are_rejected() {
        assert!(test(1.2, 0.0, 3).validate().is_err());
        assert!(test(0.9, 0.1, 300).validate().is_err());
    }
}
