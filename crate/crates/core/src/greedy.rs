//! Greedy and stochastic-greedy selection over a [`SelectionProblem`].

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::{Fault, IncrementalState, SelectionProblem};

/// Below this many candidate·sample products, gains are evaluated serially.
const PARALLEL_WORK: usize = 1 << 16;

/// Selected groups in pick order with per-step gains and prefix values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionTrace {
    pub order: Vec<usize>,
    pub gains: Vec<f64>,
    pub values: Vec<f64>,
    pub baseline: f64,
    /// True when the run ended before `k` because no remaining group had a positive gain.
    pub stopped_early: bool,
}

impl SelectionTrace {
    pub fn final_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    /// `(baseline − F(Ŝ_t)) / baseline` for each prefix length `t = 1..`.
    pub fn relative_errors(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| {
                if self.baseline > 0.0 {
                    (self.baseline - v) / self.baseline
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOptions {
    /// Stop as soon as every remaining gain is ≤ 0. When false, zero-gain groups
    /// are taken (lowest index first) until the budget is filled.
    pub stop_when_exhausted: bool,
    pub fault: Fault,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        Self {
            stop_when_exhausted: true,
            fault: Fault::None,
        }
    }
}

/// `ceil((n_groups / k) · ln(1/ε))`, at least 1.
pub fn sample_size(n_groups: usize, k: usize, epsilon: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be in (0,1), got {epsilon}"
        )));
    }
    if k == 0 || k > n_groups {
        return Err(Error::BudgetOutOfRange { k, max: n_groups });
    }
    let s = (n_groups as f64 / k as f64 * (1.0 / epsilon).ln()).ceil();
    Ok((s as usize).max(1))
}

struct Sampler {
    rng: ChaCha8Rng,
    size: usize,
}

/// A greedy run that can be advanced one step at a time, so callers can read
/// the state (and reweighted weights) at every prefix.
pub struct GreedyRun<'a> {
    state: IncrementalState<'a>,
    k: usize,
    options: GreedyOptions,
    sampler: Option<Sampler>,
    trace: SelectionTrace,
    done: bool,
}

impl<'a> GreedyRun<'a> {
    pub fn new(problem: &'a SelectionProblem, k: usize) -> Result<Self> {
        Self::with_options(problem, k, GreedyOptions::default())
    }

    pub fn with_options(problem: &'a SelectionProblem, k: usize, options: GreedyOptions) -> Result<Self> {
        let n = problem.n_groups();
        if k == 0 || k > n {
            return Err(Error::BudgetOutOfRange { k, max: n });
        }
        let mut state = IncrementalState::new(problem);
        state.set_fault(options.fault);
        let baseline = state.baseline();
        Ok(Self {
            state,
            k,
            options,
            sampler: None,
            trace: SelectionTrace {
                order: Vec::with_capacity(k),
                gains: Vec::with_capacity(k),
                values: Vec::with_capacity(k),
                baseline,
                stopped_early: false,
            },
            done: false,
        })
    }

    /// Each step scores only a seeded random sample of the remaining groups.
    pub fn stochastic(problem: &'a SelectionProblem, k: usize, epsilon: f64, seed: u64) -> Result<Self> {
        Self::new(problem, k)?.with_sampling(epsilon, seed, 0)
    }

    /// Switches to sampled candidate sets drawn from ChaCha8 `seed`, `stream`.
    pub fn with_sampling(mut self, epsilon: f64, seed: u64, stream: u64) -> Result<Self> {
        let size = sample_size(self.state.problem().n_groups(), self.k, epsilon)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        self.sampler = Some(Sampler { rng, size });
        Ok(self)
    }

    pub fn state(&self) -> &IncrementalState<'a> {
        &self.state
    }

    pub fn trace(&self) -> &SelectionTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn candidates(&mut self) -> Vec<usize> {
        let remaining: Vec<usize> = (0..self.state.problem().n_groups())
            .filter(|&g| !self.state.is_selected(g))
            .collect();
        match &mut self.sampler {
            Some(s) if s.size < remaining.len() => {
                let mut picked: Vec<usize> = index::sample(&mut s.rng, remaining.len(), s.size)
                    .into_iter()
                    .map(|i| remaining[i])
                    .collect();
                picked.sort_unstable();
                picked
            }
            _ => remaining,
        }
    }

    /// Takes one step; returns the selected group, or `None` once finished.
    pub fn step(&mut self) -> Result<Option<usize>> {
        if self.done || self.trace.order.len() >= self.k {
            self.done = true;
            return Ok(None);
        }
        let cands = self.candidates();
        let state = &self.state;
        let work = cands.len() * state.problem().n_samples().max(state.problem().n_cols());
        let gains: Vec<f64> = if work >= PARALLEL_WORK {
            cands
                .par_iter()
                .map(|&g| state.marginal_gain(g))
                .collect::<Result<_>>()?
        } else {
            cands.iter().map(|&g| state.marginal_gain(g)).collect::<Result<_>>()?
        };
        let mut best = 0;
        let mut best_gain = f64::NEG_INFINITY;
        for (i, &gain) in gains.iter().enumerate() {
            let gain = gain.max(0.0);
            if gain > best_gain {
                best = i;
                best_gain = gain;
            }
        }
        if best_gain <= 0.0 && self.options.stop_when_exhausted {
            self.trace.stopped_early = true;
            self.done = true;
            return Ok(None);
        }
        let g = cands[best];
        self.state.apply_selection(g)?;
        self.trace.order.push(g);
        self.trace.gains.push(best_gain);
        self.trace.values.push(self.state.value());
        if self.trace.order.len() == self.k {
            self.done = true;
        }
        Ok(Some(g))
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    pub fn into_parts(self) -> (IncrementalState<'a>, SelectionTrace) {
        (self.state, self.trace)
    }
}

pub fn greedy(problem: &SelectionProblem, k: usize) -> Result<SelectionTrace> {
    greedy_with(problem, k, GreedyOptions::default())
}

pub fn greedy_with(problem: &SelectionProblem, k: usize, options: GreedyOptions) -> Result<SelectionTrace> {
    let mut run = GreedyRun::with_options(problem, k, options)?;
    run.run_to_end()?;
    Ok(run.into_parts().1)
}

pub fn stochastic_greedy(problem: &SelectionProblem, k: usize, epsilon: f64, seed: u64) -> Result<SelectionTrace> {
    let mut run = GreedyRun::stochastic(problem, k, epsilon, seed)?;
    run.run_to_end()?;
    Ok(run.into_parts().1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::test_util::{random_matrix, rng};
    use crate::linalg::Matrix;
    use crate::objective::{eval_from_scratch, Groups};

    fn running_example() -> SelectionProblem {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let w = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        SelectionProblem::symmetric(&a, w, Groups::singletons(2)).unwrap()
    }

    #[test]
    fn running_example_picks_second_column() {
        let t = greedy(&running_example(), 1).unwrap();
        assert_eq!(t.order, vec![1]);
        assert!((t.final_value() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn full_budget_reaches_baseline() {
        let mut r = rng(5);
        let a = random_matrix(&mut r, 12, 6);
        let w = random_matrix(&mut r, 6, 2);
        let p = SelectionProblem::symmetric(&a, w, Groups::singletons(6)).unwrap();
        let t = greedy(&p, 6).unwrap();
        assert_eq!(t.order.len(), 6);
        assert!((t.final_value() - t.baseline).abs() < 1e-10 * t.baseline);
        assert!(t.values.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn identity_ties_break_to_lowest_index() {
        let p = SelectionProblem::symmetric(&Matrix::identity(4), Matrix::identity(4), Groups::singletons(4)).unwrap();
        assert_eq!(greedy(&p, 4).unwrap().order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn budget_bounds() {
        let p = running_example();
        assert!(matches!(greedy(&p, 0), Err(Error::BudgetOutOfRange { .. })));
        assert!(matches!(greedy(&p, 3), Err(Error::BudgetOutOfRange { .. })));
    }

    #[test]
    fn early_stop_and_fill() {
        // Rank-1 basis: after one pick nothing has positive gain.
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]);
        let w = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]);
        let p = SelectionProblem::symmetric(&a, w, Groups::singletons(3)).unwrap();
        let t = greedy(&p, 3).unwrap();
        assert_eq!(t.order.len(), 1);
        assert!(t.stopped_early);
        let opts = GreedyOptions {
            stop_when_exhausted: false,
            ..Default::default()
        };
        let filled = greedy_with(&p, 3, opts).unwrap();
        assert_eq!(filled.order.len(), 3);
        assert!(!filled.stopped_early);
    }

    #[test]
    fn sample_size_formula() {
        assert_eq!(sample_size(100, 10, 0.05).unwrap(), 30);
        assert_eq!(sample_size(7, 7, 0.05).unwrap(), (20f64).ln().ceil() as usize);
        assert_eq!(sample_size(10, 10, 0.9).unwrap(), 1);
        assert!(sample_size(10, 2, 0.0).is_err());
        assert!(sample_size(10, 2, 1.0).is_err());
        assert!(sample_size(10, 0, 0.5).is_err());
    }

    #[test]
    fn stochastic_full_sample_equals_greedy() {
        let mut r = rng(9);
        let a = random_matrix(&mut r, 15, 10);
        let w = random_matrix(&mut r, 10, 3);
        let p = SelectionProblem::symmetric(&a, w, Groups::singletons(10)).unwrap();
        let g = greedy(&p, 5).unwrap();
        let s = stochastic_greedy(&p, 5, 1e-9, 1).unwrap();
        assert_eq!(g, s);
    }

    #[test]
    fn stochastic_is_seed_deterministic() {
        let mut r = rng(10);
        let a = random_matrix(&mut r, 30, 40);
        let w = random_matrix(&mut r, 40, 3);
        let p = SelectionProblem::symmetric(&a, w, Groups::singletons(40)).unwrap();
        let a1 = stochastic_greedy(&p, 10, 0.3, 42).unwrap();
        let a2 = stochastic_greedy(&p, 10, 0.3, 42).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.order.len(), 10);
        let scratch = eval_from_scratch(&p, &a1.order).unwrap();
        assert!((scratch.value - a1.final_value()).abs() < 1e-8 * a1.baseline);
    }

    #[test]
    fn stepping_exposes_prefix_states() {
        let mut r = rng(12);
        let a = random_matrix(&mut r, 20, 8);
        let w = random_matrix(&mut r, 8, 2);
        let p = SelectionProblem::symmetric(&a, w, Groups::singletons(8)).unwrap();
        let mut run = GreedyRun::new(&p, 4).unwrap();
        let mut seen = Vec::new();
        while let Some(g) = run.step().unwrap() {
            seen.push(g);
            assert_eq!(run.state().selected(), &seen[..]);
        }
        assert!(run.is_done());
        assert_eq!(run.trace().order, seen);
    }
}
