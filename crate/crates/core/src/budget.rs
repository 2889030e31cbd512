//! Per-layer budget selection.
//!
//! Accuracy mode: for each prunable layer, measure verification accuracy after
//! pruning only that layer to each grid fraction, make the curves monotone, and
//! find the smallest accuracy drop `τ` such that keeping, per layer, the fewest
//! units whose accuracy is at least `P_orig − τ` meets the size target.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::greedy::{greedy_with, GreedyOptions, GreedyRun};
use crate::multilayer::{apply_pruning, layer_problem, select_random, select_weight_norm, PruneOptions, Variant};
use crate::netexec::{accuracy_from_logits, count_params, ActivationCapture, Features, NetworkModel};
use crate::objective::eval_from_scratch;

/// `{0.05, 0.10, …, 1.0}`.
pub fn default_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.05).collect()
}

/// `{0.01, 0.05, 0.075, 0.1, 0.15, …, 0.95, 1.0}`.
pub fn fine_grid() -> Vec<f64> {
    let mut g = vec![0.01, 0.05, 0.075];
    g.extend((2..=20).map(|i| i as f64 * 0.05));
    g
}

/// Units kept at fraction `alpha` of `n`: `round(alpha·n)` clamped to `1..=n`.
pub fn grid_budget(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64).round() as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyCurve {
    pub layer: usize,
    pub name: String,
    pub units: usize,
    pub grid: Vec<f64>,
    /// Kept units at each grid point.
    pub budgets: Vec<usize>,
    pub raw: Vec<f64>,
    pub monotone: Vec<f64>,
}

/// Running maximum from the smallest fraction upward.
pub fn monotonize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("empty accuracy curve".into()));
    }
    let mut best = f64::NEG_INFINITY;
    Ok(values
        .iter()
        .map(|&v| {
            best = best.max(v);
            best
        })
        .collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(format!(
            "grid must be strictly increasing fractions in (0, 1], got {grid:?}"
        )));
    }
    Ok(())
}

/// Accuracy on the verification set after pruning only one layer at each grid
/// fraction. Greedy variants reuse a single trace per layer; all three
/// input-change variants share these curves because the other layers are intact.
#[allow(clippy::too_many_arguments)]
pub fn accuracy_curves(
    model: &NetworkModel,
    captures: &ActivationCapture,
    verify_inputs: &Features,
    verify_labels: &[usize],
    grid: &[f64],
    variant: Variant,
    options: &PruneOptions,
    seed: u64,
) -> Result<Vec<AccuracyCurve>> {
    check_grid(grid)?;
    let p_orig = accuracy_from_logits(&model.forward(verify_inputs)?, verify_labels)?;
    model
        .prunable_layers()
        .par_iter()
        .map(|&l| {
            let cap = captures
                .get(l)
                .ok_or_else(|| Error::MissingCapture(model.layers[l].name.clone()))?;
            let problem = layer_problem(model, cap, None, options.tolerance)?;
            let n = problem.n_groups();
            let budgets: Vec<usize> = grid.iter().map(|&a| grid_budget(a, n)).collect();
            let accuracy = |kept: &[usize], wt: &crate::linalg::Matrix| -> Result<f64> {
                if kept.len() == n {
                    return Ok(p_orig);
                }
                let mut m = model.clone();
                apply_pruning(&mut m, l, kept, wt)?;
                accuracy_from_logits(&m.forward(verify_inputs)?, verify_labels)
            };
            let mut raw = Vec::with_capacity(grid.len());
            match variant {
                Variant::Layer | Variant::Seq | Variant::Asym => {
                    let kmax = *budgets.last().expect("non-empty grid");
                    let opts = GreedyOptions {
                        stop_when_exhausted: false,
                        ..Default::default()
                    };
                    let mut run = GreedyRun::with_options(&problem, kmax, opts)?;
                    if let Some(eps) = options.epsilon {
                        run = run.with_sampling(eps, seed, l as u64)?;
                    }
                    for &k in &budgets {
                        while run.trace().order.len() < k && run.step()?.is_some() {}
                        let mut kept = run.trace().order.clone();
                        kept.sort_unstable();
                        raw.push(accuracy(&kept, &run.state().reweighted_weights())?);
                    }
                }
                Variant::WeightNorm | Variant::Random => {
                    for &k in &budgets {
                        let kept = if variant == Variant::WeightNorm {
                            select_weight_norm(model, l, k)?
                        } else {
                            select_random(n, k, seed, l as u64)?
                        };
                        let eval = eval_from_scratch(&problem, &kept)?;
                        let wt = if options.reweight_baselines {
                            eval.reweighted(&problem)
                        } else {
                            let mut w = problem.weights().clone();
                            let cols = problem.groups().expand(&kept);
                            let mut keep = vec![false; w.rows()];
                            for c in cols {
                                keep[c] = true;
                            }
                            for (r, k) in keep.iter().enumerate() {
                                if !k {
                                    w.row_mut(r).fill(0.0);
                                }
                            }
                            w
                        };
                        raw.push(accuracy(&kept, &wt)?);
                    }
                }
            }
            Ok(AccuracyCurve {
                layer: l,
                name: model.layers[l].name.clone(),
                units: n,
                grid: grid.to_vec(),
                budgets,
                monotone: monotonize(&raw)?,
                raw,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetPlan {
    /// Kept units per prunable layer index.
    pub budgets: BTreeMap<usize, usize>,
    /// Accuracy drop tolerance, for accuracy-mode plans.
    pub tau: Option<f64>,
    /// Error threshold or kept fraction, for the other modes.
    pub level: Option<f64>,
    pub size: u64,
    pub original_size: u64,
    pub compression: f64,
}

/// Parameter count of `model` with the given number of kept units per layer.
pub fn pruned_size(model: &NetworkModel, budgets: &BTreeMap<usize, usize>) -> Result<u64> {
    let mut m = model.clone();
    for (&l, &k) in budgets {
        let n = m.layers[l].units();
        if k == 0 || k > n {
            return Err(Error::BudgetOutOfRange { k, max: n });
        }
        m.layers[l].kept_mask = Some((0..n).map(|u| u < k).collect());
    }
    count_params(&m)
}

fn full_budgets(units: impl Iterator<Item = (usize, usize)>) -> BTreeMap<usize, usize> {
    units.collect()
}

fn meets(size: u64, original: u64, c: f64) -> bool {
    size as f64 * c <= original as f64
}

fn check_ratio(c: f64) -> Result<()> {
    if !(c >= 1.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "compression ratio must be ≥ 1, got {c}"
        )));
    }
    Ok(())
}

/// Budgets whose monotone accuracy is at least `p_orig − tau`, smallest per layer.
pub fn budgets_for_tau(curves: &[AccuracyCurve], p_orig: f64, tau: f64) -> BTreeMap<usize, usize> {
    let floor = p_orig - tau - 1e-12;
    curves
        .iter()
        .map(|c| {
            let i = c
                .monotone
                .iter()
                .position(|&p| p >= floor)
                .unwrap_or(c.monotone.len() - 1);
            (c.layer, c.budgets[i])
        })
        .collect()
}

/// Smallest `τ` whose budgets meet `size ≤ original / c`. A ratio of exactly 1
/// keeps every unit.
///
/// `size` maps budgets to a model size; the original size is `size` at full
/// budgets. Every distinct drop `P_orig − P_ℓ(α)` is a candidate `τ` and
/// feasibility is monotone in `τ`, so a binary search over the sorted
/// candidates returns the exact minimum over the grid.
pub fn select_budgets<F>(curves: &[AccuracyCurve], p_orig: f64, c: f64, size: F) -> Result<BudgetPlan>
where
    F: Fn(&BTreeMap<usize, usize>) -> Result<u64>,
{
    check_ratio(c)?;
    let full = full_budgets(curves.iter().map(|cv| (cv.layer, cv.units)));
    let original = size(&full)?;
    if c == 1.0 {
        return Ok(BudgetPlan {
            budgets: full,
            tau: Some(0.0),
            level: None,
            size: original,
            original_size: original,
            compression: c,
        });
    }
    let mut cands: Vec<f64> = curves
        .iter()
        .flat_map(|cv| cv.monotone.iter().map(|&p| (p_orig - p).max(0.0)))
        .chain([0.0, p_orig.max(0.0)])
        .collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();

    let feasible = |tau: f64| -> Result<(bool, BTreeMap<usize, usize>, u64)> {
        let b = budgets_for_tau(curves, p_orig, tau);
        let s = size(&b)?;
        Ok((meets(s, original, c), b, s))
    };
    let (ok, _, smallest) = feasible(*cands.last().expect("non-empty"))?;
    if !ok {
        let lowest = curves.iter().map(|cv| (cv.layer, cv.budgets[0]));
        let smallest = smallest.min(size(&full_budgets(lowest))?);
        return Err(Error::Infeasible {
            target: c,
            smallest,
            original,
        });
    }
    let (mut lo, mut hi) = (0usize, cands.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(cands[mid])?.0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let (_, budgets, s) = feasible(cands[lo])?;
    Ok(BudgetPlan {
        budgets,
        tau: Some(cands[lo]),
        level: None,
        size: s,
        original_size: original,
        compression: c,
    })
}

/// Per layer, the smallest `k` whose relative reweighted input-change error
/// is at most `epsilon`, read off one greedy trace per layer.
pub fn threshold_budgets(
    model: &NetworkModel,
    captures: &ActivationCapture,
    epsilon: f64,
    tolerance: f64,
) -> Result<BTreeMap<usize, usize>> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidParameter(format!("epsilon must be > 0, got {epsilon}")));
    }
    let errors = layer_error_profiles(model, captures, tolerance)?;
    Ok(errors
        .iter()
        .map(|(&l, errs)| (l, budget_at_threshold(errs, epsilon)))
        .collect())
}

fn budget_at_threshold(errs: &[f64], epsilon: f64) -> usize {
    errs.iter().position(|&e| e <= epsilon).map_or(errs.len(), |i| i + 1)
}

/// Relative error `(baseline − F(Ŝ_k))/baseline` for `k = 1..=n`, per layer.
pub fn layer_error_profiles(
    model: &NetworkModel,
    captures: &ActivationCapture,
    tolerance: f64,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    model
        .prunable_layers()
        .par_iter()
        .map(|&l| {
            let cap = captures
                .get(l)
                .ok_or_else(|| Error::MissingCapture(model.layers[l].name.clone()))?;
            let problem = layer_problem(model, cap, None, tolerance)?;
            let opts = GreedyOptions {
                stop_when_exhausted: false,
                ..Default::default()
            };
            let trace = greedy_with(&problem, problem.n_groups(), opts)?;
            Ok((l, trace.relative_errors()))
        })
        .collect()
}

/// Threshold mode for a target compression: the smallest `ε` (among the
/// trace error values) whose budgets meet the size target.
pub fn threshold_for_compression<F>(profiles: &BTreeMap<usize, Vec<f64>>, c: f64, size: F) -> Result<BudgetPlan>
where
    F: Fn(&BTreeMap<usize, usize>) -> Result<u64>,
{
    check_ratio(c)?;
    let full: BTreeMap<usize, usize> = profiles.iter().map(|(&l, e)| (l, e.len())).collect();
    let original = size(&full)?;
    if c == 1.0 {
        return Ok(BudgetPlan {
            budgets: full,
            tau: None,
            level: Some(0.0),
            size: original,
            original_size: original,
            compression: c,
        });
    }
    let mut cands: Vec<f64> = profiles.values().flatten().map(|e| e.max(0.0)).collect();
    cands.push(1.0);
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let at = |eps: f64| -> Result<(BTreeMap<usize, usize>, u64)> {
        let b: BTreeMap<usize, usize> = profiles
            .iter()
            .map(|(&l, e)| (l, budget_at_threshold(e, eps.max(f64::MIN_POSITIVE))))
            .collect();
        let s = size(&b)?;
        Ok((b, s))
    };
    let (mut lo, mut hi) = (0usize, cands.len() - 1);
    let (_, s_max) = at(cands[hi])?;
    if !meets(s_max, original, c) {
        return Err(Error::Infeasible {
            target: c,
            smallest: s_max,
            original,
        });
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if meets(at(cands[mid])?.1, original, c) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let (budgets, s) = at(cands[lo])?;
    Ok(BudgetPlan {
        budgets,
        tau: None,
        level: Some(cands[lo]),
        size: s,
        original_size: original,
        compression: c,
    })
}

/// Same kept fraction `f` for every layer (`k = max(1, ⌊f·n⌋)`), with the
/// largest `f` meeting the size target.
pub fn equal_fraction_budgets<F>(units: &BTreeMap<usize, usize>, c: f64, size: F) -> Result<BudgetPlan>
where
    F: Fn(&BTreeMap<usize, usize>) -> Result<u64>,
{
    check_ratio(c)?;
    let original = size(units)?;
    let at = |f: f64| -> BTreeMap<usize, usize> {
        units
            .iter()
            .map(|(&l, &n)| (l, ((f * n as f64 + 1e-9).floor() as usize).clamp(1, n)))
            .collect()
    };
    let mut cands: Vec<f64> = units
        .values()
        .flat_map(|&n| (1..=n).map(move |j| j as f64 / n as f64))
        .collect();
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();
    for f in cands {
        let b = at(f);
        let s = size(&b)?;
        if meets(s, original, c) {
            return Ok(BudgetPlan {
                budgets: b,
                tau: None,
                level: Some(f),
                size: s,
                original_size: original,
                compression: c,
            });
        }
    }
    let smallest = size(&units.keys().map(|&l| (l, 1)).collect())?;
    Err(Error::Infeasible {
        target: c,
        smallest,
        original,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(layer: usize, units: usize, monotone: Vec<f64>) -> AccuracyCurve {
        let grid: Vec<f64> = (1..=monotone.len()).map(|i| i as f64 / monotone.len() as f64).collect();
        AccuracyCurve {
            layer,
            name: format!("l{layer}"),
            units,
            budgets: grid.iter().map(|&a| grid_budget(a, units)).collect(),
            grid,
            raw: monotone.clone(),
            monotone,
        }
    }

    fn linear_size(b: &BTreeMap<usize, usize>) -> Result<u64> {
        // Layer 0 weighs 10 per unit, layer 1 weighs 1 per unit.
        Ok(b.iter()
            .map(|(&l, &k)| if l == 0 { 10 * k as u64 } else { k as u64 })
            .sum())
    }

    #[test]
    fn monotonize_cases() {
        assert_eq!(monotonize(&[0.1, 0.2, 0.3]).unwrap(), vec![0.1, 0.2, 0.3]);
        assert_eq!(monotonize(&[0.5, 0.4, 0.6]).unwrap(), vec![0.5, 0.5, 0.6]);
        let once = monotonize(&[0.3, 0.1, 0.2, 0.5, 0.4]).unwrap();
        assert_eq!(monotonize(&once).unwrap(), once);
        assert!(monotonize(&[]).is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(default_grid().len(), 20);
        assert!((default_grid()[19] - 1.0).abs() < 1e-12);
        assert_eq!(fine_grid()[..4], [0.01, 0.05, 0.075, 0.1]);
        assert_eq!(grid_budget(0.01, 10), 1);
        assert_eq!(grid_budget(0.25, 10), 3);
        assert_eq!(grid_budget(1.0, 10), 10);
    }

    #[test]
    fn no_compression_keeps_everything() {
        let curves = [
            curve(0, 4, vec![0.2, 0.5, 0.8, 0.9]),
            curve(1, 4, vec![0.1, 0.3, 0.7, 0.9]),
        ];
        let plan = select_budgets(&curves, 0.9, 1.0, linear_size).unwrap();
        assert_eq!(plan.tau, Some(0.0));
        assert_eq!(plan.budgets, BTreeMap::from([(0, 4), (1, 4)]));
    }

    #[test]
    fn dominant_layer_shrinks_first() {
        let curves = [
            curve(0, 4, vec![0.6, 0.7, 0.8, 0.9]),
            curve(1, 4, vec![0.6, 0.7, 0.8, 0.9]),
        ];
        let mut prev = (4, 4);
        for c in [1.0, 1.2, 1.5, 2.0, 3.0] {
            let plan = select_budgets(&curves, 0.9, c, linear_size).unwrap();
            let now = (plan.budgets[&0], plan.budgets[&1]);
            assert!(now.0 <= prev.0 && now.1 <= prev.1);
            assert!(plan.size as f64 * c <= 44.0);
            prev = now;
        }
        let plan = select_budgets(&curves, 0.9, 1.2, linear_size).unwrap();
        assert!(plan.budgets[&0] < 4);
    }

    #[test]
    fn infeasible_reports_smallest_size() {
        let curves = [curve(0, 4, vec![0.6, 0.9]), curve(1, 4, vec![0.6, 0.9])];
        match select_budgets(&curves, 0.9, 100.0, linear_size) {
            Err(Error::Infeasible { smallest, original, .. }) => {
                assert_eq!(original, 44);
                assert_eq!(smallest, 22);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(select_budgets(&curves, 0.9, 0.5, linear_size).is_err());
    }

    #[test]
    fn threshold_budget_reading() {
        let errs = [0.5, 0.2, 0.05, 0.0];
        assert_eq!(budget_at_threshold(&errs, 1.0), 1);
        assert_eq!(budget_at_threshold(&errs, 0.2), 2);
        assert_eq!(budget_at_threshold(&errs, 0.01), 4);
        assert_eq!(budget_at_threshold(&[0.5, 0.3], 0.1), 2);
    }

    #[test]
    fn equal_fraction_mode() {
        let units = BTreeMap::from([(0, 10), (1, 20)]);
        let size = |b: &BTreeMap<usize, usize>| -> Result<u64> { Ok(b.values().map(|&k| k as u64).sum()) };
        let plan = equal_fraction_budgets(&units, 2.0, size).unwrap();
        assert_eq!(plan.budgets, BTreeMap::from([(0, 5), (1, 10)]));
        assert!(equal_fraction_budgets(&units, 100.0, size).is_err());
    }
}
