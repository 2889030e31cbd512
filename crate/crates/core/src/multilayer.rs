//! Multi-layer pruning: independent (`layer`), sequential symmetric (`seq`),
//! sequential asymmetric (`asym`), and the weight-norm and random baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::greedy::{GreedyOptions, GreedyRun};
use crate::linalg::{frob_norm_sq, Matrix};
use crate::netexec::{
    count_flops, count_params, forward_capture, ActivationCapture, Features, InputShape, LayerCapture, LayerOp,
    NetworkModel,
};
use crate::objective::{eval_from_scratch, reconstruction_error, Groups, SelectionProblem, RESIDUAL_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Each layer independently, on the unpruned model's activations.
    Layer,
    /// Layer by layer, on activations of the partially pruned model.
    Seq,
    /// Layer by layer, selecting from updated activations to approximate the original ones.
    Asym,
    /// Keep the units with the largest ℓ₁ norm of outgoing weights.
    WeightNorm,
    /// Keep a uniformly random subset per layer.
    Random,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Layer,
        Variant::Seq,
        Variant::Asym,
        Variant::WeightNorm,
        Variant::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Layer => "layer",
            Variant::Seq => "seq",
            Variant::Asym => "asym",
            Variant::WeightNorm => "weightnorm",
            Variant::Random => "random",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Variant::WeightNorm | Variant::Random)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variant {s:?}")))
    }
}

/// Units to keep per prunable layer (keyed by layer index).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrunePlan {
    pub budgets: BTreeMap<usize, usize>,
    pub variant: Variant,
    pub seed: u64,
}

impl PrunePlan {
    pub fn validate(&self, model: &NetworkModel) -> Result<()> {
        for (&layer, &k) in &self.budgets {
            let spec = model
                .layers
                .get(layer)
                .filter(|l| l.prunable)
                .ok_or_else(|| Error::Model(format!("layer {layer} is not prunable")))?;
            if k == 0 || k > spec.units() {
                return Err(Error::BudgetOutOfRange { k, max: spec.units() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneOptions {
    /// Sample candidate sets (stochastic greedy) with this ε.
    pub epsilon: Option<f64>,
    /// Replace successor weights of baseline selections by the least-squares optimum.
    pub reweight_baselines: bool,
    pub tolerance: f64,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            epsilon: None,
            reweight_baselines: true,
            tolerance: RESIDUAL_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOutcome {
    pub layer: usize,
    pub name: String,
    /// Kept units, ascending.
    pub kept: Vec<usize>,
    /// Kept units in selection order (equals `kept` for baselines).
    pub pick_order: Vec<usize>,
    /// `F(Ŝ)` of the layer's selection problem.
    pub objective: f64,
    /// `‖T W‖²` of the layer's selection problem.
    pub baseline: f64,
    /// `‖T W − B W̃‖²` with the weights actually written.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub layers: Vec<LayerOutcome>,
    pub model: NetworkModel,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    /// `‖y − y'‖²` on the pruning batch.
    pub output_error: f64,
}

/// Group map of a prunable layer's units over its successor's input columns.
pub fn unit_groups(model: &NetworkModel, layer: usize) -> Result<Groups> {
    let succ = model
        .successor(layer)
        .ok_or_else(|| Error::Model(format!("layer {layer} has no successor")))?;
    let shapes = model.input_shapes()?;
    Ok(match (&model.layers[succ].op, shapes[succ]) {
        (LayerOp::Dense { .. }, InputShape::Flat(d)) => Groups::singletons(d),
        (LayerOp::Dense { .. }, InputShape::Spatial(c, h, w)) => Groups::blocks(c, h * w),
        (LayerOp::Conv2d { weight, .. }, InputShape::Spatial(c, _, _)) => Groups::blocks(c, weight.kh * weight.kw),
        _ => return Err(Error::Model(format!("layer {succ} cannot follow layer {layer}"))),
    })
}

/// Selection problem for one layer. With `target = Some(A)` and a basis that
/// differs from it, the problem is asymmetric; identical matrices fall back to
/// the symmetric form.
pub fn layer_problem(
    model: &NetworkModel,
    cap: &LayerCapture,
    target: Option<&Matrix>,
    tolerance: f64,
) -> Result<SelectionProblem> {
    let weights = model.layers[cap.successor]
        .weight_matrix()
        .ok_or_else(|| Error::Model(format!("layer {} has no weights", cap.successor)))?;
    let p = match target {
        Some(t) if t != &cap.matrix => SelectionProblem::asymmetric(&cap.matrix, t, weights, cap.groups.clone())?,
        _ => SelectionProblem::symmetric(&cap.matrix, weights, cap.groups.clone())?,
    };
    p.with_tolerance(tolerance)
}

/// Keep the `k` units whose outgoing weight rows have the largest ℓ₁ norm
/// (summed over a unit's rows); ties go to the lower index. Result is ascending.
pub fn select_weight_norm(model: &NetworkModel, layer: usize, k: usize) -> Result<Vec<usize>> {
    let groups = unit_groups(model, layer)?;
    let succ = model.successor(layer).expect("checked by unit_groups");
    let w = model.layers[succ].weight_matrix().expect("weighted successor");
    if k == 0 || k > groups.len() {
        return Err(Error::BudgetOutOfRange { k, max: groups.len() });
    }
    let norms: Vec<f64> = (0..groups.len())
        .map(|g| {
            groups
                .members(g)
                .iter()
                .map(|&r| w.row(r).iter().map(|v| v.abs()).sum::<f64>())
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Uniform random `k`-subset of `0..n` from ChaCha8 (`seed`, `stream`), ascending.
pub fn select_random(n: usize, k: usize, seed: u64, stream: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::BudgetOutOfRange { k, max: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut kept = index::sample(&mut rng, n, k).into_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Masks the units of `layer` outside `kept` and installs `w_tilde` as the
/// successor's weight (matrix layout of [`crate::netexec::LayerSpec::weight_matrix`]).
pub fn apply_pruning(model: &mut NetworkModel, layer: usize, kept: &[usize], w_tilde: &Matrix) -> Result<()> {
    let groups = unit_groups(model, layer)?;
    let succ = model.successor(layer).expect("checked by unit_groups");
    let mut mask = vec![false; groups.len()];
    for &g in kept {
        if g >= groups.len() {
            return Err(Error::GroupOutOfRange {
                group: g,
                n_groups: groups.len(),
            });
        }
        mask[g] = true;
    }
    for (g, keep) in mask.iter().enumerate() {
        if *keep {
            continue;
        }
        for &r in groups.members(g) {
            if w_tilde.row(r).iter().any(|v| *v != 0.0) {
                return Err(Error::Model(format!(
                    "replacement weights for layer {succ} have a non-zero row {r} of a pruned unit"
                )));
            }
        }
    }
    model.set_weight_matrix(succ, w_tilde)?;
    model.layers[layer].kept_mask = Some(mask);
    Ok(())
}

pub fn final_output_error(original: &NetworkModel, pruned: &NetworkModel, inputs: &Features) -> Result<f64> {
    let y = original.forward(inputs)?;
    let y2 = pruned.forward(inputs)?;
    Ok(frob_norm_sq(&y.sub(&y2)?))
}

fn budget_for(plan: &PrunePlan, layer: usize, units: usize) -> usize {
    plan.budgets.get(&layer).copied().unwrap_or(units)
}

/// Greedy selection filled to exactly `k` groups, returning (kept ascending,
/// pick order, value, baseline, residual, W̃).
fn greedy_select(
    problem: &SelectionProblem,
    k: usize,
    options: &PruneOptions,
    seed: u64,
    stream: u64,
) -> Result<(Vec<usize>, f64, f64, f64, Matrix)> {
    let opts = GreedyOptions {
        stop_when_exhausted: false,
        ..Default::default()
    };
    let mut run = GreedyRun::with_options(problem, k, opts)?;
    if let Some(eps) = options.epsilon {
        run = run.with_sampling(eps, seed, stream)?;
    }
    run.run_to_end()?;
    let (state, trace) = run.into_parts();
    Ok((
        trace.order,
        state.value(),
        state.baseline(),
        state.residual_error(),
        state.reweighted_weights(),
    ))
}

fn outcome(
    model: &NetworkModel,
    layer: usize,
    pick_order: Vec<usize>,
    objective: f64,
    baseline: f64,
    residual: f64,
) -> LayerOutcome {
    let mut kept = pick_order.clone();
    kept.sort_unstable();
    LayerOutcome {
        layer,
        name: model.layers[layer].name.clone(),
        kept,
        pick_order,
        objective,
        baseline,
        residual,
    }
}

fn finish(
    original: &NetworkModel,
    model: NetworkModel,
    inputs: &Features,
    layers: Vec<LayerOutcome>,
) -> Result<PruneResult> {
    Ok(PruneResult {
        params_before: count_params(original)?,
        params_after: count_params(&model)?,
        flops_before: count_flops(original)?,
        flops_after: count_flops(&model)?,
        output_error: final_output_error(original, &model, inputs)?,
        layers,
        model,
    })
}

fn capture_for<'c>(captures: &'c ActivationCapture, layer: usize, name: &str) -> Result<&'c LayerCapture> {
    captures
        .get(layer)
        .ok_or_else(|| Error::MissingCapture(name.to_string()))
}

/// Independent pruning of each layer against the unpruned model's captures.
/// Layers are processed in parallel; results do not depend on the order.
pub fn prune_layer_in_change(
    model: &NetworkModel,
    captures: &ActivationCapture,
    inputs: &Features,
    plan: &PrunePlan,
    options: &PruneOptions,
) -> Result<PruneResult> {
    plan.validate(model)?;
    let layers = model.prunable_layers();
    let picks: Vec<(usize, LayerOutcome, Matrix)> = layers
        .par_iter()
        .map(|&l| {
            let cap = capture_for(captures, l, &model.layers[l].name)?;
            let problem = layer_problem(model, cap, None, options.tolerance)?;
            let k = budget_for(plan, l, problem.n_groups());
            let (order, value, base, resid, wt) = greedy_select(&problem, k, options, plan.seed, l as u64)?;
            Ok((l, outcome(model, l, order, value, base, resid), wt))
        })
        .collect::<Result<_>>()?;
    let mut pruned = model.clone();
    let mut outcomes = Vec::with_capacity(picks.len());
    for (l, out, wt) in picks {
        apply_pruning(&mut pruned, l, &out.kept, &wt)?;
        outcomes.push(out);
    }
    finish(model, pruned, inputs, outcomes)
}

/// Sequential pruning from the first prunable layer to the last, recomputing
/// the activations of the partially pruned model before each layer.
pub fn prune_sequential(
    model: &NetworkModel,
    inputs: &Features,
    plan: &PrunePlan,
    options: &PruneOptions,
) -> Result<PruneResult> {
    plan.validate(model)?;
    let asym = match plan.variant {
        Variant::Seq => false,
        Variant::Asym => true,
        v => return Err(Error::InvalidParameter(format!("{v} is not a sequential variant"))),
    };
    let original = if asym {
        Some(forward_capture(model, inputs)?.1)
    } else {
        None
    };
    let mut pruned = model.clone();
    let mut outcomes = Vec::new();
    for l in model.prunable_layers() {
        let (_, caps) = forward_capture(&pruned, inputs)?;
        let cap = capture_for(&caps, l, &model.layers[l].name)?;
        let target = match &original {
            Some(o) => Some(&capture_for(o, l, &model.layers[l].name)?.matrix),
            None => None,
        };
        let problem = layer_problem(&pruned, cap, target, options.tolerance)?;
        let k = budget_for(plan, l, problem.n_groups());
        let (order, value, base, resid, wt) = greedy_select(&problem, k, options, plan.seed, l as u64)?;
        let out = outcome(&pruned, l, order, value, base, resid);
        apply_pruning(&mut pruned, l, &out.kept, &wt)?;
        outcomes.push(out);
    }
    finish(model, pruned, inputs, outcomes)
}

/// Weight-norm or random selection per layer, optionally reweighted with the
/// least-squares optimal successor weights on the unpruned model's captures.
pub fn prune_baseline(
    model: &NetworkModel,
    captures: &ActivationCapture,
    inputs: &Features,
    plan: &PrunePlan,
    options: &PruneOptions,
) -> Result<PruneResult> {
    plan.validate(model)?;
    let mut pruned = model.clone();
    let mut outcomes = Vec::new();
    for l in model.prunable_layers() {
        let cap = capture_for(captures, l, &model.layers[l].name)?;
        let problem = layer_problem(model, cap, None, options.tolerance)?;
        let n = problem.n_groups();
        let k = budget_for(plan, l, n);
        let kept = match plan.variant {
            Variant::WeightNorm => select_weight_norm(model, l, k)?,
            Variant::Random => select_random(n, k, plan.seed, l as u64)?,
            v => return Err(Error::InvalidParameter(format!("{v} is not a baseline"))),
        };
        let eval = eval_from_scratch(&problem, &kept)?;
        let wt = if options.reweight_baselines {
            eval.reweighted(&problem)
        } else {
            let mut w = problem.weights().clone();
            let cols = problem.groups().expand(&kept);
            let mut keep_row = vec![false; w.rows()];
            for c in cols {
                keep_row[c] = true;
            }
            for (r, keep) in keep_row.iter().enumerate() {
                if !keep {
                    w.row_mut(r).fill(0.0);
                }
            }
            w
        };
        let residual = reconstruction_error(&problem, &wt)?;
        let baseline = problem.baseline();
        outcomes.push(outcome(model, l, kept.clone(), baseline - residual, baseline, residual));
        apply_pruning(&mut pruned, l, &kept, &wt)?;
    }
    finish(model, pruned, inputs, outcomes)
}

/// Runs the plan's variant on the pruning batch `inputs`.
pub fn prune(model: &NetworkModel, inputs: &Features, plan: &PrunePlan, options: &PruneOptions) -> Result<PruneResult> {
    match plan.variant {
        Variant::Seq | Variant::Asym => prune_sequential(model, inputs, plan, options),
        Variant::Layer => {
            let (_, caps) = forward_capture(model, inputs)?;
            prune_layer_in_change(model, &caps, inputs, plan, options)
        }
        Variant::WeightNorm | Variant::Random => {
            let (_, caps) = forward_capture(model, inputs)?;
            prune_baseline(model, &caps, inputs, plan, options)
        }
    }
}
