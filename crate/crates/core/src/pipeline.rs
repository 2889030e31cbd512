//! Compression runs: budget selection, pruning and metrics for every
//! (compression ratio, seed) pair.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::budget::{
    accuracy_curves, default_grid, equal_fraction_budgets, layer_error_profiles, pruned_size, select_budgets,
    threshold_for_compression, AccuracyCurve, BudgetPlan,
};
use crate::error::{Error, Result};
use crate::linalg::frob_norm_sq;
use crate::multilayer::{final_output_error, prune, PruneOptions, PrunePlan, Variant};
use crate::netexec::{
    accuracy_from_logits, count_flops, count_params, forward_capture, Dataset, Features, NetworkModel,
};

pub const DEFAULT_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    #[default]
    Accuracy,
    Threshold,
    EqualFraction,
}

impl BudgetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BudgetMode::Accuracy => "accuracy",
            BudgetMode::Threshold => "threshold",
            BudgetMode::EqualFraction => "equal-fraction",
        }
    }
}

impl fmt::Display for BudgetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BudgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(BudgetMode::Accuracy),
            "threshold" => Ok(BudgetMode::Threshold),
            "equal-fraction" => Ok(BudgetMode::EqualFraction),
            _ => Err(Error::InvalidParameter(format!(
                "unknown budget mode {s:?} (accuracy, threshold, equal-fraction)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub compressions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub budget_mode: BudgetMode,
    /// Pruning batch size, drawn from the pruning pool by the seed.
    pub batch: usize,
    pub epsilon: Option<f64>,
    pub grid: Vec<f64>,
    pub reweight_baselines: bool,
    pub tolerance: f64,
}

impl RunConfig {
    pub fn new(variant: Variant, compressions: Vec<f64>, seeds: Vec<u64>) -> Self {
        let defaults = PruneOptions::default();
        Self {
            variant,
            compressions,
            seeds,
            budget_mode: BudgetMode::default(),
            batch: DEFAULT_BATCH,
            epsilon: defaults.epsilon,
            grid: default_grid(),
            reweight_baselines: defaults.reweight_baselines,
            tolerance: defaults.tolerance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.compressions.is_empty() {
            return Err(Error::InvalidParameter(
                "need at least one seed and one compression ratio".into(),
            ));
        }
        if let Some(c) = self.compressions.iter().find(|c| !(**c >= 1.0 && c.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "compression ratio must be ≥ 1, got {c}"
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidParameter("batch must be positive".into()));
        }
        Ok(())
    }

    fn prune_options(&self) -> PruneOptions {
        PruneOptions {
            epsilon: self.epsilon,
            reweight_baselines: self.reweight_baselines,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub variant: Variant,
    pub c: f64,
    pub seed: u64,
    /// Top-1 accuracy on the verification split.
    pub acc1: f64,
    pub params: u64,
    pub flops: u64,
    /// Original over pruned FLOPs.
    pub speedup: f64,
    /// `‖y − y'‖² / ‖y‖²` of the logits on the verification split.
    pub out_err: f64,
    pub time_ms: u64,
    pub budgets: BTreeMap<String, usize>,
    pub tau: Option<f64>,
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Baseline {
    pub acc1: f64,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub original: Baseline,
    /// Sorted by `(c, seed)`.
    pub rows: Vec<RunRow>,
    /// Pruned model of each row.
    #[serde(skip)]
    pub models: Vec<NetworkModel>,
}

/// Pruning batch for `seed`: a uniformly drawn, ascending subset of the pool.
pub fn pruning_batch(data: &Dataset, batch: usize, seed: u64) -> Vec<usize> {
    let pool = data.pruning_pool();
    if batch >= pool.len() {
        return pool;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), batch)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    idx.sort_unstable();
    idx
}

/// Budgets for one compression ratio from precomputed per-seed data.
fn plan_budgets(model: &NetworkModel, mode: BudgetMode, prep: &Prepared, p_orig: f64, c: f64) -> Result<BudgetPlan> {
    let size = |b: &BTreeMap<usize, usize>| pruned_size(model, b);
    match (mode, prep) {
        (BudgetMode::Accuracy, Prepared::Curves(curves)) => select_budgets(curves, p_orig, c, size),
        (BudgetMode::Threshold, Prepared::Profiles(p)) => threshold_for_compression(p, c, size),
        (BudgetMode::EqualFraction, _) => {
            let units = model
                .prunable_layers()
                .into_iter()
                .map(|l| (l, model.layers[l].units()))
                .collect();
            equal_fraction_budgets(&units, c, size)
        }
        _ => unreachable!("prepared data matches the budget mode"),
    }
}

enum Prepared {
    Curves(Vec<AccuracyCurve>),
    Profiles(BTreeMap<usize, Vec<f64>>),
    Nothing,
}

/// Per-seed inputs shared by every compression ratio.
struct SeedContext {
    batch: Features,
    prep: Prepared,
    elapsed_ms: u64,
}

struct Shared {
    verify_inputs: Features,
    verify_labels: Vec<usize>,
    logits: crate::linalg::Matrix,
    p_orig: f64,
}

fn shared(model: &NetworkModel, data: &Dataset) -> Result<Shared> {
    let (verify_inputs, verify_labels) = data.verification_set();
    if verify_labels.is_empty() {
        return Err(Error::InvalidParameter("bundle has no verification samples".into()));
    }
    let logits = model.forward(&verify_inputs)?;
    let p_orig = accuracy_from_logits(&logits, &verify_labels)?;
    Ok(Shared {
        verify_inputs,
        verify_labels,
        logits,
        p_orig,
    })
}

fn seed_context(
    model: &NetworkModel,
    data: &Dataset,
    sh: &Shared,
    config: &RunConfig,
    seed: u64,
) -> Result<SeedContext> {
    let start = Instant::now();
    let batch = data.inputs.select_samples(&pruning_batch(data, config.batch, seed));
    let prep = match config.budget_mode {
        BudgetMode::Accuracy => {
            let (_, caps) = forward_capture(model, &batch)?;
            Prepared::Curves(accuracy_curves(
                model,
                &caps,
                &sh.verify_inputs,
                &sh.verify_labels,
                &config.grid,
                config.variant,
                &config.prune_options(),
                seed,
            )?)
        }
        BudgetMode::Threshold => {
            let (_, caps) = forward_capture(model, &batch)?;
            Prepared::Profiles(layer_error_profiles(model, &caps, config.tolerance)?)
        }
        BudgetMode::EqualFraction => Prepared::Nothing,
    };
    Ok(SeedContext {
        batch,
        prep,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

/// Budget plans for every compression ratio of `config`, using `seed`'s batch.
pub fn budget_plans(model: &NetworkModel, data: &Dataset, config: &RunConfig, seed: u64) -> Result<Vec<BudgetPlan>> {
    config.validate()?;
    let sh = shared(model, data)?;
    let ctx = seed_context(model, data, &sh, config, seed)?;
    config
        .compressions
        .iter()
        .map(|&c| plan_budgets(model, config.budget_mode, &ctx.prep, sh.p_orig, c))
        .collect()
}

/// Runs the whole matrix of compression ratios and seeds.
pub fn run(model: &NetworkModel, data: &Dataset, config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let sh = shared(model, data)?;
    let y_norm = frob_norm_sq(&sh.logits);
    let original = Baseline {
        acc1: sh.p_orig,
        params: count_params(model)?,
        flops: count_flops(model)?,
    };
    let options = config.prune_options();

    let per_seed: Vec<Vec<(RunRow, NetworkModel)>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let ctx = seed_context(model, data, &sh, config, seed)?;
            config
                .compressions
                .iter()
                .map(|&c| {
                    let start = Instant::now();
                    let budget = plan_budgets(model, config.budget_mode, &ctx.prep, sh.p_orig, c)?;
                    let plan = PrunePlan {
                        budgets: budget.budgets.clone(),
                        variant: config.variant,
                        seed,
                    };
                    let result = prune(model, &ctx.batch, &plan, &options)?;
                    let logits = result.model.forward(&sh.verify_inputs)?;
                    let out_err = final_output_error(model, &result.model, &sh.verify_inputs)?;
                    let row = RunRow {
                        variant: config.variant,
                        c,
                        seed,
                        acc1: accuracy_from_logits(&logits, &sh.verify_labels)?,
                        params: result.params_after,
                        flops: result.flops_after,
                        speedup: result.flops_before as f64 / result.flops_after.max(1) as f64,
                        out_err: if y_norm > 0.0 { out_err / y_norm } else { out_err },
                        time_ms: ctx.elapsed_ms + start.elapsed().as_millis() as u64,
                        budgets: budget
                            .budgets
                            .iter()
                            .map(|(&l, &k)| (model.layers[l].name.clone(), k))
                            .collect(),
                        tau: budget.tau,
                        level: budget.level,
                    };
                    Ok((row, result.model))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut pairs: Vec<(RunRow, NetworkModel)> = per_seed.into_iter().flatten().collect();
    pairs.sort_by(|a, b| a.0.c.total_cmp(&b.0.c).then(a.0.seed.cmp(&b.0.seed)));
    let (rows, models) = pairs.into_iter().unzip();
    Ok(RunReport {
        config: config.clone(),
        original,
        rows,
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, SynthConfig};

    #[test]
    fn no_compression_reproduces_the_model() {
        let (model, data) = synthesize(&SynthConfig::new("mlp:8,12,10,4".parse().unwrap(), 150, 3)).unwrap();
        for mode in [BudgetMode::Accuracy, BudgetMode::Threshold, BudgetMode::EqualFraction] {
            let mut cfg = RunConfig::new(Variant::Asym, vec![1.0], vec![0]);
            cfg.budget_mode = mode;
            let report = run(&model, &data, &cfg).unwrap();
            let row = &report.rows[0];
            assert_eq!(row.acc1, report.original.acc1, "{mode}");
            assert_eq!(row.params, report.original.params);
            assert!(row.out_err < 1e-20, "{mode}: {}", row.out_err);
        }
    }

    #[test]
    fn rows_are_sorted_and_meet_targets() {
        let (model, data) = synthesize(&SynthConfig::new("mlp:8,12,10,4".parse().unwrap(), 150, 3)).unwrap();
        let cfg = RunConfig::new(Variant::Random, vec![2.0, 1.5], vec![3, 1]);
        let report = run(&model, &data, &cfg).unwrap();
        let keys: Vec<(f64, u64)> = report.rows.iter().map(|r| (r.c, r.seed)).collect();
        assert_eq!(keys, vec![(1.5, 1), (1.5, 3), (2.0, 1), (2.0, 3)]);
        for r in &report.rows {
            assert!(r.params as f64 * r.c <= report.original.params as f64);
        }
        let again = run(&model, &data, &cfg).unwrap();
        let acc = |r: &RunReport| r.rows.iter().map(|x| x.acc1).collect::<Vec<_>>();
        assert_eq!(acc(&report), acc(&again));
    }

    #[test]
    fn batch_is_seeded_subset_of_pool() {
        let (_, data) = synthesize(&SynthConfig::new("mlp:4,3,2".parse().unwrap(), 90, 0)).unwrap();
        let a = pruning_batch(&data, 20, 5);
        assert_eq!(a, pruning_batch(&data, 20, 5));
        assert_ne!(a, pruning_batch(&data, 20, 6));
        assert!(a.windows(2).all(|w| w[0] < w[1]) && a.iter().all(|&i| i < 60));
        assert_eq!(pruning_batch(&data, 1000, 5).len(), 60);
        assert!("bogus".parse::<BudgetMode>().is_err());
    }
}
