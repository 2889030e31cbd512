//! Brute-force oracles and diagnostics for tiny selection problems.
//!
//! Every check here re-derives values from [`eval_from_scratch`] rather than the
//! incremental state, so a broken gain formula shows up as a violation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::greedy::{greedy_with, GreedyOptions, GreedyRun};
use crate::linalg::{dot, matmul, norm_sq, numerical_rank, Matrix, DEFAULT_RANK_TOL};
use crate::objective::{eval_from_scratch, reconstruction_error, Fault, Groups, SelectionProblem};

/// Largest `C(n, k)` accepted by [`brute_force_opt`].
pub const MAX_SUBSETS: u64 = 200_000;
/// Largest group count for the exponential subset table.
pub const MAX_TABLE_GROUPS: usize = 14;
/// Largest `|U|` for the submodularity ratio.
pub const MAX_RATIO_SET: usize = 10;
/// Pairs with `F(S|L)` at or below this fraction of the baseline are skipped.
pub const GAIN_FLOOR: f64 = 1e-12;

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u64, |acc, i| acc.saturating_mul((n - i) as u64) / (i as u64 + 1))
}

/// Exact maximum of `F` over all `k`-subsets; ties keep the lexicographically
/// smallest set.
pub fn brute_force_opt(problem: &SelectionProblem, k: usize) -> Result<(f64, Vec<usize>)> {
    let n = problem.n_groups();
    if k > n {
        return Err(Error::BudgetOutOfRange { k, max: n });
    }
    let count = binomial(n, k);
    if count > MAX_SUBSETS {
        return Err(Error::TooLarge(format!(
            "C({n}, {k}) = {count} subsets exceeds {MAX_SUBSETS}"
        )));
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = (f64::NEG_INFINITY, idx.clone());
    loop {
        let v = eval_from_scratch(problem, &idx)?.value;
        if v > best.0 {
            best = (v, idx.clone());
        }
        // Next combination in lexicographic order.
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            break;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(best)
}

/// `F` evaluated from scratch on every subset of groups, indexed by bitmask.
#[derive(Debug, Clone)]
pub struct SetTable {
    n: usize,
    values: Vec<f64>,
    baseline: f64,
}

impl SetTable {
    pub fn new(problem: &SelectionProblem) -> Result<Self> {
        let n = problem.n_groups();
        if n > MAX_TABLE_GROUPS {
            return Err(Error::TooLarge(format!("{n} groups exceeds {MAX_TABLE_GROUPS}")));
        }
        let values = (0..1usize << n)
            .into_par_iter()
            .map(|mask| eval_from_scratch(problem, &mask_members(mask)).map(|e| e.value))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            values,
            baseline: problem.baseline(),
        })
    }

    pub fn value(&self, groups: &[usize]) -> f64 {
        self.values[to_mask(groups)]
    }

    /// `max_{|S| ≤ k} F(S)`.
    pub fn opt(&self, k: usize) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(m, _)| m.count_ones() as usize <= k)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Minimum over `L ⊆ U` and disjoint `S` with `1 ≤ |S| ≤ k` and
    /// `F(S|L) > 0` of `Σ_{i∈S} F(i|L) / F(S|L)`.
    pub fn submodularity_ratio(&self, u: &[usize], k: usize) -> Result<GammaReport> {
        if u.len() > MAX_RATIO_SET {
            return Err(Error::TooLarge(format!("|U| = {} exceeds {MAX_RATIO_SET}", u.len())));
        }
        if let Some(&g) = u.iter().find(|&&g| g >= self.n) {
            return Err(Error::GroupOutOfRange {
                group: g,
                n_groups: self.n,
            });
        }
        let u_mask = to_mask(u);
        let full = (1usize << self.n) - 1;
        let floor = GAIN_FLOOR * self.baseline;
        let subsets_of_u: Vec<usize> = submasks(u_mask).collect();
        let partial: Vec<Acc> = subsets_of_u
            .par_iter()
            .map(|&l| {
                let fl = self.values[l];
                let mut acc = Acc::default();
                for s in submasks(full & !l) {
                    let size = s.count_ones() as usize;
                    if size == 0 || size > k {
                        continue;
                    }
                    let joint = self.values[l | s] - fl;
                    if joint <= floor {
                        acc.skipped += 1;
                        continue;
                    }
                    let singles: f64 = mask_members(s).iter().map(|&i| self.values[l | 1 << i] - fl).sum();
                    acc.evaluated += 1;
                    let ratio = singles / joint;
                    if acc.best.is_none_or(|(r, bl, bs)| (ratio, l, s) < (r, bl, bs)) {
                        acc.best = Some((ratio, l, s));
                    }
                }
                acc
            })
            .collect();
        let mut total = Acc::default();
        for a in partial {
            total.evaluated += a.evaluated;
            total.skipped += a.skipped;
            if let Some(b) = a.best {
                if total.best.is_none_or(|t| (b.0, b.1, b.2) < t) {
                    total.best = Some(b);
                }
            }
        }
        Ok(match total.best {
            Some((ratio, l, s)) => GammaReport {
                gamma_exact: ratio.clamp(0.0, 1.0),
                raw_minimum: ratio,
                pairs_evaluated: total.evaluated,
                pairs_skipped: total.skipped,
                degenerate: false,
                witness: Some((mask_members(l), mask_members(s))),
            },
            None => GammaReport {
                gamma_exact: 1.0,
                raw_minimum: 1.0,
                pairs_evaluated: 0,
                pairs_skipped: total.skipped,
                degenerate: true,
                witness: None,
            },
        })
    }
}

#[derive(Default)]
struct Acc {
    evaluated: u64,
    skipped: u64,
    best: Option<(f64, usize, usize)>,
}

fn to_mask(groups: &[usize]) -> usize {
    groups.iter().fold(0, |m, &g| m | 1 << g)
}

fn mask_members(mask: usize) -> Vec<usize> {
    (0..usize::BITS as usize).filter(|&i| mask >> i & 1 == 1).collect()
}

/// All submasks of `mask`, including 0 and `mask` itself.
fn submasks(mask: usize) -> impl Iterator<Item = usize> {
    let mut next = Some(mask);
    std::iter::from_fn(move || {
        let cur = next?;
        next = if cur == 0 { None } else { Some((cur - 1) & mask) };
        Some(cur)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaReport {
    /// Minimum ratio clamped to `[0, 1]`.
    pub gamma_exact: f64,
    pub raw_minimum: f64,
    pub pairs_evaluated: u64,
    pub pairs_skipped: u64,
    /// Every pair was skipped; `gamma_exact` is then 1.
    pub degenerate: bool,
    /// `(L, S)` attaining the minimum.
    pub witness: Option<(Vec<usize>, Vec<usize>)>,
}

/// Exact submodularity ratio `γ_{U,k}` by enumeration.
pub fn exact_submodularity_ratio(problem: &SelectionProblem, u: &[usize], k: usize) -> Result<GammaReport> {
    SetTable::new(problem)?.submodularity_ratio(u, k)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuaranteeCheck {
    pub k: usize,
    pub selected: Vec<usize>,
    pub greedy_value: f64,
    pub opt: f64,
    pub gamma: f64,
    /// `(1 − e^{−γ})·OPT_k`.
    pub bound: f64,
    /// `(F(Ŝ) − bound)/baseline`; negative beyond tolerance means a violation.
    pub margin: f64,
    pub passed: bool,
}

fn scaled(x: f64, baseline: f64) -> f64 {
    if baseline > 0.0 {
        x / baseline
    } else {
        x
    }
}

/// `F(Ŝ) ≥ (1 − e^{−γ_{Ŝ,k}})·OPT_k` up to `1e-9·baseline`.
pub fn check_greedy_guarantee(problem: &SelectionProblem, k: usize) -> Result<GuaranteeCheck> {
    guarantee_with(problem, &SetTable::new(problem)?, k, Fault::None)
}

fn greedy_set(problem: &SelectionProblem, k: usize, fault: Fault) -> Result<Vec<usize>> {
    let opts = GreedyOptions {
        fault,
        ..Default::default()
    };
    Ok(greedy_with(problem, k, opts)?.order)
}

fn guarantee_with(problem: &SelectionProblem, table: &SetTable, k: usize, fault: Fault) -> Result<GuaranteeCheck> {
    let selected = greedy_set(problem, k, fault)?;
    let greedy_value = table.value(&selected);
    let opt = table.opt(k);
    let gamma = table.submodularity_ratio(&selected, k)?.gamma_exact;
    let bound = (1.0 - (-gamma).exp()) * opt;
    let margin = scaled(greedy_value - bound, table.baseline);
    Ok(GuaranteeCheck {
        k,
        selected,
        greedy_value,
        opt,
        gamma,
        bound,
        margin,
        passed: margin >= -1e-9,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerErrorCheck {
    pub k: usize,
    pub selected: Vec<usize>,
    /// `‖T W − B_Ŝ Ŵ‖²`.
    pub error: f64,
    /// `e^{−γ k/n}·‖T W‖² + (1 − e^{−γ k/n})·min_W̃ ‖T W − B W̃‖²`.
    pub bound: f64,
    /// `γ_{Ŝ,n}` over all `S` up to the full group count.
    pub gamma: f64,
    pub margin: f64,
    pub passed: bool,
}

/// Exponential layer-error bound with the exact `γ_{Ŝ,n}`. For symmetric
/// problems the second term vanishes.
pub fn check_layer_error_bound(problem: &SelectionProblem, k: usize) -> Result<LayerErrorCheck> {
    layer_error_with(problem, &SetTable::new(problem)?, k, Fault::None)
}

fn layer_error_with(problem: &SelectionProblem, table: &SetTable, k: usize, fault: Fault) -> Result<LayerErrorCheck> {
    let n = problem.n_groups();
    let opts = GreedyOptions {
        fault,
        ..Default::default()
    };
    let mut run = GreedyRun::with_options(problem, k, opts)?;
    run.run_to_end()?;
    let selected = run.trace().order.clone();
    let w_tilde = eval_from_scratch(problem, &selected)?.reweighted(problem);
    let error = reconstruction_error(problem, &w_tilde)?;
    let gamma = table.submodularity_ratio(&selected, n)?.gamma_exact;
    let decay = (-gamma * k as f64 / n as f64).exp();
    let floor = (table.baseline - table.opt(n)).max(0.0);
    let bound = decay * table.baseline + (1.0 - decay) * floor;
    let margin = scaled(bound - error, table.baseline);
    Ok(LayerErrorCheck {
        k,
        selected,
        error,
        bound,
        gamma,
        margin,
        passed: margin >= -1e-9,
    })
}

/// Max over selected columns `s` and outputs `m` of
/// `|b_sᵀ(T w_m − B w̃_m)| / (‖b_s‖·‖T w_m‖ + tiny)`.
pub fn orthogonality_check(problem: &SelectionProblem, groups: &[usize], w_tilde: &Matrix) -> Result<f64> {
    let (n, m) = (problem.n_cols(), problem.weights().cols());
    if w_tilde.shape() != (n, m) {
        return Err(Error::DimensionMismatch {
            op: "orthogonality_check",
            left: (n, m),
            right: w_tilde.shape(),
        });
    }
    let cols = problem.groups().expand(groups);
    if cols.is_empty() {
        return Ok(0.0);
    }
    let target = matmul(&problem.target(), problem.weights())?;
    let approx = matmul(&problem.basis(), w_tilde)?;
    let resid = target.sub(&approx)?;
    let basis = problem.basis_columns();
    let mut worst = 0.0f64;
    for j in 0..m {
        let r = resid.column(j);
        let tn = norm_sq(&target.column(j)).sqrt();
        for &s in &cols {
            let b = &basis[s];
            let v = dot(b, &r).abs() / (norm_sq(b).sqrt() * tn + f64::MIN_POSITIVE);
            worst = worst.max(v);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankDiagnostic {
    pub rank: usize,
    pub columns: usize,
    pub group_size: usize,
    pub units: usize,
    /// Largest `k` with `2k·g ≤ rank`, or all units at full column rank.
    pub max_k: usize,
    pub fraction: f64,
}

/// Largest kept fraction for which any `min(2k, n)` units' columns can be
/// linearly independent, judged from the numerical rank of the capture.
pub fn rank_diagnostic(capture: &Matrix, group_size: usize) -> Result<RankDiagnostic> {
    let columns = capture.cols();
    if group_size == 0 || !columns.is_multiple_of(group_size) || columns == 0 {
        return Err(Error::InvalidParameter(format!(
            "{columns} columns do not split into groups of {group_size}"
        )));
    }
    let units = columns / group_size;
    let rank = numerical_rank(capture, DEFAULT_RANK_TOL)?.numerical_rank;
    let max_k = if rank == columns {
        units
    } else {
        rank / (2 * group_size)
    };
    Ok(RankDiagnostic {
        rank,
        columns,
        group_size,
        units,
        max_k,
        fraction: max_k as f64 / units as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    #[serde(skip)]
    pub fault: Fault,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub check: &'static str,
    pub instance: usize,
    pub passed: bool,
    /// Scaled slack; negative means the inequality failed.
    pub margin: f64,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub fault_injected: bool,
    pub checks: Vec<CheckRecord>,
    pub violations: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InstanceKind {
    Symmetric,
    Asymmetric,
    Channels,
}

/// Random tiny problem for instance `i`: at most 10 groups and budget ≤ 4.
pub fn suite_instance(seed: u64, i: usize) -> Result<(InstanceKind, SelectionProblem, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let mut gauss = |r: usize, c: usize| -> Matrix {
        let data = (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Matrix::new(r, c, data).expect("shape")
    };
    let kind = [
        InstanceKind::Symmetric,
        InstanceKind::Asymmetric,
        InstanceKind::Channels,
    ][i % 3];
    let seeded =
        |lo: usize, hi: usize, salt: u64| lo + ((seed ^ salt).wrapping_add(i as u64 * 7919) as usize % (hi - lo + 1));
    let samples = seeded(6, 16, 0x51);
    let outputs = seeded(1, 4, 0x52);
    let (groups, cols) = match kind {
        InstanceKind::Channels => {
            let g = seeded(3, 5, 0x53);
            (Groups::blocks(g, 2), 2 * g)
        }
        _ => {
            let n = seeded(4, 10, 0x53);
            (Groups::singletons(n), n)
        }
    };
    let k = seeded(1, 4, 0x54).min(groups.len());
    let basis = gauss(samples, cols);
    let weights = gauss(cols, outputs);
    let problem = match kind {
        InstanceKind::Asymmetric => {
            let target = basis.add(&gauss(samples, cols).scaled(0.3))?;
            SelectionProblem::asymmetric(&basis, &target, weights, groups)?
        }
        _ => SelectionProblem::symmetric(&basis, weights, groups)?,
    };
    Ok((kind, problem, k))
}

fn instance_checks(seed: u64, i: usize, fault: Fault) -> Result<Vec<CheckRecord>> {
    let (kind, problem, k) = suite_instance(seed, i)?;
    let table = SetTable::new(&problem)?;
    let baseline = problem.baseline();
    let mut out = Vec::new();

    let g = guarantee_with(&problem, &table, k, fault)?;
    out.push(CheckRecord {
        check: "greedy_guarantee",
        instance: i,
        passed: g.passed,
        margin: g.margin,
        detail: serde_json::json!({ "kind": kind, "k": k, "greedy": g.greedy_value, "opt": g.opt, "gamma": g.gamma, "bound": g.bound }),
    });

    // Ratio definition on pairs re-evaluated independently of the table.
    let gamma = table.submodularity_ratio(&g.selected, k)?;
    let mut worst = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    rng.set_stream(i as u64);
    let n = problem.n_groups();
    for _ in 0..16 {
        let l: Vec<usize> = g.selected.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        let rest: Vec<usize> = (0..n).filter(|x| !l.contains(x)).collect();
        let size = rng.random_range(1..=k.min(rest.len()).max(1));
        if rest.is_empty() {
            continue;
        }
        let s: Vec<usize> = rand::seq::index::sample(&mut rng, rest.len(), size.min(rest.len()))
            .into_iter()
            .map(|j| rest[j])
            .collect();
        let f = |set: &[usize]| eval_from_scratch(&problem, set).map(|e| e.value);
        let fl = f(&l)?;
        let joint = f(&[l.clone(), s.clone()].concat())? - fl;
        let mut singles = 0.0;
        for &x in &s {
            singles += f(&[l.clone(), vec![x]].concat())? - fl;
        }
        worst = worst.min(scaled(singles - gamma.gamma_exact * joint, baseline));
    }
    let ratio_ok = worst >= -1e-9 && gamma.gamma_exact <= 1.0 + 1e-12;
    out.push(CheckRecord {
        check: "submodularity_ratio",
        instance: i,
        passed: ratio_ok,
        margin: worst,
        detail: serde_json::json!({ "gamma": gamma.gamma_exact, "pairs": gamma.pairs_evaluated, "skipped": gamma.pairs_skipped, "degenerate": gamma.degenerate }),
    });

    let e = layer_error_with(&problem, &table, k, fault)?;
    out.push(CheckRecord {
        check: "layer_error_bound",
        instance: i,
        passed: e.passed,
        margin: e.margin,
        detail: serde_json::json!({ "error": e.error, "bound": e.bound, "gamma_full": e.gamma }),
    });

    // Incremental weights against the least-squares optimality conditions,
    // and incremental values against scratch evaluation.
    let opts = GreedyOptions {
        fault,
        ..Default::default()
    };
    let mut run = GreedyRun::with_options(&problem, k, opts)?;
    let mut drift = 0.0f64;
    while run.step()?.is_some() {
        let scratch = table.value(run.state().selected());
        drift = drift.max(scaled((run.state().value() - scratch).abs(), baseline));
    }
    let ortho = orthogonality_check(&problem, run.state().selected(), &run.state().reweighted_weights())?;
    out.push(CheckRecord {
        check: "orthogonality",
        instance: i,
        passed: ortho <= 1e-6,
        margin: 1e-6 - ortho,
        detail: serde_json::json!({ "violation": ortho }),
    });
    out.push(CheckRecord {
        check: "incremental_consistency",
        instance: i,
        passed: drift <= 1e-8,
        margin: 1e-8 - drift,
        detail: serde_json::json!({ "drift": drift }),
    });
    Ok(out)
}

/// Runs every check on `config.instances` random tiny problems.
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    let per: Vec<Vec<CheckRecord>> = (0..config.instances)
        .into_par_iter()
        .map(|i| instance_checks(config.seed, i, config.fault))
        .collect::<Result<_>>()?;
    let checks: Vec<CheckRecord> = per.into_iter().flatten().collect();
    let violations = checks.iter().filter(|c| !c.passed).count();
    Ok(SuiteReport {
        config: config.clone(),
        fault_injected: config.fault != Fault::None,
        passed: violations == 0,
        violations,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn running_example() -> SelectionProblem {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let w = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        SelectionProblem::symmetric(&a, w, Groups::singletons(2)).unwrap()
    }

    #[test]
    fn brute_force_running_example() {
        let p = running_example();
        let (v, s) = brute_force_opt(&p, 1).unwrap();
        assert_eq!(s, vec![1]);
        assert!((v - 4.5).abs() < 1e-12);
        let (v, s) = brute_force_opt(&p, 2).unwrap();
        assert_eq!(s, vec![0, 1]);
        assert!((v - p.baseline()).abs() < 1e-12);
    }

    #[test]
    fn combinations_are_enumerated_lexicographically() {
        // All columns identical: every k-set ties, so the first one wins.
        let a = Matrix::from_rows(&[vec![1.0; 5], vec![2.0; 5]]);
        let p = SelectionProblem::symmetric(&a, Matrix::identity(5), Groups::singletons(5)).unwrap();
        assert_eq!(brute_force_opt(&p, 3).unwrap().1, vec![0, 1, 2]);
        assert_eq!(binomial(5, 3), 10);
        assert_eq!(binomial(30, 15), 155_117_520);
        let big = Matrix::from_rows(&[vec![1.0; 30]]);
        let p = SelectionProblem::symmetric(&big, Matrix::identity(30), Groups::singletons(30)).unwrap();
        assert!(matches!(brute_force_opt(&p, 15), Err(Error::TooLarge(_))));
    }

    #[test]
    fn orthogonal_basis_is_modular() {
        let p = SelectionProblem::symmetric(&Matrix::identity(5), Matrix::identity(5), Groups::singletons(5)).unwrap();
        let g = exact_submodularity_ratio(&p, &[0, 2], 3).unwrap();
        assert!((g.gamma_exact - 1.0).abs() < 1e-9);
        assert!(!g.degenerate);
    }

    #[test]
    fn running_example_ratio_matches_hand_enumeration() {
        // U = {1}, k = 2. With L = ∅, S = {0, 1}: singles 4 + 4.5 over joint 5.
        // With L = {1}, S = {0}: ratio 1.
        let g = exact_submodularity_ratio(&running_example(), &[1], 2).unwrap();
        assert!((g.gamma_exact - 1.0).abs() < 1e-12);
        assert!((g.raw_minimum - 1.0).abs() < 1e-12);
        // Nearly parallel columns: the pair is strongly redundant, not submodular-breaking.
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = Matrix::from_rows(&[vec![1.0], vec![-1.0]]);
        let p = SelectionProblem::symmetric(&a, w, Groups::singletons(2)).unwrap();
        assert!((exact_submodularity_ratio(&p, &[], 2).unwrap().gamma_exact - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cancelling_columns_are_supermodular() {
        // a₀ = (1, 0), a₁ = (1, ε): alone each explains little of T w = a₀ − a₁,
        // together they explain all of it.
        let eps = 0.1;
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, eps]]);
        let w = Matrix::from_rows(&[vec![1.0], vec![-1.0]]);
        let p = SelectionProblem::symmetric(&a, w, Groups::singletons(2)).unwrap();
        let f = |s: &[usize]| eval_from_scratch(&p, s).unwrap().value;
        let expect = (f(&[0]) + f(&[1])) / f(&[0, 1]);
        let g = exact_submodularity_ratio(&p, &[], 2).unwrap();
        assert!((g.gamma_exact - expect).abs() < 1e-12);
        assert!(g.gamma_exact < 0.1);
        assert_eq!(g.witness, Some((vec![], vec![0, 1])));
    }

    #[test]
    fn all_zero_gains_are_degenerate() {
        let p = SelectionProblem::symmetric(&Matrix::zeros(3, 2), Matrix::identity(2), Groups::singletons(2)).unwrap();
        let g = exact_submodularity_ratio(&p, &[0], 2).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.gamma_exact, 1.0);
    }

    #[test]
    fn guarantee_and_layer_bound_on_orthogonal_case() {
        let p = SelectionProblem::symmetric(&Matrix::identity(4), Matrix::identity(4), Groups::singletons(4)).unwrap();
        let g = check_greedy_guarantee(&p, 2).unwrap();
        assert!(g.passed);
        assert!((g.bound - (1.0 - (-1.0f64).exp()) * 2.0).abs() < 1e-12);
        let e = check_layer_error_bound(&p, 2).unwrap();
        assert!((e.error - 2.0).abs() < 1e-12);
        assert!((e.bound - 4.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert!(e.error < e.bound);
        let full = check_layer_error_bound(&p, 4).unwrap();
        assert!(full.error.abs() < 1e-12 && full.passed);
        let all = check_greedy_guarantee(&p, 4).unwrap();
        assert!((all.greedy_value - all.opt).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_of_running_example() {
        let p = running_example();
        assert_eq!(orthogonality_check(&p, &[], &Matrix::zeros(2, 1)).unwrap(), 0.0);
        let wt = eval_from_scratch(&p, &[1]).unwrap().reweighted(&p);
        assert!(orthogonality_check(&p, &[1], &wt).unwrap() < 1e-15);
        let bad = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        assert!(orthogonality_check(&p, &[1], &bad).unwrap() > 0.1);
    }

    #[test]
    fn rank_rule() {
        let full = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(rank_diagnostic(&full, 1).unwrap().fraction, 1.0);
        // Rank 4 from six columns: the last two are combinations of the first four.
        let base = crate::linalg::test_util::random_matrix(&mut crate::linalg::test_util::rng(3), 8, 4);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let x = base.row(i);
                vec![x[0], x[1], x[2], x[3], x[0] + x[1], x[2] - 2.0 * x[3]]
            })
            .collect();
        let d = rank_diagnostic(&Matrix::from_rows(&rows), 1).unwrap();
        assert_eq!((d.rank, d.max_k), (4, 2));
        assert!((d.fraction - 1.0 / 3.0).abs() < 1e-15);
        assert!(rank_diagnostic(&full, 3).is_err());
    }

    #[test]
    fn small_suite_passes_and_fault_is_caught() {
        let clean = run_suite(&SuiteConfig {
            instances: 9,
            ..Default::default()
        })
        .unwrap();
        assert!(clean.passed, "{:?}", clean.checks.iter().find(|c| !c.passed));
        let broken = run_suite(&SuiteConfig {
            instances: 9,
            fault: Fault::FlipGainSign,
            ..Default::default()
        })
        .unwrap();
        assert!(!broken.passed);
    }
}
