//! Reweighted input-change objective and its incremental greedy state.
//!
//! For a basis `B` (selectable columns), target `T` and next-layer weights `W`,
//!
//! ```text
//! F(S) = ‖T W‖² − min_{supp(W̃) ⊆ M(S)} ‖T W − B W̃‖²
//! ```
//!
//! where `M(S)` expands the selected groups into basis columns. With `B = T`
//! this is the symmetric objective; with `B ≠ T` (updated activations against
//! the original ones) it is the asymmetric one.
//!
//! The state keeps `E = R_S(T) W` (residual of the target product) and
//! `M = Bᵀ E`. Because `E` is orthogonal to the selected span, the residual
//! `r_j` of an unselected column satisfies `r_jᵀ E = b_jᵀ E = M[j]`, so a
//! singleton gain is `‖M[j]‖² / ‖r_j‖²` without touching the sample dimension.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, frob_norm_sq, matmul, norm_sq, orthonormalize_columns, Matrix};

/// A column whose residual norm is at most this fraction of its original norm
/// counts as linearly dependent (`1e-10` on squared norms).
pub const RESIDUAL_TOL: f64 = 1e-5;

/// Number of selection steps between from-scratch recomputations of residuals
/// and coefficients.
pub const REFRESH_INTERVAL: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Symmetric,
    Asymmetric,
}

/// Partition of basis columns into selectable groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Groups {
    members: Vec<Vec<usize>>,
    n_cols: usize,
}

impl Groups {
    pub fn singletons(n: usize) -> Self {
        Self {
            members: (0..n).map(|j| vec![j]).collect(),
            n_cols: n,
        }
    }

    /// `n_groups` consecutive blocks of `size` columns each (channel `c` owns
    /// columns `c·size .. (c+1)·size`).
    pub fn blocks(n_groups: usize, size: usize) -> Self {
        Self {
            members: (0..n_groups).map(|c| (c * size..(c + 1) * size).collect()).collect(),
            n_cols: n_groups * size,
        }
    }

    pub fn new(members: Vec<Vec<usize>>, n_cols: usize) -> Result<Self> {
        let mut seen = vec![false; n_cols];
        for (g, m) in members.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::Problem(format!("group {g} is empty")));
            }
            for &j in m {
                if j >= n_cols || seen[j] {
                    return Err(Error::Problem(format!(
                        "column {j} of group {g} is out of range or in two groups"
                    )));
                }
                seen[j] = true;
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::Problem(format!("column {j} belongs to no group")));
        }
        Ok(Self { members, n_cols })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn members(&self, g: usize) -> &[usize] {
        &self.members[g]
    }

    pub fn is_singletons(&self) -> bool {
        self.members.iter().all(|m| m.len() == 1)
    }

    /// `M(S)`: the columns of the given groups, in the given order.
    pub fn expand(&self, groups: &[usize]) -> Vec<usize> {
        groups.iter().flat_map(|&g| self.members[g].iter().copied()).collect()
    }
}

/// One layer's selection instance.
#[derive(Debug, Clone)]
pub struct SelectionProblem {
    basis: Vec<Vec<f64>>,
    target: Option<Vec<Vec<f64>>>,
    weights: Matrix,
    groups: Groups,
    rows: usize,
    tol: f64,
}

impl SelectionProblem {
    /// Basis and target are both `a`.
    pub fn symmetric(a: &Matrix, weights: Matrix, groups: Groups) -> Result<Self> {
        Self::build(a, None, weights, groups)
    }

    /// Select columns of `basis` to approximate `target · weights`.
    pub fn asymmetric(basis: &Matrix, target: &Matrix, weights: Matrix, groups: Groups) -> Result<Self> {
        Self::build(basis, Some(target), weights, groups)
    }

    pub fn new(basis: &Matrix, target: &Matrix, weights: Matrix, groups: Groups, mode: Mode) -> Result<Self> {
        match mode {
            Mode::Symmetric => {
                if basis != target {
                    return Err(Error::Problem("symmetric mode requires basis == target".into()));
                }
                Self::symmetric(basis, weights, groups)
            }
            Mode::Asymmetric => Self::asymmetric(basis, target, weights, groups),
        }
    }

    fn build(basis: &Matrix, target: Option<&Matrix>, weights: Matrix, groups: Groups) -> Result<Self> {
        if let Some(t) = target {
            if t.shape() != basis.shape() {
                return Err(Error::DimensionMismatch {
                    op: "basis vs target",
                    left: basis.shape(),
                    right: t.shape(),
                });
            }
        }
        if weights.rows() != basis.cols() {
            return Err(Error::DimensionMismatch {
                op: "basis columns vs weight rows",
                left: basis.shape(),
                right: weights.shape(),
            });
        }
        if groups.n_cols() != basis.cols() {
            return Err(Error::Problem(format!(
                "groups cover {} columns, basis has {}",
                groups.n_cols(),
                basis.cols()
            )));
        }
        Ok(Self {
            basis: basis.columns(),
            target: target.map(Matrix::columns),
            weights,
            groups,
            rows: basis.rows(),
            tol: RESIDUAL_TOL,
        })
    }

    /// Overrides the relative dependence tolerance ([`RESIDUAL_TOL`]).
    pub fn with_tolerance(mut self, tol: f64) -> Result<Self> {
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be in (0,1), got {tol}"
            )));
        }
        self.tol = tol;
        Ok(self)
    }

    pub fn mode(&self) -> Mode {
        if self.target.is_some() {
            Mode::Asymmetric
        } else {
            Mode::Symmetric
        }
    }

    pub fn groups(&self) -> &Groups {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_cols(&self) -> usize {
        self.basis.len()
    }

    pub fn n_samples(&self) -> usize {
        self.rows
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    pub fn basis_columns(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn target_columns(&self) -> &[Vec<f64>] {
        self.target.as_deref().unwrap_or(&self.basis)
    }

    pub fn basis(&self) -> Matrix {
        Matrix::from_columns(self.rows, &self.basis)
    }

    pub fn target(&self) -> Matrix {
        Matrix::from_columns(self.rows, self.target_columns())
    }

    /// `T W` as a list of `n_{ℓ+1}` columns.
    pub fn target_product_columns(&self) -> Vec<Vec<f64>> {
        let m = self.weights.cols();
        let mut out = vec![vec![0.0; self.rows]; m];
        for (j, t) in self.target_columns().iter().enumerate() {
            for (o, col) in out.iter_mut().enumerate() {
                let w = self.weights.get(j, o);
                if w != 0.0 {
                    axpy(col, w, t);
                }
            }
        }
        out
    }

    /// `‖T W‖²`.
    pub fn baseline(&self) -> f64 {
        self.target_product_columns().iter().map(|c| norm_sq(c)).sum()
    }

    fn column_norms(&self) -> Vec<f64> {
        self.basis.iter().map(|c| norm_sq(c).sqrt()).collect()
    }

    fn check_set(&self, groups: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.n_groups()];
        for &g in groups {
            if g >= self.n_groups() {
                return Err(Error::GroupOutOfRange {
                    group: g,
                    n_groups: self.n_groups(),
                });
            }
            if seen[g] {
                return Err(Error::AlreadySelected(g));
            }
            seen[g] = true;
        }
        Ok(())
    }
}

/// Coefficient table `X` (`n_cols × n_cols`, column `j` = `x^S(t_j)`) and the
/// objective value for a fixed set, computed without any incremental state.
#[derive(Debug, Clone)]
pub struct ScratchEval {
    pub value: f64,
    pub coefficients: Matrix,
}

impl ScratchEval {
    /// `W̃ = X W`.
    pub fn reweighted(&self, problem: &SelectionProblem) -> Matrix {
        matmul(&self.coefficients, problem.weights()).expect("coefficient table matches weights")
    }
}

/// Solves every least-squares problem `min_{supp(x) ⊆ M(S)} ‖t_j − B x‖` through
/// an orthonormal basis of `B_{M(S)}`.
pub fn eval_from_scratch(problem: &SelectionProblem, groups: &[usize]) -> Result<ScratchEval> {
    problem.check_set(groups)?;
    let cols = problem.groups.expand(groups);
    let norms = problem.column_norms();
    let sel: Vec<Vec<f64>> = cols.iter().map(|&j| problem.basis[j].clone()).collect();
    let sel_norms: Vec<f64> = cols.iter().map(|&j| norms[j]).collect();
    let cb = orthonormalize_columns(&sel, &sel_norms, problem.tol);
    let n = problem.n_cols();
    let mut x = Matrix::zeros(n, n);
    for (j, t) in problem.target_columns().iter().enumerate() {
        let c: Vec<f64> = cb.q.iter().map(|q| dot(q, t)).collect();
        let g = cb.solve_r(&c);
        for (pos, gv) in cb.kept.iter().zip(&g) {
            x.set(cols[*pos], j, *gv);
        }
    }
    let w_tilde = matmul(&x, &problem.weights)?;
    let tw = problem.target_product_columns();
    let mut err = 0.0;
    for (o, col) in tw.iter().enumerate() {
        let mut r = col.clone();
        for &j in &cols {
            let w = w_tilde.get(j, o);
            if w != 0.0 {
                axpy(&mut r, -w, &problem.basis[j]);
            }
        }
        err += norm_sq(&r);
    }
    Ok(ScratchEval {
        value: problem.baseline() - err,
        coefficients: x,
    })
}

/// Residual `‖T W − B W̃‖²` for arbitrary replacement weights.
pub fn reconstruction_error(problem: &SelectionProblem, w_tilde: &Matrix) -> Result<f64> {
    let approx = matmul(&problem.basis(), w_tilde)?;
    let tw = matmul(&problem.target(), &problem.weights)?;
    Ok(frob_norm_sq(&tw.sub(&approx)?))
}

/// Deliberate faults for mutation testing of the verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negate every marginal gain.
    FlipGainSign,
}

/// Evolving least-squares state of a greedy run.
#[derive(Debug, Clone)]
pub struct IncrementalState<'a> {
    problem: &'a SelectionProblem,
    norms: Vec<f64>,
    selected: Vec<usize>,
    group_selected: Vec<bool>,
    col_selected: Vec<bool>,
    selected_cols: Vec<usize>,
    /// `R_S(b_j)` for every basis column (stale for selected ones).
    resid: Vec<Vec<f64>>,
    /// `E = R_S(T) W`, one column per output unit.
    e: Vec<Vec<f64>>,
    /// `M = Bᵀ E`, one row per basis column (stale for selected ones).
    m: Vec<Vec<f64>>,
    /// `x^S(b_j)` for unselected basis columns, dense over basis columns.
    basis_coeffs: Vec<Vec<f64>>,
    /// `x^S(t_j)` for all target columns (asymmetric mode only).
    target_coeffs: Option<Vec<Vec<f64>>>,
    value: f64,
    baseline: f64,
    fault: Fault,
}

impl<'a> IncrementalState<'a> {
    pub fn new(problem: &'a SelectionProblem) -> Self {
        let n = problem.n_cols();
        let e = problem.target_product_columns();
        let baseline = e.iter().map(|c| norm_sq(c)).sum();
        let m = problem
            .basis
            .iter()
            .map(|b| e.iter().map(|ec| dot(b, ec)).collect())
            .collect();
        Self {
            problem,
            norms: problem.column_norms(),
            selected: Vec::new(),
            group_selected: vec![false; problem.n_groups()],
            col_selected: vec![false; n],
            selected_cols: Vec::new(),
            resid: problem.basis.clone(),
            e,
            m,
            basis_coeffs: vec![vec![0.0; n]; n],
            target_coeffs: problem.target.as_ref().map(|_| vec![vec![0.0; n]; n]),
            value: 0.0,
            baseline,
            fault: Fault::None,
        }
    }

    pub fn problem(&self) -> &'a SelectionProblem {
        self.problem
    }

    pub fn set_fault(&mut self, fault: Fault) {
        self.fault = fault;
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    /// Selected groups in pick order.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// `M(S)` in pick order.
    pub fn selected_columns(&self) -> &[usize] {
        &self.selected_cols
    }

    pub fn is_selected(&self, g: usize) -> bool {
        self.group_selected.get(g).copied().unwrap_or(false)
    }

    /// `‖R_S(T) W‖²`, the current reconstruction error.
    pub fn residual_error(&self) -> f64 {
        self.e.iter().map(|c| norm_sq(c)).sum()
    }

    fn check_candidate(&self, g: usize) -> Result<()> {
        let n_groups = self.problem.n_groups();
        if g >= n_groups {
            return Err(Error::GroupOutOfRange { group: g, n_groups });
        }
        if self.group_selected[g] {
            return Err(Error::AlreadySelected(g));
        }
        Ok(())
    }

    /// `F(S ∪ g) − F(S)`.
    pub fn marginal_gain(&self, g: usize) -> Result<f64> {
        self.check_candidate(g)?;
        let gain = self.raw_gain(g);
        Ok(match self.fault {
            Fault::None => gain,
            Fault::FlipGainSign => -gain,
        })
    }

    fn raw_gain(&self, g: usize) -> f64 {
        let members = self.problem.groups.members(g);
        let tol = self.problem.tol;
        if let [j] = members {
            let rr = norm_sq(&self.resid[*j]);
            if rr <= (tol * self.norms[*j]).powi(2) || rr == 0.0 {
                return 0.0;
            }
            return norm_sq(&self.m[*j]) / rr;
        }
        let block: Vec<Vec<f64>> = members.iter().map(|&j| self.resid[j].clone()).collect();
        let refs: Vec<f64> = members.iter().map(|&j| self.norms[j]).collect();
        let cb = orthonormalize_columns(&block, &refs, tol);
        // Qᵀ E = C⁻ᵀ R_S(B_K)ᵀ E = C⁻ᵀ M_K, by forward substitution.
        let out = self.e.len();
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(cb.rank());
        let mut gain = 0.0;
        for (t, &pos) in cb.kept.iter().enumerate() {
            let mut zt = self.m[members[pos]].clone();
            for (s, zs) in z.iter().enumerate() {
                axpy(&mut zt, -cb.r[t][s], zs);
            }
            let d = cb.r[t][t];
            for v in zt.iter_mut().take(out) {
                *v /= d;
            }
            gain += norm_sq(&zt);
            z.push(zt);
        }
        gain
    }

    /// Adds group `g` to `S`, returning the gain that was added to the value.
    #[allow(clippy::needless_range_loop)]
    pub fn apply_selection(&mut self, g: usize) -> Result<f64> {
        let gain = self.marginal_gain(g)?;
        let members = self.problem.groups.members(g).to_vec();
        let block: Vec<Vec<f64>> = members.iter().map(|&j| self.resid[j].clone()).collect();
        let refs: Vec<f64> = members.iter().map(|&j| self.norms[j]).collect();
        let cb = orthonormalize_columns(&block, &refs, self.problem.tol);
        let kept_cols: Vec<usize> = cb.kept.iter().map(|&p| members[p]).collect();

        for &j in &members {
            self.col_selected[j] = true;
        }
        self.group_selected[g] = true;
        self.selected.push(g);
        self.selected_cols.extend(&members);

        if cb.rank() > 0 {
            // Directions `e_k − x^S(b_k)` for the kept block columns, before update.
            let n = self.problem.n_cols();
            let dirs: Vec<Vec<f64>> = kept_cols
                .iter()
                .map(|&k| {
                    let mut d: Vec<f64> = self.basis_coeffs[k].iter().map(|v| -v).collect();
                    d[k] += 1.0;
                    d
                })
                .collect();
            let update = |coef: &mut Vec<f64>, c: &[f64], sel: &[usize]| {
                let gamma = cb.solve_r(c);
                for (gt, d) in gamma.iter().zip(&dirs) {
                    for &i in sel {
                        coef[i] += gt * d[i];
                    }
                }
            };
            let sel_cols = self.selected_cols.clone();

            let mut proj: Vec<Vec<f64>> = vec![Vec::new(); n];
            for j in 0..n {
                if self.col_selected[j] {
                    continue;
                }
                let c: Vec<f64> = cb.q.iter().map(|q| dot(q, &self.resid[j])).collect();
                for (q, ct) in cb.q.iter().zip(&c) {
                    axpy(&mut self.resid[j], -ct, q);
                }
                update(&mut self.basis_coeffs[j], &c, &sel_cols);
                proj[j] = c;
            }
            let qe: Vec<Vec<f64>> =
                cb.q.iter()
                    .map(|q| self.e.iter().map(|ec| dot(q, ec)).collect())
                    .collect();
            for (ec, o) in self.e.iter_mut().zip(0..) {
                for (q, qet) in cb.q.iter().zip(&qe) {
                    axpy(ec, -qet[o], q);
                }
            }
            // M[j] -= Σ_t (q_tᵀ b_j)(q_tᵀ E)
            for (mj, c) in self.m.iter_mut().zip(&proj) {
                for (ct, qet) in c.iter().zip(&qe) {
                    axpy(mj, -ct, qet);
                }
            }
            if let Some(tc) = self.target_coeffs.as_mut() {
                let targets = self.problem.target_columns();
                for (j, t) in targets.iter().enumerate() {
                    let c: Vec<f64> = cb.q.iter().map(|q| dot(q, t)).collect();
                    update(&mut tc[j], &c, &sel_cols);
                }
            }
        }

        self.value += gain;
        if self.selected.len().is_multiple_of(REFRESH_INTERVAL) {
            self.refresh();
        }
        Ok(gain)
    }

    /// Recomputes residuals, `E`, `M` and coefficients from the selected columns.
    /// The value is left as the running sum of gains.
    pub fn refresh(&mut self) {
        let p = self.problem;
        let sel: Vec<Vec<f64>> = self.selected_cols.iter().map(|&j| p.basis[j].clone()).collect();
        let refs: Vec<f64> = self.selected_cols.iter().map(|&j| self.norms[j]).collect();
        let cb = orthonormalize_columns(&sel, &refs, p.tol);
        let n = p.n_cols();
        let scatter = |c: &[f64]| {
            let mut x = vec![0.0; n];
            for (pos, gv) in cb.kept.iter().zip(cb.solve_r(c)) {
                x[self.selected_cols[*pos]] = gv;
            }
            x
        };
        let mut e = p.target_product_columns();
        for ec in e.iter_mut() {
            for q in &cb.q {
                let c = dot(q, ec);
                axpy(ec, -c, q);
            }
        }
        for j in 0..n {
            if self.col_selected[j] {
                continue;
            }
            let c: Vec<f64> = cb.q.iter().map(|q| dot(q, &p.basis[j])).collect();
            let mut r = p.basis[j].clone();
            for (q, ct) in cb.q.iter().zip(&c) {
                axpy(&mut r, -ct, q);
            }
            self.m[j] = e.iter().map(|ec| dot(&r, ec)).collect();
            self.resid[j] = r;
            self.basis_coeffs[j] = scatter(&c);
        }
        if let Some(tc) = self.target_coeffs.as_mut() {
            for (j, t) in p.target_columns().iter().enumerate() {
                let c: Vec<f64> = cb.q.iter().map(|q| dot(q, t)).collect();
                tc[j] = scatter(&c);
            }
        }
        self.e = e;
    }

    /// Coefficient table `X` with column `j` = `x^S(t_j)`. In symmetric mode a
    /// selected column is represented by itself.
    pub fn coefficients(&self) -> Matrix {
        let n = self.problem.n_cols();
        let mut x = Matrix::zeros(n, n);
        for j in 0..n {
            let col: std::borrow::Cow<[f64]> = match &self.target_coeffs {
                Some(tc) => (&tc[j][..]).into(),
                None if self.col_selected[j] => {
                    let mut e = vec![0.0; n];
                    e[j] = 1.0;
                    e.into()
                }
                None => (&self.basis_coeffs[j][..]).into(),
            };
            for &i in &self.selected_cols {
                x.set(i, j, col[i]);
            }
        }
        x
    }

    /// `W̃ = X^S W`; rows outside `M(S)` are exactly zero.
    pub fn reweighted_weights(&self) -> Matrix {
        let w = &self.problem.weights;
        let n = self.problem.n_cols();
        let mut out = Matrix::zeros(n, w.cols());
        let sym = self.target_coeffs.is_none();
        for j in 0..n {
            let wj = w.row(j);
            if sym && self.col_selected[j] {
                axpy(out.row_mut(j), 1.0, wj);
                continue;
            }
            let coef = match &self.target_coeffs {
                Some(tc) => &tc[j],
                None => &self.basis_coeffs[j],
            };
            for &i in &self.selected_cols {
                if coef[i] != 0.0 {
                    axpy(out.row_mut(i), coef[i], wj);
                }
            }
        }
        out
    }
}
