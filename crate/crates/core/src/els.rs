//! Extended linear system for local changes to a discretization.
//!
//! The refined system is embedded in a larger one whose block diagonal part
//! is the original matrix (plus the self interaction of the added nodes), so a
//! precomputed inverse of the original operator is reused. The remaining
//! couplings form a low-rank update handled by the Woodbury formula.
//!
//! Extended ordering: all old nodes in their old numbering (kept and cut, the
//! cut entries holding the dummy density), then the added nodes in plan order.

use std::sync::Arc;

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;
use log::debug;

use crate::error::{check_len, Error, Result};
use crate::geometry::{PlanKind, RefinementPlan};
use crate::hbs::{HbsOperator, HbsOptions};
use crate::linalg::{condition_number, matvec, matvec_t, power_norm, singular_values};
use crate::lowrank::LowRankUpdate;
use crate::nystrom::{BlockKind, ExtendedBlocks, SubSystem};

/// A square operator with a fast apply and a (possibly approximate) inverse.
pub trait DirectSolver: Send + Sync {
    fn n(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn apply_transpose(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>>;
    fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>>;

    fn solve_mat(&self, b: &Mat<f64>) -> Result<Mat<f64>> {
        let mut out = Mat::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let x = self.solve(b.col(j).try_as_col_major().unwrap().as_slice())?;
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}

impl DirectSolver for HbsOperator {
    fn n(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        HbsOperator::apply(self, x)
    }
    fn apply_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        HbsOperator::apply_transpose(self, x)
    }
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        HbsOperator::solve(self, b)
    }
    fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        HbsOperator::solve_transpose(self, b)
    }
    fn solve_mat(&self, b: &Mat<f64>) -> Result<Mat<f64>> {
        HbsOperator::solve_mat(self, b)
    }
}

/// Dense matrix with a partial-pivoting LU factorization.
pub struct DenseSolver {
    a: Mat<f64>,
    lu: Option<PartialPivLu<f64>>,
}

impl DenseSolver {
    /// Apply only; solves fail with [`Error::MissingInverse`].
    pub fn forward(a: Mat<f64>) -> Self {
        DenseSolver { a, lu: None }
    }

    pub fn new(a: Mat<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidInput(format!("dense solver needs a square matrix, got {}x{}", a.nrows(), a.ncols())));
        }
        let lu = a.partial_piv_lu();
        let u = lu.U();
        let d: Vec<f64> = (0..a.nrows()).map(|i| u[(i, i)].abs()).collect();
        let hi = d.iter().cloned().fold(0.0, f64::max);
        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
        if a.nrows() > 0 && !(lo > f64::EPSILON * hi) {
            return Err(Error::InvalidInput("dense block is numerically singular".into()));
        }
        Ok(DenseSolver { a, lu: Some(lu) })
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.a
    }

    fn lu(&self) -> Result<&PartialPivLu<f64>> {
        self.lu.as_ref().ok_or(Error::MissingInverse)
    }
}

fn col_to_vec(m: &Mat<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

impl DirectSolver for DenseSolver {
    fn n(&self) -> usize {
        self.a.nrows()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("dense apply input", self.n(), x.len())?;
        Ok(matvec(self.a.as_ref(), x))
    }
    fn apply_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("dense apply input", self.n(), x.len())?;
        Ok(matvec_t(self.a.as_ref(), x))
    }
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("dense solve rhs", self.n(), b.len())?;
        Ok(col_to_vec(&self.lu()?.solve(Mat::from_fn(b.len(), 1, |i, _| b[i]))))
    }
    fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("dense solve rhs", self.n(), b.len())?;
        Ok(col_to_vec(&self.lu()?.solve_transpose(Mat::from_fn(b.len(), 1, |i, _| b[i]))))
    }
    fn solve_mat(&self, b: &Mat<f64>) -> Result<Mat<f64>> {
        check_len("dense solve rhs", self.n(), b.nrows())?;
        Ok(self.lu()?.solve(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ElsOptions {
    /// `A_pp` is factored densely up to this many dofs, compressed with HBS above.
    pub pp_dense_max_dofs: usize,
    /// Compression settings for a large `A_pp`.
    pub pp_hbs: HbsOptions,
}

impl Default for ElsOptions {
    fn default() -> Self {
        ElsOptions {
            pp_dense_max_dofs: 1024,
            pp_hbs: HbsOptions::default(),
        }
    }
}

impl ElsOptions {
    pub fn with_tol(tol: f64) -> Self {
        ElsOptions {
            pp_hbs: HbsOptions::with_tol(tol),
            ..Default::default()
        }
    }
}

/// Woodbury solver for the extended system `(Ã + L R) τ = g`.
pub struct ElsSolver {
    base: Arc<dyn DirectSolver>,
    pp: Option<Box<dyn DirectSolver>>,
    pub update: LowRankUpdate,
    /// `Ã⁻¹ L`.
    pub x: Mat<f64>,
    /// `I + R X`.
    pub w: Mat<f64>,
    w_lu: Option<PartialPivLu<f64>>,
    pub w_cond: f64,
    factored: bool,
    pub plan: RefinementPlan,
    n_old: usize,
}

/// Largest admissible condition number of the Woodbury operator.
pub fn woodbury_cond_limit() -> f64 {
    1.0 / f64::EPSILON.sqrt()
}

fn pp_operator(blocks: &ExtendedBlocks, opts: &ElsOptions, invert: bool) -> Result<Option<Box<dyn DirectSolver>>> {
    let n_p = 2 * blocks.plan.n_p();
    if n_p == 0 {
        return Ok(None);
    }
    if n_p <= opts.pp_dense_max_dofs {
        let a = blocks.dense(BlockKind::Pp);
        return Ok(Some(Box::new(if invert { DenseSolver::new(a)? } else { DenseSolver::forward(a) })));
    }
    let sub = SubSystem {
        sys: &blocks.new,
        nodes: blocks.plan.added.clone(),
    };
    let mut h = HbsOperator::compress(&sub, opts.pp_hbs)?;
    if invert {
        h.invert()?;
    }
    Ok(Some(Box::new(h)))
}

fn check_shapes(base: &dyn DirectSolver, plan: &RefinementPlan, update: &LowRankUpdate) -> Result<()> {
    check_len("original solver size", 2 * plan.n_old, base.n())?;
    check_len("update size", 2 * plan.n_ext(), update.n_ext_dofs)?;
    check_len("update factor shapes", update.l.ncols(), update.r.nrows())
}

/// Forward operator `Ã + L R` only; `base` need not have an inverse.
pub fn els_build_forward(base: Arc<dyn DirectSolver>, blocks: &ExtendedBlocks, update: LowRankUpdate, opts: &ElsOptions) -> Result<ElsSolver> {
    let plan = blocks.plan.clone();
    check_shapes(base.as_ref(), &plan, &update)?;
    let pp = pp_operator(blocks, opts, false)?;
    Ok(ElsSolver {
        base,
        pp,
        update,
        x: Mat::zeros(0, 0),
        w: Mat::zeros(0, 0),
        w_lu: None,
        w_cond: f64::NAN,
        factored: false,
        n_old: 2 * plan.n_old,
        plan,
    })
}

/// Precompute `X = Ã⁻¹ L` and factor `W = I + R X`.
///
/// `base` must apply and invert the original system matrix; its cost is not
/// part of this build.
pub fn els_build(base: Arc<dyn DirectSolver>, blocks: &ExtendedBlocks, update: LowRankUpdate, opts: &ElsOptions) -> Result<ElsSolver> {
    let plan = blocks.plan.clone();
    check_shapes(base.as_ref(), &plan, &update)?;
    let n_old = 2 * plan.n_old;
    let n_p = 2 * plan.n_p();
    let pp = pp_operator(blocks, opts, true)?;
    let k = update.rank();
    let mut x = Mat::zeros(n_old + n_p, k);
    if k > 0 {
        let lo = update.l.as_ref().submatrix(0, 0, n_old, k).to_owned();
        x.as_mut().submatrix_mut(0, 0, n_old, k).copy_from(&base.solve_mat(&lo)?);
        if let Some(pp) = &pp {
            let lp = update.l.as_ref().submatrix(n_old, 0, n_p, k).to_owned();
            x.as_mut().submatrix_mut(n_old, 0, n_p, k).copy_from(&pp.solve_mat(&lp)?);
        }
    }
    let w = Mat::<f64>::identity(k, k) + &update.r * &x;
    let (w_lu, w_cond) = if k == 0 {
        (None, 1.0)
    } else {
        let cond = condition_number(w.as_ref())?;
        if !(cond <= woodbury_cond_limit()) {
            return Err(Error::WoodburySingular { cond });
        }
        (Some(w.partial_piv_lu()), cond)
    };
    debug!("els build: k = {k}, cond(W) = {w_cond:.3e}");
    Ok(ElsSolver {
        base,
        pp,
        update,
        x,
        w,
        w_lu,
        w_cond,
        factored: true,
        plan,
        n_old,
    })
}

/// As [`els_build`] for a plan that only adds holes (no cut nodes).
pub fn els_build_holes(base: Arc<dyn DirectSolver>, blocks: &ExtendedBlocks, update: LowRankUpdate, opts: &ElsOptions) -> Result<ElsSolver> {
    let plan = &blocks.plan;
    if !(plan.kind == PlanKind::AddHoles || plan.is_identity()) || !plan.cut.is_empty() {
        return Err(Error::InvalidInput("hole update needs a plan from add_holes".into()));
    }
    els_build(base, blocks, update, opts)
}

impl ElsSolver {
    pub fn n_ext_dofs(&self) -> usize {
        self.update.n_ext_dofs
    }

    pub fn n_new_dofs(&self) -> usize {
        2 * self.plan.n_new
    }

    pub fn rank(&self) -> usize {
        self.update.rank()
    }

    /// Whether the Woodbury factors exist (solves are available).
    pub fn is_factored(&self) -> bool {
        self.factored
    }

    /// Scatter a refined-discretization vector into extended ordering, zero on the cut nodes.
    pub fn to_extended(&self, v_new: &[f64]) -> Result<Vec<f64>> {
        check_len("refined vector", self.n_new_dofs(), v_new.len())?;
        let mut v = vec![0.0; self.n_ext_dofs()];
        for (&o, &n) in self.plan.kept_old.iter().zip(&self.plan.kept_new) {
            v[2 * o] = v_new[2 * n];
            v[2 * o + 1] = v_new[2 * n + 1];
        }
        for (t, &n) in self.plan.added.iter().enumerate() {
            v[self.n_old + 2 * t] = v_new[2 * n];
            v[self.n_old + 2 * t + 1] = v_new[2 * n + 1];
        }
        Ok(v)
    }

    /// Gather the kept and added entries of an extended vector, dropping the dummy block.
    pub fn from_extended(&self, v_ext: &[f64]) -> Result<Vec<f64>> {
        check_len("extended vector", self.n_ext_dofs(), v_ext.len())?;
        let mut v = vec![0.0; self.n_new_dofs()];
        for (&o, &n) in self.plan.kept_old.iter().zip(&self.plan.kept_new) {
            v[2 * n] = v_ext[2 * o];
            v[2 * n + 1] = v_ext[2 * o + 1];
        }
        for (t, &n) in self.plan.added.iter().enumerate() {
            v[2 * n] = v_ext[self.n_old + 2 * t];
            v[2 * n + 1] = v_ext[self.n_old + 2 * t + 1];
        }
        Ok(v)
    }

    fn tilde(&self, v: &[f64], op: impl Fn(&dyn DirectSolver, &[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
        check_len("extended vector", self.n_ext_dofs(), v.len())?;
        let mut out = op(self.base.as_ref(), &v[..self.n_old])?;
        if let Some(pp) = &self.pp {
            out.extend(op(pp.as_ref(), &v[self.n_old..])?);
        }
        Ok(out)
    }

    /// `Ã⁻¹ v`.
    pub fn tilde_solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.tilde(v, |s, x| s.solve(x))
    }

    /// `Ã v`.
    pub fn tilde_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.tilde(v, |s, x| s.apply(x))
    }

    fn w_solve(&self, y: Vec<f64>) -> Vec<f64> {
        match &self.w_lu {
            Some(lu) => col_to_vec(&lu.solve(Mat::from_fn(y.len(), 1, |i, _| y[i]))),
            None => y,
        }
    }

    fn w_solve_transpose(&self, y: Vec<f64>) -> Vec<f64> {
        match &self.w_lu {
            Some(lu) => col_to_vec(&lu.solve_transpose(Mat::from_fn(y.len(), 1, |i, _| y[i]))),
            None => y,
        }
    }

    /// Solve the extended system; the result includes the dummy density on cut nodes.
    pub fn solve_extended(&self, g_ext: &[f64]) -> Result<Vec<f64>> {
        if !self.factored {
            return Err(Error::MissingInverse);
        }
        let mut y = self.tilde_solve(g_ext)?;
        if self.rank() > 0 {
            let z = self.w_solve(matvec(self.update.r.as_ref(), &y));
            let xz = matvec(self.x.as_ref(), &z);
            y.iter_mut().zip(xz).for_each(|(a, b)| *a -= b);
        }
        Ok(y)
    }

    /// Solve `(Ãᵀ + Rᵀ Lᵀ) τ = g` in extended ordering.
    pub fn solve_extended_transpose(&self, g_ext: &[f64]) -> Result<Vec<f64>> {
        if !self.factored {
            return Err(Error::MissingInverse);
        }
        let mut z = self.tilde(g_ext, |s, x| s.solve_transpose(x))?;
        if self.rank() > 0 {
            let t = self.w_solve_transpose(matvec_t(self.update.l.as_ref(), &z));
            let rt = matvec_t(self.update.r.as_ref(), &t);
            let corr = self.tilde(&rt, |s, x| s.solve_transpose(x))?;
            z.iter_mut().zip(corr).for_each(|(a, b)| *a -= b);
        }
        Ok(z)
    }

    /// Density on the refined discretization for boundary data `g_new`.
    pub fn solve(&self, g_new: &[f64]) -> Result<Vec<f64>> {
        let g = self.to_extended(g_new)?;
        self.from_extended(&self.solve_extended(&g)?)
    }

    /// `(Ã + L R) v` in extended ordering.
    pub fn apply_extended(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.tilde_apply(v)?;
        if self.rank() > 0 {
            out.iter_mut().zip(self.update.apply(v)).for_each(|(a, b)| *a += b);
        }
        Ok(out)
    }

    /// `(Ãᵀ + Rᵀ Lᵀ) v` in extended ordering.
    pub fn apply_extended_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.tilde(v, |s, x| s.apply_transpose(x))?;
        if self.rank() > 0 {
            let lt = matvec_t(self.update.l.as_ref(), v);
            out.iter_mut().zip(matvec_t(self.update.r.as_ref(), &lt)).for_each(|(a, b)| *a += b);
        }
        Ok(out)
    }
}

/// Condition diagnostics of a Woodbury solver.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ConditioningReport {
    pub kappa_w: f64,
    pub kappa_l: f64,
    pub kappa_r: f64,
    pub kappa_ext: f64,
    pub kappa_tilde: f64,
    /// `min(κ̂(L)², κ̂(R)²) κ(Â_ext) κ(Ã)`.
    pub bound: f64,
    /// Whether `κ(W)` was within the bound.
    pub bound_holds: bool,
    /// Whether the extended-matrix condition numbers came from dense SVDs.
    pub dense: bool,
}

fn kappa_hat(m: &Mat<f64>) -> Result<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(1.0);
    }
    condition_number(m.as_ref())
}

const POWER_ITERS: usize = 200;

fn power_cond(
    n: usize,
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    apply_t: &dyn Fn(&[f64]) -> Vec<f64>,
    solve: &dyn Fn(&[f64]) -> Vec<f64>,
    solve_t: &dyn Fn(&[f64]) -> Vec<f64>,
    seed: u64,
) -> f64 {
    power_norm(n, apply, apply_t, POWER_ITERS, seed) * power_norm(n, solve, solve_t, POWER_ITERS, seed ^ 1)
}

/// Condition numbers entering the Woodbury bound.
///
/// With `dense_oracles_allowed` the extended matrices are formed and their
/// condition numbers come from SVDs; otherwise both norms are estimated by
/// power iteration on the operator and its solve.
pub fn conditioning_report(solver: &ElsSolver, dense_oracles_allowed: bool) -> Result<ConditioningReport> {
    if !solver.factored {
        return Err(Error::MissingInverse);
    }
    let kappa_w = if solver.rank() == 0 { 1.0 } else { condition_number(solver.w.as_ref())? };
    let kappa_l = kappa_hat(&solver.update.l)?;
    let kappa_r = kappa_hat(&solver.update.r)?;
    let n = solver.n_ext_dofs();
    let (kappa_ext, kappa_tilde) = if dense_oracles_allowed {
        let mut tilde = Mat::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = solver.tilde_apply(&e)?;
            for (i, v) in col.into_iter().enumerate() {
                tilde[(i, j)] = v;
            }
        }
        let ext = &tilde + solver.update.dense();
        (condition_number(ext.as_ref())?, condition_number(tilde.as_ref())?)
    } else {
        let ok = |r: Result<Vec<f64>>| r.unwrap_or_else(|_| vec![f64::NAN; n]);
        let ext = power_cond(
            n,
            &|v| ok(solver.apply_extended(v)),
            &|v| ok(solver.apply_extended_transpose(v)),
            &|v| ok(solver.solve_extended(v)),
            &|v| ok(solver.solve_extended_transpose(v)),
            0xc0de,
        );
        let tilde = power_cond(
            n,
            &|v| ok(solver.tilde_apply(v)),
            &|v| ok(solver.tilde(v, |s, x| s.apply_transpose(x))),
            &|v| ok(solver.tilde_solve(v)),
            &|v| ok(solver.tilde(v, |s, x| s.solve_transpose(x))),
            0xc0de,
        );
        (ext, tilde)
    };
    let bound = (kappa_l * kappa_l).min(kappa_r * kappa_r) * kappa_ext * kappa_tilde;
    Ok(ConditioningReport {
        kappa_w,
        kappa_l,
        kappa_r,
        kappa_ext,
        kappa_tilde,
        bound,
        bound_holds: kappa_w <= bound * (1.0 + 1e-12),
        dense: dense_oracles_allowed,
    })
}

/// Singular values of the Woodbury operator, descending.
pub fn woodbury_spectrum(solver: &ElsSolver) -> Result<Vec<f64>> {
    singular_values(solver.w.as_ref())
}
