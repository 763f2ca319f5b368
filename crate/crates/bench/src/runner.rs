use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde::Serialize;
use stokes_els::els::{conditioning_report, els_build, els_build_forward, ConditioningReport, DirectSolver, ElsOptions, ElsSolver};
use stokes_els::geometry::{add_holes, dist, refine, Discretization, PlanKind, Point, RefinementPlan};
use stokes_els::hbs::{HbsOperator, HbsOptions};
use stokes_els::krylov::{gmres, GmresConfig, GmresOutput};
use stokes_els::lowrank::{compress_update, LowRankOptions, LowRankUpdate};
use stokes_els::nystrom::{
    evaluate_solution, mean_relative_error, stokeslet_velocity, BieSystem, BoundaryData, ExtendedBlocks, Formulation,
    StokesletSource,
};

use crate::scenario::{Action, Scenario, Strategy, TargetSpec, Tolerances};
use crate::BenchError;

/// Extended systems up to this many dofs get dense conditioning diagnostics.
const DENSE_DIAGNOSTICS_MAX: usize = 3000;

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub strategy: String,
    pub snapshot: Option<usize>,
    pub n_k: usize,
    pub n_c: usize,
    pub n_p: usize,
    pub k: Option<usize>,
    pub k_kc: Option<usize>,
    pub k_kp: Option<usize>,
    pub k_pk: Option<usize>,
    pub t_comp: Option<f64>,
    pub t_inv: Option<f64>,
    pub t_dsol: Option<f64>,
    pub t_gsol: Option<f64>,
    pub t_pgsol: Option<f64>,
    /// Preconditioner construction on top of the forward operator.
    pub t_pre: Option<f64>,
    pub t_static: Option<f64>,
    pub t_osol: Option<f64>,
    pub t_rsol: Option<f64>,
    pub n_iter: Option<usize>,
    /// Unpreconditioned count when a preconditioned solve was also run.
    pub n_iter_unprec: Option<usize>,
    /// Solves needed before the preconditioner pays for itself.
    pub min_sol: Option<u64>,
    pub e: f64,
    pub conditioning: Option<ConditioningReport>,
}

impl RunReport {
    fn new(s: &Scenario) -> Self {
        RunReport {
            scenario: s.name.clone(),
            strategy: s.strategy.name().to_string(),
            ..Default::default()
        }
    }

    fn set_plan(&mut self, plan: &RefinementPlan) {
        self.n_k = plan.n_k();
        self.n_c = plan.n_c();
        self.n_p = plan.n_p();
    }

    fn set_update(&mut self, u: &LowRankUpdate) {
        self.k = Some(u.rank());
        self.k_kc = Some(u.k_kc);
        self.k_kp = Some(u.k_kp);
        self.k_pk = Some(u.k_pk);
    }

    fn set_min_sol(&mut self) {
        if let (Some(pre), Some(g), Some(pg)) = (self.t_pre, self.t_gsol, self.t_pgsol) {
            if g > pg {
                self.min_sol = Some((pre / (g - pg)).ceil() as u64);
            }
        }
    }
}

/// Per-strategy summary of a snapshot batch.
#[derive(Clone, Debug, Serialize)]
pub struct BatchSummary {
    pub scenario: String,
    pub strategy: String,
    pub t_static: f64,
    /// Mean over snapshots without refinement.
    pub t_osol: Option<f64>,
    /// Mean over refined snapshots.
    pub t_rsol: Option<f64>,
    pub n_osol: usize,
    pub n_rsol: usize,
    pub max_e: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BatchReport {
    pub reports: Vec<RunReport>,
    pub summary: BatchSummary,
}

trait Context<T> {
    fn ctx(self, s: &Scenario) -> Result<T, BenchError>;
}

impl<T> Context<T> for stokes_els::Result<T> {
    fn ctx(self, s: &Scenario) -> Result<T, BenchError> {
        self.map_err(|source| BenchError::Solver {
            scenario: s.name.clone(),
            source,
        })
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

/// Time a repeatable phase; sub-second phases take the median of three runs.
fn timed_median<T>(mut f: impl FnMut() -> stokes_els::Result<T>) -> stokes_els::Result<(T, f64)> {
    let (out, t0) = timed(&mut f);
    let out = out?;
    if t0 >= 1.0 {
        return Ok((out, t0));
    }
    let mut times = vec![t0];
    for _ in 0..2 {
        let (r, t) = timed(&mut f);
        r?;
        times.push(t);
    }
    times.sort_by(f64::total_cmp);
    Ok((out, times[1]))
}

/// Shared problem data for one scenario.
struct Problem {
    disc: Arc<Discretization>,
    sys: BieSystem,
    sources: Vec<StokesletSource>,
    margin: f64,
}

impl Problem {
    fn new(s: &Scenario) -> Result<Self, BenchError> {
        let disc = Arc::new(s.geometry.discretize().ctx(s)?);
        let form = s.formulation.unwrap_or_else(|| Formulation::for_discretization(&disc));
        let sys = BieSystem::assemble(disc.clone(), form, s.mu).ctx(s)?;
        // one panel length keeps 16-point Gauss far below the target accuracy
        let size = disc.components.iter().map(|c| c.curve.sample(256)).map(|p| {
            let per: f64 = (0..p.len()).map(|i| dist(p[i], p[(i + 1) % p.len()])).sum();
            per / (2.0 * std::f64::consts::PI)
        });
        let margin = disc.max_panel_length().min(0.3 * size.fold(f64::INFINITY, f64::min));
        Ok(Problem {
            disc,
            sys,
            sources: s.sources(),
            margin,
        })
    }

    fn changed(&self, s: &Scenario, new: Discretization, plan: &RefinementPlan) -> Result<BieSystem, BenchError> {
        let form = if plan.kind == PlanKind::AddHoles {
            Formulation::for_discretization(&new)
        } else {
            self.sys.formulation
        };
        BieSystem::assemble(Arc::new(new), form, s.mu).ctx(s)
    }

    fn rhs(&self, s: &Scenario, sys: &BieSystem) -> Result<Vec<f64>, BenchError> {
        Ok(BoundaryData::from_stokeslets(&sys.disc, &self.sources, s.mu).ctx(s)?.g)
    }

    /// Mean relative velocity error at the scenario targets.
    fn error(&self, s: &Scenario, sys: &BieSystem, tau: &[f64]) -> Result<f64, BenchError> {
        let targets: Vec<Point> = match &s.targets {
            TargetSpec::Auto { count } => sys.disc.auto_targets(*count, self.margin),
            TargetSpec::Points(p) => p.clone(),
        };
        if targets.is_empty() {
            return Err(BenchError::Scenario(format!("{}: no admissible target points", s.name)));
        }
        let ev = evaluate_solution(sys, tau, &targets, false).ctx(s)?;
        let exact = targets
            .iter()
            .map(|&x| stokeslet_velocity(&self.sources, x, s.mu))
            .collect::<stokes_els::Result<Vec<_>>>()
            .ctx(s)?;
        Ok(mean_relative_error(&ev.velocity, &exact))
    }

    /// New discretization and plan for a one-off action.
    fn apply_action(&self, s: &Scenario) -> Result<Option<(BieSystem, RefinementPlan)>, BenchError> {
        let (new, plan) = match &s.action {
            Action::None => return Ok(None),
            Action::Refine(d) => refine(&self.disc, &d.panel_ids(&self.disc), d.m).ctx(s)?,
            Action::AddHoles(h) => add_holes(&self.disc, h).ctx(s)?,
            Action::Snapshots(_) => {
                return Err(BenchError::Scenario(format!("{}: snapshot scenarios run as a batch", s.name)));
            }
        };
        let sys = self.changed(s, new, &plan)?;
        Ok(Some((sys, plan)))
    }
}

fn hbs_opts(tol: f64) -> HbsOptions {
    HbsOptions::with_tol(tol)
}

fn gmres_cfg(t: &Tolerances) -> GmresConfig<'static> {
    GmresConfig {
        tol: t.gmres,
        max_iter: t.max_iter,
        ..Default::default()
    }
}

fn lowrank_opts(s: &Scenario, tol: f64) -> LowRankOptions {
    LowRankOptions {
        tol,
        mode: s.tolerances.update_mode,
        seed: s.seed ^ LowRankOptions::default().seed,
        ..Default::default()
    }
}

/// Operators built once on a fixed discretization.
struct Statics {
    fwd: Arc<HbsOperator>,
    /// Inverted operator used for solves or preconditioning (possibly `fwd` itself).
    inv: Option<Arc<HbsOperator>>,
    t_comp: f64,
    t_inv: f64,
    /// Extra time of a separately built preconditioner.
    t_pre: Option<f64>,
}

impl Statics {
    fn total(&self) -> f64 {
        self.t_comp + self.t_inv + self.t_pre.unwrap_or(0.0)
    }
}

fn build_statics(s: &Scenario, sys: &BieSystem, need_inverse: bool) -> Result<Statics, BenchError> {
    let t = &s.tolerances;
    let (h, t_comp) = timed(|| HbsOperator::compress(sys, hbs_opts(t.compress)));
    let mut h = h.ctx(s)?;
    let separate = need_inverse && t.precond.is_some_and(|p| p != t.compress) && s.strategy != Strategy::DirectHbs;
    let mut t_inv = 0.0;
    let mut t_pre = None;
    let inv = if !need_inverse {
        None
    } else if separate {
        let (p, tp) = timed(|| -> stokes_els::Result<HbsOperator> {
            let mut p = HbsOperator::compress(sys, hbs_opts(t.precond.unwrap()))?;
            p.invert()?;
            Ok(p)
        });
        t_pre = Some(tp);
        Some(Arc::new(p.ctx(s)?))
    } else {
        let (r, ti) = timed(|| h.invert());
        r.ctx(s)?;
        t_inv = ti;
        None
    };
    let fwd = Arc::new(h);
    let inv = inv.or_else(|| fwd.has_inverse().then(|| fwd.clone()));
    Ok(Statics {
        fwd,
        inv,
        t_comp,
        t_inv,
        t_pre,
    })
}

fn run_gmres(
    s: &Scenario,
    apply: &dyn Fn(&[f64]) -> stokes_els::Result<Vec<f64>>,
    b: &[f64],
    precond: Option<&dyn Fn(&[f64]) -> stokes_els::Result<Vec<f64>>>,
) -> Result<(GmresOutput, f64), BenchError> {
    let mut cfg = gmres_cfg(&s.tolerances);
    let p;
    if let Some(f) = precond {
        p = f;
        cfg = cfg.with_precond(&p);
    }
    let (out, t) = timed(|| gmres(apply, b, None, &cfg));
    Ok((out.ctx(s)?, t))
}

/// Solve on a fixed discretization with prebuilt operators; returns density and fills timings.
fn solve_static(s: &Scenario, st: &Statics, g: &[f64], rep: &mut RunReport) -> Result<(Vec<f64>, f64), BenchError> {
    let apply = |x: &[f64]| st.fwd.apply(x);
    match s.strategy {
        Strategy::DirectHbs | Strategy::DirectIndy | Strategy::DirectLocal => {
            let inv = st.inv.as_ref().expect("direct strategy without inverse");
            let (tau, t) = timed_median(|| inv.solve(g)).ctx(s)?;
            rep.t_dsol = Some(t);
            Ok((tau, t))
        }
        Strategy::GmresHbs | Strategy::GmresIndy | Strategy::GmresLocal => {
            let (out, t) = run_gmres(s, &apply, g, None)?;
            rep.t_gsol = Some(t);
            rep.n_iter = Some(out.n_iter);
            if let Some(inv) = &st.inv {
                let pre = |x: &[f64]| inv.solve(x);
                let (pout, pt) = run_gmres(s, &apply, g, Some(&pre))?;
                rep.t_pgsol = Some(pt);
                rep.n_iter_unprec = Some(out.n_iter);
                rep.n_iter = Some(pout.n_iter);
                return Ok((pout.x, pt));
            }
            Ok((out.x, t))
        }
        Strategy::PgmresLocal => {
            let inv = st.inv.as_ref().expect("preconditioned strategy without inverse");
            let pre = |x: &[f64]| inv.solve(x);
            let (out, t) = run_gmres(s, &apply, g, Some(&pre))?;
            rep.t_pgsol = Some(t);
            rep.n_iter = Some(out.n_iter);
            Ok((out.x, t))
        }
    }
}

/// ELS operators for one plan.
struct LocalSolver {
    /// Forward operator (and solver for Direct-Local).
    main: ElsSolver,
    /// Separate preconditioner for PGMRES-Local at a different accuracy.
    pre: Option<ElsSolver>,
}

fn build_local(s: &Scenario, st: &Statics, blocks: &ExtendedBlocks, rep: &mut RunReport) -> Result<LocalSolver, BenchError> {
    let t = &s.tolerances;
    let els_opts = ElsOptions::with_tol(t.compress);
    let (u, tu) = timed(|| compress_update(blocks, &lowrank_opts(s, t.lowrank)));
    let u = u.ctx(s)?;
    rep.set_update(&u);
    let fwd: Arc<dyn DirectSolver> = st.fwd.clone();
    match s.strategy {
        Strategy::GmresLocal => {
            let (m, tb) = timed(|| els_build_forward(fwd, blocks, u, &els_opts));
            rep.t_comp = Some(tu + tb);
            Ok(LocalSolver { main: m.ctx(s)?, pre: None })
        }
        Strategy::DirectLocal => {
            rep.t_comp = Some(tu);
            let (m, tb) = timed(|| els_build(fwd, blocks, u, &els_opts));
            rep.t_inv = Some(tb);
            Ok(LocalSolver { main: m.ctx(s)?, pre: None })
        }
        Strategy::PgmresLocal => {
            let inv = st.inv.clone().expect("preconditioned strategy without inverse");
            if Arc::ptr_eq(&inv, &st.fwd) {
                rep.t_comp = Some(tu);
                let (m, tb) = timed(|| els_build(fwd, blocks, u, &els_opts));
                rep.t_inv = Some(tb);
                rep.t_pre = Some(tb);
                return Ok(LocalSolver { main: m.ctx(s)?, pre: None });
            }
            let (m, tb) = timed(|| els_build_forward(fwd, blocks, u, &els_opts));
            rep.t_comp = Some(tu + tb);
            let ptol = t.precond.unwrap_or(t.compress);
            let (p, tp) = timed(|| -> stokes_els::Result<ElsSolver> {
                let up = compress_update(blocks, &lowrank_opts(s, ptol.max(t.lowrank)))?;
                let base: Arc<dyn DirectSolver> = inv;
                els_build(base, blocks, up, &ElsOptions::with_tol(ptol))
            });
            rep.t_inv = Some(tp);
            rep.t_pre = Some(tp);
            Ok(LocalSolver {
                main: m.ctx(s)?,
                pre: Some(p.ctx(s)?),
            })
        }
        _ => unreachable!("not a local strategy"),
    }
}

fn solve_local(s: &Scenario, ls: &LocalSolver, g_new: &[f64], rep: &mut RunReport) -> Result<(Vec<f64>, f64), BenchError> {
    let els = &ls.main;
    let g = els.to_extended(g_new).ctx(s)?;
    let apply = |x: &[f64]| els.apply_extended(x);
    let (tau_ext, t) = match s.strategy {
        Strategy::DirectLocal => {
            let (x, t) = timed_median(|| els.solve_extended(&g)).ctx(s)?;
            rep.t_dsol = Some(t);
            (x, t)
        }
        Strategy::GmresLocal => {
            let (out, t) = run_gmres(s, &apply, &g, None)?;
            rep.t_gsol = Some(t);
            rep.n_iter = Some(out.n_iter);
            (out.x, t)
        }
        Strategy::PgmresLocal => {
            let p = ls.pre.as_ref().unwrap_or(els);
            let pre = |x: &[f64]| p.solve_extended(x);
            let (out, t) = run_gmres(s, &apply, &g, Some(&pre))?;
            rep.t_pgsol = Some(t);
            rep.n_iter = Some(out.n_iter);
            (out.x, t)
        }
        _ => unreachable!("not a local strategy"),
    };
    Ok((els.from_extended(&tau_ext).ctx(s)?, t))
}

fn diagnostics(s: &Scenario, ls: &LocalSolver, rep: &mut RunReport) -> Result<(), BenchError> {
    let els = ls.pre.as_ref().unwrap_or(&ls.main);
    if s.diagnostics && els.is_factored() {
        rep.conditioning = Some(conditioning_report(els, els.n_ext_dofs() <= DENSE_DIAGNOSTICS_MAX).ctx(s)?);
    }
    Ok(())
}

/// Run a scenario with at most one geometric change.
pub fn run_scenario(s: &Scenario) -> Result<RunReport, BenchError> {
    s.validate()?;
    let prob = Problem::new(s)?;
    let mut rep = RunReport::new(s);
    let change = prob.apply_action(s)?;
    info!("{}: {} on {} dofs", s.name, s.strategy.name(), prob.sys.n_dofs());
    if !s.strategy.is_local() {
        // build everything on the final discretization
        let (sys, plan) = change.unwrap_or_else(|| (prob.sys.clone(), RefinementPlan::identity(prob.disc.len())));
        rep.set_plan(&plan);
        let need_inv = s.strategy.needs_inverse() || s.tolerances.precond.is_some();
        let st = build_statics(s, &sys, need_inv)?;
        rep.t_comp = Some(st.t_comp);
        rep.t_inv = st.t_pre.or(need_inv.then_some(st.t_inv));
        rep.t_pre = st.t_pre.or((s.tolerances.precond.is_some() && !s.strategy.needs_inverse()).then_some(st.t_inv));
        let g = prob.rhs(s, &sys)?;
        let (tau, _) = solve_static(s, &st, &g, &mut rep)?;
        rep.set_min_sol();
        rep.e = prob.error(s, &sys, &tau)?;
        return Ok(rep);
    }
    let (sys_new, plan) = change.expect("validated: local strategy has an action");
    rep.set_plan(&plan);
    let st = build_statics(s, &prob.sys, s.strategy.needs_inverse())?;
    rep.t_static = Some(st.total());
    let blocks = ExtendedBlocks::new(prob.sys.clone(), sys_new, plan).ctx(s)?;
    let ls = build_local(s, &st, &blocks, &mut rep)?;
    let g = prob.rhs(s, &blocks.new)?;
    let (tau, _) = solve_local(s, &ls, &g, &mut rep)?;
    rep.e = prob.error(s, &blocks.new, &tau)?;
    diagnostics(s, &ls, &mut rep)?;
    Ok(rep)
}

/// Run every snapshot of a scenario against one static precomputation.
///
/// Local strategies cache their solvers by refinement plan, so a repeated
/// plan only pays for the solve.
pub fn run_snapshot_batch(s: &Scenario) -> Result<BatchReport, BenchError> {
    s.validate()?;
    let Action::Snapshots(snaps) = &s.action else {
        return Err(BenchError::Scenario(format!("{}: not a snapshot scenario", s.name)));
    };
    let prob = Problem::new(s)?;
    let need_inv = s.strategy.needs_inverse();
    let st = build_statics(s, &prob.sys, need_inv)?;
    let t_static = st.total();
    let g_old = prob.rhs(s, &prob.sys)?;
    let mut cache: HashMap<(Vec<usize>, usize), Arc<(LocalSolver, ExtendedBlocks)>> = HashMap::new();
    let mut reports = Vec::new();
    for (idx, snap) in snaps.list.iter().enumerate() {
        let mut rep = RunReport::new(s);
        rep.snapshot = Some(idx);
        rep.t_static = Some(t_static);
        let mut panels = snaps.panels(snap, &prob.disc);
        panels.sort_unstable();
        panels.dedup();
        if panels.is_empty() {
            rep.set_plan(&RefinementPlan::identity(prob.disc.len()));
            let (tau, t) = solve_static(s, &st, &g_old, &mut rep)?;
            rep.t_osol = Some(t);
            rep.e = prob.error(s, &prob.sys, &tau)?;
            reports.push(rep);
            continue;
        }
        let m = snaps.split(snap);
        let start = Instant::now();
        if s.strategy.is_local() {
            let key = (panels.clone(), m);
            let entry = match cache.get(&key) {
                Some(e) => e.clone(),
                None => {
                    let (new, plan) = refine(&prob.disc, &panels, m).ctx(s)?;
                    let sys_new = prob.changed(s, new, &plan)?;
                    let blocks = ExtendedBlocks::new(prob.sys.clone(), sys_new, plan).ctx(s)?;
                    let ls = build_local(s, &st, &blocks, &mut rep)?;
                    let e = Arc::new((ls, blocks));
                    cache.insert(key, e.clone());
                    e
                }
            };
            let (ls, blocks) = (&entry.0, &entry.1);
            rep.set_plan(&blocks.plan);
            rep.set_update(&ls.main.update);
            let g = prob.rhs(s, &blocks.new)?;
            let (tau, _) = solve_local(s, ls, &g, &mut rep)?;
            rep.t_rsol = Some(start.elapsed().as_secs_f64());
            rep.e = prob.error(s, &blocks.new, &tau)?;
            diagnostics(s, ls, &mut rep)?;
        } else {
            let (new, plan) = refine(&prob.disc, &panels, m).ctx(s)?;
            rep.set_plan(&plan);
            let sys_new = prob.changed(s, new, &plan)?;
            let own = build_statics(s, &sys_new, need_inv)?;
            rep.t_comp = Some(own.t_comp);
            rep.t_inv = need_inv.then_some(own.t_inv);
            let g = prob.rhs(s, &sys_new)?;
            let (tau, _) = solve_static(s, &own, &g, &mut rep)?;
            rep.t_rsol = Some(start.elapsed().as_secs_f64());
            rep.e = prob.error(s, &sys_new, &tau)?;
        }
        reports.push(rep);
    }
    let mean = |f: &dyn Fn(&RunReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let summary = BatchSummary {
        scenario: s.name.clone(),
        strategy: s.strategy.name().to_string(),
        t_static,
        t_osol: mean(&|r| r.t_osol),
        t_rsol: mean(&|r| r.t_rsol),
        n_osol: reports.iter().filter(|r| r.t_osol.is_some()).count(),
        n_rsol: reports.iter().filter(|r| r.t_rsol.is_some()).count(),
        max_e: reports.iter().map(|r| r.e).fold(0.0, f64::max),
    };
    Ok(BatchReport { reports, summary })
}

/// Dispatch on the action: snapshot scenarios run as a batch.
pub fn run_any(s: &Scenario) -> Result<(Vec<RunReport>, Option<BatchSummary>), BenchError> {
    if matches!(s.action, Action::Snapshots(_)) {
        let b = run_snapshot_batch(s)?;
        Ok((b.reports, Some(b.summary)))
    } else {
        Ok((vec![run_scenario(s)?], None))
    }
}
