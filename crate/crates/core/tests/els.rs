use std::sync::Arc;

use faer::Mat;
use stokes_els::els::*;
use stokes_els::geometry::*;
use stokes_els::hbs::{HbsOperator, HbsOptions};
use stokes_els::linalg::*;
use stokes_els::lowrank::*;
use stokes_els::nystrom::*;

const EPS: f64 = 1e-10;

struct Case {
    blocks: ExtendedBlocks,
    base: Arc<dyn DirectSolver>,
}

fn base_solver(sys: &BieSystem) -> Arc<dyn DirectSolver> {
    let mut h = HbsOperator::compress(sys, HbsOptions::with_tol(EPS)).unwrap();
    h.invert().unwrap();
    Arc::new(h)
}

fn refine_case(curve: ParametricCurve, n_panels: usize, panels: &[usize], m: usize) -> Case {
    let old = Arc::new(panelize(&curve, n_panels, 16).unwrap());
    let (new, plan) = refine(&old, panels, m).unwrap();
    let so = BieSystem::assemble(old, Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let sn = BieSystem::assemble(Arc::new(new), Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let base = base_solver(&so);
    Case {
        blocks: ExtendedBlocks::new(so, sn, plan).unwrap(),
        base,
    }
}

fn holes_case(n_holes: usize) -> Case {
    let wall = ParametricCurve::circle([0.0, 0.0], 1.0);
    let old = Arc::new(panelize(&wall, 12, 16).unwrap());
    let holes: Vec<HoleSpec> = (0..n_holes)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n_holes.max(1) as f64;
            HoleSpec {
                curve: ParametricCurve::circle([0.5 * a.cos(), 0.5 * a.sin()], 0.15),
                n_panels: 10,
                q: 16,
            }
        })
        .collect();
    let (new, plan) = add_holes(&old, &holes).unwrap();
    let new = Arc::new(new);
    let so = BieSystem::assemble(old, Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let sn = BieSystem::assemble(new.clone(), Formulation::for_discretization(&new), 1.0).unwrap();
    let base = base_solver(&so);
    Case {
        blocks: ExtendedBlocks::new(so, sn, plan).unwrap(),
        base,
    }
}

fn build(case: &Case, mode: UpdateMode) -> ElsSolver {
    let opts = LowRankOptions {
        tol: EPS,
        mode,
        ..Default::default()
    };
    let u = compress_update(&case.blocks, &opts).unwrap();
    els_build(case.base.clone(), &case.blocks, u, &ElsOptions::with_tol(EPS)).unwrap()
}

fn test_vector(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&d) / norm2(b)
}

fn dense_solve(a: &Mat<f64>, b: &[f64]) -> Vec<f64> {
    DenseSolver::new(a.clone()).unwrap().solve(b).unwrap()
}

/// Dense extended matrix `Ã + Q`.
fn dense_extended(case: &Case) -> Mat<f64> {
    let b = &case.blocks;
    let n_old = b.old.n_dofs();
    let n_p = b.p.len();
    let mut a = dense_update(b);
    let aoo = b.old.dense();
    let app = b.dense(BlockKind::Pp);
    for j in 0..n_old {
        for i in 0..n_old {
            a[(i, j)] += aoo[(i, j)];
        }
    }
    for j in 0..n_p {
        for i in 0..n_p {
            a[(n_old + i, n_old + j)] += app[(i, j)];
        }
    }
    a
}

#[test]
fn small_refinement_matches_dense_solve() {
    let case = refine_case(ParametricCurve::star([0.0, 0.0], 1.0, 5, 0.3), 10, &[3], 4);
    let els = build(&case, UpdateMode::TwoStepId);
    let ann = case.blocks.new.dense();
    let g = test_vector(ann.nrows());
    let exact = dense_solve(&ann, &g);
    let tau = els.solve(&g).unwrap();
    let kappa = condition_number(ann.as_ref()).unwrap();
    let err = rel(&tau, &exact);
    assert!(err <= 1e-8, "error {err:e}");
    assert!(err <= 10.0 * EPS * kappa, "error {err:e} vs 10 eps kappa {:e}", 10.0 * EPS * kappa);
}

#[test]
fn dummy_density_satisfies_cut_rows() {
    let case = refine_case(ParametricCurve::star([0.0, 0.0], 1.0, 5, 0.3), 10, &[3], 4);
    let els = build(&case, UpdateMode::TwoStepId);
    let g = test_vector(els.n_new_dofs());
    let tau = els.solve_extended(&els.to_extended(&g).unwrap()).unwrap();
    let plan = &case.blocks.plan;
    let tk: Vec<f64> = node_dofs(&plan.kept_old).iter().map(|&d| tau[d]).collect();
    let tc: Vec<f64> = node_dofs(&plan.cut).iter().map(|&d| tau[d]).collect();
    let ck = matvec(case.blocks.dense(BlockKind::Ck).as_ref(), &tk);
    let cc = matvec(case.blocks.dense(BlockKind::Cc).as_ref(), &tc);
    let res: Vec<f64> = ck.iter().zip(&cc).map(|(a, b)| a + b).collect();
    assert!(norm2(&res) <= 10.0 * EPS * norm2(&ck) * 10.0, "residual {:e}", norm2(&res) / norm2(&ck));
}

#[test]
fn forward_apply_matches_dense_extended_matrix() {
    let case = refine_case(ParametricCurve::star([0.0, 0.0], 1.0, 5, 0.3), 10, &[3], 4);
    let els = build(&case, UpdateMode::TwoStepId);
    let a = dense_extended(&case);
    let v = test_vector(els.n_ext_dofs());
    let y = els.apply_extended(&v).unwrap();
    let err = rel(&y, &matvec(a.as_ref(), &v));
    assert!(err <= 10.0 * EPS, "error {err:e}");
    assert!(els.apply_extended(&vec![0.0; v.len()]).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn forward_apply_is_linear() {
    let case = refine_case(ParametricCurve::circle([0.0, 0.0], 1.0), 10, &[0], 4);
    let els = build(&case, UpdateMode::TwoStepId);
    let n = els.n_ext_dofs();
    let u = test_vector(n);
    let v: Vec<f64> = (0..n).map(|i| ((i * 31) % 17) as f64 - 8.0).collect();
    let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
    let (au, av, aw) = (els.apply_extended(&u).unwrap(), els.apply_extended(&v).unwrap(), els.apply_extended(&w).unwrap());
    let comb: Vec<f64> = au.iter().zip(&av).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
    assert!(rel(&aw, &comb) < 1e-13);
}

#[test]
fn identity_plan_reduces_to_base_solve() {
    let disc = Arc::new(panelize(&ParametricCurve::circle([0.0, 0.0], 1.0), 10, 16).unwrap());
    let sys = BieSystem::assemble(disc.clone(), Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let case = Case {
        base: base_solver(&sys),
        blocks: ExtendedBlocks::new(sys.clone(), sys, RefinementPlan::identity(disc.len())).unwrap(),
    };
    let els = build(&case, UpdateMode::TwoStepId);
    assert_eq!(els.rank(), 0);
    assert_eq!(els.w.nrows(), 0);
    let g = test_vector(els.n_new_dofs());
    assert_eq!(els.solve(&g).unwrap(), case.base.solve(&g).unwrap());
    let rep = conditioning_report(&els, true).unwrap();
    assert_eq!(rep.kappa_w, 1.0);
    assert!(rep.bound_holds);
}

#[test]
fn rejects_wrong_rhs_length() {
    let case = refine_case(ParametricCurve::circle([0.0, 0.0], 1.0), 10, &[0], 4);
    let els = build(&case, UpdateMode::TwoStepId);
    assert!(els.solve(&[1.0; 3]).is_err());
    assert!(els.apply_extended(&[1.0; 3]).is_err());
}

#[test]
fn holes_match_dense_mixed_solve() {
    let case = holes_case(3);
    assert_eq!(case.blocks.plan.n_p(), 480);
    let u = compress_update(&case.blocks, &LowRankOptions::default()).unwrap();
    let els = els_build_holes(case.base.clone(), &case.blocks, u, &ElsOptions::with_tol(EPS)).unwrap();
    let ann = case.blocks.new.dense();
    let g = test_vector(ann.nrows());
    let err = rel(&els.solve(&g).unwrap(), &dense_solve(&ann, &g));
    assert!(err <= 1e-8, "error {err:e}");
}

#[test]
fn zero_holes_reduce_to_base_solve() {
    let case = holes_case(0);
    let u = compress_update(&case.blocks, &LowRankOptions::default()).unwrap();
    let els = els_build_holes(case.base.clone(), &case.blocks, u, &ElsOptions::default()).unwrap();
    let g = test_vector(els.n_new_dofs());
    assert_eq!(els.solve(&g).unwrap(), case.base.solve(&g).unwrap());
}

#[test]
fn hole_update_is_less_local_than_refinement() {
    let holes = holes_case(3);
    let hu = compress_update(&holes.blocks, &LowRankOptions::default()).unwrap();
    // comparable number of added points on one refined segment
    let refined = refine_case(ParametricCurve::star([0.0, 0.0], 1.0, 5, 0.3), 40, &[3, 4], 15);
    assert!(refined.blocks.plan.n_p() >= 480);
    let ru = compress_update(&refined.blocks, &LowRankOptions::default()).unwrap();
    assert!(hu.rank() > ru.rank(), "holes {} vs refinement {}", hu.rank(), ru.rank());
}

#[test]
fn conditioning_bound_holds_densely() {
    let case = refine_case(ParametricCurve::star([0.0, 0.0], 1.0, 3, 0.35), 20, &[4, 5], 4);
    let two = conditioning_report(&build(&case, UpdateMode::TwoStepId), true).unwrap();
    let svd = conditioning_report(&build(&case, UpdateMode::SvdOptimal), true).unwrap();
    for r in [&two, &svd] {
        assert!(r.bound_holds, "{r:?}");
        assert!(r.kappa_w >= 1.0);
    }
    let ratio = two.kappa_w / svd.kappa_w;
    assert!((0.01..=100.0).contains(&ratio), "{two:?} {svd:?}");
}

#[test]
fn power_estimates_agree_with_dense() {
    let case = refine_case(ParametricCurve::star([0.0, 0.0], 1.0, 3, 0.35), 12, &[2], 4);
    let els = build(&case, UpdateMode::TwoStepId);
    let d = conditioning_report(&els, true).unwrap();
    let p = conditioning_report(&els, false).unwrap();
    assert!((p.kappa_ext / d.kappa_ext - 1.0).abs() < 0.05, "{d:?} {p:?}");
    assert!((p.kappa_tilde / d.kappa_tilde - 1.0).abs() < 0.05, "{d:?} {p:?}");
}

#[test]
fn transpose_solve_inverts_transpose_apply() {
    let case = refine_case(ParametricCurve::star([0.0, 0.0], 1.0, 5, 0.3), 10, &[3], 4);
    let els = build(&case, UpdateMode::TwoStepId);
    let v = test_vector(els.n_ext_dofs());
    let y = els.apply_extended_transpose(&v).unwrap();
    assert!(rel(&els.solve_extended_transpose(&y).unwrap(), &v) < 1e-9);
    let y = els.apply_extended(&v).unwrap();
    assert!(rel(&els.solve_extended(&y).unwrap(), &v) < 1e-9);
}

#[test]
fn forward_only_build_applies_but_cannot_solve() {
    let case = refine_case(ParametricCurve::circle([0.0, 0.0], 1.0), 10, &[0], 4);
    let full = build(&case, UpdateMode::TwoStepId);
    let fwd = els_build_forward(case.base.clone(), &case.blocks, full.update.clone(), &ElsOptions::default()).unwrap();
    let v = test_vector(full.n_ext_dofs());
    assert!(rel(&fwd.apply_extended(&v).unwrap(), &full.apply_extended(&v).unwrap()) < 1e-14);
    assert!(fwd.solve_extended(&v).is_err());
}
