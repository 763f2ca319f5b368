use std::f64::consts::PI;
use std::sync::Arc;

use faer::Mat;
use stokes_els::els::{DenseSolver, DirectSolver};
use stokes_els::geometry::*;
use stokes_els::linalg::*;
use stokes_els::nystrom::*;

fn circle(n_panels: usize) -> Arc<Discretization> {
    Arc::new(panelize(&ParametricCurve::circle([0.0, 0.0], 1.0), n_panels, 16).unwrap())
}

fn dense_solve(sys: &BieSystem, g: &[f64]) -> Vec<f64> {
    DenseSolver::new(sys.dense()).unwrap().solve(g).unwrap()
}

fn interior_targets(n: usize, r: f64) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / n as f64 + 0.3;
            let rr = r * (0.3 + 0.7 * ((i * 7) % n) as f64 / n as f64);
            [rr * t.cos(), rr * t.sin()]
        })
        .collect()
}

/// Mean relative interior error for data generated by exterior Stokeslets.
fn manufactured_error(disc: Arc<Discretization>, targets: &[Point]) -> f64 {
    let sys = BieSystem::assemble(disc.clone(), Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let src = ring_sources([0.0, 0.0], 3.0, 5, 0.1);
    let bd = BoundaryData::from_stokeslets(&disc, &src, 1.0).unwrap();
    let tau = dense_solve(&sys, &bd.g);
    let ev = evaluate_solution(&sys, &tau, targets, false).unwrap();
    let exact: Vec<[f64; 2]> = targets.iter().map(|x| stokeslet_velocity(&src, *x, 1.0).unwrap()).collect();
    mean_relative_error(&ev.velocity, &exact)
}

#[test]
fn single_stokeslet_reproduced_inside_circle() {
    let disc = circle(10);
    let sys = BieSystem::assemble(disc.clone(), Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let src = [StokesletSource {
        position: [3.0, 0.0],
        strength: [1.0, 0.5],
    }];
    let bd = BoundaryData::from_stokeslets(&disc, &src, 1.0).unwrap();
    let tau = dense_solve(&sys, &bd.g);
    let x = [0.2, 0.1];
    let ev = evaluate_solution(&sys, &tau, &[x], false).unwrap();
    let exact = stokeslet_velocity(&src, x, 1.0).unwrap();
    assert!(mean_relative_error(&ev.velocity, &[exact]) <= 1e-10);
}

#[test]
fn twenty_interior_targets_on_circle() {
    let e = manufactured_error(circle(10), &interior_targets(20, 0.5));
    assert!(e <= 1e-10, "error {e:e}");
}

#[test]
fn star_error_drops_with_panel_doubling() {
    let star = ParametricCurve::star([0.0, 0.0], 1.0, 5, 0.3);
    let targets = interior_targets(20, 0.4);
    let errs: Vec<f64> = [10, 20, 40]
        .iter()
        .map(|&n| manufactured_error(Arc::new(panelize(&star, n, 16).unwrap()), &targets))
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= 1e-12 || w[1] * 10.0 <= w[0], "errors {errs:?}");
    }
    assert!(errs[2] < 1e-10, "errors {errs:?}");
}

#[test]
fn boundary_data_satisfies_consistency() {
    let disc = Arc::new(panelize(&ParametricCurve::star([0.0, 0.0], 1.0, 3, 0.35), 40, 16).unwrap());
    let bd = BoundaryData::from_stokeslets(&disc, &ring_sources([0.0, 0.0], 3.0, 5, 0.0), 1.0).unwrap();
    assert!(bd.net_flux(&disc).abs() <= 1e-10 * norm2(&bd.g));
}

#[test]
fn exterior_combined_is_well_posed() {
    let disc = Arc::new(panelize_with_role(&ParametricCurve::circle([0.0, 0.0], 1.0), Role::Obstacle, 10, 16).unwrap());
    let sys = BieSystem::assemble(disc.clone(), Formulation::ExteriorCombined, 1.0).unwrap();
    let s = singular_values(sys.dense().as_ref()).unwrap();
    assert!(*s.last().unwrap() > 1e-3, "sigma_min {}", s.last().unwrap());

    // field of sources inside the obstacle, reproduced outside
    let src = ring_sources([0.05, 0.0], 0.3, 3, 0.1);
    let bd = BoundaryData::from_stokeslets(&disc, &src, 1.0).unwrap();
    let tau = dense_solve(&sys, &bd.g);
    let targets = [[2.2, 0.1], [-1.3, 2.4], [0.5, -3.2]];
    let ev = evaluate_solution(&sys, &tau, &targets, false).unwrap();
    let exact: Vec<[f64; 2]> = targets.iter().map(|x| stokeslet_velocity(&src, *x, 1.0).unwrap()).collect();
    assert!(mean_relative_error(&ev.velocity, &exact) <= 1e-9);
}

#[test]
fn assembly_is_deterministic() {
    let disc = circle(8);
    let a = BieSystem::assemble(disc.clone(), Formulation::InteriorDlPlusNull, 1.0).unwrap().dense();
    let b = BieSystem::assemble(disc, Formulation::InteriorDlPlusNull, 1.0).unwrap().dense();
    assert!(a == b);
}

#[test]
fn double_layer_alone_has_rank_one_nullspace() {
    let disc = circle(10);
    let bare = BieSystem::assemble(disc.clone(), Formulation::InteriorDl, 1.0).unwrap().dense();
    let svd = bare.thin_svd().unwrap();
    let s = svd.S().column_vector();
    let n = s.nrows();
    assert!(s[n - 1] / s[0] <= 1e-8);
    assert!(s[n - 2] / s[0] > 1e-3);
    let v = svd.V().col(n - 1);
    let normal: Vec<f64> = disc.normals.iter().flat_map(|n| *n).collect();
    let cos = (0..2 * disc.len()).map(|i| v[i] * normal[i]).sum::<f64>() / norm2(&normal);
    assert!(cos.abs() >= 0.999, "cos {cos}");

    let full = BieSystem::assemble(disc, Formulation::InteriorDlPlusNull, 1.0).unwrap().dense();
    let sf = singular_values(full.as_ref()).unwrap();
    assert!(*sf.last().unwrap() > 1e3 * s[n - 1]);
}

#[test]
fn nullspace_on_star() {
    let disc = Arc::new(panelize(&ParametricCurve::star([0.0, 0.0], 1.0, 3, 0.35), 20, 16).unwrap());
    let a = BieSystem::assemble(disc, Formulation::InteriorDl, 1.0).unwrap().dense();
    let s = singular_values(a.as_ref()).unwrap();
    assert!(s.last().unwrap() / s[0] <= 1e-8);
}

#[test]
fn zero_density_gives_zero_field() {
    let disc = circle(10);
    let sys = BieSystem::assemble(disc, Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let ev = evaluate_solution(&sys, &vec![0.0; sys.n_dofs()], &[[0.1, 0.2], [0.0, -0.5]], true).unwrap();
    assert!(ev.velocity.iter().flatten().all(|v| *v == 0.0));
    assert!(ev.pressure.unwrap().iter().all(|p| *p == 0.0));
}

#[test]
fn near_boundary_targets_flagged() {
    let disc = circle(40);
    let sys = BieSystem::assemble(disc, Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let ev = evaluate_solution(&sys, &vec![1.0; sys.n_dofs()], &[[0.0, 0.0], [0.95, 0.0]], false).unwrap();
    assert_eq!(ev.too_close, vec![false, true]);
    assert!(evaluate_solution(&sys, &[1.0; 4], &[[0.0, 0.0]], false).is_err());
}

#[test]
fn evaluated_pressure_balances_viscous_term() {
    let disc = circle(10);
    let mu = 1.0;
    let sys = BieSystem::assemble(disc.clone(), Formulation::InteriorDlPlusNull, mu).unwrap();
    let src = ring_sources([0.0, 0.0], 3.0, 5, 0.1);
    let bd = BoundaryData::from_stokeslets(&disc, &src, mu).unwrap();
    let tau = dense_solve(&sys, &bd.g);
    let h = 1e-3;
    let x = [0.1, -0.15];
    let pts = [x, [x[0] + h, x[1]], [x[0] - h, x[1]], [x[0], x[1] + h], [x[0], x[1] - h]];
    let ev = evaluate_solution(&sys, &tau, &pts, true).unwrap();
    let u = &ev.velocity;
    let p = ev.pressure.unwrap();
    let grad = [(p[1] - p[2]) / (2.0 * h), (p[3] - p[4]) / (2.0 * h)];
    for c in 0..2 {
        let lap = (u[1][c] + u[2][c] + u[3][c] + u[4][c] - 4.0 * u[0][c]) / (h * h);
        assert!((mu * lap - grad[c]).abs() <= 1e-6, "component {c}: {} vs {}", mu * lap, grad[c]);
    }
    // and the pressure matches the generating field up to a constant
    let exact: Vec<f64> = pts.iter().map(|x| stokeslet_pressure(&src, *x).unwrap()).collect();
    let shift = p[0] - exact[0];
    assert!(p.iter().zip(&exact).all(|(a, b)| (a - b - shift).abs() < 1e-8));
}

#[test]
fn blocks_reassemble_old_and_new_matrices() {
    let old = circle(10);
    let (new, plan) = refine(&old, &[2, 7], 3).unwrap();
    let so = BieSystem::assemble(old, Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let sn = BieSystem::assemble(Arc::new(new), Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let b = assemble_blocks(&so, &sn, &plan).unwrap();
    let ao = so.dense();
    let an = sn.dense();

    let ok = node_dofs(&plan.kept_old);
    let c = node_dofs(&plan.cut);
    let kn = node_dofs(&plan.kept_new);
    let p = node_dofs(&plan.added);
    let check = |blk: &Mat<f64>, full: &Mat<f64>, r: &[usize], cc: &[usize]| {
        assert_eq!((blk.nrows(), blk.ncols()), (r.len(), cc.len()));
        for (i, &ri) in r.iter().enumerate() {
            for (j, &cj) in cc.iter().enumerate() {
                assert_eq!(blk[(i, j)].to_bits(), full[(ri, cj)].to_bits());
            }
        }
    };
    check(&b.kk, &ao, &ok, &ok);
    check(&b.kc, &ao, &ok, &c);
    check(&b.ck, &ao, &c, &ok);
    check(&b.cc, &ao, &c, &c);
    check(&b.kk, &an, &kn, &kn);
    check(&b.kp, &an, &kn, &p);
    check(&b.pk, &an, &p, &kn);
    check(&b.pp, &an, &p, &p);
    assert_eq!(ok.len() + c.len(), ao.nrows());
    assert_eq!(kn.len() + p.len(), an.nrows());
}

#[test]
fn identity_plan_blocks() {
    let disc = circle(6);
    let sys = BieSystem::assemble(disc.clone(), Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let b = assemble_blocks(&sys, &sys, &RefinementPlan::identity(disc.len())).unwrap();
    assert!(b.kk == sys.dense());
    assert_eq!(b.kc.ncols() + b.ck.nrows() + b.cc.nrows() + b.kp.ncols() + b.pk.nrows() + b.pp.nrows(), 0);
}

#[test]
fn fish_block_sizes() {
    let old = Arc::new(panelize(&ParametricCurve::star([0.0, 0.0], 1.0, 3, 0.35), 200, 16).unwrap());
    let (new, plan) = refine(&old, &(40..48).collect::<Vec<_>>(), 8).unwrap();
    let so = BieSystem::assemble(old, Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let sn = BieSystem::assemble(Arc::new(new), Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let eb = ExtendedBlocks::new(so, sn, plan).unwrap();
    let (_, r, c) = eb.index_sets(BlockKind::Kp);
    assert_eq!((r.len(), c.len()), (2 * 3072, 2 * 1024));
}

#[test]
fn mismatched_formulation_rejected() {
    let disc = circle(6);
    assert!(BieSystem::assemble(disc.clone(), Formulation::ExteriorCombined, 1.0).is_err());
    assert!(BieSystem::assemble(disc, Formulation::InteriorDlPlusNull, -1.0).is_err());
}

#[test]
fn matrix_dump_roundtrip() {
    let a = Mat::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.25 - 1.0);
    let mut buf = Vec::new();
    write_matrix(&mut buf, &a).unwrap();
    assert_eq!(buf.len(), 8 + 15 * 8);
    let b = read_matrix(buf.as_slice()).unwrap();
    assert!(a == b);
}
