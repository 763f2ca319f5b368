use std::sync::Arc;

use faer::Mat;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stokes_els::geometry::*;
use stokes_els::linalg::*;
use stokes_els::lowrank::*;
use stokes_els::nystrom::*;
use stokes_els::Error;

const EPS: f64 = 1e-10;

fn spectral(a: &Mat<f64>) -> f64 {
    singular_values(a.as_ref()).unwrap().first().copied().unwrap_or(0.0)
}

fn id_error(w: &Mat<f64>, id: &IdResult) -> f64 {
    let skel = select_rows(w.as_ref(), id.skeleton());
    spectral(&(&id.p * &skel - w))
}

fn assert_identity_rows(id: &IdResult) {
    for (a, &row) in id.skeleton().iter().enumerate() {
        for b in 0..id.rank {
            assert_eq!(id.p[(row, b)], if a == b { 1.0 } else { 0.0 });
        }
    }
}

/// `U diag(s) Vᵀ` with random orthonormal factors.
fn with_spectrum(m: usize, n: usize, s: &[f64], seed: u64) -> Mat<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = gaussian(m, s.len(), &mut rng).qr().compute_thin_Q();
    let v = gaussian(n, s.len(), &mut rng).qr().compute_thin_Q();
    let us = Mat::from_fn(m, s.len(), |i, j| u[(i, j)] * s[j]);
    us * v.transpose()
}

#[test]
fn rank_one_outer_product() {
    let w = Mat::from_fn(30, 20, |i, j| (1.0 + i as f64) * (0.5 - j as f64));
    let id = row_id(w.as_ref(), EPS);
    assert_eq!(id.rank, 1);
    assert_identity_rows(&id);
    assert!(id_error(&w, &id) <= 10.0 * EPS * spectral(&w));
}

#[test]
fn identity_gives_full_rank_permutation() {
    let w = Mat::<f64>::identity(12, 12);
    let id = row_id(w.as_ref(), EPS);
    assert_eq!(id.rank, 12);
    let mut seen = id.skeleton().to_vec();
    seen.sort_unstable();
    assert_eq!(seen, (0..12).collect::<Vec<_>>());
    assert_identity_rows(&id);
}

#[test]
fn geometric_spectrum_rank() {
    let s: Vec<f64> = (0..100).map(|j| 0.5f64.powi(j)).collect();
    let w = with_spectrum(200, 100, &s, 7);
    let expect = s.iter().filter(|&&v| v / s[0] > EPS).count() as i64;
    let id = row_id(w.as_ref(), EPS);
    assert!((id.rank as i64 - expect).abs() <= 2, "rank {} vs {expect}", id.rank);
    assert!(id_error(&w, &id) <= 10.0 * EPS * spectral(&w));
}

#[test]
fn looser_tolerance_gives_smaller_rank() {
    let s: Vec<f64> = (0..60).map(|j| 0.6f64.powi(j)).collect();
    let w = with_spectrum(80, 60, &s, 3);
    let ranks: Vec<usize> = [1e-12, 1e-8, 1e-4].iter().map(|&t| row_id(w.as_ref(), t).rank).collect();
    assert!(ranks[0] > ranks[1] && ranks[1] > ranks[2], "{ranks:?}");
}

#[test]
fn column_id_mirrors_row_id() {
    let s: Vec<f64> = (0..20).map(|j| 0.3f64.powi(j)).collect();
    let w = with_spectrum(40, 30, &s, 11);
    let c = col_id(w.as_ref(), EPS);
    let r = row_id(w.transpose(), EPS);
    assert_eq!(c.rank, r.rank);
    assert_eq!(c.skeleton(), r.skeleton());
}

struct Segment {
    blocks: ExtendedBlocks,
    proxy: ProxyGeometry,
}

fn star_segment(n_panels: usize, panels: &[usize], m: usize) -> Segment {
    let old = Arc::new(panelize(&ParametricCurve::star([0.0, 0.0], 1.0, 3, 0.35), n_panels, 16).unwrap());
    let (new, plan) = refine(&old, panels, m).unwrap();
    let pts: Vec<Point> = plan.cut.iter().map(|&i| old.nodes[i]).collect();
    let proxy = ProxyGeometry::around(&pts, 64).unwrap();
    let so = BieSystem::assemble(old, Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let sn = BieSystem::assemble(Arc::new(new), Formulation::InteriorDlPlusNull, 1.0).unwrap();
    Segment {
        blocks: ExtendedBlocks::new(so, sn, plan).unwrap(),
        proxy,
    }
}

fn far_rows(seg: &Segment) -> Vec<usize> {
    let d = seg.blocks.new.discretization();
    node_dofs(&seg.blocks.plan.kept_new.iter().copied().filter(|&i| seg.proxy.is_far(d.nodes[i])).collect::<Vec<_>>())
}

#[test]
fn proxy_radii_and_containment() {
    let seg = star_segment(40, &[5, 6], 4);
    let p = &seg.proxy;
    assert!((p.r_bas - 1.5 * p.r0).abs() < 1e-14 && (p.r_div - 3.0 * p.r0).abs() < 1e-14);
    let d = seg.blocks.new.discretization();
    assert!(seg.blocks.plan.added.iter().all(|&i| dist(d.nodes[i], p.center) < p.r_bas));
    let bad = ProxyGeometry { r_bas: 0.5 * p.r0, ..p.clone() };
    let pts: Vec<Point> = seg.blocks.plan.added.iter().map(|&i| d.nodes[i]).collect();
    assert!(matches!(bad.validate(&pts), Err(Error::ProxyViolation(_))));
}

#[test]
fn far_compression_matches_dense_block() {
    let seg = star_segment(40, &[5, 6], 4);
    let rows = far_rows(&seg);
    let sys = &seg.blocks.new;
    for kind in [PartitionKind::DyadicByDistance, PartitionKind::BinaryByIndex] {
        let id = compress_block_far(sys, &rows, &seg.proxy, kind, 32, EPS).unwrap();
        assert_identity_rows(&id);
        let a = sys.block(&rows, &seg.blocks.p);
        assert!(id_error(&a, &id) <= 10.0 * EPS * spectral(&a), "{kind:?}");
    }
}

#[test]
fn far_rank_stable_under_proxy_doubling() {
    let seg = star_segment(40, &[5, 6], 4);
    let rows = far_rows(&seg);
    let rank = |n: usize| {
        let proxy = ProxyGeometry { n_proxy: n, ..seg.proxy.clone() };
        compress_block_far(&seg.blocks.new, &rows, &proxy, PartitionKind::DyadicByDistance, 128, EPS).unwrap().rank
    };
    let (a, b) = (rank(64), rank(128));
    assert!(a.abs_diff(b) <= 2, "{a} vs {b}");
}

#[test]
fn far_compression_edge_cases() {
    let seg = star_segment(40, &[5, 6], 4);
    let id = compress_block_far(&seg.blocks.new, &[], &seg.proxy, PartitionKind::DyadicByDistance, 32, EPS).unwrap();
    assert_eq!(id.rank, 0);
    let near: Vec<usize> = node_dofs(&seg.blocks.plan.added[..1]);
    let r = compress_block_far(&seg.blocks.new, &near, &seg.proxy, PartitionKind::DyadicByDistance, 32, EPS);
    assert!(matches!(r, Err(Error::ProxyViolation(_))));
}

#[test]
fn dyadic_leaves_partition_items() {
    let seg = star_segment(40, &[5, 6], 4);
    let d = seg.blocks.new.discretization();
    let pos: Vec<Point> = d.nodes.iter().copied().filter(|x| seg.proxy.is_far(*x)).collect();
    let t = PartitionTree::dyadic(&pos, seg.proxy.center, seg.proxy.r_div, 16);
    let mut all: Vec<usize> = t.leaves().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..pos.len()).collect::<Vec<_>>());
    assert!(t.leaves().all(|l| l.len() <= 16));
    let b = PartitionTree::binary(100, 16);
    let mut all: Vec<usize> = b.leaves().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
}

fn relative_update_error(blocks: &ExtendedBlocks, u: &LowRankUpdate) -> f64 {
    let q = dense_update(blocks);
    spectral(&(u.dense() - &q)) / spectral(&q)
}

#[test]
fn update_matches_dense_q_on_small_instance() {
    let seg = star_segment(10, &[3], 4);
    for mode in [UpdateMode::TwoStepId, UpdateMode::SvdOptimal] {
        let u = compress_update(&seg.blocks, &LowRankOptions { mode, ..Default::default() }).unwrap();
        let e = relative_update_error(&seg.blocks, &u);
        assert!(e <= 10.0 * EPS, "{mode:?}: {e:e}");
    }
}

#[test]
fn update_matches_dense_q_without_reid() {
    let seg = star_segment(40, &[5, 6], 4);
    let opts = LowRankOptions {
        reid_concat: false,
        ..Default::default()
    };
    let u = compress_update(&seg.blocks, &opts).unwrap();
    assert!(relative_update_error(&seg.blocks, &u) <= 10.0 * EPS);
}

#[test]
fn two_step_update_structure() {
    let seg = star_segment(40, &[5, 6], 4);
    let u = compress_update(&seg.blocks, &LowRankOptions::default()).unwrap();
    assert!(relative_update_error(&seg.blocks, &u) <= 10.0 * EPS);
    assert!(u.rank() < u.k1(), "k {} k1 {}", u.rank(), u.k1());
    assert_eq!(u.l.ncols(), u.r.nrows());
    assert_eq!(u.l.nrows(), 2 * seg.blocks.plan.n_ext());

    // rows of L contain an identity
    for j in 0..u.rank() {
        let hit = (0..u.l.nrows()).any(|i| (0..u.rank()).all(|c| u.l[(i, c)] == if c == j { 1.0 } else { 0.0 }));
        assert!(hit, "no identity row for column {j}");
    }
    let sl = singular_values(u.l.as_ref()).unwrap();
    let sr = singular_values(u.r.as_ref()).unwrap();
    assert!(*sl.last().unwrap() > 0.0 && *sr.last().unwrap() > 0.0, "L {:?} R {:?}", &sl[sl.len() - 3..], &sr[sr.len() - 3..]);
}

#[test]
fn svd_rank_not_above_two_step_rank() {
    let seg = star_segment(40, &[5, 6], 4);
    let two = compress_update(&seg.blocks, &LowRankOptions::default()).unwrap();
    let svd = compress_update(
        &seg.blocks,
        &LowRankOptions {
            mode: UpdateMode::SvdOptimal,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(svd.rank() <= two.rank());
    assert!(two.rank() as f64 <= 1.5 * svd.rank() as f64, "two-step {} svd {}", two.rank(), svd.rank());
}

#[test]
fn identity_plan_has_empty_update() {
    let disc = Arc::new(panelize(&ParametricCurve::circle([0.0, 0.0], 1.0), 10, 16).unwrap());
    let sys = BieSystem::assemble(disc.clone(), Formulation::InteriorDlPlusNull, 1.0).unwrap();
    let eb = ExtendedBlocks::new(sys.clone(), sys, RefinementPlan::identity(disc.len())).unwrap();
    let u = compress_update(&eb, &LowRankOptions::default()).unwrap();
    assert_eq!((u.rank(), u.k1()), (0, 0));
    assert_eq!(u.l.nrows(), disc.n_dofs());
}

#[test]
fn update_is_deterministic() {
    let seg = star_segment(20, &[4], 4);
    let a = compress_update(&seg.blocks, &LowRankOptions::default()).unwrap();
    let b = compress_update(&seg.blocks, &LowRankOptions::default()).unwrap();
    assert!(a.l == b.l && a.r == b.r);
}

fn low_rank_plus_noise() -> impl Strategy<Value = (Mat<f64>, f64)> {
    (5usize..40, 5usize..40, 1usize..12, any::<u64>(), 6i32..12).prop_map(|(m, n, k, seed, e)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(m, k, &mut rng) * gaussian(k, n, &mut rng);
        let noise = gaussian(m, n, &mut rng);
        let w = a + noise * faer::Scale(10f64.powi(-e - 2));
        (w, 10f64.powi(-e))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn id_contract_holds((w, tol) in low_rank_plus_noise()) {
        let id = row_id(w.as_ref(), tol);
        for (a, &row) in id.skeleton().iter().enumerate() {
            for b in 0..id.rank {
                prop_assert_eq!(id.p[(row, b)], if a == b { 1.0 } else { 0.0 });
            }
        }
        prop_assert!(id_error(&w, &id) <= 10.0 * tol * spectral(&w));
    }
}
