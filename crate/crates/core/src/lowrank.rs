//! Low-rank factorization of the update matrix of an extended linear system.
//!
//! Every nonzero block of the update is compressed by row IDs: far-field rows
//! against proxy sources on a circle around the changed boundary piece,
//! near-field rows against nearby columns plus proxy circles local to each
//! tree node. The blockwise factors are
//! then recompressed by a randomized row ID of `L₁`, which keeps the final
//! factors in interpolative form and the Woodbury operator well conditioned.

use faer::Mat;
use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, Point, RefinementPlan};
use crate::hbs::bounding_circle;
use crate::linalg::{gaussian, hstack, matvec, matvec_t, power_norm, row_id_with, select_rows, truncated_svd, IdOptions, IdResult};
use crate::nystrom::{BieSystem, ExtendedBlocks, Ring};

/// Concentric proxy circles around a changed boundary piece.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyGeometry {
    pub center: Point,
    /// Radius of the smallest circle about `center` containing the piece.
    pub r0: f64,
    /// Basis (shielding) circle.
    pub r_bas: f64,
    /// Division circle separating near and far nodes.
    pub r_div: f64,
    pub n_proxy: usize,
}

impl ProxyGeometry {
    /// Circles about the centroid of `points` with radii `1.5 r₀` and `3 r₀`.
    pub fn around(points: &[Point], n_proxy: usize) -> Result<Self> {
        Self::with_ratios(points, n_proxy, 1.5, 3.0)
    }

    pub fn with_ratios(points: &[Point], n_proxy: usize, bas: f64, div: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("proxy geometry needs at least one point".into()));
        }
        let n = points.len() as f64;
        let center = [
            points.iter().map(|p| p[0]).sum::<f64>() / n,
            points.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let r0 = points.iter().map(|p| dist(*p, center)).fold(0.0, f64::max).max(1e-12);
        let g = ProxyGeometry {
            center,
            r0,
            r_bas: bas * r0,
            r_div: div * r0,
            n_proxy,
        };
        g.validate(points)?;
        Ok(g)
    }

    pub fn validate(&self, gamma_r: &[Point]) -> Result<()> {
        if !(self.r_bas < self.r_div) || self.n_proxy < 8 {
            return Err(Error::ProxyViolation(format!(
                "need r_bas < r_div and n_proxy >= 8 (got {}, {}, {})",
                self.r_bas, self.r_div, self.n_proxy
            )));
        }
        if let Some(p) = gamma_r.iter().find(|p| dist(**p, self.center) >= self.r_bas) {
            return Err(Error::ProxyViolation(format!("point {p:?} of the changed piece lies outside the basis circle")));
        }
        Ok(())
    }

    pub fn bas_ring(&self) -> Ring {
        let r = Ring::new(self.center, self.r_bas, self.n_proxy);
        let w = r.weight;
        r.with_null_scale(w)
    }

    pub fn div_ring(&self) -> Ring {
        let r = Ring::new(self.center, self.r_div, self.n_proxy);
        let w = r.weight;
        r.with_null_scale(w)
    }

    pub fn is_far(&self, x: Point) -> bool {
        dist(x, self.center) >= self.r_div
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    DyadicByDistance,
    BinaryByIndex,
}

/// Binary merge tree over leaves of item positions.
#[derive(Clone, Debug)]
pub struct PartitionTree {
    pub kind: PartitionKind,
    /// Per node: item positions covered, and children (empty for leaves).
    pub nodes: Vec<(Vec<usize>, Vec<usize>)>,
    pub root: Option<usize>,
    pub depth: usize,
}

impl PartitionTree {
    /// Leaves are chunks of at most `leaf_size` items inside distance bands `[r 2^b, r 2^(b+1))`.
    pub fn dyadic(positions: &[Point], center: Point, r_start: f64, leaf_size: usize) -> Self {
        let band = |p: Point| {
            let d = dist(p, center) / r_start;
            if d < 1.0 {
                0
            } else {
                d.log2().floor() as usize + 1
            }
        };
        let mut order: Vec<usize> = (0..positions.len()).collect();
        order.sort_by_key(|&i| (band(positions[i]), i));
        let mut leaves: Vec<Vec<usize>> = Vec::new();
        let mut cur_band = usize::MAX;
        for i in order {
            let b = band(positions[i]);
            let full = leaves.last().map(|l| l.len() >= leaf_size.max(1)).unwrap_or(true);
            if b != cur_band || full {
                leaves.push(Vec::new());
                cur_band = b;
            }
            leaves.last_mut().unwrap().push(i);
        }
        Self::from_leaves(PartitionKind::DyadicByDistance, leaves)
    }

    pub fn binary(n: usize, leaf_size: usize) -> Self {
        let leaves: Vec<Vec<usize>> = (0..n)
            .collect::<Vec<_>>()
            .chunks(leaf_size.max(1))
            .map(|c| c.to_vec())
            .collect();
        Self::from_leaves(PartitionKind::BinaryByIndex, leaves)
    }

    fn from_leaves(kind: PartitionKind, leaves: Vec<Vec<usize>>) -> Self {
        let mut nodes: Vec<(Vec<usize>, Vec<usize>)> = leaves.into_iter().map(|l| (l, Vec::new())).collect();
        let mut level: Vec<usize> = (0..nodes.len()).collect();
        let mut depth = 0;
        while level.len() > 1 {
            let mut next = Vec::new();
            for pair in level.chunks(2) {
                if pair.len() == 1 {
                    next.push(pair[0]);
                    continue;
                }
                let items = [nodes[pair[0]].0.clone(), nodes[pair[1]].0.clone()].concat();
                nodes.push((items, pair.to_vec()));
                next.push(nodes.len() - 1);
            }
            level = next;
            depth += 1;
        }
        PartitionTree {
            kind,
            root: level.first().copied(),
            nodes,
            depth,
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.nodes.iter().filter(|n| n.1.is_empty()).map(|n| &n.0)
    }
}

/// ID computed bottom-up over a partition tree.
///
/// `build(rows)` returns the matrix whose rows (given as item positions) are compressed.
/// Leaves are compressed directly, parents compress the union of child skeletons.
fn tree_row_id(tree: &PartitionTree, n_items: usize, tol: f64, build: &dyn Fn(&[usize]) -> Mat<f64>) -> IdResult {
    let Some(root) = tree.root else {
        return IdResult::empty(n_items, tol);
    };
    // per node: (rows covered, skeleton rows, interpolation rows × k)
    let mut res: Vec<Option<(Vec<usize>, Vec<usize>, Mat<f64>)>> = vec![None; tree.nodes.len()];
    for t in 0..tree.nodes.len() {
        let (items, children) = &tree.nodes[t];
        if children.is_empty() {
            let m = build(items);
            let id = row_id_with(m.as_ref(), IdOptions::tol(tol));
            let skel = id.skeleton().iter().map(|&i| items[i]).collect();
            res[t] = Some((items.clone(), skel, id.p));
        } else {
            let parts: Vec<_> = children.iter().map(|&c| res[c].take().unwrap()).collect();
            let cand: Vec<usize> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
            let m = build(&cand);
            let id = row_id_with(m.as_ref(), IdOptions::tol(tol));
            let k = id.rank;
            let rows: Vec<usize> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
            let mut p = Mat::zeros(rows.len(), k);
            let (mut r0, mut c0) = (0, 0);
            for (_, skel, pc) in &parts {
                let sub = id.p.as_ref().subrows(c0, skel.len());
                let prod = pc * sub;
                p.as_mut().submatrix_mut(r0, 0, pc.nrows(), k).copy_from(&prod);
                r0 += pc.nrows();
                c0 += skel.len();
            }
            let skel = id.skeleton().iter().map(|&i| cand[i]).collect();
            res[t] = Some((rows, skel, p));
        }
    }
    let (rows, skel, p) = res[root].take().unwrap();
    // reorder to item positions
    let k = skel.len();
    let mut full = Mat::zeros(n_items, k);
    for (r, &item) in rows.iter().enumerate() {
        for j in 0..k {
            full[(item, j)] = p[(r, j)];
        }
    }
    // exact identity on skeleton rows
    for (j, &s) in skel.iter().enumerate() {
        for jj in 0..k {
            full[(s, jj)] = if jj == j { 1.0 } else { 0.0 };
        }
    }
    let mut in_skel = vec![false; n_items];
    skel.iter().for_each(|&s| in_skel[s] = true);
    let mut perm = skel.clone();
    perm.extend((0..n_items).filter(|&i| !in_skel[i]));
    IdResult {
        perm,
        rank: k,
        p: full,
        tol,
    }
}

fn nodes_of_dofs(dofs: &[usize]) -> Vec<usize> {
    dofs.iter().step_by(2).map(|d| d / 2).collect()
}

/// Row ID of far-field rows (system dofs, node-interleaved) against proxy sources on the basis circle.
pub fn compress_block_far(
    sys: &BieSystem,
    far_rows: &[usize],
    proxy: &ProxyGeometry,
    kind: PartitionKind,
    leaf_size: usize,
    tol: f64,
) -> Result<IdResult> {
    if far_rows.is_empty() {
        return Ok(IdResult::empty(0, tol));
    }
    let d = sys.discretization();
    let nodes = nodes_of_dofs(far_rows);
    if let Some(&i) = nodes.iter().find(|&&i| !proxy.is_far(d.nodes[i])) {
        return Err(Error::ProxyViolation(format!("far node {i} lies inside the division circle")));
    }
    let ring = proxy.bas_ring();
    let positions: Vec<Point> = nodes.iter().map(|&i| d.nodes[i]).collect();
    let tree = node_tree(kind, &positions, proxy, leaf_size);
    let build = |rows: &[usize]| {
        let r: Vec<usize> = rows.iter().map(|&i| far_rows[i]).collect();
        sys.proxy_sources(&r, &ring)
    };
    Ok(tree_row_id(&tree, far_rows.len(), tol, &build))
}

/// Row ID of the added rows of `A_pk` against every kept column `k_cols`.
pub fn compress_pk(
    sys: &BieSystem,
    p_rows: &[usize],
    k_cols: &[usize],
    proxy: &ProxyGeometry,
    leaf_size: usize,
    tol: f64,
) -> Result<IdResult> {
    if p_rows.is_empty() {
        return Ok(IdResult::empty(0, tol));
    }
    let d = sys.discretization();
    if let Some(&i) = nodes_of_dofs(p_rows).iter().find(|&&i| dist(d.nodes[i], proxy.center) >= proxy.r_bas) {
        return Err(Error::ProxyViolation(format!("added node {i} lies outside the basis circle")));
    }
    Ok(compress_block_local(sys, p_rows, k_cols, proxy.n_proxy, leaf_size, tol))
}

/// Row ID of `A(rows, cols)` with proxy circles local to each tree node.
///
/// A row set is compressed against the columns inside a circle around it
/// plus proxy sources on that circle, which stand in for every column
/// outside. The circle clears the panels adjacent to the rows, so columns
/// carrying close-panel corrections are always explicit. Nodes where this
/// would be wider than the true block use the true block. Rows should be
/// ordered along the boundary.
pub fn compress_block_local(
    sys: &BieSystem,
    rows: &[usize],
    cols: &[usize],
    n_proxy: usize,
    leaf_size: usize,
    tol: f64,
) -> IdResult {
    if rows.is_empty() {
        return IdResult::empty(0, tol);
    }
    if cols.is_empty() {
        return IdResult::empty(rows.len(), tol);
    }
    let d = sys.discretization();
    let col_nodes = nodes_of_dofs(cols);
    let local_h = |i: usize| {
        let p = d.node_panel[i];
        let (a, b) = d.panel_neighbors(p);
        d.panel_length(p).max(d.panel_length(a)).max(d.panel_length(b))
    };
    let tree = dof_tree(&PartitionTree::binary(rows.len() / 2, leaf_size));
    let build = |r: &[usize]| {
        let rr: Vec<usize> = r.iter().map(|&i| rows[i]).collect();
        let nodes = nodes_of_dofs(&rr);
        let pts: Vec<Point> = nodes.iter().map(|&i| d.nodes[i]).collect();
        let (center, rad) = bounding_circle(&pts);
        let h = nodes.iter().map(|&i| local_h(i)).fold(0.0, f64::max);
        let radius = (1.5 * rad).max(rad + 2.0 * h);
        let ring = Ring::new(center, radius, n_proxy);
        let w = ring.weight;
        let ring = ring.with_null_scale(w);
        let near: Vec<usize> = col_nodes
            .iter()
            .filter(|&&j| dist(d.nodes[j], center) < radius)
            .flat_map(|&j| [2 * j, 2 * j + 1])
            .collect();
        if near.len() + 4 * n_proxy >= cols.len() {
            // the true block is no wider
            return sys.block(&rr, cols);
        }
        let far = sys.proxy_sources(&rr, &ring);
        if near.is_empty() {
            return far;
        }
        hstack(&[sys.block(&rr, &near).as_ref(), far.as_ref()])
    };
    tree_row_id(&tree, rows.len(), tol, &build)
}

fn node_tree(kind: PartitionKind, positions: &[Point], proxy: &ProxyGeometry, leaf_size: usize) -> PartitionTree {
    let t = match kind {
        PartitionKind::DyadicByDistance => PartitionTree::dyadic(positions, proxy.center, proxy.r_div, leaf_size),
        PartitionKind::BinaryByIndex => PartitionTree::binary(positions.len(), leaf_size),
    };
    dof_tree(&t)
}

/// Expand a tree over nodes to one over interleaved dofs.
fn dof_tree(t: &PartitionTree) -> PartitionTree {
    PartitionTree {
        kind: t.kind,
        nodes: t
            .nodes
            .iter()
            .map(|(items, ch)| (items.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect(), ch.clone()))
            .collect(),
        root: t.root,
        depth: t.depth,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    TwoStepId,
    SvdOptimal,
}

#[derive(Clone, Copy, Debug)]
pub struct LowRankOptions {
    pub tol: f64,
    pub n_proxy: usize,
    pub mode: UpdateMode,
    /// Re-ID the concatenated far/near factors of each block.
    pub reid_concat: bool,
    /// Recompress the rows of the final `R` against `‖Q‖`, dropping numerically dependent rows.
    pub prune_r: bool,
    /// Partition leaf size in nodes.
    pub leaf_size: usize,
    pub far_partition: PartitionKind,
    pub seed: u64,
}

impl Default for LowRankOptions {
    fn default() -> Self {
        LowRankOptions {
            tol: 1e-10,
            n_proxy: 64,
            mode: UpdateMode::TwoStepId,
            reid_concat: true,
            prune_r: true,
            leaf_size: 128,
            far_partition: PartitionKind::DyadicByDistance,
            seed: 0x5eed,
        }
    }
}

/// A connected piece of changed boundary: cut nodes (old numbering) and added nodes (new numbering).
#[derive(Clone, Debug)]
pub struct ChangeGroup {
    pub cut: Vec<usize>,
    pub added: Vec<usize>,
    pub proxy: ProxyGeometry,
}

/// Split the changed nodes of a plan into spatially separated groups.
pub fn change_groups(blocks: &ExtendedBlocks, n_proxy: usize) -> Result<Vec<ChangeGroup>> {
    let plan = &blocks.plan;
    let old = blocks.old.discretization();
    let new = blocks.new.discretization();
    // (is_added, node, position)
    let mut items: Vec<(bool, usize, Point, f64)> = Vec::new();
    for &i in &plan.cut {
        items.push((false, i, old.nodes[i], old.panel_length(old.node_panel[i])));
    }
    for &i in &plan.added {
        items.push((true, i, new.nodes[i], new.panel_length(new.node_panel[i])));
    }
    let n = items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for a in 0..n {
        for b in a + 1..n {
            let h = 2.0 * items[a].3.max(items[b].3);
            if dist(items[a].2, items[b].2) < h {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra] = rb;
                }
            }
        }
    }
    let mut roots: Vec<usize> = Vec::new();
    let mut groups: Vec<(Vec<usize>, Vec<usize>, Vec<Point>)> = Vec::new();
    for a in 0..n {
        let r = find(&mut parent, a);
        let gi = match roots.iter().position(|&x| x == r) {
            Some(g) => g,
            None => {
                roots.push(r);
                groups.push((Vec::new(), Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        let (is_added, node, x, _) = items[a];
        if is_added {
            groups[gi].1.push(node);
        } else {
            groups[gi].0.push(node);
        }
        groups[gi].2.push(x);
    }
    groups
        .into_iter()
        .map(|(cut, added, pts)| {
            let mut pts = pts;
            // include the endpoints of the changed panels so the circle covers the whole piece
            for &i in &cut {
                let pid = old.node_panel[i];
                let info = &old.panels[pid];
                let curve = &old.components[info.component].curve;
                let panel = &old.components[info.component].mesh.panels[info.local];
                pts.push(curve.eval(panel.a).x);
                pts.push(curve.eval(panel.b).x);
            }
            Ok(ChangeGroup {
                cut,
                added,
                proxy: ProxyGeometry::around(&pts, n_proxy)?,
            })
        })
        .collect()
}

/// Factors of one block in local row and column numbering.
#[derive(Clone, Debug)]
struct BlockFactor {
    /// Local row positions × rank.
    l: Mat<f64>,
    /// Rank × local column positions.
    r: Mat<f64>,
}

/// Final factorization `Q ≈ L R` in extended ordering (old nodes, then added nodes).
#[derive(Clone, Debug)]
pub struct LowRankUpdate {
    pub n_ext_dofs: usize,
    pub l: Mat<f64>,
    pub r: Mat<f64>,
    pub l1: Mat<f64>,
    pub r1: Mat<f64>,
    pub k_kc: usize,
    pub k_kp: usize,
    pub k_pk: usize,
    pub mode: UpdateMode,
    pub tol: f64,
    pub groups: Vec<ChangeGroup>,
}

impl LowRankUpdate {
    pub fn k1(&self) -> usize {
        self.k_kc + self.k_kp + self.k_pk
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn empty(n_ext_dofs: usize, mode: UpdateMode, tol: f64) -> Self {
        LowRankUpdate {
            n_ext_dofs,
            l: Mat::zeros(n_ext_dofs, 0),
            r: Mat::zeros(0, n_ext_dofs),
            l1: Mat::zeros(n_ext_dofs, 0),
            r1: Mat::zeros(0, n_ext_dofs),
            k_kc: 0,
            k_kp: 0,
            k_pk: 0,
            mode,
            tol,
            groups: Vec::new(),
        }
    }

    /// `L R x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let rx = crate::linalg::matvec(self.r.as_ref(), x);
        crate::linalg::matvec(self.l.as_ref(), &rx)
    }

    /// Dense `L R` (test scale).
    pub fn dense(&self) -> Mat<f64> {
        &self.l * &self.r
    }
}

/// Extended dof of a kept or cut node (old numbering) and of an added node (position in `plan.added`).
pub fn ext_old_dof(node: usize, comp: usize) -> usize {
    2 * node + comp
}

pub fn ext_added_dof(plan: &RefinementPlan, pos: usize, comp: usize) -> usize {
    2 * (plan.n_old + pos) + comp
}

fn reid(f: BlockFactor, tol: f64) -> BlockFactor {
    let id = row_id_with(f.r.as_ref(), IdOptions::tol(tol));
    let r = crate::linalg::select_rows(f.r.as_ref(), id.skeleton());
    BlockFactor { l: &f.l * &id.p, r }
}

/// Row factors from a far ID plus a near ID over disjoint row position sets.
fn concat_rows(
    n_rows: usize,
    n_cols: usize,
    far_pos: &[usize],
    far: &IdResult,
    far_r: Mat<f64>,
    near_pos: &[usize],
    near: &IdResult,
    near_r: Mat<f64>,
) -> BlockFactor {
    let (kf, kn) = (far.rank, near.rank);
    let mut l = Mat::zeros(n_rows, kf + kn);
    for (i, &row) in far_pos.iter().enumerate() {
        for j in 0..kf {
            l[(row, j)] = far.p[(i, j)];
        }
    }
    for (i, &row) in near_pos.iter().enumerate() {
        for j in 0..kn {
            l[(row, kf + j)] = near.p[(i, j)];
        }
    }
    let mut r = Mat::zeros(kf + kn, n_cols);
    r.as_mut().submatrix_mut(0, 0, kf, n_cols).copy_from(&far_r);
    r.as_mut().submatrix_mut(kf, 0, kn, n_cols).copy_from(&near_r);
    BlockFactor { l, r }
}

/// Compress the update matrix of the extended system described by `blocks`.
pub fn compress_update(blocks: &ExtendedBlocks, opts: &LowRankOptions) -> Result<LowRankUpdate> {
    let plan = &blocks.plan;
    let n_ext = 2 * plan.n_ext();
    if plan.is_identity() {
        return Ok(LowRankUpdate::empty(n_ext, opts.mode, opts.tol));
    }
    let groups = change_groups(blocks, opts.n_proxy)?;
    let mut upd = match opts.mode {
        UpdateMode::TwoStepId => two_step(blocks, &groups, opts)?,
        UpdateMode::SvdOptimal => svd_optimal(blocks, opts)?,
    };
    upd.groups = groups;
    Ok(upd)
}

/// Blockwise ID factors (`L₁`, `R₁`) followed by a randomized row ID of `L₁`.
fn two_step(blocks: &ExtendedBlocks, groups: &[ChangeGroup], opts: &LowRankOptions) -> Result<LowRankUpdate> {
    let plan = &blocks.plan;
    let n_ext = 2 * plan.n_ext();
    let tol = opts.tol;
    let new_d = blocks.new.discretization();
    let nk = plan.n_k();
    let add_pos: std::collections::HashMap<usize, usize> = plan.added.iter().enumerate().map(|(p, &n)| (n, p)).collect();

    // column blocks of L₁ with their ext row dofs, and row blocks of R₁ with their ext column dofs
    let mut pk_parts: Vec<(Vec<usize>, Mat<f64>, Vec<usize>, Mat<f64>)> = Vec::new();
    let mut kc_parts = Vec::new();
    let mut kp_parts = Vec::new();
    let k_ext_rows: Vec<usize> = plan.kept_old.iter().flat_map(|&i| [ext_old_dof(i, 0), ext_old_dof(i, 1)]).collect();

    for g in groups {
        // kept nodes, split by the division circle (positions into the kept list)
        let (mut far_k, mut near_k) = (Vec::new(), Vec::new());
        for (pos, &i) in plan.kept_new.iter().enumerate() {
            if g.proxy.is_far(new_d.nodes[i]) {
                far_k.push(pos);
            } else {
                near_k.push(pos);
            }
        }
        let dofs_of = |pos: &[usize], map: &[usize]| -> Vec<usize> {
            pos.iter().flat_map(|&p| [2 * map[p], 2 * map[p] + 1]).collect()
        };
        let local = |pos: &[usize]| -> Vec<usize> { pos.iter().flat_map(|&p| [2 * p, 2 * p + 1]).collect() };
        let far_rows_new = dofs_of(&far_k, &plan.kept_new);
        let far_rows_old = dofs_of(&far_k, &plan.kept_old);
        let near_rows_new = dofs_of(&near_k, &plan.kept_new);
        let near_rows_old = dofs_of(&near_k, &plan.kept_old);
        let far_local = local(&far_k);
        let near_local = local(&near_k);
        let far_id = compress_block_far(&blocks.new, &far_rows_new, &g.proxy, opts.far_partition, opts.leaf_size, tol)?;
        let far_skel_new: Vec<usize> = far_id.skeleton().iter().map(|&i| far_rows_new[i]).collect();
        let far_skel_old: Vec<usize> = far_id.skeleton().iter().map(|&i| far_rows_old[i]).collect();

        let c_dofs: Vec<usize> = g.cut.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
        let p_dofs: Vec<usize> = g.added.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
        let c_ext: Vec<usize> = g.cut.iter().flat_map(|&i| [ext_old_dof(i, 0), ext_old_dof(i, 1)]).collect();
        let p_ext: Vec<usize> = g
            .added
            .iter()
            .flat_map(|&i| {
                let pos = add_pos[&i];
                [ext_added_dof(plan, pos, 0), ext_added_dof(plan, pos, 1)]
            })
            .collect();

        if !c_dofs.is_empty() {
            let near = compress_block_local(&blocks.old, &near_rows_old, &c_dofs, g.proxy.n_proxy, opts.leaf_size, tol);
            let near_skel: Vec<usize> = near.skeleton().iter().map(|&i| near_rows_old[i]).collect();
            let mut f = concat_rows(
                2 * nk,
                c_dofs.len(),
                &far_local,
                &far_id,
                blocks.old.block(&far_skel_old, &c_dofs),
                &near_local,
                &near,
                blocks.old.block(&near_skel, &c_dofs),
            );
            if opts.reid_concat {
                f = reid(f, tol);
            }
            kc_parts.push((k_ext_rows.clone(), f.l, c_ext.clone(), f.r));
        }
        if !p_dofs.is_empty() {
            let near = compress_block_local(&blocks.new, &near_rows_new, &p_dofs, g.proxy.n_proxy, opts.leaf_size, tol);
            let near_skel: Vec<usize> = near.skeleton().iter().map(|&i| near_rows_new[i]).collect();
            let mut f = concat_rows(
                2 * nk,
                p_dofs.len(),
                &far_local,
                &far_id,
                blocks.new.block(&far_skel_new, &p_dofs),
                &near_local,
                &near,
                blocks.new.block(&near_skel, &p_dofs),
            );
            if opts.reid_concat {
                f = reid(f, tol);
            }
            kp_parts.push((k_ext_rows.clone(), f.l, p_ext.clone(), f.r));

            // A_pk: one skeleton of added rows, R is the full row block
            let id = compress_pk(&blocks.new, &p_dofs, &blocks.k_new, &g.proxy, opts.leaf_size, tol)?;
            let skel: Vec<usize> = id.skeleton().iter().map(|&i| p_dofs[i]).collect();
            let r = blocks.new.block(&skel, &blocks.k_new);
            let l = id.p;
            let mut f = BlockFactor { l, r };
            if opts.reid_concat {
                f = reid(f, tol);
            }
            pk_parts.push((p_ext.clone(), f.l, k_ext_rows.clone(), f.r));
        }
    }

    let k_pk: usize = pk_parts.iter().map(|p| p.1.ncols()).sum();
    let k_kc: usize = kc_parts.iter().map(|p| p.1.ncols()).sum();
    let k_kp: usize = kp_parts.iter().map(|p| p.1.ncols()).sum();
    let k1 = k_pk + k_kc + k_kp;
    let mut l1 = Mat::zeros(n_ext, k1);
    let mut r1 = Mat::zeros(k1, n_ext);
    let mut col = 0;
    for (parts, sign) in [(&pk_parts, 1.0), (&kc_parts, -1.0), (&kp_parts, 1.0)] {
        for (rows, l, cols, r) in parts.iter() {
            for j in 0..l.ncols() {
                for (i, &row) in rows.iter().enumerate() {
                    l1[(row, col + j)] = sign * l[(i, j)];
                }
                for (c, &cc) in cols.iter().enumerate() {
                    r1[(col + j, cc)] = r[(j, c)];
                }
            }
            col += l.ncols();
        }
    }
    debug!("blockwise ranks: pk {k_pk}, kc {k_kc}, kp {k_kp}");

    // randomized row ID of L₁
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let omega = gaussian(k1, k1 + 10, &mut rng);
    let y = &l1 * &omega;
    let id = row_id_with(y.as_ref(), IdOptions::tol(tol));
    let l1_skel = select_rows(l1.as_ref(), id.skeleton());
    let r = &l1_skel * &r1;
    let (l, r) = if opts.prune_r { prune_id(id.p, r, tol) } else { (id.p, r) };
    Ok(LowRankUpdate {
        n_ext_dofs: n_ext,
        l,
        r,
        l1,
        r1,
        k_kc,
        k_kp,
        k_pk,
        mode: UpdateMode::TwoStepId,
        tol,
        groups: Vec::new(),
    })
}

/// Per-block truncated SVDs in uniform layout, then an SVD of `L_block` (dense; small problems).
fn svd_optimal(blocks: &ExtendedBlocks, opts: &LowRankOptions) -> Result<LowRankUpdate> {
    let plan = &blocks.plan;
    let n_ext = 2 * plan.n_ext();
    let tol = opts.tol;
    let k_ext: Vec<usize> = plan.kept_old.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
    let c_ext: Vec<usize> = plan.cut.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
    let p_ext: Vec<usize> = (0..plan.n_p())
        .flat_map(|pos| [ext_added_dof(plan, pos, 0), ext_added_dof(plan, pos, 1)])
        .collect();
    use crate::nystrom::BlockKind;
    let specs = [
        (BlockKind::Pk, &p_ext, &k_ext, 1.0),
        (BlockKind::Kc, &k_ext, &c_ext, -1.0),
        (BlockKind::Kp, &k_ext, &p_ext, 1.0),
    ];
    let mut parts = Vec::new();
    let mut ranks = [0usize; 3];
    for (bi, (kind, rows, cols, sign)) in specs.into_iter().enumerate() {
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let a = blocks.dense(kind);
        let t = truncated_svd(a.as_ref(), tol, opts.seed)?;
        ranks[bi] = t.rank();
        let mut sv = t.v.transpose().to_owned();
        for i in 0..t.rank() {
            for j in 0..sv.ncols() {
                sv[(i, j)] *= t.s[i];
            }
        }
        parts.push((rows.clone(), t.u, cols.clone(), sv, sign));
    }
    let k1: usize = ranks.iter().sum();
    let mut lb = Mat::zeros(n_ext, k1);
    let mut rb = Mat::zeros(k1, n_ext);
    let mut col = 0;
    for (rows, u, cols, sv, sign) in &parts {
        for j in 0..u.ncols() {
            for (i, &row) in rows.iter().enumerate() {
                lb[(row, col + j)] = sign * u[(i, j)];
            }
            for (c, &cc) in cols.iter().enumerate() {
                rb[(col + j, cc)] = sv[(j, c)];
            }
        }
        col += u.ncols();
    }
    let t = truncated_svd(lb.as_ref(), tol, opts.seed.wrapping_add(1))?;
    let mut sv = t.v.transpose().to_owned();
    for i in 0..t.rank() {
        for j in 0..sv.ncols() {
            sv[(i, j)] *= t.s[i];
        }
    }
    let r = &sv * &rb;
    let (l, r) = if opts.prune_r {
        prune_svd(t.u, r, tol, opts.seed.wrapping_add(2))?
    } else {
        (t.u, r)
    };
    Ok(LowRankUpdate {
        n_ext_dofs: n_ext,
        l,
        r,
        l1: lb,
        r1: rb,
        k_pk: ranks[0],
        k_kc: ranks[1],
        k_kp: ranks[2],
        mode: UpdateMode::SvdOptimal,
        tol,
        groups: Vec::new(),
    })
}

fn spectral_norm(a: &Mat<f64>) -> f64 {
    power_norm(a.ncols(), &|x| matvec(a.as_ref(), x), &|y| matvec_t(a.as_ref(), y), 30, 0x9e)
}

/// `‖L R‖₂` without forming the product.
fn product_norm(l: &Mat<f64>, r: &Mat<f64>) -> f64 {
    power_norm(
        r.ncols(),
        &|x| matvec(l.as_ref(), &matvec(r.as_ref(), x)),
        &|y| matvec_t(r.as_ref(), &matvec_t(l.as_ref(), y)),
        30,
        0x9f,
    )
}

/// Row ID of `R` at a tolerance scaled so the added error stays below `tol ‖L R‖`.
///
/// Compressing `L₁` alone ignores the scale of `R₁`, which leaves rows of `R`
/// that are dependent to working precision. `L P` keeps an identity row block,
/// so the interpolation format survives.
fn prune_id(l: Mat<f64>, r: Mat<f64>, tol: f64) -> (Mat<f64>, Mat<f64>) {
    if r.nrows() == 0 {
        return (l, r);
    }
    let (nl, nr, nq) = (spectral_norm(&l), spectral_norm(&r), product_norm(&l, &r));
    if nl == 0.0 || nr == 0.0 {
        return (l, r);
    }
    let t = (tol * nq / (nl * nr)).min(tol);
    let id = row_id_with(r.as_ref(), IdOptions::tol(t));
    if id.rank == r.nrows() {
        return (l, r);
    }
    let r2 = select_rows(r.as_ref(), id.skeleton());
    (&l * &id.p, r2)
}

/// Truncated SVD of `R`; with orthonormal `L` this is a truncated SVD of `Q`.
fn prune_svd(l: Mat<f64>, r: Mat<f64>, tol: f64, seed: u64) -> Result<(Mat<f64>, Mat<f64>)> {
    if r.nrows() == 0 {
        return Ok((l, r));
    }
    let t = truncated_svd(r.as_ref(), tol, seed)?;
    let mut sv = t.v.transpose().to_owned();
    for i in 0..t.rank() {
        for j in 0..sv.ncols() {
            sv[(i, j)] *= t.s[i];
        }
    }
    Ok((&l * &t.u, sv))
}

/// Dense update matrix `Q` in extended ordering (test scale).
pub fn dense_update(blocks: &ExtendedBlocks) -> Mat<f64> {
    let plan = &blocks.plan;
    let n_ext = 2 * plan.n_ext();
    let k_ext: Vec<usize> = plan.kept_old.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
    let c_ext: Vec<usize> = plan.cut.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
    let p_ext: Vec<usize> = (0..plan.n_p())
        .flat_map(|pos| [ext_added_dof(plan, pos, 0), ext_added_dof(plan, pos, 1)])
        .collect();
    let mut q = Mat::zeros(n_ext, n_ext);
    use crate::nystrom::BlockKind;
    for (kind, rows, cols, sign) in [
        (BlockKind::Kc, &k_ext, &c_ext, -1.0),
        (BlockKind::Kp, &k_ext, &p_ext, 1.0),
        (BlockKind::Pk, &p_ext, &k_ext, 1.0),
    ] {
        let a = blocks.dense(kind);
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                q[(r, c)] = sign * a[(i, j)];
            }
        }
    }
    q
}
