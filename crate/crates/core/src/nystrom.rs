//! Nyström discretization of the Stokes boundary integral equations.
//!
//! Matrices are never formed unless asked for: [`BieSystem`] evaluates any
//! sub-block on demand, including the self-panel log corrections.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{dist, Discretization, Point, RefinementPlan, Role};
use crate::kernels::{double_layer_raw, pressure_double, pressure_single, stokeslet, stokeslet_raw, Mat2};
use crate::quadrature::{gauss_legendre, log_product_weights, LogRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// `-½I + D + N` on a single wall.
    InteriorDlPlusNull,
    /// `-½I + D` without the nullspace correction (singular; diagnostics only).
    InteriorDl,
    /// `½I + D + S` on obstacles.
    ExteriorCombined,
    /// Double layer plus `N` on the wall, combined field on the obstacles.
    Mixed,
}

impl Formulation {
    pub fn uses_null(&self) -> bool {
        matches!(self, Formulation::InteriorDlPlusNull | Formulation::Mixed)
    }

    /// Formulation suitable for a discretization: interior for a lone wall, mixed otherwise.
    pub fn for_discretization(disc: &Discretization) -> Self {
        let walls = disc.components.iter().filter(|c| c.role == Role::Wall).count();
        let obstacles = disc.components.len() - walls;
        match (walls, obstacles) {
            (0, _) => Formulation::ExteriorCombined,
            (_, 0) => Formulation::InteriorDlPlusNull,
            _ => Formulation::Mixed,
        }
    }
}

/// Log-kernel corrections for one obstacle target node.
#[derive(Clone, Debug)]
struct NodeCorrection {
    /// Global panel ids: previous, own, next.
    panels: [usize; 3],
    /// Offsets into `values` for the three panels.
    offsets: [usize; 3],
}

/// On-demand Nyström matrix for one discretization and formulation.
#[derive(Clone, Debug)]
pub struct BieSystem {
    pub formulation: Formulation,
    pub mu: f64,
    pub disc: Arc<Discretization>,
    jump: Vec<f64>,
    single: Vec<bool>,
    null: Vec<bool>,
    diag: Vec<Mat2>,
    corr: Vec<Option<NodeCorrection>>,
    corr_values: Vec<f64>,
}

impl BieSystem {
    pub fn assemble(disc: Arc<Discretization>, formulation: Formulation, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::InvalidInput(format!("viscosity must be positive, got {mu}")));
        }
        let walls = disc.components.iter().filter(|c| c.role == Role::Wall).count();
        let obstacles = disc.components.len() - walls;
        let ok = match formulation {
            Formulation::InteriorDlPlusNull | Formulation::InteriorDl => walls == 1 && obstacles == 0,
            Formulation::ExteriorCombined => walls == 0 && obstacles >= 1,
            Formulation::Mixed => walls == 1,
        };
        if !ok {
            return Err(Error::InvalidInput(format!(
                "{formulation:?} incompatible with {walls} wall(s) and {obstacles} obstacle(s)"
            )));
        }
        let n = disc.len();
        let mut jump = vec![0.0; n];
        let mut single = vec![false; n];
        let mut null = vec![false; n];
        for i in 0..n {
            match disc.role(i) {
                Role::Wall => {
                    jump[i] = -0.5;
                    null[i] = formulation.uses_null();
                }
                Role::Obstacle => {
                    jump[i] = 0.5;
                    single[i] = true;
                }
            }
        }
        let mut sys = BieSystem {
            formulation,
            mu,
            disc: disc.clone(),
            jump,
            single,
            null,
            diag: vec![[[0.0; 2]; 2]; n],
            corr: vec![None; n],
            corr_values: Vec::new(),
        };
        sys.build_corrections();
        sys.build_diagonal();
        Ok(sys)
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.disc.len()
    }

    pub fn discretization(&self) -> &Discretization {
        &self.disc
    }

    fn build_corrections(&mut self) {
        let disc = self.disc.clone();
        let mut rules: Vec<(usize, Vec<f64>, Vec<f64>, LogRule)> = Vec::new();
        let c = 1.0 / (4.0 * PI * self.mu);
        for i in 0..disc.len() {
            if !self.single[i] {
                continue;
            }
            let own = disc.node_panel[i];
            let (prev, next) = disc.panel_neighbors(own);
            let panels = [prev, own, next];
            let mut offsets = [0usize; 3];
            let ti = disc.params[i];
            for (slot, &p) in panels.iter().enumerate() {
                let info = disc.panels[p];
                let q = info.panel.q;
                if !rules.iter().any(|r| r.0 == q) {
                    let (x, w) = gauss_legendre(q);
                    rules.push((q, x, w, LogRule::new(q + 2)));
                }
                let rule = rules.iter().find(|r| r.0 == q).unwrap();
                let h = info.panel.half_length();
                let mid = 0.5 * (info.panel.a + info.panel.b);
                // nearest periodic image of the target parameter
                let mut t = ti;
                while t - mid > PI {
                    t -= 2.0 * PI;
                }
                while mid - t > PI {
                    t += 2.0 * PI;
                }
                let u0 = if p == own { rule.1[disc.local_index[i]] } else { (t - mid) / h };
                let omega = log_product_weights(&rule.1, &rule.2, u0, &rule.3);
                offsets[slot] = self.corr_values.len();
                for jl in 0..q {
                    let j = info.first_node + jl;
                    let sp = disc.speed[j];
                    let v = if j == i {
                        // diagonal: log part stored here, finished in build_diagonal
                        -c * (omega[jl] * sp * h + disc.weights[j] * (sp * h).ln())
                    } else {
                        -c * sp * h * (omega[jl] - rule.2[jl] * (rule.1[jl] - u0).abs().ln())
                    };
                    self.corr_values.push(v);
                }
            }
            self.corr[i] = Some(NodeCorrection { panels, offsets });
        }
    }

    fn build_diagonal(&mut self) {
        let disc = self.disc.clone();
        let c = 1.0 / (4.0 * PI * self.mu);
        for i in 0..disc.len() {
            let t = disc.tangents[i];
            let w = disc.weights[i];
            let kd = -disc.curvature[i] / (2.0 * PI) * w;
            let mut m = [[0.0; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    m[a][b] = kd * t[a] * t[b];
                    if self.single[i] {
                        m[a][b] += c * t[a] * t[b] * w;
                    }
                    if self.null[i] {
                        m[a][b] += disc.normals[i][a] * disc.normals[i][b] * w;
                    }
                }
                m[a][a] += self.jump[i];
            }
            if self.single[i] {
                let log_part = self.correction(i, i);
                m[0][0] += log_part;
                m[1][1] += log_part;
            }
            self.diag[i] = m;
        }
    }

    #[inline]
    fn correction(&self, i: usize, j: usize) -> f64 {
        let Some(nc) = &self.corr[i] else { return 0.0 };
        let pj = self.disc.node_panel[j];
        for slot in 0..3 {
            if nc.panels[slot] == pj {
                let first = self.disc.panels[pj].first_node;
                return self.corr_values[nc.offsets[slot] + (j - first)];
            }
        }
        0.0
    }

    /// The 2×2 block coupling target node `i` to source node `j`.
    #[inline]
    pub fn node_block(&self, i: usize, j: usize) -> Mat2 {
        if i == j {
            return self.diag[i];
        }
        let d = &*self.disc;
        let x = d.nodes[i];
        let y = d.nodes[j];
        let (r0, r1) = (x[0] - y[0], x[1] - y[1]);
        let r2 = r0 * r0 + r1 * r1;
        let w = d.weights[j];
        let mut m = double_layer_raw(r0, r1, r2, d.curve_normals[j]);
        if self.single[j] {
            let s = stokeslet_raw(r0, r1, r2, self.mu);
            for a in 0..2 {
                for b in 0..2 {
                    m[a][b] += s[a][b];
                }
            }
        }
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v *= w;
            }
        }
        if self.single[j] && d.node_component[i] == d.node_component[j] {
            let cr = self.correction(i, j);
            m[0][0] += cr;
            m[1][1] += cr;
        }
        if self.null[i] && self.null[j] {
            let (ni, nj) = (d.normals[i], d.normals[j]);
            for a in 0..2 {
                for b in 0..2 {
                    m[a][b] += ni[a] * nj[b] * w;
                }
            }
        }
        m
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.node_block(r / 2, c / 2)[r % 2][c % 2]
    }

    /// Sub-block `A(rows, cols)` for dof index lists.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> Mat<f64> {
        let mut out = Mat::<f64>::zeros(rows.len(), cols.len());
        let mut c = 0;
        while c < cols.len() {
            let j = cols[c] / 2;
            let pair = c + 1 < cols.len() && cols[c + 1] / 2 == j && cols[c] % 2 == 0 && cols[c + 1] % 2 == 1;
            let mut r = 0;
            while r < rows.len() {
                let i = rows[r] / 2;
                let m = self.node_block(i, j);
                let rpair = r + 1 < rows.len() && rows[r + 1] / 2 == i;
                let rcount = if rpair { 2 } else { 1 };
                for rr in 0..rcount {
                    let a = rows[r + rr] % 2;
                    out[(r + rr, c)] = m[a][cols[c] % 2];
                    if pair {
                        out[(r + rr, c + 1)] = m[a][1];
                    }
                }
                r += rcount;
            }
            c += if pair { 2 } else { 1 };
        }
        out
    }

    /// The full `2N × 2N` matrix.
    pub fn dense(&self) -> Mat<f64> {
        let all: Vec<usize> = (0..self.n_dofs()).collect();
        self.block(&all, &all)
    }

    /// Whether node `i` carries the nullspace correction.
    pub fn has_null(&self, i: usize) -> bool {
        self.null[i]
    }

    /// Whether source node `j` carries a single-layer part.
    pub fn has_single(&self, j: usize) -> bool {
        self.single[j]
    }

    /// Field at target dofs `rows` from proxy sources on a circle.
    ///
    /// Columns: Stokeslet and double-layer sources (two orientations each) per
    /// proxy point, weighted by the ring arc length, plus the normal vector
    /// column when any target carries the nullspace correction.
    pub fn proxy_sources(&self, rows: &[usize], ring: &Ring) -> Mat<f64> {
        let d = &*self.disc;
        let np = ring.points.len();
        let any_null = rows.iter().any(|&r| self.null[r / 2]);
        let ncols = 4 * np + usize::from(any_null);
        let mut out = Mat::<f64>::zeros(rows.len(), ncols);
        for (ri, &r) in rows.iter().enumerate() {
            let (i, a) = (r / 2, r % 2);
            let x = d.nodes[i];
            for (k, (p, nu)) in ring.points.iter().zip(&ring.normals).enumerate() {
                let (r0, r1) = (x[0] - p[0], x[1] - p[1]);
                let r2 = r0 * r0 + r1 * r1;
                let s = stokeslet_raw(r0, r1, r2, self.mu);
                let dl = double_layer_raw(r0, r1, r2, *nu);
                out[(ri, 4 * k)] = s[a][0] * ring.weight;
                out[(ri, 4 * k + 1)] = s[a][1] * ring.weight;
                out[(ri, 4 * k + 2)] = dl[a][0] * ring.weight;
                out[(ri, 4 * k + 3)] = dl[a][1] * ring.weight;
            }
            if any_null && self.null[i] {
                out[(ri, 4 * np)] = d.normals[i][a] * ring.null_scale;
            }
        }
        out
    }

    /// Field from source dofs `cols` sampled at points of one or more circles.
    ///
    /// Rows: both velocity components per proxy point, plus the flux row
    /// `w_j n_j` when any source carries the nullspace correction.
    pub fn proxy_targets(&self, cols: &[usize], rings: &[Ring]) -> Mat<f64> {
        let d = &*self.disc;
        let npts: usize = rings.iter().map(|r| r.points.len()).sum();
        let any_null = cols.iter().any(|&c| self.null[c / 2]);
        let nrows = 2 * npts + usize::from(any_null);
        let mut out = Mat::<f64>::zeros(nrows, cols.len());
        for (ci, &c) in cols.iter().enumerate() {
            let (j, b) = (c / 2, c % 2);
            let y = d.nodes[j];
            let w = d.weights[j];
            let nu = d.curve_normals[j];
            let mut row = 0;
            for ring in rings {
                let scale = ring.weight.sqrt();
                for p in &ring.points {
                    let (r0, r1) = (p[0] - y[0], p[1] - y[1]);
                    let r2 = r0 * r0 + r1 * r1;
                    let mut m = double_layer_raw(r0, r1, r2, nu);
                    if self.single[j] {
                        let s = stokeslet_raw(r0, r1, r2, self.mu);
                        m[0][b] += s[0][b];
                        m[1][b] += s[1][b];
                    }
                    out[(row, ci)] = m[0][b] * w * scale;
                    out[(row + 1, ci)] = m[1][b] * w * scale;
                    row += 2;
                }
            }
            if any_null && self.null[j] {
                out[(row, ci)] = w * d.normals[j][b] * rings[0].null_scale;
            }
        }
        out
    }
}

/// Equispaced points on a circle used as proxy sources or targets.
#[derive(Clone, Debug)]
pub struct Ring {
    pub center: Point,
    pub radius: f64,
    pub points: Vec<Point>,
    pub normals: Vec<Point>,
    /// Arc-length weight `2πR / n`.
    pub weight: f64,
    /// Scale applied to the nullspace column or row.
    pub null_scale: f64,
}

impl Ring {
    pub fn new(center: Point, radius: f64, n: usize) -> Self {
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for k in 0..n {
            let t = 2.0 * PI * k as f64 / n as f64;
            let (s, c) = t.sin_cos();
            points.push([center[0] + radius * c, center[1] + radius * s]);
            normals.push([c, s]);
        }
        Ring {
            center,
            radius,
            points,
            normals,
            weight: 2.0 * PI * radius / n as f64,
            null_scale: 1.0,
        }
    }

    pub fn with_null_scale(mut self, s: f64) -> Self {
        self.null_scale = s;
        self
    }

    pub fn contains(&self, x: Point) -> bool {
        dist(x, self.center) < self.radius
    }
}

/// Row/column view of a system restricted to a node subset.
pub trait BlockOracle {
    fn n_nodes(&self) -> usize;
    fn point(&self, i: usize) -> Point;
    fn weight(&self, i: usize) -> f64;
    fn block(&self, rows: &[usize], cols: &[usize]) -> Mat<f64>;
    fn proxy_sources(&self, rows: &[usize], ring: &Ring) -> Mat<f64>;
    fn proxy_targets(&self, cols: &[usize], rings: &[Ring]) -> Mat<f64>;
}

impl BlockOracle for BieSystem {
    fn n_nodes(&self) -> usize {
        self.disc.len()
    }
    fn point(&self, i: usize) -> Point {
        self.disc.nodes[i]
    }
    fn weight(&self, i: usize) -> f64 {
        self.disc.weights[i]
    }
    fn block(&self, rows: &[usize], cols: &[usize]) -> Mat<f64> {
        BieSystem::block(self, rows, cols)
    }
    fn proxy_sources(&self, rows: &[usize], ring: &Ring) -> Mat<f64> {
        BieSystem::proxy_sources(self, rows, ring)
    }
    fn proxy_targets(&self, cols: &[usize], rings: &[Ring]) -> Mat<f64> {
        BieSystem::proxy_targets(self, cols, rings)
    }
}

/// A system restricted to a subset of its nodes, with local numbering.
pub struct SubSystem<'a> {
    pub sys: &'a BieSystem,
    pub nodes: Vec<usize>,
}

impl SubSystem<'_> {
    fn map(&self, dofs: &[usize]) -> Vec<usize> {
        dofs.iter().map(|&d| 2 * self.nodes[d / 2] + d % 2).collect()
    }
}

impl BlockOracle for SubSystem<'_> {
    fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
    fn point(&self, i: usize) -> Point {
        self.sys.disc.nodes[self.nodes[i]]
    }
    fn weight(&self, i: usize) -> f64 {
        self.sys.disc.weights[self.nodes[i]]
    }
    fn block(&self, rows: &[usize], cols: &[usize]) -> Mat<f64> {
        self.sys.block(&self.map(rows), &self.map(cols))
    }
    fn proxy_sources(&self, rows: &[usize], ring: &Ring) -> Mat<f64> {
        self.sys.proxy_sources(&self.map(rows), ring)
    }
    fn proxy_targets(&self, cols: &[usize], rings: &[Ring]) -> Mat<f64> {
        self.sys.proxy_targets(&self.map(cols), rings)
    }
}

/// Dofs of a node list, interleaved.
pub fn node_dofs(nodes: &[usize]) -> Vec<usize> {
    nodes.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect()
}

/// Old and new systems of a refinement or hole addition, sliced by the plan.
pub struct ExtendedBlocks {
    pub old: BieSystem,
    pub new: BieSystem,
    pub plan: RefinementPlan,
    pub k_old: Vec<usize>,
    pub k_new: Vec<usize>,
    pub c: Vec<usize>,
    pub p: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Kk,
    Kc,
    Ck,
    Cc,
    Kp,
    Pk,
    Pp,
}

impl ExtendedBlocks {
    pub fn new(old: BieSystem, new: BieSystem, plan: RefinementPlan) -> Result<Self> {
        plan.validate(old.disc.len(), new.disc.len())?;
        if old.formulation != new.formulation && plan.kind != crate::geometry::PlanKind::AddHoles {
            return Err(Error::InvalidInput("old and new systems use different formulations".into()));
        }
        Ok(ExtendedBlocks {
            k_old: node_dofs(&plan.kept_old),
            k_new: node_dofs(&plan.kept_new),
            c: node_dofs(&plan.cut),
            p: node_dofs(&plan.added),
            old,
            new,
            plan,
        })
    }

    /// Row and column dof lists (global in the owning system) for a block.
    pub fn index_sets(&self, kind: BlockKind) -> (&BieSystem, &[usize], &[usize]) {
        match kind {
            BlockKind::Kk => (&self.old, &self.k_old, &self.k_old),
            BlockKind::Kc => (&self.old, &self.k_old, &self.c),
            BlockKind::Ck => (&self.old, &self.c, &self.k_old),
            BlockKind::Cc => (&self.old, &self.c, &self.c),
            BlockKind::Kp => (&self.new, &self.k_new, &self.p),
            BlockKind::Pk => (&self.new, &self.p, &self.k_new),
            BlockKind::Pp => (&self.new, &self.p, &self.p),
        }
    }

    /// Dense block.
    pub fn dense(&self, kind: BlockKind) -> Mat<f64> {
        let (sys, r, c) = self.index_sets(kind);
        sys.block(r, c)
    }

    /// Sub-block with row and column positions local to the block.
    pub fn sub(&self, kind: BlockKind, rows: &[usize], cols: &[usize]) -> Mat<f64> {
        let (sys, r, c) = self.index_sets(kind);
        let rr: Vec<usize> = rows.iter().map(|&i| r[i]).collect();
        let cc: Vec<usize> = cols.iter().map(|&j| c[j]).collect();
        sys.block(&rr, &cc)
    }
}

/// Dense `A_kk, A_kc, A_ck, A_cc, A_kp, A_pk, A_pp` (test-scale helper).
pub fn assemble_blocks(old: &BieSystem, new: &BieSystem, plan: &RefinementPlan) -> Result<DenseBlocks> {
    let eb = ExtendedBlocks::new(old.clone(), new.clone(), plan.clone())?;
    Ok(DenseBlocks {
        kk: eb.dense(BlockKind::Kk),
        kc: eb.dense(BlockKind::Kc),
        ck: eb.dense(BlockKind::Ck),
        cc: eb.dense(BlockKind::Cc),
        kp: eb.dense(BlockKind::Kp),
        pk: eb.dense(BlockKind::Pk),
        pp: eb.dense(BlockKind::Pp),
    })
}

pub struct DenseBlocks {
    pub kk: Mat<f64>,
    pub kc: Mat<f64>,
    pub ck: Mat<f64>,
    pub cc: Mat<f64>,
    pub kp: Mat<f64>,
    pub pk: Mat<f64>,
    pub pp: Mat<f64>,
}

/// A point force.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StokesletSource {
    pub position: Point,
    pub strength: [f64; 2],
}

/// `count` sources on a circle, strengths rotated per index.
pub fn ring_sources(center: Point, radius: f64, count: usize, phase: f64) -> Vec<StokesletSource> {
    (0..count)
        .map(|s| {
            let t = phase + 2.0 * PI * s as f64 / count as f64;
            let a = 0.7 + 2.0 * PI * s as f64 / count as f64;
            StokesletSource {
                position: [center[0] + radius * t.cos(), center[1] + radius * t.sin()],
                strength: [a.cos(), a.sin()],
            }
        })
        .collect()
}

/// Velocity of a sum of Stokeslets.
pub fn stokeslet_velocity(sources: &[StokesletSource], x: Point, mu: f64) -> Result<[f64; 2]> {
    let mut u = [0.0; 2];
    for s in sources {
        let k = stokeslet(x, s.position, mu)?;
        u[0] += k[0][0] * s.strength[0] + k[0][1] * s.strength[1];
        u[1] += k[1][0] * s.strength[0] + k[1][1] * s.strength[1];
    }
    Ok(u)
}

/// Pressure of a sum of Stokeslets.
pub fn stokeslet_pressure(sources: &[StokesletSource], x: Point) -> Result<f64> {
    let mut p = 0.0;
    for s in sources {
        let q = pressure_single(x, s.position)?;
        p += q[0] * s.strength[0] + q[1] * s.strength[1];
    }
    Ok(p)
}

/// Dirichlet data `g` at the nodes.
#[derive(Clone, Debug)]
pub struct BoundaryData {
    pub g: Vec<f64>,
    pub sources: Vec<StokesletSource>,
}

impl BoundaryData {
    pub fn from_stokeslets(disc: &Discretization, sources: &[StokesletSource], mu: f64) -> Result<Self> {
        let mut g = Vec::with_capacity(disc.n_dofs());
        for x in &disc.nodes {
            let u = stokeslet_velocity(sources, *x, mu)?;
            g.extend_from_slice(&u);
        }
        Ok(BoundaryData {
            g,
            sources: sources.to_vec(),
        })
    }

    /// `Σ w_i g_i·n_i`.
    pub fn net_flux(&self, disc: &Discretization) -> f64 {
        (0..disc.len())
            .map(|i| disc.weights[i] * (self.g[2 * i] * disc.normals[i][0] + self.g[2 * i + 1] * disc.normals[i][1]))
            .sum()
    }
}

/// Velocities (and optional pressures) at targets.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub velocity: Vec<[f64; 2]>,
    pub pressure: Option<Vec<f64>>,
    /// Targets closer than the accuracy margin to the boundary.
    pub too_close: Vec<bool>,
}

/// Panel lengths within which targets are flagged as too close.
pub const CLOSE_PANEL_LENGTHS: f64 = 5.0;

/// Evaluate the layer potential represented by `tau` at `targets`.
pub fn evaluate_solution(
    sys: &BieSystem,
    tau: &[f64],
    targets: &[Point],
    with_pressure: bool,
) -> Result<Evaluation> {
    let d = &*sys.disc;
    check_len("density", d.n_dofs(), tau.len())?;
    let mut velocity = Vec::with_capacity(targets.len());
    let mut pressure = Vec::new();
    let mut too_close = Vec::new();
    for &x in targets {
        let (near, dmin) = d.nearest_node(x);
        if dmin == 0.0 {
            return Err(Error::SingularEvaluation);
        }
        too_close.push(dmin < CLOSE_PANEL_LENGTHS * d.panel_length(d.node_panel[near]));
        let mut u = [0.0; 2];
        let mut p = 0.0;
        for j in 0..d.len() {
            let y = d.nodes[j];
            let (r0, r1) = (x[0] - y[0], x[1] - y[1]);
            let r2 = r0 * r0 + r1 * r1;
            let w = d.weights[j];
            let t = [tau[2 * j], tau[2 * j + 1]];
            let nu = d.curve_normals[j];
            let mut k = double_layer_raw(r0, r1, r2, nu);
            if sys.single[j] {
                let s = stokeslet_raw(r0, r1, r2, sys.mu);
                for a in 0..2 {
                    for b in 0..2 {
                        k[a][b] += s[a][b];
                    }
                }
            }
            u[0] += w * (k[0][0] * t[0] + k[0][1] * t[1]);
            u[1] += w * (k[1][0] * t[0] + k[1][1] * t[1]);
            if with_pressure {
                let pd = pressure_double(x, y, nu, sys.mu)?;
                let mut pk = pd;
                if sys.single[j] {
                    let ps = pressure_single(x, y)?;
                    pk[0] += ps[0];
                    pk[1] += ps[1];
                }
                p += w * (pk[0] * t[0] + pk[1] * t[1]);
            }
        }
        velocity.push(u);
        pressure.push(p);
    }
    Ok(Evaluation {
        velocity,
        pressure: with_pressure.then_some(pressure),
        too_close,
    })
}

/// Mean of `|u - u_exact| / |u_exact|` over targets.
pub fn mean_relative_error(computed: &[[f64; 2]], exact: &[[f64; 2]]) -> f64 {
    let n = computed.len().max(1);
    computed
        .iter()
        .zip(exact)
        .map(|(u, e)| {
            let num = (u[0] - e[0]).hypot(u[1] - e[1]);
            let den = e[0].hypot(e[1]);
            if den > 0.0 {
                num / den
            } else {
                num
            }
        })
        .sum::<f64>()
        / n as f64
}

/// Write a matrix as `u32 rows, u32 cols` followed by row-major `f64`, little-endian.
pub fn write_matrix<W: Write>(mut w: W, a: &Mat<f64>) -> Result<()> {
    w.write_u32::<LittleEndian>(a.nrows() as u32)?;
    w.write_u32::<LittleEndian>(a.ncols() as u32)?;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            w.write_f64::<LittleEndian>(a[(i, j)])?;
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<Mat<f64>> {
    let m = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut a = Mat::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            a[(i, j)] = r.read_f64::<LittleEndian>()?;
        }
    }
    Ok(a)
}

pub fn dump_matrix(path: &Path, a: &Mat<f64>) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_matrix(f, a)
}
