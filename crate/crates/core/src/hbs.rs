//! Hierarchically block separable compression and inversion.
//!
//! Off-diagonal blocks are compressed with row and column interpolative
//! decompositions of equal rank; far-field interactions are replaced by proxy
//! circles so that only near-field entries are ever evaluated. The inverse is
//! the telescoping factorization of Gillman, Young and Martinsson.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use faer::linalg::solvers::DenseSolveCore;
use faer::{ColRef, Mat, MatRef};
use log::debug;

use crate::error::{check_len, Error, Result};
use crate::geometry::{dist, Point};
use crate::linalg::{col_id_with, hstack, row_id_with, vstack, IdOptions};
use crate::nystrom::{BlockOracle, Ring};

#[derive(Clone, Copy, Debug)]
pub struct HbsOptions {
    pub tol: f64,
    /// Leaf size in nodes (two unknowns per node).
    pub leaf_size: usize,
    pub n_proxy: usize,
    /// Proxy circle radius relative to the box radius.
    pub proxy_ratio: f64,
    /// Blocks with condition estimate above this are reported singular.
    pub singular_cond: f64,
}

impl Default for HbsOptions {
    fn default() -> Self {
        HbsOptions {
            tol: 1e-10,
            leaf_size: 64,
            n_proxy: 64,
            proxy_ratio: 1.5,
            singular_cond: 1e12,
        }
    }
}

impl HbsOptions {
    pub fn with_tol(tol: f64) -> Self {
        HbsOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct HbsNode {
    /// Node range `[start, end)`; unknowns `[2 start, 2 end)`.
    pub start: usize,
    pub end: usize,
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Option<[usize; 2]>,
    /// Skeleton unknowns (global indices) after compression.
    pub row_skel: Vec<usize>,
    pub col_skel: Vec<usize>,
    /// Row interpolation, `candidates × k`.
    pub u: Mat<f64>,
    /// Column interpolation, `candidates × k`.
    pub v: Mat<f64>,
    /// Dense diagonal block (leaves only).
    pub d: Mat<f64>,
    /// Sibling couplings `A(row_skel α, col_skel β)` and `A(row_skel β, col_skel α)` (parents only).
    pub b12: Mat<f64>,
    pub b21: Mat<f64>,
}

impl HbsNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn dof_range(&self) -> std::ops::Range<usize> {
        2 * self.start..2 * self.end
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }
}

#[derive(Clone, Debug)]
struct InverseFactors {
    e: Mat<f64>,
    ft: Mat<f64>,
    g: Mat<f64>,
}

/// HBS representation of a square matrix, optionally with its inverse.
#[derive(Clone, Debug)]
pub struct HbsOperator {
    pub n: usize,
    pub opts: HbsOptions,
    pub nodes: Vec<HbsNode>,
    inverse: Option<(Vec<InverseFactors>, Mat<f64>)>,
}

pub(crate) fn bounding_circle(points: &[Point]) -> (Point, f64) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let r = points.iter().map(|p| dist(*p, c)).fold(0.0, f64::max);
    (c, r)
}

/// Rescale the last column of `m` to the largest norm among the other columns.
pub(crate) fn balance_last_col(m: &mut Mat<f64>, from_col: usize) {
    let n = m.ncols();
    if n <= from_col + 1 {
        return;
    }
    let norm = |m: &Mat<f64>, j: usize| m.col_as_slice(j).iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = (from_col..n - 1).map(|j| norm(m, j)).fold(0.0, f64::max);
    let cur = norm(m, n - 1);
    if cur > 0.0 && target > 0.0 {
        let s = target / cur;
        m.col_as_slice_mut(n - 1).iter_mut().for_each(|v| *v *= s);
    }
}

/// Rescale the last row of `m` to the largest norm among rows `from_row..`.
pub(crate) fn balance_last_row(m: &mut Mat<f64>, from_row: usize) {
    let n = m.nrows();
    if n <= from_row + 1 {
        return;
    }
    let norm = |m: &Mat<f64>, i: usize| (0..m.ncols()).map(|j| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt();
    let target = (from_row..n - 1).map(|i| norm(m, i)).fold(0.0, f64::max);
    let cur = norm(m, n - 1);
    if cur > 0.0 && target > 0.0 {
        let s = target / cur;
        for j in 0..m.ncols() {
            m[(n - 1, j)] *= s;
        }
    }
}

/// Inverse of a small dense matrix together with its 1-norm condition number.
fn inverse_with_cond(a: &Mat<f64>) -> (Mat<f64>, f64) {
    let n = a.nrows();
    if n == 0 {
        return (Mat::zeros(0, 0), 1.0);
    }
    let inv = a.partial_piv_lu().inverse();
    let norm1 = |m: &Mat<f64>| {
        (0..m.ncols())
            .map(|j| m.col_as_slice(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let cond = norm1(a) * norm1(&inv);
    let cond = if cond.is_finite() { cond } else { f64::INFINITY };
    (inv, cond)
}

impl HbsOperator {
    /// Compress the matrix given by `oracle`, whose nodes must be ordered along the boundary.
    pub fn compress<O: BlockOracle + ?Sized>(oracle: &O, opts: HbsOptions) -> Result<Self> {
        let n_nodes = oracle.n_nodes();
        if n_nodes == 0 {
            return Err(Error::InvalidInput("cannot compress an empty matrix".into()));
        }
        let mut nodes = vec![HbsNode {
            start: 0,
            end: n_nodes,
            level: 0,
            parent: None,
            children: None,
            row_skel: Vec::new(),
            col_skel: Vec::new(),
            u: Mat::zeros(0, 0),
            v: Mat::zeros(0, 0),
            d: Mat::zeros(0, 0),
            b12: Mat::zeros(0, 0),
            b21: Mat::zeros(0, 0),
        }];
        let mut i = 0;
        while i < nodes.len() {
            let (s, e, lvl) = (nodes[i].start, nodes[i].end, nodes[i].level);
            if e - s > opts.leaf_size.max(1) {
                let mid = s + (e - s) / 2;
                let base = nodes.len();
                for (a, b) in [(s, mid), (mid, e)] {
                    let mut child = nodes[0].clone();
                    child.start = a;
                    child.end = b;
                    child.level = lvl + 1;
                    child.parent = Some(i);
                    child.children = None;
                    nodes.push(child);
                }
                nodes[i].children = Some([base, base + 1]);
            }
            i += 1;
        }
        let points: Vec<Point> = (0..n_nodes).map(|i| oracle.point(i)).collect();
        for t in (0..nodes.len()).rev() {
            if let Some([a, b]) = nodes[t].children {
                nodes[t].b12 = oracle.block(&nodes[a].row_skel, &nodes[b].col_skel);
                nodes[t].b21 = oracle.block(&nodes[b].row_skel, &nodes[a].col_skel);
            } else {
                let dofs: Vec<usize> = nodes[t].dof_range().collect();
                nodes[t].d = oracle.block(&dofs, &dofs);
            }
            if t == 0 {
                break;
            }
            let (cand_r, cand_c) = match nodes[t].children {
                None => {
                    let dofs: Vec<usize> = nodes[t].dof_range().collect();
                    (dofs.clone(), dofs)
                }
                Some([a, b]) => (
                    [nodes[a].row_skel.clone(), nodes[b].row_skel.clone()].concat(),
                    [nodes[a].col_skel.clone(), nodes[b].col_skel.clone()].concat(),
                ),
            };
            let (s, e) = (nodes[t].start, nodes[t].end);
            let (center, radius) = bounding_circle(&points[s..e]);
            let radius = radius.max(1e-300);
            let ring = Ring::new(center, opts.proxy_ratio * radius, opts.n_proxy);
            let ring2 = Ring::new(center, 1.5 * opts.proxy_ratio * radius, opts.n_proxy);
            let near: Vec<usize> = (0..n_nodes)
                .filter(|&j| (j < s || j >= e) && ring.contains(points[j]))
                .flat_map(|j| [2 * j, 2 * j + 1])
                .collect();
            let mut ps = oracle.proxy_sources(&cand_r, &ring);
            if ps.ncols() > 4 * opts.n_proxy {
                balance_last_col(&mut ps, 0);
            }
            let near_r = oracle.block(&cand_r, &near);
            let m_r = hstack(&[near_r.as_ref(), ps.as_ref()]);
            let mut pt = oracle.proxy_targets(&cand_c, &[ring.clone(), ring2]);
            if pt.nrows() > 4 * opts.n_proxy {
                balance_last_row(&mut pt, 0);
            }
            let near_c = oracle.block(&near, &cand_c);
            let m_c = vstack(&[near_c.as_ref(), pt.as_ref()]);
            let mut id_r = row_id_with(m_r.as_ref(), IdOptions::tol(opts.tol));
            let mut id_c = col_id_with(m_c.as_ref(), IdOptions::tol(opts.tol));
            let k = id_r.rank.max(id_c.rank);
            let ncand = cand_r.len();
            if k >= ncand || k > m_r.ncols() || k > m_c.nrows() {
                debug!("hbs node {t}: rank {k} of {ncand} candidates, stored uncompressed");
                nodes[t].u = Mat::identity(ncand, ncand);
                nodes[t].v = Mat::identity(ncand, ncand);
                nodes[t].row_skel = cand_r;
                nodes[t].col_skel = cand_c;
                continue;
            }
            if id_r.rank < k {
                id_r = row_id_with(m_r.as_ref(), IdOptions { tol: opts.tol, min_rank: k, max_rank: k });
            }
            if id_c.rank < k {
                id_c = col_id_with(m_c.as_ref(), IdOptions { tol: opts.tol, min_rank: k, max_rank: k });
            }
            nodes[t].row_skel = id_r.skeleton().iter().map(|&i| cand_r[i]).collect();
            nodes[t].col_skel = id_c.skeleton().iter().map(|&i| cand_c[i]).collect();
            nodes[t].u = id_r.p;
            nodes[t].v = id_c.p;
        }
        Ok(HbsOperator {
            n: 2 * n_nodes,
            opts,
            nodes,
            inverse: None,
        })
    }

    pub fn has_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    /// Total number of skeleton unknowns over all non-root boxes.
    pub fn total_skeleton(&self) -> usize {
        self.nodes.iter().skip(1).map(|n| n.rank()).sum()
    }

    pub fn max_rank(&self) -> usize {
        self.nodes.iter().skip(1).map(|n| n.rank()).max().unwrap_or(0)
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    fn sibling_matrix(&self, t: usize, dhat: &[Mat<f64>]) -> Mat<f64> {
        let [a, b] = self.nodes[t].children.expect("parent node");
        let (ka, kb) = (dhat[a].nrows(), dhat[b].nrows());
        let mut m = Mat::zeros(ka + kb, ka + kb);
        m.as_mut().submatrix_mut(0, 0, ka, ka).copy_from(&dhat[a]);
        m.as_mut().submatrix_mut(0, ka, ka, kb).copy_from(&self.nodes[t].b12);
        m.as_mut().submatrix_mut(ka, 0, kb, ka).copy_from(&self.nodes[t].b21);
        m.as_mut().submatrix_mut(ka, ka, kb, kb).copy_from(&dhat[b]);
        m
    }

    /// Build the telescoping inverse factors.
    pub fn invert(&mut self) -> Result<()> {
        let nn = self.nodes.len();
        let mut factors: Vec<InverseFactors> = vec![
            InverseFactors {
                e: Mat::zeros(0, 0),
                ft: Mat::zeros(0, 0),
                g: Mat::zeros(0, 0),
            };
            nn
        ];
        let mut dhat: Vec<Mat<f64>> = vec![Mat::zeros(0, 0); nn];
        let limit = self.opts.singular_cond;
        for t in (1..nn).rev() {
            let node = &self.nodes[t];
            let dtil = if node.is_leaf() { node.d.clone() } else { self.sibling_matrix(t, &dhat) };
            let (dinv, cond) = inverse_with_cond(&dtil);
            if !(cond <= limit) {
                return Err(Error::HbsSingular { node: t, level: node.level, cond });
            }
            let dinv_u = &dinv * &node.u;
            let vt_dinv = node.v.transpose() * &dinv;
            let m = node.v.transpose() * &dinv_u;
            let (dh, cond2) = inverse_with_cond(&m);
            if !(cond2 <= limit) {
                return Err(Error::HbsSingular { node: t, level: node.level, cond: cond2 });
            }
            let e = &dinv_u * &dh;
            let ft = &dh * &vt_dinv;
            let g = &dinv - &e * &vt_dinv;
            factors[t] = InverseFactors { e, ft, g };
            dhat[t] = dh;
        }
        let root_block = if self.nodes[0].is_leaf() { self.nodes[0].d.clone() } else { self.sibling_matrix(0, &dhat) };
        let cond = if root_block.nrows() > 0 {
            crate::linalg::condition_number(root_block.as_ref())?
        } else {
            1.0
        };
        if !(cond <= limit) {
            return Err(Error::HbsSingular { node: 0, level: 0, cond });
        }
        let root_inv = root_block.partial_piv_lu().inverse();
        self.inverse = Some((factors, root_inv));
        Ok(())
    }

    fn apply_impl(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let nn = self.nodes.len();
        let mut y = vec![0.0; self.n];
        let root = &self.nodes[0];
        if root.is_leaf() {
            let d = if transpose { root.d.transpose().to_owned() } else { root.d.clone() };
            return crate::linalg::matvec(d.as_ref(), x);
        }
        // V compresses the input and U interpolates the output; roles swap for Aᵀ
        let mut xhat: Vec<Vec<f64>> = vec![Vec::new(); nn];
        for t in (1..nn).rev() {
            let node = &self.nodes[t];
            let src: Vec<f64> = match node.children {
                None => x[node.dof_range()].to_vec(),
                Some([a, b]) => [xhat[a].clone(), xhat[b].clone()].concat(),
            };
            xhat[t] = crate::linalg::matvec_t(basis_in(node, transpose), &src);
        }
        let mut yhat: Vec<Vec<f64>> = (0..nn).map(|t| vec![0.0; self.nodes[t].rank()]).collect();
        for t in 0..nn {
            let node = &self.nodes[t];
            if let Some([a, b]) = node.children {
                let (ya, yb) = if transpose {
                    (
                        crate::linalg::matvec_t(node.b21.as_ref(), &xhat[b]),
                        crate::linalg::matvec_t(node.b12.as_ref(), &xhat[a]),
                    )
                } else {
                    (
                        crate::linalg::matvec(node.b12.as_ref(), &xhat[b]),
                        crate::linalg::matvec(node.b21.as_ref(), &xhat[a]),
                    )
                };
                let mut from_parent = vec![0.0; self.nodes[a].rank() + self.nodes[b].rank()];
                if t != 0 {
                    from_parent = crate::linalg::matvec(basis_out(node, transpose), &yhat[t]);
                }
                let ka = self.nodes[a].rank();
                for (i, v) in ya.iter().enumerate() {
                    yhat[a][i] += v + from_parent[i];
                }
                for (i, v) in yb.iter().enumerate() {
                    yhat[b][i] += v + from_parent[ka + i];
                }
            } else {
                let r = node.dof_range();
                let local = if transpose {
                    crate::linalg::matvec_t(node.d.as_ref(), &x[r.clone()])
                } else {
                    crate::linalg::matvec(node.d.as_ref(), &x[r.clone()])
                };
                let up = crate::linalg::matvec(basis_out(node, transpose), &yhat[t]);
                for (k, i) in r.enumerate() {
                    y[i] = local[k] + up[k];
                }
            }
        }
        y
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("hbs apply input", self.n, x.len())?;
        Ok(self.apply_impl(x, false))
    }

    /// `Aᵀ x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("hbs apply input", self.n, x.len())?;
        Ok(self.apply_impl(x, true))
    }

    fn solve_impl(&self, b: MatRef<'_, f64>, transpose: bool) -> Result<Mat<f64>> {
        let (factors, root_inv) = self.inverse.as_ref().ok_or(Error::MissingInverse)?;
        let nn = self.nodes.len();
        let root = &self.nodes[0];
        // op(m) x, with op the transpose when solving with Aᵀ
        let mul = |m: &Mat<f64>, tr: bool, x: MatRef<'_, f64>| -> Mat<f64> {
            if tr {
                m.transpose() * x
            } else {
                m * x
            }
        };
        if root.is_leaf() {
            return Ok(mul(root_inv, transpose, b));
        }
        let gather = |t: usize, bhat: &[Mat<f64>]| -> Mat<f64> {
            match self.nodes[t].children {
                None => {
                    let r = self.nodes[t].dof_range();
                    b.subrows(r.start, r.len()).to_owned()
                }
                Some([a, c]) => vstack(&[bhat[a].as_ref(), bhat[c].as_ref()]),
            }
        };
        // upward: bhat = Fᵀ b  (Eᵀ b for the transpose)
        let mut bhat: Vec<Mat<f64>> = vec![Mat::zeros(0, 0); nn];
        for t in (1..nn).rev() {
            let src = gather(t, &bhat);
            let f = &factors[t];
            bhat[t] = if transpose { mul(&f.e, true, src.as_ref()) } else { mul(&f.ft, false, src.as_ref()) };
        }
        let mut xhat: Vec<Mat<f64>> = vec![Mat::zeros(0, 0); nn];
        let root_rhs = gather(0, &bhat);
        let root_sol = mul(root_inv, transpose, root_rhs.as_ref());
        let mut x = Mat::zeros(self.n, b.ncols());
        let split = |t: usize, v: Mat<f64>, xhat: &mut Vec<Mat<f64>>, x: &mut Mat<f64>| match self.nodes[t].children {
            Some([a, c]) => {
                let ka = self.nodes[a].rank();
                xhat[a] = v.subrows(0, ka).to_owned();
                xhat[c] = v.subrows(ka, v.nrows() - ka).to_owned();
            }
            None => {
                let r = self.nodes[t].dof_range();
                x.as_mut().subrows_mut(r.start, r.len()).copy_from(&v);
            }
        };
        split(0, root_sol, &mut xhat, &mut x);
        for t in 1..nn {
            let f = &factors[t];
            let src = gather(t, &bhat);
            let v = if transpose {
                mul(&f.g, true, src.as_ref()) + mul(&f.ft, true, xhat[t].as_ref())
            } else {
                mul(&f.g, false, src.as_ref()) + mul(&f.e, false, xhat[t].as_ref())
            };
            split(t, v, &mut xhat, &mut x);
        }
        Ok(x)
    }

    /// `A⁻¹ b` from the inverse factors.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("hbs solve input", self.n, b.len())?;
        Ok(self.solve_impl(ColRef::from_slice(b).as_mat(), false)?.col_as_slice(0).to_vec())
    }

    /// `A⁻ᵀ b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("hbs solve input", self.n, b.len())?;
        Ok(self.solve_impl(ColRef::from_slice(b).as_mat(), true)?.col_as_slice(0).to_vec())
    }

    /// Solve for every column of `b`.
    pub fn solve_mat(&self, b: &Mat<f64>) -> Result<Mat<f64>> {
        check_len("hbs solve input", self.n, b.nrows())?;
        self.solve_impl(b.as_ref(), false)
    }

    /// Serialize in the versioned `HBS1` little-endian format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"HBS1")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u64::<LittleEndian>(self.n as u64)?;
        w.write_f64::<LittleEndian>(self.opts.tol)?;
        w.write_u64::<LittleEndian>(self.opts.leaf_size as u64)?;
        w.write_u64::<LittleEndian>(self.opts.n_proxy as u64)?;
        w.write_f64::<LittleEndian>(self.opts.proxy_ratio)?;
        w.write_f64::<LittleEndian>(self.opts.singular_cond)?;
        w.write_u64::<LittleEndian>(self.nodes.len() as u64)?;
        for n in &self.nodes {
            w.write_u64::<LittleEndian>(n.start as u64)?;
            w.write_u64::<LittleEndian>(n.end as u64)?;
            w.write_u64::<LittleEndian>(n.level as u64)?;
            w.write_i64::<LittleEndian>(n.parent.map(|p| p as i64).unwrap_or(-1))?;
            let [c0, c1] = n.children.map(|c| [c[0] as i64, c[1] as i64]).unwrap_or([-1, -1]);
            w.write_i64::<LittleEndian>(c0)?;
            w.write_i64::<LittleEndian>(c1)?;
            write_indices(&mut w, &n.row_skel)?;
            write_indices(&mut w, &n.col_skel)?;
            for m in [&n.u, &n.v, &n.d, &n.b12, &n.b21] {
                write_mat(&mut w, m)?;
            }
        }
        match &self.inverse {
            None => w.write_u8(0)?,
            Some((factors, root)) => {
                w.write_u8(1)?;
                for f in factors {
                    write_mat(&mut w, &f.e)?;
                    write_mat(&mut w, &f.ft)?;
                    write_mat(&mut w, &f.g)?;
                }
                write_mat(&mut w, root)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"HBS1" {
            return Err(Error::Format("bad magic bytes, expected HBS1".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported HBS version {version}")));
        }
        let n = r.read_u64::<LittleEndian>()? as usize;
        let opts = HbsOptions {
            tol: r.read_f64::<LittleEndian>()?,
            leaf_size: r.read_u64::<LittleEndian>()? as usize,
            n_proxy: r.read_u64::<LittleEndian>()? as usize,
            proxy_ratio: r.read_f64::<LittleEndian>()?,
            singular_cond: r.read_f64::<LittleEndian>()?,
        };
        let nn = r.read_u64::<LittleEndian>()? as usize;
        let mut nodes = Vec::with_capacity(nn);
        for _ in 0..nn {
            let start = r.read_u64::<LittleEndian>()? as usize;
            let end = r.read_u64::<LittleEndian>()? as usize;
            let level = r.read_u64::<LittleEndian>()? as usize;
            let parent = r.read_i64::<LittleEndian>()?;
            let c0 = r.read_i64::<LittleEndian>()?;
            let c1 = r.read_i64::<LittleEndian>()?;
            let row_skel = read_indices(&mut r)?;
            let col_skel = read_indices(&mut r)?;
            let u = read_mat(&mut r)?;
            let v = read_mat(&mut r)?;
            let d = read_mat(&mut r)?;
            let b12 = read_mat(&mut r)?;
            let b21 = read_mat(&mut r)?;
            nodes.push(HbsNode {
                start,
                end,
                level,
                parent: (parent >= 0).then_some(parent as usize),
                children: (c0 >= 0).then_some([c0 as usize, c1 as usize]),
                row_skel,
                col_skel,
                u,
                v,
                d,
                b12,
                b21,
            });
        }
        let inverse = match r.read_u8()? {
            0 => None,
            1 => {
                let mut factors = Vec::with_capacity(nn);
                for _ in 0..nn {
                    let e = read_mat(&mut r)?;
                    let ft = read_mat(&mut r)?;
                    let g = read_mat(&mut r)?;
                    factors.push(InverseFactors { e, ft, g });
                }
                Some((factors, read_mat(&mut r)?))
            }
            x => return Err(Error::Format(format!("bad inverse flag {x}"))),
        };
        Ok(HbsOperator { n, opts, nodes, inverse })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn basis_in(n: &HbsNode, transpose: bool) -> faer::MatRef<'_, f64> {
    if transpose { n.u.as_ref() } else { n.v.as_ref() }
}

fn basis_out(n: &HbsNode, transpose: bool) -> faer::MatRef<'_, f64> {
    if transpose { n.v.as_ref() } else { n.u.as_ref() }
}

fn write_indices<W: Write>(w: &mut W, idx: &[usize]) -> Result<()> {
    w.write_u64::<LittleEndian>(idx.len() as u64)?;
    for &i in idx {
        w.write_u64::<LittleEndian>(i as u64)?;
    }
    Ok(())
}

fn read_indices<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    (0..n).map(|_| Ok(r.read_u64::<LittleEndian>()? as usize)).collect()
}

fn write_mat<W: Write>(w: &mut W, m: &Mat<f64>) -> Result<()> {
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    for j in 0..m.ncols() {
        for &v in m.col_as_slice(j) {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R) -> Result<Mat<f64>> {
    let m = r.read_u64::<LittleEndian>()? as usize;
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut a = Mat::zeros(m, n);
    for j in 0..n {
        for v in a.col_as_slice_mut(j) {
            *v = r.read_f64::<LittleEndian>()?;
        }
    }
    Ok(a)
}
