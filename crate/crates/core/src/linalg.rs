//! Dense helpers: interpolative decomposition, truncated SVD, norm and condition estimates.

use faer::linalg::matmul::matmul;
use faer::{Accum, ColMut, ColRef, Mat, MatRef, Par};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A linear map acting on slices.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for Mat<f64> {
    fn nrows(&self) -> usize {
        Mat::nrows(self)
    }
    fn ncols(&self) -> usize {
        Mat::ncols(self)
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        matvec_into(self.as_ref(), x, y);
    }
}

/// Operator given by a closure.
pub struct FnOperator<F: Fn(&[f64], &mut [f64])> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64])> LinearOperator for FnOperator<F> {
    fn nrows(&self) -> usize {
        self.n
    }
    fn ncols(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (self.f)(x, y)
    }
}

pub fn matvec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    matvec_into(a, x, &mut y);
    y
}

pub fn matvec_into(a: MatRef<'_, f64>, x: &[f64], y: &mut [f64]) {
    assert_eq!(a.ncols(), x.len());
    assert_eq!(a.nrows(), y.len());
    let x = ColRef::from_slice(x);
    let y = ColMut::from_slice_mut(y);
    matmul(y.as_mat_mut(), Accum::Replace, a, x.as_mat(), 1.0, Par::Seq);
}

/// `y = aᵀ x`.
pub fn matvec_t(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.ncols()];
    matvec_into(a.transpose(), x, &mut y);
    y
}

pub fn col_mat(x: &[f64]) -> Mat<f64> {
    Mat::from_fn(x.len(), 1, |i, _| x[i])
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows of `a` selected by `rows`.
pub fn select_rows(a: MatRef<'_, f64>, rows: &[usize]) -> Mat<f64> {
    Mat::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

pub fn select_cols(a: MatRef<'_, f64>, cols: &[usize]) -> Mat<f64> {
    Mat::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])])
}

/// Stack matrices vertically; all must share the column count.
pub fn vstack(blocks: &[MatRef<'_, f64>]) -> Mat<f64> {
    let ncols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let nrows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(nrows, ncols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), ncols);
        out.as_mut().submatrix_mut(r, 0, b.nrows(), ncols).copy_from(*b);
        r += b.nrows();
    }
    out
}

pub fn hstack(blocks: &[MatRef<'_, f64>]) -> Mat<f64> {
    let nrows = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let ncols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(nrows, ncols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), nrows);
        out.as_mut().submatrix_mut(0, c, nrows, b.ncols()).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn frobenius(a: MatRef<'_, f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)] * a[(i, j)];
        }
    }
    s.sqrt()
}

/// Interpolative decomposition `W ≈ P · W(J[..k], :)`.
#[derive(Clone, Debug)]
pub struct IdResult {
    /// Row permutation; the first `rank` entries are the skeleton rows.
    pub perm: Vec<usize>,
    pub rank: usize,
    /// Interpolation matrix, `m × rank`, with `P(J[..k], :) = I`.
    pub p: Mat<f64>,
    pub tol: f64,
}

impl IdResult {
    pub fn skeleton(&self) -> &[usize] {
        &self.perm[..self.rank]
    }

    pub fn nrows(&self) -> usize {
        self.perm.len()
    }

    /// Rank-zero ID of an `m`-row matrix.
    pub fn empty(m: usize, tol: f64) -> Self {
        IdResult {
            perm: (0..m).collect(),
            rank: 0,
            p: Mat::zeros(m, 0),
            tol,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IdOptions {
    pub tol: f64,
    pub min_rank: usize,
    pub max_rank: usize,
}

impl IdOptions {
    pub fn tol(tol: f64) -> Self {
        IdOptions {
            tol,
            min_rank: 0,
            max_rank: usize::MAX,
        }
    }
}

/// Row ID with relative tolerance `tol`.
pub fn row_id(w: MatRef<'_, f64>, tol: f64) -> IdResult {
    row_id_with(w, IdOptions::tol(tol))
}

/// Column-pivoted Householder triangularization of `Wᵀ`, truncated once the
/// Frobenius norm of the trailing block drops below `tol ‖W‖₂`. The trailing
/// Frobenius norm bounds the spectral error of the ID.
pub fn row_id_with(w: MatRef<'_, f64>, opts: IdOptions) -> IdResult {
    let m = w.nrows();
    let n = w.ncols();
    if m == 0 {
        return IdResult::empty(0, opts.tol);
    }
    // a = wᵀ stored flat, column j (row j of w) at a[j * n..(j + 1) * n]
    let mut a = vec![0.0; m * n];
    for i in 0..n {
        for (j, v) in w.col(i).iter().enumerate() {
            a[j * n + i] = *v;
        }
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let col_norm2 = |a: &[f64], j: usize, from: usize| -> f64 { a[j * n + from..(j + 1) * n].iter().map(|v| v * v).sum() };
    let mut c: Vec<f64> = (0..m).map(|j| col_norm2(&a, j, 0)).collect();
    let mut c_ref = c.clone();
    let max_row = c.iter().cloned().fold(0.0, f64::max).sqrt();
    let scale = if max_row > 0.0 && m > 1 && n > 1 {
        // a few power steps give a lower bound on ‖W‖₂, which keeps the threshold safe
        let est = power_norm(n, &|x| matvec(w, x), &|y| matvec_t(w, y), 12, 0x1d);
        est.max(max_row)
    } else {
        max_row
    };
    let max_rank = opts.max_rank.min(m).min(n);
    let mut k = 0;
    let threshold = opts.tol * scale;
    let mut v = vec![0.0; n];
    while k < max_rank {
        let rest: f64 = c[k..].iter().sum::<f64>().max(0.0).sqrt();
        if k >= opts.min_rank && (rest <= threshold || scale == 0.0) {
            break;
        }
        // pivot: largest remaining norm, first index on ties
        let mut p = k;
        for j in k + 1..m {
            if c[j] > c[p] {
                p = j;
            }
        }
        if p != k {
            perm.swap(k, p);
            c.swap(k, p);
            c_ref.swap(k, p);
            let (lo, hi) = a.split_at_mut(p * n);
            lo[k * n..(k + 1) * n].swap_with_slice(&mut hi[..n]);
        }
        // Householder reflector for a[k.., k]
        let len = n - k;
        let colk = &a[k * n + k..(k + 1) * n];
        let alpha = colk.iter().map(|x| x * x).sum::<f64>().sqrt();
        if alpha == 0.0 {
            // remaining block is exactly zero; forced extra skeletons get zero coefficients
            if k >= opts.min_rank {
                break;
            }
            c[k] = 0.0;
            k += 1;
            continue;
        }
        let x0 = colk[0];
        let beta_sign = if x0 >= 0.0 { -1.0 } else { 1.0 };
        let rkk = beta_sign * alpha;
        v[..len].copy_from_slice(colk);
        v[0] -= rkk;
        let vnorm2: f64 = v[..len].iter().map(|x| x * x).sum();
        {
            let ck = &mut a[k * n..(k + 1) * n];
            ck[k] = rkk;
            for x in ck[k + 1..].iter_mut() {
                *x = 0.0;
            }
        }
        let v = &v[..len];
        let tau = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
        for (jj, col) in a[(k + 1) * n..].chunks_exact_mut(n).enumerate() {
            let j = k + 1 + jj;
            let cj = &mut col[k..];
            if tau != 0.0 {
                let s: f64 = cj.iter().zip(v).map(|(x, y)| x * y).sum();
                let f = tau * s;
                for (x, y) in cj.iter_mut().zip(v) {
                    *x -= f * y;
                }
            }
            let top = cj[0];
            c[j] -= top * top;
            if c[j] <= 1e-4 * c_ref[j] {
                c[j] = cj[1..].iter().map(|x| x * x).sum();
                c_ref[j] = c[j];
            }
        }
        c[k] = 0.0;
        k += 1;
    }
    let rank = k;
    // T = R11⁻¹ R12 by back substitution, rows of R11 copied out contiguously
    let rest = m - rank;
    let r11: Vec<f64> = (0..rank).flat_map(|i| (0..rank).map(move |l| (i, l))).map(|(i, l)| a[l * n + i]).collect();
    let mut t = Mat::<f64>::zeros(rank, rest);
    let mut tc = vec![0.0; rank];
    for jj in 0..rest {
        let col = &a[(rank + jj) * n..(rank + jj + 1) * n];
        for i in (0..rank).rev() {
            let row = &r11[i * rank..(i + 1) * rank];
            let s = col[i] - row[i + 1..].iter().zip(&tc[i + 1..]).map(|(x, y)| x * y).sum::<f64>();
            let d = row[i];
            tc[i] = if d == 0.0 { 0.0 } else { s / d };
        }
        t.col_as_slice_mut(jj).copy_from_slice(&tc);
    }
    let mut p = Mat::<f64>::zeros(m, rank);
    for i in 0..rank {
        p[(perm[i], i)] = 1.0;
    }
    for jj in 0..rest {
        let row = perm[rank + jj];
        for i in 0..rank {
            p[(row, i)] = t[(i, jj)];
        }
    }
    IdResult {
        perm,
        rank,
        p,
        tol: opts.tol,
    }
}

/// Column ID `W ≈ W(:, J[..k]) · Pᵀ`, returned as the row ID of `Wᵀ`.
pub fn col_id(w: MatRef<'_, f64>, tol: f64) -> IdResult {
    row_id(w.transpose(), tol)
}

pub fn col_id_with(w: MatRef<'_, f64>, opts: IdOptions) -> IdResult {
    row_id_with(w.transpose(), opts)
}

/// Truncated SVD `A ≈ U diag(s) Vᵀ` keeping `σ_i > tol σ_1`.
pub struct TruncatedSvd {
    pub u: Mat<f64>,
    pub s: Vec<f64>,
    pub v: Mat<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

/// Dimension below which dense SVD is used directly.
const DENSE_SVD_LIMIT: usize = 600;

pub fn truncated_svd(a: MatRef<'_, f64>, tol: f64, seed: u64) -> Result<TruncatedSvd> {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Ok(TruncatedSvd {
            u: Mat::zeros(m, 0),
            s: Vec::new(),
            v: Mat::zeros(n, 0),
        });
    }
    if m.min(n) <= DENSE_SVD_LIMIT {
        return dense_truncated_svd(a, tol);
    }
    // randomized range finder with adaptive sample count
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = 64.min(m.min(n));
    loop {
        let omega = gaussian(n, l, &mut rng);
        let y = a * &omega;
        let q0 = y.qr().compute_thin_Q();
        // one power step sharpens the captured subspace
        let z = a.transpose() * &q0;
        let y2 = a * &z;
        let q = y2.qr().compute_thin_Q();
        let b = q.transpose() * a;
        let svd = dense_truncated_svd(b.as_ref(), tol)?;
        let full = b.as_ref().singular_values().map_err(|_| Error::Format("svd failed".into()))?;
        let smallest = full.last().copied().unwrap_or(0.0);
        let largest = full.first().copied().unwrap_or(0.0);
        if smallest <= 0.1 * tol * largest || l >= m.min(n) {
            let u = &q * &svd.u;
            return Ok(TruncatedSvd { u, s: svd.s, v: svd.v });
        }
        l = (2 * l).min(m.min(n));
    }
}

fn dense_truncated_svd(a: MatRef<'_, f64>, tol: f64) -> Result<TruncatedSvd> {
    let svd = a.thin_svd().map_err(|_| Error::Format("svd did not converge".into()))?;
    let s = svd.S().column_vector();
    let s1 = if s.nrows() > 0 { s[0] } else { 0.0 };
    let k = (0..s.nrows()).take_while(|&i| s[i] > tol * s1 && s[i] > 0.0).count();
    Ok(TruncatedSvd {
        u: svd.U().subcols(0, k).to_owned(),
        s: (0..k).map(|i| s[i]).collect(),
        v: svd.V().subcols(0, k).to_owned(),
    })
}

pub fn gaussian(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
    Mat::from_fn(m, n, |_, _| StandardNormal.sample(rng))
}

/// All singular values, descending.
pub fn singular_values(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    a.singular_values().map_err(|_| Error::Format("svd did not converge".into()))
}

/// `σ_max / σ_min` over the smaller dimension (infinite if rank deficient).
pub fn condition_number(a: MatRef<'_, f64>) -> Result<f64> {
    let s = singular_values(a)?;
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => Ok(hi / lo),
        (Some(_), Some(_)) => Ok(f64::INFINITY),
        _ => Ok(1.0),
    }
}

/// Spectral norm of `op` by power iteration on `opᵀ op`, given both applies.
pub fn power_norm(
    n: usize,
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    apply_t: &dyn Fn(&[f64]) -> Vec<f64>,
    iters: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut est = 0.0;
    for _ in 0..iters {
        let y = apply(&x);
        let z = apply_t(&y);
        let nz = norm2(&z);
        if nz == 0.0 {
            return 0.0;
        }
        let new = nz.sqrt();
        x = z.into_iter().map(|v| v / nz).collect();
        if (new - est).abs() <= 1e-6 * new {
            return new;
        }
        est = new;
    }
    est
}
