//! Dense row-major matrices, strided GEMM, and a one-sided Jacobi SVD.
//!
//! Everything here is 64-bit. Products go through `matrixmultiply`, which is
//! single-threaded and uses a fixed accumulation order, so results do not
//! depend on how many threads the caller runs.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Maximum number of cyclic Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 60;
/// Columns count as orthogonal once |<a_p, a_q>| <= tol * |a_p| |a_q|.
pub const SVD_TOLERANCE: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = &self.row(r)[..self.cols.min(8)];
            writeln!(f, "  {row:?}{}", if self.cols > 8 { " ..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                site: format!("matrix entry ({}, {})", i / cols, i % cols),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Convenience for tests and small literals. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    /// Sum over columns: an `rows x 1` vector.
    pub fn row_sums(&self) -> Matrix {
        let data = (0..self.rows).map(|r| self.row(r).iter().sum()).collect();
        Matrix {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Copy of columns `start..start + count`.
    pub fn column_block(&self, start: usize, count: usize) -> Matrix {
        assert!(start + count <= self.cols);
        Matrix::from_fn(self.rows, count, |r, c| self[(r, start + c)])
    }

    /// Copy of the leading `count` columns.
    pub fn leading_columns(&self, count: usize) -> Matrix {
        self.column_block(0, count)
    }

    pub(crate) fn view(&self) -> View<'_> {
        View {
            data: &self.data,
            off: 0,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
        }
    }

    pub(crate) fn view_mut(&mut self) -> ViewMut<'_> {
        ViewMut {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
            off: 0,
            data: &mut self.data,
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Strided read-only window into a matrix buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    pub(crate) fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub(crate) fn sub(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "view out of range");
        View {
            off: self.off + r0 * self.rs + c0 * self.cs,
            rows,
            cols,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view exceeds buffer");
        }
    }
}

pub(crate) struct ViewMut<'a> {
    data: &'a mut [f64],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> ViewMut<'a> {
    pub(crate) fn sub(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "view out of range");
        ViewMut {
            off: self.off + r0 * self.rs + c0 * self.cs,
            rows,
            cols,
            ..self
        }
    }
}

/// `c = alpha * a * b + beta * c` on strided views.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dims");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output dims");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.off + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "view exceeds buffer");
    }
    // SAFETY: every index touched lies inside the checked extents above, and
    // `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a.view(), b.view(), 0.0, out.view_mut());
    Ok(out)
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm(1.0, a.view().t(), b.view(), 0.0, out.view_mut());
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm(1.0, a.view(), b.view().t(), 0.0, out.view_mut());
    Ok(out)
}

/// Population variance of all entries (divides by the entry count).
pub fn variance(w: &Matrix) -> Result<f64> {
    let n = w.len();
    if n < 2 {
        return Err(Error::domain("variance needs at least 2 entries"));
    }
    let mean = w.data.iter().sum::<f64>() / n as f64;
    Ok(w.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64)
}

/// Thin SVD `w = u * diag(sigma) * vt` with `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    /// `u * diag(sigma) * vt`, optionally keeping only the leading `rank` terms.
    pub fn reconstruct(&self, rank: Option<usize>) -> Matrix {
        let k = rank.unwrap_or(self.sigma.len()).min(self.sigma.len());
        let mut us = self.u.leading_columns(k);
        for r in 0..us.rows {
            for (c, s) in us.row_mut(r).iter_mut().zip(&self.sigma[..k]) {
                *c *= s;
            }
        }
        let vt = Matrix::from_fn(k, self.vt.cols, |r, c| self.vt[(r, c)]);
        matmul(&us, &vt).expect("conformable by construction")
    }
}

/// Deterministic thin SVD by cyclic one-sided Jacobi on the taller orientation.
pub fn svd(w: &Matrix) -> Result<SvdResult> {
    if !w.is_finite() {
        return Err(Error::NonFinite {
            site: "svd input".into(),
        });
    }
    if w.rows >= w.cols {
        jacobi_tall(w)
    } else {
        let t = jacobi_tall(&w.transpose())?;
        let mut out = SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(a: &mut [f64], p: usize, q: usize, len: usize, c: f64, s: f64) {
    let (lo, hi) = a.split_at_mut(q * len);
    let ap = &mut lo[p * len..(p + 1) * len];
    let aq = &mut hi[..len];
    for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn jacobi_tall(w: &Matrix) -> Result<SvdResult> {
    let (m, n) = w.shape();
    // Column-contiguous copies: column j lives at [j*m, (j+1)*m).
    let mut a = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            a[c * m + r] = w[(r, c)];
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }
    let mut norms2: Vec<f64> = (0..n).map(|j| dot(&a[j * m..(j + 1) * m], &a[j * m..(j + 1) * m])).collect();
    let frob2: f64 = norms2.iter().sum();
    // Below this squared norm a column is numerically null and left alone.
    let null2 = f64::EPSILON * f64::EPSILON * m as f64 * frob2;

    let mut converged = n < 2 || frob2 == 0.0;
    let mut off_norm = 0.0;
    let mut sweep = 0;
    while !converged && sweep < SVD_MAX_SWEEPS {
        sweep += 1;
        let mut rotated = false;
        let mut off2 = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = norms2[p];
                let beta = norms2[q];
                if alpha <= null2 || beta <= null2 {
                    continue;
                }
                let gamma = dot(&a[p * m..(p + 1) * m], &a[q * m..(q + 1) * m]);
                let scale = (alpha * beta).sqrt();
                off2 += (gamma / scale) * (gamma / scale);
                if gamma.abs() <= SVD_TOLERANCE * scale {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, m, c, s);
                rotate(&mut v, p, q, n, c, s);
                norms2[p] = dot(&a[p * m..(p + 1) * m], &a[p * m..(p + 1) * m]);
                norms2[q] = dot(&a[q * m..(q + 1) * m], &a[q * m..(q + 1) * m]);
            }
        }
        off_norm = off2.sqrt();
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: SVD_MAX_SWEEPS,
            off_norm,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms2[j].total_cmp(&norms2[i]).then(i.cmp(&j)));

    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut filled = vec![false; n];
    for (k, &j) in order.iter().enumerate() {
        let col = &a[j * m..(j + 1) * m];
        let s = dot(col, col).sqrt();
        sigma.push(s);
        if norms2[j] > null2 && s > 0.0 {
            for r in 0..m {
                u[(r, k)] = col[r] / s;
            }
            filled[k] = true;
        }
        for c in 0..n {
            vt[(k, c)] = v[j * n + c];
        }
    }
    complete_basis(&mut u, &filled);

    let mut out = SvdResult { u, sigma, vt };
    fix_signs(&mut out);
    Ok(out)
}

/// Fills unset columns of `u` with unit vectors orthogonal to everything else.
fn complete_basis(u: &mut Matrix, filled: &[bool]) {
    let (m, k) = u.shape();
    let mut have: Vec<usize> = (0..k).filter(|&j| filled[j]).collect();
    let residual = |u: &Matrix, have: &[usize], i: usize| {
        let mut x = vec![0.0; m];
        x[i] = 1.0;
        for _ in 0..2 {
            for &h in have {
                let proj: f64 = (0..m).map(|r| u[(r, h)] * x[r]).sum();
                for (r, xr) in x.iter_mut().enumerate() {
                    *xr -= proj * u[(r, h)];
                }
            }
        }
        x
    };
    for j in 0..k {
        if filled[j] {
            continue;
        }
        // the standard basis vector least covered by the current columns
        let (x, norm) = (0..m)
            .map(|i| {
                let x = residual(u, &have, i);
                let n = dot(&x, &x).sqrt();
                (x, n)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("matrix has rows");
        for (r, xr) in x.iter().enumerate() {
            u[(r, j)] = xr / norm;
        }
        have.push(j);
    }
}

/// Makes the largest-magnitude entry of every left singular vector non-negative.
fn fix_signs(s: &mut SvdResult) {
    let (m, k) = s.u.shape();
    for j in 0..k {
        let mut best = 0;
        for r in 1..m {
            if s.u[(r, j)].abs() > s.u[(best, j)].abs() {
                best = r;
            }
        }
        if s.u[(best, j)] < 0.0 {
            for r in 0..m {
                s.u[(r, j)] = -s.u[(r, j)];
            }
            for v in s.vt.row_mut(j) {
                *v = -*v;
            }
        }
    }
}
