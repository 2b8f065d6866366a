//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use lrsms_core::linalg::Matrix;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Row-major triple loop.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        let mut s = 0.0;
        for k in 0..a.cols() {
            s += a[(i, k)] * b[(k, j)];
        }
        s
    })
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)])
}

/// Singular values as square roots of the Gram matrix eigenvalues, from
/// nalgebra's symmetric eigensolver, sorted non-increasing.
pub fn gram_sigma(w: &Matrix) -> Vec<f64> {
    let a = to_na(w);
    let g = if w.rows() >= w.cols() { a.transpose() * &a } else { &a * a.transpose() };
    let mut ev: Vec<f64> = g.symmetric_eigen().eigenvalues.iter().map(|&e| e.max(0.0).sqrt()).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Best rank-`r` approximation from nalgebra's SVD.
pub fn trunc_svd(w: &Matrix, r: usize) -> Matrix {
    let d = to_na(w).svd(true, true);
    let (u, vt) = (d.u.unwrap(), d.v_t.unwrap());
    let mut order: Vec<usize> = (0..d.singular_values.len()).collect();
    order.sort_by(|&a, &b| d.singular_values[b].total_cmp(&d.singular_values[a]));
    Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        order[..r].iter().map(|&k| u[(i, k)] * d.singular_values[k] * vt[(k, j)]).sum()
    })
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-30)
}

/// Random orthogonal matrix from a QR factorization of a Gaussian draw.
pub fn orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = g.qr().q();
    Matrix::from_fn(n, n, |r, c| q[(r, c)])
}

/// Two-pass population variance.
pub fn two_pass_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Relative error with a small floor so near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}
