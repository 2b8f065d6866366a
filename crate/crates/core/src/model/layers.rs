//! Transformer sublayers with hand-written backward passes.
//!
//! Activations are feature-major `d x (batch * len)` matrices; column
//! `e * len + t` holds position `t` of example `e`.

use crate::error::Result;
use crate::factorized::{Linear, LinearCache};
use crate::linalg::{gemm, Matrix};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub shift: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

impl NormCache {
    pub(crate) fn bytes(&self) -> usize {
        (self.xhat.len() + self.rstd.len()) * 8
    }
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Matrix::from_fn(d, 1, |_, _| 1.0),
            shift: Matrix::zeros(d, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gain: Matrix::zeros(self.gain.rows(), 1),
            shift: Matrix::zeros(self.shift.rows(), 1),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> (Matrix, NormCache) {
        let (d, n) = x.shape();
        let mut mean = vec![0.0; n];
        for r in 0..d {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= d as f64);
        let mut var = vec![0.0; n];
        for r in 0..d {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let rstd: Vec<f64> = var.iter().map(|s| 1.0 / (s / d as f64 + NORM_EPS).sqrt()).collect();
        let mut xhat = Matrix::zeros(d, n);
        let mut y = Matrix::zeros(d, n);
        for r in 0..d {
            let (g, b) = (self.gain[(r, 0)], self.shift[(r, 0)]);
            let xr = x.row(r);
            let hr = xhat.row_mut(r);
            for c in 0..n {
                hr[c] = (xr[c] - mean[c]) * rstd[c];
            }
            let hr = xhat.row(r);
            for (yv, h) in y.row_mut(r).iter_mut().zip(hr) {
                *yv = g * h + b;
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub(crate) fn backward(&self, cache: &NormCache, dy: &Matrix, grads: &mut LayerNorm) -> Matrix {
        let (d, n) = dy.shape();
        let mut m1 = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        let mut dxhat = Matrix::zeros(d, n);
        for r in 0..d {
            let g = self.gain[(r, 0)];
            let (dyr, hr) = (dy.row(r), cache.xhat.row(r));
            let mut dg = 0.0;
            let mut db = 0.0;
            let out = dxhat.row_mut(r);
            for c in 0..n {
                dg += dyr[c] * hr[c];
                db += dyr[c];
                let v = dyr[c] * g;
                out[c] = v;
                m1[c] += v;
                m2[c] += v * hr[c];
            }
            grads.gain[(r, 0)] += dg;
            grads.shift[(r, 0)] += db;
        }
        let inv_d = 1.0 / d as f64;
        let mut dx = Matrix::zeros(d, n);
        for r in 0..d {
            let (hr, dr) = (cache.xhat.row(r), dxhat.row(r));
            let out = dx.row_mut(r);
            for c in 0..n {
                out[c] = cache.rstd[c] * (dr[c] - m1[c] * inv_d - hr[c] * m2[c] * inv_d);
            }
        }
        dx
    }
}

/// Sequence layout and masking for one attention call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnShape<'a> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Valid key count per example; keys at or beyond it are masked out.
    pub key_valid: &'a [usize],
}

impl AttnShape<'_> {
    fn allowed(&self, e: usize, i: usize, j: usize) -> bool {
        j < self.key_valid[e] && (!self.causal || j <= i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnCache {
    caches: [LinearCache; 4],
    qm: Matrix,
    km: Matrix,
    vm: Matrix,
    /// Softmax weights, `[e][h][i][j]` flattened.
    probs: Vec<f64>,
    ctx: Matrix,
}

impl AttnCache {
    pub(crate) fn bytes(&self) -> usize {
        let lin: usize = self.caches.iter().map(LinearCache::bytes).sum();
        lin + (self.qm.len() + self.km.len() + self.vm.len() + self.probs.len() + self.ctx.len()) * 8
    }
}

impl Attention {
    pub fn zeros_like(&self) -> Self {
        Self {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    pub(crate) fn forward(&self, xq: &Matrix, xkv: &Matrix, s: AttnShape<'_>) -> Result<(Matrix, AttnCache)> {
        let d = self.q.m();
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, qc) = self.q.forward_cached(xq)?;
        let (km, kc) = self.k.forward_cached(xkv)?;
        let (vm, vc) = self.v.forward_cached(xkv)?;
        let block = s.q_len * s.k_len;
        let mut probs = vec![0.0; s.batch * s.heads * block];
        let mut ctx = Matrix::zeros(d, s.batch * s.q_len);
        for e in 0..s.batch {
            for h in 0..s.heads {
                let base = (e * s.heads + h) * block;
                let p = &mut probs[base..base + block];
                let qv = qm.view().sub(h * dh, e * s.q_len, dh, s.q_len);
                let kv = km.view().sub(h * dh, e * s.k_len, dh, s.k_len);
                let mut scores = Matrix::zeros(s.q_len, s.k_len);
                gemm(scale, qv.t(), kv, 0.0, scores.view_mut());
                for i in 0..s.q_len {
                    let row = scores.row(i);
                    let mut max = f64::NEG_INFINITY;
                    for (j, &v) in row.iter().enumerate() {
                        if s.allowed(e, i, j) && v > max {
                            max = v;
                        }
                    }
                    let out = &mut p[i * s.k_len..(i + 1) * s.k_len];
                    let mut sum = 0.0;
                    for (j, &v) in row.iter().enumerate() {
                        if s.allowed(e, i, j) {
                            out[j] = (v - max).exp();
                            sum += out[j];
                        }
                    }
                    out.iter_mut().for_each(|x| *x /= sum);
                }
                let pm = Matrix::new(s.q_len, s.k_len, p.to_vec())?;
                let vv = vm.view().sub(h * dh, e * s.k_len, dh, s.k_len);
                let cv = ctx.view_mut().sub(h * dh, e * s.q_len, dh, s.q_len);
                gemm(1.0, vv, pm.view().t(), 0.0, cv);
            }
        }
        let (out, oc) = self.o.forward_cached(&ctx)?;
        Ok((
            out,
            AttnCache {
                caches: [qc, kc, vc, oc],
                qm,
                km,
                vm,
                probs,
                ctx,
            },
        ))
    }

    /// Returns `(d_xq, d_xkv)`; self-attention callers add them.
    pub(crate) fn backward(
        &self,
        xq: &Matrix,
        xkv: &Matrix,
        c: &AttnCache,
        dout: &Matrix,
        s: AttnShape<'_>,
        g: &mut Attention,
    ) -> Result<(Matrix, Matrix)> {
        let d = self.q.m();
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.o.backward_into(&c.ctx, &c.caches[3], dout, &mut g.o)?;
        let mut dq = Matrix::zeros(d, s.batch * s.q_len);
        let mut dk = Matrix::zeros(d, s.batch * s.k_len);
        let mut dv = Matrix::zeros(d, s.batch * s.k_len);
        let block = s.q_len * s.k_len;
        for e in 0..s.batch {
            for h in 0..s.heads {
                let base = (e * s.heads + h) * block;
                let pm = Matrix::new(s.q_len, s.k_len, c.probs[base..base + block].to_vec())?;
                let dcv = dctx.view().sub(h * dh, e * s.q_len, dh, s.q_len);
                let vv = c.vm.view().sub(h * dh, e * s.k_len, dh, s.k_len);
                // ctx = V P^T  =>  dV = dctx P,  dP = dctx^T V
                gemm(1.0, dcv, pm.view(), 0.0, dv.view_mut().sub(h * dh, e * s.k_len, dh, s.k_len));
                let mut dp = Matrix::zeros(s.q_len, s.k_len);
                gemm(1.0, dcv.t(), vv, 0.0, dp.view_mut());
                for i in 0..s.q_len {
                    let pr = pm.row(i);
                    let dr = dp.row_mut(i);
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, p) in dr.iter_mut().zip(pr) {
                        *x = p * (*x - dot);
                    }
                }
                // scores = scale Q^T K  =>  dQ = scale K dS^T,  dK = scale Q dS
                let qv = c.qm.view().sub(h * dh, e * s.q_len, dh, s.q_len);
                let kv = c.km.view().sub(h * dh, e * s.k_len, dh, s.k_len);
                gemm(scale, kv, dp.view().t(), 0.0, dq.view_mut().sub(h * dh, e * s.q_len, dh, s.q_len));
                gemm(scale, qv, dp.view(), 0.0, dk.view_mut().sub(h * dh, e * s.k_len, dh, s.k_len));
            }
        }
        let dxq = self.q.backward_into(xq, &c.caches[0], &dq, &mut g.q)?;
        let mut dxkv = self.k.backward_into(xkv, &c.caches[1], &dk, &mut g.k)?;
        let dxv = self.v.backward_into(xkv, &c.caches[2], &dv, &mut g.v)?;
        dxkv.add_scaled(&dxv, 1.0)?;
        Ok((dxq, dxkv))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    // tanh through a single exp; saturates cleanly for large |u|
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

fn gelu_grad_from(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from(x, gelu_tanh(x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnCache {
    up: LinearCache,
    down: LinearCache,
    pre: Matrix,
    tanh: Matrix,
    act: Matrix,
}

impl FfnCache {
    pub(crate) fn bytes(&self) -> usize {
        self.up.bytes() + self.down.bytes() + (self.pre.len() + self.tanh.len() + self.act.len()) * 8
    }
}

impl FeedForward {
    pub fn zeros_like(&self) -> Self {
        Self {
            up: self.up.zeros_like(),
            down: self.down.zeros_like(),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Result<(Matrix, FfnCache)> {
        let (pre, up) = self.up.forward_cached(x)?;
        let mut tanh = pre.clone();
        tanh.as_mut_slice().iter_mut().for_each(|v| *v = gelu_tanh(*v));
        let mut act = pre.clone();
        for (a, t) in act.as_mut_slice().iter_mut().zip(tanh.as_slice()) {
            *a = 0.5 * *a * (1.0 + t);
        }
        let (out, down) = self.down.forward_cached(&act)?;
        Ok((out, FfnCache { up, down, pre, tanh, act }))
    }

    pub(crate) fn backward(&self, x: &Matrix, c: &FfnCache, dout: &Matrix, g: &mut FeedForward) -> Result<Matrix> {
        let mut dact = self.down.backward_into(&c.act, &c.down, dout, &mut g.down)?;
        for ((d, p), t) in dact.as_mut_slice().iter_mut().zip(c.pre.as_slice()).zip(c.tanh.as_slice()) {
            *d *= gelu_grad_from(*p, *t);
        }
        self.up.backward_into(x, &c.up, &dact, &mut g.up)
    }
}
