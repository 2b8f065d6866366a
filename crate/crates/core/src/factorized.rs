//! Linear layers stored either densely or as a pair of low-rank factors.
//!
//! Inputs are feature-major: `x` is `n x batch`, one column per example, and
//! the output is `m x batch`. A factorized layer computes `u * (v^T * x)` and
//! never forms the `m x n` product, so its cost is `r(m + n)` per column.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::linalg::{gemm, matmul, matmul_nt, matmul_tn, svd, Matrix};

/// Parameter and flop accounting. Multiply-add counts as two flops.
pub trait Cost {
    /// Weight parameters, bias excluded.
    fn param_count(&self) -> usize;
    fn flop_count(&self, batch: usize) -> usize;
}

/// He/Kaiming uniform fan-in init: `U(-b, b)` with `b = sqrt(6 / n)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / n as f64).sqrt();
    uniform(m, n, bound, rng)
}

pub(crate) fn uniform<R: Rng + ?Sized>(m: usize, n: usize, bound: f64, rng: &mut R) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..m * n).map(|_| dist.sample(rng)).collect();
    Matrix::new(m, n, data).expect("finite samples")
}

fn add_bias(z: &mut Matrix, bias: &Matrix) {
    for r in 0..z.rows() {
        let b = bias[(r, 0)];
        z.row_mut(r).iter_mut().for_each(|x| *x += b);
    }
}

fn check_bias(bias: Option<&Matrix>, m: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != (m, 1) => Err(Error::shape("bias", b.shape(), (m, 1))),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLinear {
    w: Matrix,
    bias: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub grad_w: Matrix,
    pub grad_bias: Option<Matrix>,
    pub grad_input: Matrix,
}

impl DenseLinear {
    pub fn new(w: Matrix, bias: Option<Matrix>) -> Result<Self> {
        check_bias(bias.as_ref(), w.rows())?;
        Ok(Self { w, bias })
    }

    /// Kaiming-uniform weight with a zero bias.
    pub fn kaiming<R: Rng + ?Sized>(m: usize, n: usize, with_bias: bool, rng: &mut R) -> Self {
        Self {
            w: kaiming_uniform(m, n, rng),
            bias: with_bias.then(|| Matrix::zeros(m, 1)),
        }
    }

    pub fn m(&self) -> usize {
        self.w.rows()
    }

    pub fn n(&self) -> usize {
        self.w.cols()
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    pub fn bias(&self) -> Option<&Matrix> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Matrix> {
        self.bias.as_mut()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n() {
            return Err(Error::shape("dense forward", self.w.shape(), x.shape()));
        }
        let mut z = matmul(&self.w, x)?;
        if let Some(b) = &self.bias {
            add_bias(&mut z, b);
        }
        Ok(z)
    }

    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<DenseGrads> {
        if x.rows() != self.n() || grad_out.rows() != self.m() || x.cols() != grad_out.cols() {
            return Err(Error::shape("dense backward", x.shape(), grad_out.shape()));
        }
        Ok(DenseGrads {
            grad_w: matmul_nt(grad_out, x)?,
            grad_bias: self.bias.as_ref().map(|_| grad_out.row_sums()),
            grad_input: matmul_tn(&self.w, grad_out)?,
        })
    }
}

impl Cost for DenseLinear {
    fn param_count(&self) -> usize {
        self.m() * self.n()
    }

    fn flop_count(&self, batch: usize) -> usize {
        2 * self.m() * self.n() * batch
    }
}

/// `W ~ u * v^T` with `u: m x r`, `v: n x r`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedLinear {
    u: Matrix,
    v: Matrix,
    bias: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub grad_u: Matrix,
    pub grad_v: Matrix,
    pub grad_bias: Option<Matrix>,
    pub grad_input: Matrix,
}

/// Splits the rank-`rank` truncated SVD of `w` as `u = U_r sqrt(S_r)`,
/// `v^T = sqrt(S_r) V_r^T`, so `u * v^T` is the best rank-`rank` fit of `w`.
/// The returned layer has no bias; callers attach a zero bias if they want one.
pub fn spectral_init(w: &Matrix, rank: usize) -> Result<FactorizedLinear> {
    let (m, n) = w.shape();
    let k = m.min(n);
    if rank == 0 || rank > k {
        return Err(Error::domain(format!("rank {rank} outside 1..={k} for {m}x{n}")));
    }
    let s = svd(w)?;
    let roots: Vec<f64> = s.sigma[..rank].iter().map(|x| x.sqrt()).collect();
    let u = Matrix::from_fn(m, rank, |i, j| s.u[(i, j)] * roots[j]);
    let v = Matrix::from_fn(n, rank, |i, j| s.vt[(j, i)] * roots[j]);
    Ok(FactorizedLinear { u, v, bias: None })
}

impl FactorizedLinear {
    pub fn new(u: Matrix, v: Matrix, bias: Option<Matrix>) -> Result<Self> {
        if u.cols() != v.cols() {
            return Err(Error::shape("factor ranks", u.shape(), v.shape()));
        }
        if u.cols() > u.rows().min(v.rows()) {
            return Err(Error::domain(format!(
                "rank {} exceeds min({}, {})",
                u.cols(),
                u.rows(),
                v.rows()
            )));
        }
        check_bias(bias.as_ref(), u.rows())?;
        Ok(Self { u, v, bias })
    }

    /// Draws a Kaiming-uniform dense matrix, factorizes it spectrally and
    /// drops the dense matrix. The bias starts at zero.
    pub fn spectral<R: Rng + ?Sized>(
        m: usize,
        n: usize,
        rank: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = kaiming_uniform(m, n, rng);
        let mut layer = spectral_init(&w, rank)?;
        layer.bias = with_bias.then(|| Matrix::zeros(m, 1));
        Ok(layer)
    }

    pub fn with_bias(mut self, bias: Matrix) -> Result<Self> {
        check_bias(Some(&bias), self.m())?;
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.u.rows()
    }

    pub fn n(&self) -> usize {
        self.v.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn u_mut(&mut self) -> &mut Matrix {
        &mut self.u
    }

    pub fn v_mut(&mut self) -> &mut Matrix {
        &mut self.v
    }

    pub fn bias(&self) -> Option<&Matrix> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Matrix> {
        self.bias.as_mut()
    }

    /// Materializes `u * v^T`. Only for analysis; the forward pass never does this.
    pub fn effective_weight(&self) -> Matrix {
        matmul_nt(&self.u, &self.v).expect("factor ranks agree")
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Forward pass that also returns the rank-space projection `v^T x`.
    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.rows() != self.n() {
            return Err(Error::shape("factorized forward", self.v.shape(), x.shape()));
        }
        let t = matmul_tn(&self.v, x)?;
        let mut z = matmul(&self.u, &t)?;
        if let Some(b) = &self.bias {
            add_bias(&mut z, b);
        }
        Ok((z, t))
    }

    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<LayerGrads> {
        if x.rows() != self.n() || grad_out.rows() != self.m() || x.cols() != grad_out.cols() {
            return Err(Error::shape("factorized backward", x.shape(), grad_out.shape()));
        }
        let t = matmul_tn(&self.v, x)?;
        self.backward_cached(x, &t, grad_out)
    }

    pub(crate) fn backward_cached(&self, x: &Matrix, t: &Matrix, grad_out: &Matrix) -> Result<LayerGrads> {
        let grad_u = matmul_nt(grad_out, t)?;
        let grad_t = matmul_tn(&self.u, grad_out)?;
        let grad_v = matmul_nt(x, &grad_t)?;
        let mut grad_input = Matrix::zeros(self.n(), x.cols());
        gemm(1.0, self.v.view(), grad_t.view(), 0.0, grad_input.view_mut());
        Ok(LayerGrads {
            grad_u,
            grad_v,
            grad_bias: self.bias.as_ref().map(|_| grad_out.row_sums()),
            grad_input,
        })
    }
}

impl Cost for FactorizedLinear {
    fn param_count(&self) -> usize {
        self.rank() * (self.m() + self.n())
    }

    fn flop_count(&self, batch: usize) -> usize {
        2 * self.rank() * (self.m() + self.n()) * batch
    }
}

/// A linear layer in whichever storage its rank plan asked for.
#[derive(Clone, Debug, PartialEq)]
pub enum Linear {
    Dense(DenseLinear),
    Factorized(FactorizedLinear),
}

/// Per-layer forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum LinearCache {
    Dense,
    Factorized(Matrix),
}

impl LinearCache {
    pub(crate) fn bytes(&self) -> usize {
        match self {
            LinearCache::Dense => 0,
            LinearCache::Factorized(t) => t.len() * 8,
        }
    }
}

impl Linear {
    pub fn m(&self) -> usize {
        match self {
            Linear::Dense(d) => d.m(),
            Linear::Factorized(f) => f.m(),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Linear::Dense(d) => d.n(),
            Linear::Factorized(f) => f.n(),
        }
    }

    /// `None` for dense layers.
    pub fn rank(&self) -> Option<usize> {
        match self {
            Linear::Dense(_) => None,
            Linear::Factorized(f) => Some(f.rank()),
        }
    }

    pub fn bias(&self) -> Option<&Matrix> {
        match self {
            Linear::Dense(d) => d.bias(),
            Linear::Factorized(f) => f.bias(),
        }
    }

    /// The `m x n` matrix this layer applies.
    pub fn effective_weight(&self) -> Matrix {
        match self {
            Linear::Dense(d) => d.weight().clone(),
            Linear::Factorized(f) => f.effective_weight(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, LinearCache)> {
        match self {
            Linear::Dense(d) => Ok((d.forward(x)?, LinearCache::Dense)),
            Linear::Factorized(f) => {
                let (z, t) = f.forward_cached(x)?;
                Ok((z, LinearCache::Factorized(t)))
            }
        }
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grads`, which must be a layer of the same storage and shape.
    pub(crate) fn backward_into(
        &self,
        x: &Matrix,
        cache: &LinearCache,
        grad_out: &Matrix,
        grads: &mut Linear,
    ) -> Result<Matrix> {
        match (self, cache, grads) {
            (Linear::Dense(d), LinearCache::Dense, Linear::Dense(g)) => {
                let dg = d.backward(x, grad_out)?;
                g.w.add_scaled(&dg.grad_w, 1.0)?;
                if let (Some(gb), Some(b)) = (g.bias.as_mut(), dg.grad_bias.as_ref()) {
                    gb.add_scaled(b, 1.0)?;
                }
                Ok(dg.grad_input)
            }
            (Linear::Factorized(f), LinearCache::Factorized(t), Linear::Factorized(g)) => {
                let fg = f.backward_cached(x, t, grad_out)?;
                g.u.add_scaled(&fg.grad_u, 1.0)?;
                g.v.add_scaled(&fg.grad_v, 1.0)?;
                if let (Some(gb), Some(b)) = (g.bias.as_mut(), fg.grad_bias.as_ref()) {
                    gb.add_scaled(b, 1.0)?;
                }
                Ok(fg.grad_input)
            }
            _ => Err(Error::Consistency("layer, cache and gradient storage disagree".into())),
        }
    }

    /// Same storage and shapes, all zeros.
    pub fn zeros_like(&self) -> Linear {
        let zb = |b: Option<&Matrix>| b.map(|b| Matrix::zeros(b.rows(), 1));
        match self {
            Linear::Dense(d) => Linear::Dense(DenseLinear {
                w: Matrix::zeros(d.m(), d.n()),
                bias: zb(d.bias()),
            }),
            Linear::Factorized(f) => Linear::Factorized(FactorizedLinear {
                u: Matrix::zeros(f.m(), f.rank()),
                v: Matrix::zeros(f.n(), f.rank()),
                bias: zb(f.bias()),
            }),
        }
    }

    /// Weight tensors followed by the bias, in a fixed order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = match self {
            Linear::Dense(d) => vec![&d.w],
            Linear::Factorized(f) => vec![&f.u, &f.v],
        };
        out.extend(self.bias());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Linear::Dense(d) => {
                let mut out = vec![&mut d.w];
                out.extend(d.bias.as_mut());
                out
            }
            Linear::Factorized(f) => {
                let mut out = vec![&mut f.u, &mut f.v];
                out.extend(f.bias.as_mut());
                out
            }
        }
    }
}

impl Cost for Linear {
    fn param_count(&self) -> usize {
        match self {
            Linear::Dense(d) => d.param_count(),
            Linear::Factorized(f) => f.param_count(),
        }
    }

    fn flop_count(&self, batch: usize) -> usize {
        match self {
            Linear::Dense(d) => d.flop_count(batch),
            Linear::Factorized(f) => f.flop_count(batch),
        }
    }
}
