//! Desk-scale encoder-decoder classifier whose attention and feed-forward
//! projections can be dense or factorized per layer.
//!
//! Encoder block: pre-norm self-attention and GELU feed-forward, both with
//! residuals. Decoder block: causal self-attention, cross-attention over the
//! encoder output, then feed-forward. Sinusoidal absolute positions are added
//! to the token embeddings. Training is teacher-forced cross-entropy.

mod layers;
pub mod task;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factorized::{kaiming_uniform, spectral_init, uniform, Cost, DenseLinear, Linear};
use crate::linalg::Matrix;
use crate::plan::{Assignment, LayerKind, LayerSpec, RankPlan, Submodel};

pub use layers::{gelu, gelu_grad, Attention, FeedForward, LayerNorm};
use layers::{AttnCache, AttnShape, FfnCache, NormCache};
pub use task::{Batch, Split, SyntheticTask, TaskKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            d_ffn: 512,
            encoder_blocks: 6,
            decoder_blocks: 2,
            vocab: 32,
            max_len: 24,
            seed: 0,
        }
    }
}

const ATTN_PROJ: [&str; 4] = ["q", "k", "v", "o"];

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.encoder_blocks,
            self.decoder_blocks,
            self.vocab,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(Error::domain(format!("model dims must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::domain(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab <= task::FIRST_CONTENT + 1 {
            return Err(Error::domain("vocab must leave at least 2 content tokens"));
        }
        Ok(())
    }

    /// All factorizable layers in a fixed order: encoder blocks, then decoder blocks.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let (d, f) = (self.d_model, self.d_ffn);
        let mut out = Vec::new();
        let mut push = |id: String, kind, submodel, block, blocks, m, n| {
            out.push(LayerSpec {
                id,
                kind,
                submodel,
                block,
                blocks,
                m,
                n,
            })
        };
        let be = self.encoder_blocks;
        for b in 0..be {
            for p in ATTN_PROJ {
                push(format!("enc.{b}.attn.{p}"), LayerKind::Mhsa, Submodel::Encoder, b, be, d, d);
            }
            push(format!("enc.{b}.ffn.up"), LayerKind::Ffn, Submodel::Encoder, b, be, f, d);
            push(format!("enc.{b}.ffn.down"), LayerKind::Ffn, Submodel::Encoder, b, be, d, f);
        }
        let bd = self.decoder_blocks;
        for b in 0..bd {
            for part in ["self", "cross"] {
                for p in ATTN_PROJ {
                    push(format!("dec.{b}.{part}.{p}"), LayerKind::Mhsa, Submodel::Decoder, b, bd, d, d);
                }
            }
            push(format!("dec.{b}.ffn.up"), LayerKind::Ffn, Submodel::Decoder, b, bd, f, d);
            push(format!("dec.{b}.ffn.down"), LayerKind::Ffn, Submodel::Decoder, b, bd, d, f);
        }
        out
    }

    /// Parameters outside the factorizable weights: embeddings, every bias,
    /// layer norms and the output head.
    pub fn fixed_param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ffn, self.vocab);
        let embeds = 2 * v * d;
        let enc_block = 2 * 2 * d + 4 * d + f + d;
        let dec_block = 3 * 2 * d + 8 * d + f + d;
        let finals = 2 * 2 * d;
        let head = v * d + v;
        embeds + self.encoder_blocks * enc_block + self.decoder_blocks * dec_block + finals + head
    }

    /// Total parameter count if every factorizable layer were dense.
    pub fn dense_param_count(&self) -> usize {
        self.fixed_param_count() + self.layers().iter().map(|l| l.m * l.n).sum::<usize>()
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Schema(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

/// How a tensor is stored, for checkpoints and parameter walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Dense,
    FactorU,
    FactorV,
    Bias,
    Norm,
}

impl TensorKind {
    pub fn tag(self) -> u8 {
        match self {
            TensorKind::Dense => 0,
            TensorKind::FactorU => 1,
            TensorKind::FactorV => 2,
            TensorKind::Bias => 3,
            TensorKind::Norm => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => TensorKind::Dense,
            1 => TensorKind::FactorU,
            2 => TensorKind::FactorV,
            3 => TensorKind::Bias,
            4 => TensorKind::Norm,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorKind::Dense => "dense",
            TensorKind::FactorU => "factor_u",
            TensorKind::FactorV => "factor_v",
            TensorKind::Bias => "bias",
            TensorKind::Norm => "norm",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub kind: TensorKind,
    pub value: &'a Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layer_specs: Vec<LayerSpec>,
    /// Token embeddings, `d_model x vocab`, one column per token.
    pub enc_embed: Matrix,
    pub dec_embed: Matrix,
    pub encoder: Vec<EncoderBlock>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub dec_norm: LayerNorm,
    pub head: Linear,
    positions: Matrix,
    generation: u64,
}

/// Parameter gradients, stored in a model-shaped container.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Model);

impl Gradients {
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.0.tensors()
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|t| t.value.as_slice())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.tensors_mut() {
            t.scale(s);
        }
    }
}

fn sinusoids(d: usize, len: usize) -> Matrix {
    Matrix::from_fn(d, len, |r, t| {
        let freq = 1.0 / 10000f64.powf((2 * (r / 2)) as f64 / d as f64);
        let a = t as f64 * freq;
        if r % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

impl Model {
    /// Builds a model. `None` means every factorizable layer is dense.
    ///
    /// Each layer first draws a Kaiming-uniform dense matrix; planned layers
    /// are spectrally factorized and the dense matrix dropped, so a given
    /// seed produces the same underlying draws under any plan.
    pub fn build(spec: &ModelSpec, plan: Option<&RankPlan>) -> Result<Model> {
        spec.validate()?;
        let layer_specs = spec.layers();
        if let Some(p) = plan {
            p.check_against(&layer_specs)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (d, v) = (spec.d_model, spec.vocab);
        let mut gaussian = |rows, cols| {
            Matrix::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
        };
        let enc_embed = gaussian(d, v)?;
        let dec_embed = gaussian(d, v)?;

        let mut linears = Vec::with_capacity(layer_specs.len());
        for l in &layer_specs {
            let w = kaiming_uniform(l.m, l.n, &mut rng);
            let bias = Matrix::zeros(l.m, 1);
            let assignment = plan.map_or(Assignment::Dense, |p| p.get(&l.id).expect("checked").assignment);
            linears.push(match assignment {
                Assignment::Dense => Linear::Dense(DenseLinear::new(w, Some(bias))?),
                Assignment::Factorized { rank, .. } => Linear::Factorized(spectral_init(&w, rank)?.with_bias(bias)?),
            });
        }
        // Output head uses the 1/sqrt(fan_in) uniform bound so initial logits stay small.
        let head_w = uniform(v, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let head = Linear::Dense(DenseLinear::new(head_w, Some(Matrix::zeros(v, 1)))?);

        let mut it = linears.into_iter();
        let mut next = || it.next().expect("layer count matches enumeration");
        let attn = |next: &mut dyn FnMut() -> Linear| Attention {
            q: next(),
            k: next(),
            v: next(),
            o: next(),
        };
        let encoder = (0..spec.encoder_blocks)
            .map(|_| EncoderBlock {
                norm1: LayerNorm::new(d),
                attn: attn(&mut next),
                norm2: LayerNorm::new(d),
                ffn: FeedForward {
                    up: next(),
                    down: next(),
                },
            })
            .collect();
        let decoder = (0..spec.decoder_blocks)
            .map(|_| DecoderBlock {
                norm1: LayerNorm::new(d),
                self_attn: attn(&mut next),
                norm2: LayerNorm::new(d),
                cross_attn: attn(&mut next),
                norm3: LayerNorm::new(d),
                ffn: FeedForward {
                    up: next(),
                    down: next(),
                },
            })
            .collect();

        Ok(Model {
            spec: spec.clone(),
            layer_specs,
            enc_embed,
            dec_embed,
            encoder,
            enc_norm: LayerNorm::new(d),
            decoder,
            dec_norm: LayerNorm::new(d),
            head,
            positions: sinusoids(d, spec.max_len),
            generation: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.layer_specs
    }

    /// Factorizable layers in enumeration order.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = Vec::with_capacity(self.layer_specs.len());
        for b in &self.encoder {
            out.extend(b.attn.linears());
            out.extend([&b.ffn.up, &b.ffn.down]);
        }
        for b in &self.decoder {
            out.extend(b.self_attn.linears());
            out.extend(b.cross_attn.linears());
            out.extend([&b.ffn.up, &b.ffn.down]);
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::with_capacity(self.layer_specs.len());
        for b in &mut self.encoder {
            out.extend(b.attn.linears_mut());
            out.extend([&mut b.ffn.up, &mut b.ffn.down]);
        }
        for b in &mut self.decoder {
            out.extend(b.self_attn.linears_mut());
            out.extend(b.cross_attn.linears_mut());
            out.extend([&mut b.ffn.up, &mut b.ffn.down]);
        }
        out
    }

    pub fn linear(&self, id: &str) -> Option<&Linear> {
        let i = self.layer_specs.iter().position(|l| l.id == id)?;
        Some(self.linears()[i])
    }

    /// Every parameter tensor, in a fixed order shared with [`Model::tensors_mut`].
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        fn push_norm<'a>(out: &mut Vec<TensorRef<'a>>, name: String, n: &'a LayerNorm) {
            out.push(TensorRef {
                name: format!("{name}.gain"),
                kind: TensorKind::Norm,
                value: &n.gain,
            });
            out.push(TensorRef {
                name: format!("{name}.shift"),
                kind: TensorKind::Norm,
                value: &n.shift,
            });
        }
        fn push_linear<'a>(out: &mut Vec<TensorRef<'a>>, id: &str, l: &'a Linear) {
            let kinds: &[(&str, TensorKind)] = match l {
                Linear::Dense(_) => &[("w", TensorKind::Dense)],
                Linear::Factorized(_) => &[("u", TensorKind::FactorU), ("v", TensorKind::FactorV)],
            };
            let ts = l.tensors();
            for ((suffix, kind), value) in kinds.iter().zip(&ts) {
                out.push(TensorRef {
                    name: format!("{id}.{suffix}"),
                    kind: *kind,
                    value,
                });
            }
            if let Some(b) = l.bias() {
                out.push(TensorRef {
                    name: format!("{id}.b"),
                    kind: TensorKind::Bias,
                    value: b,
                });
            }
        }
        out.push(TensorRef {
            name: "enc.embed".into(),
            kind: TensorKind::Dense,
            value: &self.enc_embed,
        });
        out.push(TensorRef {
            name: "dec.embed".into(),
            kind: TensorKind::Dense,
            value: &self.dec_embed,
        });
        let mut ids = self.layer_specs.iter().map(|l| l.id.as_str());
        for (b, blk) in self.encoder.iter().enumerate() {
            push_norm(&mut out, format!("enc.{b}.norm1"), &blk.norm1);
            for l in blk.attn.linears() {
                push_linear(&mut out, ids.next().expect("ids"), l);
            }
            push_norm(&mut out, format!("enc.{b}.norm2"), &blk.norm2);
            push_linear(&mut out, ids.next().expect("ids"), &blk.ffn.up);
            push_linear(&mut out, ids.next().expect("ids"), &blk.ffn.down);
        }
        push_norm(&mut out, "enc.norm".into(), &self.enc_norm);
        for (b, blk) in self.decoder.iter().enumerate() {
            push_norm(&mut out, format!("dec.{b}.norm1"), &blk.norm1);
            for l in blk.self_attn.linears() {
                push_linear(&mut out, ids.next().expect("ids"), l);
            }
            push_norm(&mut out, format!("dec.{b}.norm2"), &blk.norm2);
            for l in blk.cross_attn.linears() {
                push_linear(&mut out, ids.next().expect("ids"), l);
            }
            push_norm(&mut out, format!("dec.{b}.norm3"), &blk.norm3);
            push_linear(&mut out, ids.next().expect("ids"), &blk.ffn.up);
            push_linear(&mut out, ids.next().expect("ids"), &blk.ffn.down);
        }
        push_norm(&mut out, "dec.norm".into(), &self.dec_norm);
        push_linear(&mut out, "head", &self.head);
        out
    }

    /// Mutable parameter tensors in the order of [`Model::tensors`]. Any
    /// outstanding forward cache becomes stale.
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.generation += 1;
        fn norm<'a>(out: &mut Vec<&'a mut Matrix>, n: &'a mut LayerNorm) {
            out.push(&mut n.gain);
            out.push(&mut n.shift);
        }
        let mut out: Vec<&mut Matrix> = vec![&mut self.enc_embed, &mut self.dec_embed];
        for blk in &mut self.encoder {
            norm(&mut out, &mut blk.norm1);
            for l in blk.attn.linears_mut() {
                out.extend(l.tensors_mut());
            }
            norm(&mut out, &mut blk.norm2);
            out.extend(blk.ffn.up.tensors_mut());
            out.extend(blk.ffn.down.tensors_mut());
        }
        norm(&mut out, &mut self.enc_norm);
        for blk in &mut self.decoder {
            norm(&mut out, &mut blk.norm1);
            for l in blk.self_attn.linears_mut() {
                out.extend(l.tensors_mut());
            }
            norm(&mut out, &mut blk.norm2);
            for l in blk.cross_attn.linears_mut() {
                out.extend(l.tensors_mut());
            }
            norm(&mut out, &mut blk.norm3);
            out.extend(blk.ffn.up.tensors_mut());
            out.extend(blk.ffn.down.tensors_mut());
        }
        norm(&mut out, &mut self.dec_norm);
        out.extend(self.head.tensors_mut());
        out
    }

    /// Counts every scalar parameter by walking the tensors.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.value.len()).sum()
    }

    /// Matmul flops of one forward pass over `tokens` positions per side,
    /// counting only the factorizable layers.
    pub fn layer_flops(&self, tokens: usize) -> usize {
        self.linears().iter().map(|l| l.flop_count(tokens)).sum()
    }

    /// A model-shaped container of zeros.
    pub fn zeros_like(&self) -> Gradients {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.fill(0.0);
        }
        g.generation = 0;
        Gradients(g)
    }

    fn embed(&self, table: &Matrix, tokens: &[usize], batch: usize) -> Result<Matrix> {
        let t = self.spec.max_len;
        let d = self.spec.d_model;
        let mut x = Matrix::zeros(d, batch * t);
        for (c, &tok) in tokens.iter().enumerate() {
            if tok >= self.spec.vocab {
                return Err(Error::domain(format!("token {tok} outside vocab {}", self.spec.vocab)));
            }
            let pos = c % t;
            for r in 0..d {
                x[(r, c)] = table[(r, tok)] + self.positions[(r, pos)];
            }
        }
        Ok(x)
    }

    /// Names the first layer under `prefix` holding a non-finite parameter,
    /// or `prefix` itself when the parameters are all finite.
    fn nonfinite_site(&self, prefix: &str) -> String {
        self.tensors()
            .iter()
            .filter(|t| t.name == prefix || t.name.starts_with(&format!("{prefix}.")))
            .find(|t| !t.value.is_finite())
            .and_then(|t| t.name.rsplit_once('.').map(|(layer, _)| layer.to_string()))
            .unwrap_or_else(|| prefix.to_string())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let t = self.spec.max_len;
        let ok = batch.size > 0
            && batch.seq_len == t
            && batch.src.len() == batch.size * t
            && batch.tgt.len() == batch.size * t
            && batch.src_len.len() == batch.size
            && batch.tgt_len.len() == batch.size
            && batch.src_len.iter().chain(&batch.tgt_len).all(|&l| (1..=t).contains(&l));
        if ok {
            Ok(())
        } else {
            Err(Error::shape("batch", (batch.size, batch.seq_len), (batch.size, t)))
        }
    }

    /// Mean cross-entropy over target tokens, plus everything backward needs.
    pub fn forward_loss(&self, batch: &Batch) -> Result<(f64, ForwardCache)> {
        self.check_batch(batch)?;
        let (bsz, t, h) = (batch.size, self.spec.max_len, self.spec.n_heads);
        let src_shape = AttnShape {
            batch: bsz,
            q_len: t,
            k_len: t,
            heads: h,
            causal: false,
            key_valid: &batch.src_len,
        };
        let full = vec![t; bsz];
        let causal_shape = AttnShape {
            causal: true,
            key_valid: &full,
            ..src_shape
        };

        let mut x = self.embed(&self.enc_embed, &batch.src, bsz)?;
        let mut enc = Vec::with_capacity(self.encoder.len());
        for (b, blk) in self.encoder.iter().enumerate() {
            let (n1, n1c) = blk.norm1.forward(&x);
            let (a, attn) = blk.attn.forward(&n1, &n1, src_shape)?;
            x.add_scaled(&a, 1.0)?;
            let (n2, n2c) = blk.norm2.forward(&x);
            let (f, ffn) = blk.ffn.forward(&n2)?;
            x.add_scaled(&f, 1.0)?;
            finite(&x, || self.nonfinite_site(&format!("enc.{b}")))?;
            enc.push(EncCache {
                n1,
                n1c,
                attn,
                n2,
                n2c,
                ffn,
            });
        }
        let (memory, enc_norm) = self.enc_norm.forward(&x);

        let dec_tokens = batch.decoder_input();
        let mut y = self.embed(&self.dec_embed, &dec_tokens, bsz)?;
        let mut dec = Vec::with_capacity(self.decoder.len());
        for (b, blk) in self.decoder.iter().enumerate() {
            let (n1, n1c) = blk.norm1.forward(&y);
            let (a, self_attn) = blk.self_attn.forward(&n1, &n1, causal_shape)?;
            y.add_scaled(&a, 1.0)?;
            let (n2, n2c) = blk.norm2.forward(&y);
            let (c, cross) = blk.cross_attn.forward(&n2, &memory, src_shape)?;
            y.add_scaled(&c, 1.0)?;
            let (n3, n3c) = blk.norm3.forward(&y);
            let (f, ffn) = blk.ffn.forward(&n3)?;
            y.add_scaled(&f, 1.0)?;
            finite(&y, || self.nonfinite_site(&format!("dec.{b}")))?;
            dec.push(DecCache {
                n1,
                n1c,
                self_attn,
                n2,
                n2c,
                cross,
                n3,
                n3c,
                ffn,
            });
        }
        let (top, dec_norm) = self.dec_norm.forward(&y);
        let logits = self.head.forward(&top)?;
        finite(&logits, || self.nonfinite_site("head"))?;

        let count = batch.target_count();
        let mut grad_logits = Matrix::zeros(self.spec.vocab, bsz * t);
        let mut loss = 0.0;
        let mut correct = 0;
        let v = self.spec.vocab;
        let mut col = vec![0.0; v];
        for e in 0..bsz {
            for p in 0..batch.tgt_len[e] {
                let c = e * t + p;
                let target = batch.tgt[c];
                for (r, x) in col.iter_mut().enumerate() {
                    *x = logits[(r, c)];
                }
                let (mut arg, mut max) = (0, f64::NEG_INFINITY);
                for (r, &x) in col.iter().enumerate() {
                    if x > max {
                        max = x;
                        arg = r;
                    }
                }
                let sum: f64 = col.iter().map(|x| (x - max).exp()).sum();
                let lse = max + sum.ln();
                loss += lse - col[target];
                correct += usize::from(arg == target);
                for (r, x) in col.iter().enumerate() {
                    grad_logits[(r, c)] = (x - lse).exp() / count as f64;
                }
                grad_logits[(target, c)] -= 1.0 / count as f64;
            }
        }
        let loss = loss / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { site: "loss".into() });
        }
        Ok((
            loss,
            ForwardCache {
                generation: self.generation,
                batch: batch.clone(),
                dec_tokens,
                enc,
                enc_norm,
                memory,
                dec,
                dec_norm,
                top,
                grad_logits,
                loss,
                correct,
                count,
            },
        ))
    }

    /// Gradients of the cached loss with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::Consistency(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let batch = &cache.batch;
        let (bsz, t, h) = (batch.size, self.spec.max_len, self.spec.n_heads);
        let src_shape = AttnShape {
            batch: bsz,
            q_len: t,
            k_len: t,
            heads: h,
            causal: false,
            key_valid: &batch.src_len,
        };
        let full = vec![t; bsz];
        let causal_shape = AttnShape {
            causal: true,
            key_valid: &full,
            ..src_shape
        };
        let mut g = self.zeros_like();
        let gm = &mut g.0;

        let head_cache = crate::factorized::LinearCache::Dense;
        let dtop = self.head.backward_into(&cache.top, &head_cache, &cache.grad_logits, &mut gm.head)?;
        let mut dy = self.dec_norm.backward(&cache.dec_norm, &dtop, &mut gm.dec_norm);
        let mut dmem = Matrix::zeros(self.spec.d_model, bsz * t);
        for (b, blk) in self.decoder.iter().enumerate().rev() {
            let c = &cache.dec[b];
            let gb = &mut gm.decoder[b];
            let df = blk.ffn.backward(&c.n3, &c.ffn, &dy, &mut gb.ffn)?;
            dy.add_scaled(&blk.norm3.backward(&c.n3c, &df, &mut gb.norm3), 1.0)?;
            let (dq, dkv) = blk
                .cross_attn
                .backward(&c.n2, &cache.memory, &c.cross, &dy, src_shape, &mut gb.cross_attn)?;
            dmem.add_scaled(&dkv, 1.0)?;
            dy.add_scaled(&blk.norm2.backward(&c.n2c, &dq, &mut gb.norm2), 1.0)?;
            let (mut dq, dkv) = blk
                .self_attn
                .backward(&c.n1, &c.n1, &c.self_attn, &dy, causal_shape, &mut gb.self_attn)?;
            dq.add_scaled(&dkv, 1.0)?;
            dy.add_scaled(&blk.norm1.backward(&c.n1c, &dq, &mut gb.norm1), 1.0)?;
        }
        scatter_embed(&mut gm.dec_embed, &dy, &cache.dec_tokens);

        let mut dx = self.enc_norm.backward(&cache.enc_norm, &dmem, &mut gm.enc_norm);
        for (b, blk) in self.encoder.iter().enumerate().rev() {
            let c = &cache.enc[b];
            let gb = &mut gm.encoder[b];
            let df = blk.ffn.backward(&c.n2, &c.ffn, &dx, &mut gb.ffn)?;
            dx.add_scaled(&blk.norm2.backward(&c.n2c, &df, &mut gb.norm2), 1.0)?;
            let (mut dq, dkv) = blk.attn.backward(&c.n1, &c.n1, &c.attn, &dx, src_shape, &mut gb.attn)?;
            dq.add_scaled(&dkv, 1.0)?;
            dx.add_scaled(&blk.norm1.backward(&c.n1c, &dq, &mut gb.norm1), 1.0)?;
        }
        scatter_embed(&mut gm.enc_embed, &dx, &batch.src);
        Ok(g)
    }

    /// Loss and token accuracy without keeping the cache.
    pub fn evaluate(&self, batch: &Batch) -> Result<EvalStats> {
        let (loss, cache) = self.forward_loss(batch)?;
        Ok(EvalStats {
            loss_sum: loss * cache.count as f64,
            correct: cache.correct,
            count: cache.count,
        })
    }

    /// Replaces every factorized layer by its dense product. Used to compare
    /// a factorized model against dense arithmetic.
    pub fn densified(&self) -> Model {
        let mut out = self.clone();
        for l in out.linears_mut() {
            if let Linear::Factorized(f) = l {
                let bias = f.bias().cloned();
                *l = Linear::Dense(DenseLinear::new(f.effective_weight(), bias).expect("shapes agree"));
            }
        }
        out
    }
}

fn scatter_embed(table: &mut Matrix, grad: &Matrix, tokens: &[usize]) {
    for (c, &tok) in tokens.iter().enumerate() {
        for r in 0..table.rows() {
            table[(r, tok)] += grad[(r, c)];
        }
    }
}

fn finite(m: &Matrix, site: impl FnOnce() -> String) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { site: site() })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl EvalStats {
    pub fn merge(&mut self, other: EvalStats) {
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

#[derive(Clone, Debug)]
struct EncCache {
    n1: Matrix,
    n1c: NormCache,
    attn: AttnCache,
    n2: Matrix,
    n2c: NormCache,
    ffn: FfnCache,
}

#[derive(Clone, Debug)]
struct DecCache {
    n1: Matrix,
    n1c: NormCache,
    self_attn: AttnCache,
    n2: Matrix,
    n2c: NormCache,
    cross: AttnCache,
    n3: Matrix,
    n3c: NormCache,
    ffn: FfnCache,
}

/// Activations saved by [`Model::forward_loss`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    batch: Batch,
    dec_tokens: Vec<usize>,
    enc: Vec<EncCache>,
    enc_norm: NormCache,
    memory: Matrix,
    dec: Vec<DecCache>,
    dec_norm: NormCache,
    top: Matrix,
    grad_logits: Matrix,
    loss: f64,
    correct: usize,
    count: usize,
}

impl ForwardCache {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn correct(&self) -> usize {
        self.correct
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Bytes held by cached activation matrices; the basis of the memory estimate.
    pub fn activation_bytes(&self) -> usize {
        let m = |x: &Matrix| x.len() * 8;
        let mut total = m(&self.memory) + m(&self.top) + m(&self.grad_logits) + self.enc_norm.bytes() + self.dec_norm.bytes();
        for c in &self.enc {
            total += m(&c.n1) + m(&c.n2) + c.n1c.bytes() + c.n2c.bytes() + c.attn.bytes() + c.ffn.bytes();
        }
        for c in &self.dec {
            total += m(&c.n1) + m(&c.n2) + m(&c.n3);
            total += c.n1c.bytes() + c.n2c.bytes() + c.n3c.bytes();
            total += c.self_attn.bytes() + c.cross.bytes() + c.ffn.bytes();
        }
        total
    }
}
