//! Seeded synthetic sequence-to-sequence tasks.
//!
//! Token 0 is padding and token 1 is the decoder start symbol; content
//! tokens are `2..vocab`. Each example comes from its own ChaCha stream, and
//! the held-out split draws from a stream range the training split never
//! touches.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const FIRST_CONTENT: usize = 2;

const EVAL_STREAM_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularSum,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularSum => "modular-sum",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "modular-sum" => Ok(TaskKind::ModularSum),
            other => Err(Error::domain(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// A padded batch. `src` and `tgt` are `size * seq_len` row-major token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub src: Vec<usize>,
    pub src_len: Vec<usize>,
    pub tgt: Vec<usize>,
    pub tgt_len: Vec<usize>,
}

impl Batch {
    /// Builds a batch from unpadded pairs, padding both sides to `seq_len`.
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)], seq_len: usize) -> Result<Self> {
        let size = pairs.len();
        let mut b = Batch {
            size,
            seq_len,
            src: vec![PAD; size * seq_len],
            src_len: Vec::with_capacity(size),
            tgt: vec![PAD; size * seq_len],
            tgt_len: Vec::with_capacity(size),
        };
        for (e, (s, t)) in pairs.iter().enumerate() {
            if s.is_empty() || t.is_empty() || s.len() > seq_len || t.len() > seq_len {
                return Err(Error::domain(format!(
                    "example {e}: lengths {}/{} must be in 1..={seq_len}",
                    s.len(),
                    t.len()
                )));
            }
            b.src[e * seq_len..e * seq_len + s.len()].copy_from_slice(s);
            b.tgt[e * seq_len..e * seq_len + t.len()].copy_from_slice(t);
            b.src_len.push(s.len());
            b.tgt_len.push(t.len());
        }
        Ok(b)
    }

    /// Teacher-forcing decoder input: start symbol followed by the shifted target.
    pub fn decoder_input(&self) -> Vec<usize> {
        let t = self.seq_len;
        let mut out = vec![PAD; self.size * t];
        for e in 0..self.size {
            out[e * t] = BOS;
            out[e * t + 1..(e + 1) * t].copy_from_slice(&self.tgt[e * t..(e + 1) * t - 1]);
        }
        out
    }

    pub fn target_count(&self) -> usize {
        self.tgt_len.iter().sum()
    }

    /// The same examples, each repeated `k` times in a row.
    pub fn repeated(&self, k: usize) -> Batch {
        let t = self.seq_len;
        let mut b = Batch {
            size: self.size * k,
            seq_len: t,
            src: Vec::new(),
            src_len: Vec::new(),
            tgt: Vec::new(),
            tgt_len: Vec::new(),
        };
        for e in 0..self.size {
            for _ in 0..k {
                b.src.extend_from_slice(&self.src[e * t..(e + 1) * t]);
                b.tgt.extend_from_slice(&self.tgt[e * t..(e + 1) * t]);
                b.src_len.push(self.src_len[e]);
                b.tgt_len.push(self.tgt_len[e]);
            }
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Maximum (and padded) sequence length.
    pub seq_len: usize,
    /// Shortest generated sequence; equal to `seq_len` for fixed-length data.
    pub min_len: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Training examples per epoch.
    pub train_size: usize,
    pub eval_size: usize,
    /// Draw a fresh set of training examples every epoch instead of
    /// reshuffling the same `train_size` examples.
    pub fresh_each_epoch: bool,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, seq_len: usize, vocab: usize, seed: u64) -> Self {
        Self {
            kind,
            seq_len,
            min_len: seq_len,
            vocab,
            seed,
            train_size: 2048,
            eval_size: 256,
            fresh_each_epoch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FIRST_CONTENT + 1 {
            return Err(Error::domain(format!("vocab {} leaves fewer than 2 content tokens", self.vocab)));
        }
        if self.min_len == 0 || self.min_len > self.seq_len {
            return Err(Error::domain(format!(
                "min_len {} must be in 1..={}",
                self.min_len, self.seq_len
            )));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::domain("split sizes must be positive"));
        }
        Ok(())
    }

    fn stream(&self, split: Split, index: usize) -> u64 {
        match split {
            Split::Train => index as u64,
            Split::Eval => EVAL_STREAM_BASE + index as u64,
        }
    }

    /// Example `index` of `split`; the same arguments always give the same pair.
    pub fn example(&self, split: Split, index: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream(split, index));
        let len = rng.random_range(self.min_len..=self.seq_len);
        let content = self.vocab - FIRST_CONTENT;
        let src: Vec<usize> = (0..len).map(|_| FIRST_CONTENT + rng.random_range(0..content)).collect();
        let tgt = match self.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::ModularSum => {
                let mut acc = 0;
                src.iter()
                    .map(|&s| {
                        acc = (acc + s - FIRST_CONTENT) % content;
                        FIRST_CONTENT + acc
                    })
                    .collect()
            }
        };
        (src, tgt)
    }

    pub fn batch(&self, split: Split, indices: &[usize]) -> Batch {
        let pairs: Vec<_> = indices.iter().map(|&i| self.example(split, i)).collect();
        Batch::from_pairs(&pairs, self.seq_len).expect("generated lengths are in range")
    }

    /// Training example indices for one epoch, in a seeded shuffled order.
    /// The last partial batch is dropped.
    pub fn epoch_batches(&self, order_seed: u64, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let base = if self.fresh_each_epoch { epoch * self.train_size } else { 0 };
        let mut idx: Vec<usize> = (base..base + self.train_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
        rng.set_stream(epoch as u64);
        idx.shuffle(&mut rng);
        idx.chunks_exact(batch_size.min(self.train_size)).map(|c| c.to_vec()).collect()
    }

    /// Held-out batches covering the whole eval split.
    pub fn eval_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.eval_size)
            .collect::<Vec<_>>()
            .chunks(batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}
