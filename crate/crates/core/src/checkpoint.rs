//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LRSM" | version u32 | spec SHA-256 [32]
//! spec_len u32 | spec TOML | stage_len u32 | stage
//! tensor_count u32
//! per tensor: name_len u16 | name | kind u8 | rows u32 | cols u32 | rows*cols f64
//! crc32 u32 over everything before it
//! ```
//!
//! Kind tags: 0 dense, 1 factor_u, 2 factor_v, 3 bias, 4 norm.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Model, ModelSpec, TensorKind};

pub const MAGIC: &[u8; 4] = b"LRSM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub kind: TensorKind,
    pub value: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    spec: ModelSpec,
    stage: String,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, stage: impl Into<String>, tensors: Vec<TensorRecord>) -> Result<Self> {
        let c = Self {
            spec,
            stage: stage.into(),
            tensors,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_model(model: &Model, stage: impl Into<String>) -> Self {
        let tensors = model
            .tensors()
            .into_iter()
            .map(|t| TensorRecord {
                name: t.name,
                kind: t.kind,
                value: t.value.clone(),
            })
            .collect();
        Self {
            spec: model.spec().clone(),
            stage: stage.into(),
            tensors,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn stage(&self) -> &str {
        &self.stage
    }

    pub fn tensors(&self) -> &[TensorRecord] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Unique names, and every `factor_u` paired with a `factor_v` of the same rank.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for t in &self.tensors {
            if seen.insert(t.name.as_str(), t).is_some() {
                return Err(Error::Schema(format!("duplicate tensor name {}", t.name)));
            }
        }
        for t in &self.tensors {
            let stem = |suffix: &str| t.name.strip_suffix(suffix).map(str::to_string);
            let partner = match t.kind {
                TensorKind::FactorU => stem(".u").map(|s| format!("{s}.v")),
                TensorKind::FactorV => stem(".v").map(|s| format!("{s}.u")),
                _ => continue,
            };
            let partner = partner.ok_or_else(|| Error::Schema(format!("factor tensor {} lacks a .u/.v suffix", t.name)))?;
            match seen.get(partner.as_str()) {
                Some(p) if p.kind != t.kind && p.kind != TensorKind::Dense && p.value.cols() == t.value.cols() => {}
                Some(_) => {
                    return Err(Error::Schema(format!(
                        "factor tensors {} and {partner} disagree on rank",
                        t.name
                    )))
                }
                None => return Err(Error::Schema(format!("factor tensor {} has no partner {partner}", t.name))),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec.digest());
        let spec = self.spec.to_text();
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.as_bytes());
        out.extend_from_slice(&(self.stage.len() as u32).to_le_bytes());
        out.extend_from_slice(self.stage.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.kind.tag());
            out.extend_from_slice(&(t.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.value.cols() as u32).to_le_bytes());
            for x in t.value.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 4 {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: "file too short for a checkpoint".into(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "bad magic, not a checkpoint".into(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let spec_at = r.pos;
        let spec_len = r.u32()? as usize;
        let spec_text = r.string(spec_len)?;
        let spec = ModelSpec::from_text(&spec_text).map_err(|e| Error::Parse {
            offset: spec_at,
            msg: e.to_string(),
        })?;
        if spec.digest() != digest {
            return Err(Error::Schema("model spec digest does not match the stored spec".into()));
        }
        let stage_len = r.u32()? as usize;
        let stage = r.string(stage_len)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = r.string(name_len)?;
            let kind_at = r.pos;
            let tag = r.take(1)?[0];
            let kind = TensorKind::from_tag(tag).ok_or(Error::Parse {
                offset: kind_at,
                msg: format!("unknown tensor kind tag {tag}"),
            })?;
            let dims_at = r.pos;
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let n = rows.checked_mul(cols).filter(|&n| n > 0 && n * 8 <= r.remaining()).ok_or(Error::Parse {
                offset: dims_at,
                msg: format!("tensor {name}: bad dims {rows}x{cols}"),
            })?;
            let data_at = r.pos;
            let data: Vec<f64> = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Matrix::new(rows, cols, data).map_err(|e| Error::Parse {
                offset: data_at,
                msg: format!("tensor {name}: {e}"),
            })?;
            tensors.push(TensorRecord { name, kind, value });
        }
        if r.remaining() != 0 {
            return Err(Error::Parse {
                offset: r.pos,
                msg: format!("{} trailing bytes before the checksum", r.remaining()),
            });
        }
        Checkpoint::new(spec, stage, tensors)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("need {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            msg: "invalid utf-8".into(),
        })
    }
}
