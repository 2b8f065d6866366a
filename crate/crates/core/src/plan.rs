//! Per-layer rank assignment.
//!
//! Every factorizable layer gets a scaling factor `alpha` in `[0, 1]` and a
//! rank `clamp(round_half_up(alpha * min(m, n)), 1, min(m, n))`. A uniform
//! plan shares one `alpha`; a linear plan ramps `alpha` with block depth,
//! separately for attention and feed-forward layers and separately per
//! submodel:
//!
//! ```text
//! alpha_l = b * (alpha_end - alpha_start) / B + alpha_start
//! ```
//!
//! Real blocks use `b in 0..B`, so the last block stops one step short of
//! `alpha_end`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKind {
    Mhsa,
    Ffn,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Mhsa => "mhsa",
            LayerKind::Ffn => "ffn",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mhsa" => Ok(LayerKind::Mhsa),
            "ffn" => Ok(LayerKind::Ffn),
            other => Err(Error::domain(format!("unknown layer kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Submodel {
    Encoder,
    Decoder,
}

impl Submodel {
    pub fn as_str(self) -> &'static str {
        match self {
            Submodel::Encoder => "encoder",
            Submodel::Decoder => "decoder",
        }
    }
}

impl fmt::Display for Submodel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Submodel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Submodel::Encoder),
            "decoder" => Ok(Submodel::Decoder),
            other => Err(Error::domain(format!("unknown submodel '{other}'"))),
        }
    }
}

/// One factorizable linear layer: output dim `m`, input dim `n`, in block
/// `block` of a submodel with `blocks` blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub submodel: Submodel,
    pub block: usize,
    pub blocks: usize,
    pub m: usize,
    pub n: usize,
}

impl LayerSpec {
    pub fn max_rank(&self) -> usize {
        self.m.min(self.n)
    }

    fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::domain(format!("layer {}: submodel has zero blocks", self.id)));
        }
        if self.block >= self.blocks {
            return Err(Error::domain(format!(
                "layer {}: block {} out of range for {} blocks",
                self.id, self.block, self.blocks
            )));
        }
        if self.m == 0 || self.n == 0 {
            return Err(Error::domain(format!("layer {}: zero dimension", self.id)));
        }
        Ok(())
    }
}

/// Start/end scaling factors for one layer kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaRange {
    pub start: f64,
    pub end: f64,
}

/// The four ramp endpoints plus a per-kind "leave dense" switch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRanges {
    pub mhsa: AlphaRange,
    pub ffn: AlphaRange,
    pub mhsa_full_rank: bool,
    pub ffn_full_rank: bool,
}

impl ScalingRanges {
    pub fn new(mhsa_start: f64, mhsa_end: f64, ffn_start: f64, ffn_end: f64) -> Result<Self> {
        let out = Self {
            mhsa: AlphaRange {
                start: mhsa_start,
                end: mhsa_end,
            },
            ffn: AlphaRange {
                start: ffn_start,
                end: ffn_end,
            },
            mhsa_full_rank: false,
            ffn_full_rank: false,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("mhsa", self.mhsa), ("ffn", self.ffn)] {
            for v in [r.start, r.end] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::domain(format!("{name} scaling factor {v} outside [0, 1]")));
                }
            }
            if r.start > r.end {
                return Err(Error::domain(format!(
                    "{name} range must satisfy start <= end, got [{}, {}]",
                    r.start, r.end
                )));
            }
        }
        Ok(())
    }

    pub fn range(&self, kind: LayerKind) -> AlphaRange {
        match kind {
            LayerKind::Mhsa => self.mhsa,
            LayerKind::Ffn => self.ffn,
        }
    }

    pub fn full_rank(&self, kind: LayerKind) -> bool {
        match kind {
            LayerKind::Mhsa => self.mhsa_full_rank,
            LayerKind::Ffn => self.ffn_full_rank,
        }
    }
}

/// Linear depth ramp. `block` is real-valued so the `b = B` boundary can be probed.
pub fn linear_alpha(block: f64, blocks: usize, range: AlphaRange) -> Result<f64> {
    if blocks == 0 {
        return Err(Error::domain("submodel has zero blocks"));
    }
    Ok(block * (range.end - range.start) / blocks as f64 + range.start)
}

/// `clamp(round_half_up(alpha * min(m, n)), 1, min(m, n))`.
pub fn rank_for(alpha: f64, m: usize, n: usize) -> usize {
    let k = m.min(n);
    let raw = (alpha * k as f64 + 0.5).floor();
    (raw.max(1.0) as usize).min(k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assignment {
    /// Layer kept as a dense matrix.
    Dense,
    Factorized { alpha: f64, rank: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanEntry {
    pub layer: LayerSpec,
    pub assignment: Assignment,
}

impl PlanEntry {
    pub fn rank(&self) -> Option<usize> {
        match self.assignment {
            Assignment::Dense => None,
            Assignment::Factorized { rank, .. } => Some(rank),
        }
    }

    /// Weight parameters this entry contributes.
    pub fn params(&self) -> usize {
        let l = &self.layer;
        match self.assignment {
            Assignment::Dense => l.m * l.n,
            Assignment::Factorized { rank, .. } => rank * (l.m + l.n),
        }
    }
}

/// Rank assignment for an ordered layer set.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RankPlan {
    entries: Vec<PlanEntry>,
}

impl RankPlan {
    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.layer.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every layer dense.
    pub fn full_rank(layers: &[LayerSpec]) -> Result<Self> {
        Self::from_fn(layers, |_| Ok(Assignment::Dense))
    }

    fn from_fn(layers: &[LayerSpec], mut f: impl FnMut(&LayerSpec) -> Result<Assignment>) -> Result<Self> {
        let mut entries: Vec<PlanEntry> = Vec::with_capacity(layers.len());
        for layer in layers {
            layer.validate()?;
            if entries.iter().any(|e| e.layer.id == layer.id) {
                return Err(Error::Consistency(format!("duplicate layer id {}", layer.id)));
            }
            entries.push(PlanEntry {
                layer: layer.clone(),
                assignment: f(layer)?,
            });
        }
        Ok(Self { entries })
    }

    fn factorized(alpha: f64, layer: &LayerSpec) -> Assignment {
        Assignment::Factorized {
            alpha,
            rank: rank_for(alpha, layer.m, layer.n),
        }
    }

    /// Checks this plan covers exactly `layers` with matching dims and valid ranks.
    pub fn check_against(&self, layers: &[LayerSpec]) -> Result<()> {
        let missing: Vec<&str> = layers
            .iter()
            .filter(|l| self.get(&l.id).is_none())
            .map(|l| l.id.as_str())
            .collect();
        let extra: Vec<&str> = self
            .entries
            .iter()
            .filter(|e| !layers.iter().any(|l| l.id == e.layer.id))
            .map(|e| e.layer.id.as_str())
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Consistency(format!(
                "plan does not match model layers; missing: [{}], unknown: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for l in layers {
            let e = self.get(&l.id).expect("checked above");
            if e.layer != *l {
                return Err(Error::Consistency(format!(
                    "plan entry {} disagrees with model layer ({:?} vs {:?})",
                    l.id, e.layer, l
                )));
            }
            if let Some(r) = e.rank() {
                if r == 0 || r > l.max_rank() {
                    return Err(Error::Consistency(format!(
                        "plan entry {} has rank {r} outside 1..={}",
                        l.id,
                        l.max_rank()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Every layer factorized with the same `alpha`.
pub fn uniform_plan(layers: &[LayerSpec], alpha: f64) -> Result<RankPlan> {
    uniform_plan_for(layers, alpha, &[LayerKind::Mhsa, LayerKind::Ffn])
}

/// Layers of the selected kinds get `alpha`; the rest stay dense.
pub fn uniform_plan_for(layers: &[LayerSpec], alpha: f64, kinds: &[LayerKind]) -> Result<RankPlan> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!("uniform alpha {alpha} outside (0, 1]")));
    }
    RankPlan::from_fn(layers, |l| {
        Ok(if kinds.contains(&l.kind) {
            RankPlan::factorized(alpha, l)
        } else {
            Assignment::Dense
        })
    })
}

/// Depth-linear `alpha` per kind, each submodel ramping over its own blocks.
pub fn linear_plan(layers: &[LayerSpec], gamma: &ScalingRanges) -> Result<RankPlan> {
    gamma.validate()?;
    RankPlan::from_fn(layers, |l| {
        if gamma.full_rank(l.kind) {
            return Ok(Assignment::Dense);
        }
        let alpha = linear_alpha(l.block as f64, l.blocks, gamma.range(l.kind))?;
        Ok(RankPlan::factorized(alpha, l))
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KindTotals {
    pub layers: usize,
    pub factorized: usize,
    pub dense_params: usize,
    pub planned_params: usize,
}

/// Parameter totals of a plan against its all-dense baseline.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanSummary {
    pub mhsa: KindTotals,
    pub ffn: KindTotals,
    /// Parameters outside the factorizable set (embeddings, biases, norms, head).
    pub other_params: usize,
}

impl PlanSummary {
    pub fn total_dense(&self) -> usize {
        self.mhsa.dense_params + self.ffn.dense_params + self.other_params
    }

    pub fn total_planned(&self) -> usize {
        self.mhsa.planned_params + self.ffn.planned_params + self.other_params
    }

    /// Dense parameter count divided by planned count; 1.0 for an empty model.
    pub fn compression(&self) -> f64 {
        ratio(self.total_dense(), self.total_planned())
    }

    pub fn kind(&self, kind: LayerKind) -> &KindTotals {
        match kind {
            LayerKind::Mhsa => &self.mhsa,
            LayerKind::Ffn => &self.ffn,
        }
    }

    /// True when some factorized layer holds more parameters than its dense form.
    pub fn inflates(&self) -> bool {
        self.mhsa.planned_params > self.mhsa.dense_params || self.ffn.planned_params > self.ffn.dense_params
    }
}

fn ratio(dense: usize, planned: usize) -> f64 {
    if planned == 0 {
        1.0
    } else {
        dense as f64 / planned as f64
    }
}

impl fmt::Display for PlanSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>7} {:>11} {:>14} {:>14} {:>12}",
            "kind", "layers", "factorized", "dense_params", "plan_params", "compression"
        )?;
        for kind in [LayerKind::Mhsa, LayerKind::Ffn] {
            let t = self.kind(kind);
            writeln!(
                f,
                "{:<8} {:>7} {:>11} {:>14} {:>14} {:>11.3}x",
                kind.as_str(),
                t.layers,
                t.factorized,
                t.dense_params,
                t.planned_params,
                ratio(t.dense_params, t.planned_params)
            )?;
        }
        writeln!(f, "{:<8} {:>34} {:>14}", "other", self.other_params, self.other_params)?;
        write!(
            f,
            "{:<8} {:>34} {:>14} {:>11.3}x",
            "total",
            self.total_dense(),
            self.total_planned(),
            self.compression()
        )
    }
}

/// Totals for `layers` under `plan`; `other_params` is added to both sides.
pub fn plan_summary(plan: &RankPlan, layers: &[LayerSpec], other_params: usize) -> Result<PlanSummary> {
    let mut s = PlanSummary {
        other_params,
        ..Default::default()
    };
    for l in layers {
        let e = plan
            .get(&l.id)
            .ok_or_else(|| Error::Consistency(format!("layer {} missing from plan", l.id)))?;
        let t = match l.kind {
            LayerKind::Mhsa => &mut s.mhsa,
            LayerKind::Ffn => &mut s.ffn,
        };
        t.layers += 1;
        t.factorized += usize::from(e.rank().is_some());
        t.dense_params += l.m * l.n;
        t.planned_params += e.params();
    }
    Ok(s)
}

const PLAN_HEADER: &str = "# lrsms rank plan v1";
const PLAN_COLUMNS: &str = "# id kind submodel block blocks m n alpha rank";

impl RankPlan {
    /// Line-oriented text form, one record per layer.
    pub fn to_text(&self) -> String {
        let mut out = format!("{PLAN_HEADER}\n{PLAN_COLUMNS}\n");
        for e in &self.entries {
            let l = &e.layer;
            let (alpha, rank) = match e.assignment {
                Assignment::Dense => ("-".to_string(), "dense".to_string()),
                Assignment::Factorized { alpha, rank } => (format!("{alpha}"), rank.to_string()),
            };
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {}\n",
                l.id, l.kind, l.submodel, l.block, l.blocks, l.m, l.n, alpha, rank
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == PLAN_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    offset: 0,
                    msg: format!("plan must start with '{PLAN_HEADER}'"),
                })
            }
        }
        let mut entries: Vec<PlanEntry> = Vec::new();
        let mut offset = text.lines().next().map_or(0, |l| l.len() + 1);
        for (_, line) in lines {
            let line_offset = offset;
            offset += line.len() + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                offset: line_offset,
                msg,
            };
            let f: Vec<&str> = trimmed.split_whitespace().collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 fields, found {}", f.len())));
            }
            let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(format!("bad {what} '{s}'")));
            let layer = LayerSpec {
                id: f[0].to_string(),
                kind: f[1].parse().map_err(|e: Error| bad(e.to_string()))?,
                submodel: f[2].parse().map_err(|e: Error| bad(e.to_string()))?,
                block: num(f[3], "block")?,
                blocks: num(f[4], "blocks")?,
                m: num(f[5], "m")?,
                n: num(f[6], "n")?,
            };
            layer.validate().map_err(|e| bad(e.to_string()))?;
            let assignment = match (f[7], f[8]) {
                ("-", "dense") => Assignment::Dense,
                (a, r) => {
                    let alpha: f64 = a.parse().map_err(|_| bad(format!("bad alpha '{a}'")))?;
                    if !(0.0..=1.0).contains(&alpha) {
                        return Err(bad(format!("alpha {alpha} outside [0, 1]")));
                    }
                    let rank = num(r, "rank")?;
                    if rank == 0 || rank > layer.max_rank() {
                        return Err(bad(format!("rank {rank} outside 1..={}", layer.max_rank())));
                    }
                    Assignment::Factorized { alpha, rank }
                }
            };
            if entries.iter().any(|e| e.layer.id == layer.id) {
                return Err(bad(format!("duplicate layer id {}", layer.id)));
            }
            entries.push(PlanEntry { layer, assignment });
        }
        Ok(Self { entries })
    }
}
