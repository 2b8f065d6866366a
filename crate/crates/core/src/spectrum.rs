//! Singular-value spectrum analysis: how many singular vectors it takes to
//! capture a fraction of each weight matrix, per layer and per block.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::{matmul_nt, svd, Matrix};
use crate::model::TensorKind;
use crate::plan::{AlphaRange, LayerKind, LayerSpec, ScalingRanges, Submodel};

/// Singular values at or below this fraction of the largest count as zero.
pub const ZERO_SIGMA: f64 = 1e-12;

/// Relative slack when comparing cumulative energy against the target, so
/// that exact ties are not decided by rounding noise.
const TIE_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Energy {
    /// Cumulative squared singular values.
    #[default]
    Frobenius,
    /// Cumulative singular values.
    Nuclear,
}

impl fmt::Display for Energy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Energy::Frobenius => "frobenius",
            Energy::Nuclear => "nuclear",
        })
    }
}

impl FromStr for Energy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(Energy::Frobenius),
            "nuclear" => Ok(Energy::Nuclear),
            other => Err(Error::domain(format!("unknown energy criterion '{other}'"))),
        }
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("threshold {threshold} must be in (0, 1]")))
    }
}

/// Smallest `k` whose leading `k` singular values hold `threshold` of the
/// total energy. `sigma` must be sorted non-increasing.
pub fn k95_from_sigma(sigma: &[f64], threshold: f64, energy: Energy) -> Result<usize> {
    check_threshold(threshold)?;
    let max = sigma.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return Ok(0);
    }
    let weights: Vec<f64> = sigma
        .iter()
        .map(|&s| if s <= ZERO_SIGMA * max { 0.0 } else { s })
        .map(|s| match energy {
            Energy::Frobenius => s * s,
            Energy::Nuclear => s,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let target = threshold * total * (1.0 - TIE_SLACK);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(weights.iter().filter(|&&w| w > 0.0).count())
}

pub fn k95(w: &Matrix, threshold: f64, energy: Energy) -> Result<usize> {
    check_threshold(threshold)?;
    k95_from_sigma(&svd(w)?.sigma, threshold, energy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRecord {
    pub stage: String,
    pub layer: String,
    pub kind: LayerKind,
    pub submodel: Submodel,
    pub block: usize,
    /// Blocks in the submodel; not part of the CSV row.
    pub blocks: usize,
    pub k95: usize,
    pub ktotal: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRatioReport {
    pub threshold: f64,
    pub energy: Energy,
    pub records: Vec<RatioRecord>,
}

pub const REPORT_HEADER: &str = "stage,layer,kind,submodel,block,k95,ktotal,ratio";

fn sort_records(records: &mut [RatioRecord]) {
    records.sort_by(|a, b| (a.submodel, a.block, &a.layer).cmp(&(b.submodel, b.block, &b.layer)));
}

/// The weight of layer `l` as stored in a checkpoint; factorized layers are
/// multiplied out.
fn layer_weight(ckpt: &Checkpoint, l: &LayerSpec) -> Result<Matrix> {
    if let Some(t) = ckpt.tensor(&format!("{}.w", l.id)) {
        return Ok(t.value.clone());
    }
    let u = ckpt.tensor(&format!("{}.u", l.id));
    let v = ckpt.tensor(&format!("{}.v", l.id));
    match (u, v) {
        (Some(u), Some(v)) if u.kind == TensorKind::FactorU && v.kind == TensorKind::FactorV => {
            matmul_nt(&u.value, &v.value)
        }
        _ => Err(Error::Schema(format!("checkpoint has no weight for layer {}", l.id))),
    }
}

/// One record per factorizable weight matrix, sorted by submodel, block
/// and layer id. Layers are analyzed in parallel.
pub fn analyze_checkpoint(ckpt: &Checkpoint, threshold: f64, energy: Energy) -> Result<RankRatioReport> {
    check_threshold(threshold)?;
    let layers = ckpt.spec().layers();
    let mut records: Vec<RatioRecord> = layers
        .par_iter()
        .map(|l| {
            let w = layer_weight(ckpt, l)?;
            if w.shape() != (l.m, l.n) {
                return Err(Error::Schema(format!(
                    "layer {} stored as {:?}, expected {:?}",
                    l.id,
                    w.shape(),
                    (l.m, l.n)
                )));
            }
            let k = k95(&w, threshold, energy)?;
            let ktotal = l.max_rank();
            Ok(RatioRecord {
                stage: ckpt.stage().to_string(),
                layer: l.id.clone(),
                kind: l.kind,
                submodel: l.submodel,
                block: l.block,
                blocks: l.blocks,
                k95: k,
                ktotal,
                ratio: k as f64 / ktotal as f64,
            })
        })
        .collect::<Result<_>>()?;
    sort_records(&mut records);
    Ok(RankRatioReport {
        threshold,
        energy,
        records,
    })
}

impl RankRatioReport {
    pub fn mean_ratio(&self) -> f64 {
        mean(self.records.iter().map(|r| r.ratio))
    }

    /// Mean ratio over the records matching the filters.
    pub fn mean_ratio_where(&self, submodel: Submodel, block: Option<usize>, kind: Option<LayerKind>) -> f64 {
        mean(
            self.records
                .iter()
                .filter(|r| r.submodel == submodel && block.is_none_or(|b| r.block == b) && kind.is_none_or(|k| r.kind == k))
                .map(|r| r.ratio),
        )
    }

    /// Least-squares fit of ratio against `block / blocks` for one group.
    pub fn trend(&self, submodel: Option<Submodel>, kind: Option<LayerKind>) -> Result<TrendFit> {
        let pts: Vec<(f64, f64)> = self
            .records
            .iter()
            .filter(|r| submodel.is_none_or(|s| r.submodel == s) && kind.is_none_or(|k| r.kind == k))
            .map(|r| (r.block as f64 / r.blocks as f64, r.ratio))
            .collect();
        trend_fit(&pts)
    }

    /// Scaling ranges read off the fitted lines: per kind, the fit over both
    /// submodels evaluated at depth 0 and 1, clipped to `[0.05, 1]`. A
    /// falling trend is flattened to its clipped mean.
    pub fn suggest_gamma(&self) -> Result<ScalingRanges> {
        let range = |kind| -> Result<AlphaRange> {
            let fit = self.trend(None, Some(kind))?;
            let clip = |x: f64| x.clamp(0.05, 1.0);
            let (start, end) = (clip(fit.intercept), clip(fit.intercept + fit.slope));
            if start <= end {
                Ok(AlphaRange { start, end })
            } else {
                let m = clip(fit.intercept + fit.slope * fit.mean_x);
                Ok(AlphaRange { start: m, end: m })
            }
        };
        let (a, f) = (range(LayerKind::Mhsa)?, range(LayerKind::Ffn)?);
        ScalingRanges::new(a.start, a.end, f.start, f.end)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Reports for several stages as one CSV table. A leading comment line
/// records the criterion.
pub fn reports_csv(reports: &[RankRatioReport]) -> String {
    let mut s = String::new();
    if let Some(r) = reports.first() {
        writeln!(s, "# energy={} threshold={}", r.energy, r.threshold).unwrap();
    }
    writeln!(s, "{REPORT_HEADER}").unwrap();
    for rep in reports {
        for r in &rep.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.stage, r.layer, r.kind, r.submodel, r.block, r.k95, r.ktotal, r.ratio
            )
            .unwrap();
        }
    }
    s
}

/// Parses [`reports_csv`] output back into per-stage reports, in order of
/// first appearance. Block counts are inferred per submodel.
pub fn parse_reports_csv(text: &str) -> Result<Vec<RankRatioReport>> {
    let mut energy = Energy::Frobenius;
    let mut threshold = 0.95;
    let mut header = false;
    let mut records: Vec<RatioRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let bad = |msg: &str| Error::Schema(format!("line {n}: {msg}"));
        if let Some(meta) = line.strip_prefix("# ") {
            for kv in meta.split_whitespace() {
                match kv.split_once('=') {
                    Some(("energy", v)) => energy = v.parse()?,
                    Some(("threshold", v)) => threshold = v.parse().map_err(|_| bad("bad threshold"))?,
                    _ => return Err(bad("unknown metadata")),
                }
            }
            continue;
        }
        if !header {
            if line != REPORT_HEADER {
                return Err(bad("missing report header"));
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad("expected 8 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad count"));
        records.push(RatioRecord {
            stage: f[0].to_string(),
            layer: f[1].to_string(),
            kind: f[2].parse()?,
            submodel: f[3].parse()?,
            block: num(f[4])?,
            blocks: 0,
            k95: num(f[5])?,
            ktotal: num(f[6])?,
            ratio: f[7].parse().map_err(|_| bad("bad ratio"))?,
        });
    }
    if !header {
        return Err(Error::Schema("missing report header".into()));
    }
    for sub in [Submodel::Encoder, Submodel::Decoder] {
        let blocks = records.iter().filter(|r| r.submodel == sub).map(|r| r.block + 1).max().unwrap_or(0);
        records.iter_mut().filter(|r| r.submodel == sub).for_each(|r| r.blocks = blocks);
    }
    let mut out: Vec<RankRatioReport> = Vec::new();
    for r in records {
        match out.iter_mut().find(|rep| rep.records[0].stage == r.stage) {
            Some(rep) => rep.records.push(r),
            None => out.push(RankRatioReport {
                threshold,
                energy,
                records: vec![r],
            }),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; NaN with only two points.
    pub slope_se: f64,
    pub points: usize,
    pub mean_x: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn trend_fit(points: &[(f64, f64)]) -> Result<TrendFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::domain(format!("trend fit needs at least 2 points, got {n}")));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::domain("trend fit needs at least 2 distinct depths"));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let ssr: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (ssr / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(TrendFit {
        slope,
        intercept,
        slope_se,
        points: n,
        mean_x: mx,
    })
}
