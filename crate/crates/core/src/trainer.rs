//! AdamW training loop, learning-rate schedules, run records and the
//! full-rank vs low-rank comparison harness.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Batch, EvalStats, Model, ModelSpec, Split, SyntheticTask};
use crate::plan::RankPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Warm-up, constant, then `peak * sqrt(1 - t / T_cd)` over the cooldown window.
    SqrtCooldown,
    /// Warm-up, then cosine decay from peak to zero.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub cooldown_epochs: usize,
    pub schedule: ScheduleKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Seeds the epoch order.
    pub seed: u64,
    /// Write a checkpoint every this many epochs (plus init and final); 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_epochs: 2,
            total_epochs: 30,
            cooldown_epochs: 6,
            schedule: ScheduleKind::SqrtCooldown,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 64,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_epochs == 0 {
            return bad("total_epochs must be at least 1".into());
        }
        if self.warmup_epochs + self.cooldown_epochs > self.total_epochs {
            return bad(format!(
                "warmup_epochs + cooldown_epochs ({} + {}) exceeds total_epochs {}",
                self.warmup_epochs, self.cooldown_epochs, self.total_epochs
            ));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be finite and non-negative", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be finite and non-negative", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must be in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("eps and clip_norm must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    /// Learning rate for `step` of `epoch`, with `steps_per_epoch` steps per epoch.
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        let spe = steps_per_epoch.max(1) as f64;
        let t = epoch as f64 + step as f64 / spe;
        let total = self.total_epochs as f64;
        let warm = self.warmup_epochs as f64;
        if t < warm {
            return self.peak_lr * t / warm;
        }
        match self.schedule {
            ScheduleKind::SqrtCooldown => {
                let cd = self.cooldown_epochs as f64;
                let start = total - cd;
                if cd == 0.0 || t < start {
                    self.peak_lr
                } else {
                    self.peak_lr * (1.0 - ((t - start) / cd).min(1.0)).sqrt()
                }
            }
            ScheduleKind::Cosine => {
                let span = total - warm;
                if span <= 0.0 {
                    return self.peak_lr;
                }
                let p = ((t - warm) / span).min(1.0);
                self.peak_lr * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
            }
        }
    }
}

/// AdamW with decoupled weight decay; moment tensors mirror the model's
/// parameter tensors one to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let shapes: Vec<(usize, usize)> = model.tensors().iter().map(|t| t.value.shape()).collect();
        Self::for_shapes(&shapes, cfg)
    }

    /// An optimizer over free-standing tensors of the given shapes.
    pub fn for_shapes(shapes: &[(usize, usize)], cfg: &TrainConfig) -> Self {
        let zeros: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment tensors, in parameter order.
    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    /// One update of `params` with gradients `grads`, both in the same order.
    pub fn update(&mut self, params: Vec<&mut Matrix>, grads: &[&Matrix], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Consistency(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            for (((w, &gr), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let step = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= lr * (step + self.weight_decay * *w);
            }
        }
        Ok(())
    }

    /// Updates the model in place from a gradient set.
    pub fn step(&mut self, model: &mut Model, grads: &crate::model::Gradients, lr: f64) -> Result<()> {
        let g: Vec<&Matrix> = grads.tensors().into_iter().map(|t| t.value).collect();
        self.update(model.tensors_mut(), &g, lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Number of completed epochs; 0 is the untrained model.
    pub epoch: usize,
    pub lr: f64,
    /// Token-weighted mean training loss over the epoch (NaN for epoch 0).
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Mean pre-clipping gradient norm (NaN for epoch 0).
    pub grad_norm: f64,
}

/// Everything a training run reports. Wall-clock times are kept apart from
/// the deterministic fields so the CSV stays reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub params: usize,
    /// Estimated bytes: parameters, gradients and two moment tensors at 8
    /// bytes per scalar, plus the cached activations of one training batch.
    pub memory_estimate: usize,
    pub epochs: Vec<EpochRecord>,
    pub diverged: bool,
    /// Seconds per optimizer step, in order.
    pub step_seconds: Vec<f64>,
}

const RECORD_HEADER: &str = "epoch,lr,train_loss,eval_loss,eval_accuracy,grad_norm";

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Schema(format!("line {line}: bad number '{s}'")))
}

impl RunRecord {
    pub fn initial_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.eval_loss)
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.final_epoch().map_or(f64::NAN, |e| e.eval_accuracy)
    }

    pub fn final_loss(&self) -> f64 {
        self.final_epoch().map_or(f64::NAN, |e| e.eval_loss)
    }

    /// Median step time after discarding the first `warm` steps.
    pub fn median_step(&self, warm: usize) -> Option<f64> {
        median(self.step_seconds.get(warm..)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# label={}", self.label).unwrap();
        writeln!(s, "# params={}", self.params).unwrap();
        writeln!(s, "# memory_estimated_bytes={}", self.memory_estimate).unwrap();
        writeln!(s, "# status={}", if self.diverged { "diverged" } else { "ok" }).unwrap();
        writeln!(s, "{RECORD_HEADER}").unwrap();
        for e in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch, e.lr, e.train_loss, e.eval_loss, e.eval_accuracy, e.grad_norm
            )
            .unwrap();
        }
        s
    }

    /// Parses [`RunRecord::to_csv`] output. Step times are not part of it.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rec = RunRecord::default();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(meta) = line.strip_prefix("# ") {
                let (k, v) = meta
                    .split_once('=')
                    .ok_or_else(|| Error::Schema(format!("line {n}: expected key=value")))?;
                let int = |v: &str| v.parse::<usize>().map_err(|_| Error::Schema(format!("line {n}: bad count '{v}'")));
                match k {
                    "label" => rec.label = v.to_string(),
                    "params" => rec.params = int(v)?,
                    "memory_estimated_bytes" => rec.memory_estimate = int(v)?,
                    "status" => rec.diverged = v == "diverged",
                    other => return Err(Error::Schema(format!("line {n}: unknown key '{other}'"))),
                }
            } else if !header_seen {
                if line != RECORD_HEADER {
                    return Err(Error::Schema(format!("line {n}: expected header '{RECORD_HEADER}'")));
                }
                header_seen = true;
            } else {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(Error::Schema(format!("line {n}: expected 6 fields, found {}", f.len())));
                }
                rec.epochs.push(EpochRecord {
                    epoch: f[0].parse().map_err(|_| Error::Schema(format!("line {n}: bad epoch")))?,
                    lr: parse_f64(f[1], n)?,
                    train_loss: parse_f64(f[2], n)?,
                    eval_loss: parse_f64(f[3], n)?,
                    eval_accuracy: parse_f64(f[4], n)?,
                    grad_norm: parse_f64(f[5], n)?,
                });
            }
        }
        if !header_seen {
            return Err(Error::Schema("missing record header".into()));
        }
        Ok(rec)
    }

    /// Wall-clock summary; not reproducible, so it lives in its own file.
    pub fn timing_csv(&self, warm: usize) -> String {
        let t = self.step_seconds.get(warm..).unwrap_or(&[]);
        let mean = t.iter().sum::<f64>() / t.len().max(1) as f64;
        let min = t.iter().copied().fold(f64::INFINITY, f64::min);
        let max = t.iter().copied().fold(0.0, f64::max);
        format!(
            "label,warm_steps_skipped,steps,median_s,mean_s,min_s,max_s\n{},{},{},{},{},{},{}\n",
            self.label,
            warm,
            t.len(),
            median(t).unwrap_or(f64::NAN),
            mean,
            min,
            max
        )
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Evaluates the model on the whole held-out split. Batches are evaluated in
/// parallel and merged in order.
pub fn evaluate(model: &Model, task: &SyntheticTask, batch_size: usize) -> Result<EvalStats> {
    let batches: Vec<Batch> = task
        .eval_batches(batch_size)
        .iter()
        .map(|idx| task.batch(Split::Eval, idx))
        .collect();
    let stats: Vec<EvalStats> = batches.par_iter().map(|b| model.evaluate(b)).collect::<Result<_>>()?;
    let mut total = EvalStats::default();
    for s in stats {
        total.merge(s);
    }
    Ok(total)
}

/// Loss factor over the initial loss that counts as blown up.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive blown-up epochs that stop a run.
pub const DIVERGENCE_PATIENCE: usize = 3;

fn first_non_finite(model: &Model) -> Option<String> {
    model
        .tensors()
        .into_iter()
        .find(|t| !t.value.is_finite())
        .map(|t| t.name)
}

/// Trains `model` in place. `on_stage(epoch, model)` is called for the
/// untrained model, every `checkpoint_every` epochs and after the last
/// epoch, when checkpointing is enabled.
///
/// Fails with [`Error::Diverged`] carrying the record so far if the eval
/// loss exceeds ten times the initial loss for three epochs in a row, or if
/// a loss, gradient or parameter stops being finite.
pub fn train<F>(model: &mut Model, task: &SyntheticTask, cfg: &TrainConfig, label: &str, mut on_stage: F) -> Result<RunRecord>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    cfg.validate()?;
    task.validate()?;
    if task.seq_len != model.spec().max_len || task.vocab != model.spec().vocab {
        return Err(Error::Config(format!(
            "task (seq_len {}, vocab {}) does not match model (max_len {}, vocab {})",
            task.seq_len,
            task.vocab,
            model.spec().max_len,
            model.spec().vocab
        )));
    }
    let params = model.param_count();
    let mut record = RunRecord {
        label: label.to_string(),
        params,
        ..RunRecord::default()
    };
    let checkpoints = cfg.checkpoint_every > 0;
    let diverged = |record: &RunRecord, epoch: usize, reason: String| {
        let mut r = record.clone();
        r.diverged = true;
        Error::Diverged {
            epoch,
            reason,
            record: Box::new(r),
        }
    };

    let init = match evaluate(model, task, cfg.batch_size) {
        Err(Error::NonFinite { site }) => return Err(diverged(&record, 0, format!("non-finite activation at {site}"))),
        other => other?,
    };
    let initial = init.mean_loss();
    record.epochs.push(EpochRecord {
        epoch: 0,
        lr: 0.0,
        train_loss: f64::NAN,
        eval_loss: initial,
        eval_accuracy: init.accuracy(),
        grad_norm: f64::NAN,
    });
    if checkpoints {
        on_stage(0, model)?;
    }
    let mut opt = AdamW::new(model, cfg);
    let mut blown = 0;
    for epoch in 0..cfg.total_epochs {
        let order = task.epoch_batches(cfg.seed, epoch, cfg.batch_size);
        let spe = order.len();
        let (mut loss_sum, mut tokens, mut norm_sum) = (0.0, 0usize, 0.0);
        let mut lr = 0.0;
        for (step, idx) in order.iter().enumerate() {
            let batch = task.batch(Split::Train, idx);
            let started = Instant::now();
            let (loss, cache) = match model.forward_loss(&batch) {
                Ok(x) => x,
                Err(Error::NonFinite { site }) => {
                    return Err(diverged(&record, epoch + 1, format!("non-finite activation at {site}")))
                }
                Err(e) => return Err(e),
            };
            if record.memory_estimate == 0 {
                record.memory_estimate = params * 8 * 4 + cache.activation_bytes();
            }
            let mut grads = model.backward(&cache)?;
            drop(cache);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(diverged(&record, epoch + 1, "non-finite gradient".into()));
            }
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            lr = cfg.lr_at(epoch, step, spe);
            opt.step(model, &grads, lr)?;
            record.step_seconds.push(started.elapsed().as_secs_f64());
            if let Some(name) = first_non_finite(model) {
                return Err(diverged(&record, epoch + 1, format!("non-finite parameter {name}")));
            }
            let n = batch.target_count();
            loss_sum += loss * n as f64;
            tokens += n;
            norm_sum += norm;
        }
        let eval = match evaluate(model, task, cfg.batch_size) {
            Err(Error::NonFinite { site }) => {
                return Err(diverged(&record, epoch + 1, format!("non-finite activation at {site}")))
            }
            other => other?,
        };
        record.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / tokens.max(1) as f64,
            eval_loss: eval.mean_loss(),
            eval_accuracy: eval.accuracy(),
            grad_norm: norm_sum / spe.max(1) as f64,
        });
        if checkpoints && ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.total_epochs) {
            on_stage(epoch + 1, model)?;
        }
        let current = eval.mean_loss();
        if !current.is_finite() {
            return Err(diverged(&record, epoch + 1, "non-finite eval loss".into()));
        }
        if current > DIVERGENCE_FACTOR * initial {
            blown += 1;
            if blown >= DIVERGENCE_PATIENCE {
                return Err(diverged(
                    &record,
                    epoch + 1,
                    format!("eval loss {current} above {DIVERGENCE_FACTOR}x initial {initial} for {blown} epochs"),
                ));
            }
        } else {
            blown = 0;
        }
    }
    Ok(record)
}

/// One member of a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub label: String,
    /// `None` is the full-rank model.
    pub plan: Option<RankPlan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub params: usize,
    /// Full-rank parameters over this row's parameters.
    pub compression: f64,
    /// Full-rank median step time over this row's, from interleaved timing.
    pub speedup: f64,
    pub memory_estimate: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub diverged: bool,
    pub record: RunRecord,
}

/// Steps excluded from step-time medians.
pub const WARM_STEPS: usize = 5;
/// Interleaved timing rounds per comparison, after warm-up.
pub const TIMING_ROUNDS: usize = 120;

/// Seconds per full optimizer step for each model, measured in interleaved
/// rounds on the same batch so slow drifts in machine speed hit every model
/// alike. The first `WARM_STEPS` rounds are discarded. Steps run at a zero
/// learning rate, so the models are left unchanged.
pub fn time_steps(models: &mut [Model], batch: &Batch, cfg: &TrainConfig, rounds: usize) -> Result<Vec<Vec<f64>>> {
    let mut opts: Vec<AdamW> = models.iter().map(|m| AdamW::new(m, cfg)).collect();
    let mut out = vec![Vec::with_capacity(rounds); models.len()];
    let n = models.len();
    for round in 0..WARM_STEPS + rounds {
        for k in 0..n {
            let i = (round + k) % n;
            let started = Instant::now();
            let (_, cache) = models[i].forward_loss(batch)?;
            let mut grads = models[i].backward(&cache)?;
            drop(cache);
            let norm = grads.global_norm();
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            opts[i].step(&mut models[i], &grads, 0.0)?;
            if round >= WARM_STEPS {
                out[i].push(started.elapsed().as_secs_f64());
            }
        }
    }
    Ok(out)
}

/// Trains every candidate with the same seeds and data order, one after the
/// other so step times do not compete for cores, then times the trained
/// models side by side. Divergent members are flagged and the comparison
/// continues; their speed-up is NaN.
pub fn compare(spec: &ModelSpec, task: &SyntheticTask, cfg: &TrainConfig, candidates: &[Candidate]) -> Result<Vec<CompareRow>> {
    if candidates.len() < 2 {
        return Err(Error::domain("compare needs at least two candidates"));
    }
    let base = candidates
        .iter()
        .position(|c| c.plan.is_none())
        .ok_or_else(|| Error::domain("compare needs a full-rank candidate"))?;
    let mut runs = Vec::with_capacity(candidates.len());
    let mut models = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut model = Model::build(spec, c.plan.as_ref())?;
        let record = match train(&mut model, task, cfg, &c.label, |_, _| Ok(())) {
            Ok(r) => r,
            Err(Error::Diverged { record, .. }) => *record,
            Err(e) => return Err(e),
        };
        runs.push(record);
        models.push(model);
    }

    let healthy: Vec<usize> = (0..runs.len()).filter(|&i| !runs[i].diverged).collect();
    let mut medians = vec![f64::NAN; runs.len()];
    if healthy.contains(&base) {
        let idx = &task.epoch_batches(cfg.seed, 0, cfg.batch_size)[0];
        let batch = task.batch(Split::Train, idx);
        let mut timed: Vec<Model> = healthy.iter().map(|&i| models[i].clone()).collect();
        drop(models);
        let times = time_steps(&mut timed, &batch, cfg, TIMING_ROUNDS)?;
        for (&i, t) in healthy.iter().zip(&times) {
            medians[i] = median(t).unwrap_or(f64::NAN);
        }
    }
    let base_params = runs[base].params as f64;
    let base_step = medians[base];
    Ok(runs
        .into_iter()
        .zip(medians)
        .map(|(r, m)| CompareRow {
            label: r.label.clone(),
            params: r.params,
            compression: base_params / r.params as f64,
            speedup: base_step / m,
            memory_estimate: r.memory_estimate,
            final_loss: r.final_loss(),
            final_accuracy: r.final_accuracy(),
            diverged: r.diverged,
            record: r,
        })
        .collect())
}

pub const COMPARE_HEADER: &str =
    "label,params,compression,speedup,memory_estimated_bytes,final_eval_loss,final_accuracy,status";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.4},{},{},{},{}",
            r.label,
            r.params,
            r.compression,
            r.speedup,
            r.memory_estimate,
            r.final_loss,
            r.final_accuracy,
            if r.diverged { "diverged" } else { "ok" }
        )
        .unwrap();
    }
    s
}
