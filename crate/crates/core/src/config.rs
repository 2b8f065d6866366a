//! Run configuration files (TOML). Unknown keys are rejected and relative
//! paths are resolved against the directory holding the file.
//!
//! ```toml
//! [model]
//! d_model = 128
//! # ... any ModelSpec field; omitted fields take the defaults
//!
//! [train]
//! total_epochs = 30
//!
//! [task]
//! kind = "copy"
//!
//! [plan]
//! gamma = [0.1, 0.2, 0.2, 0.5]    # or: uniform = 0.25, or: file = "plan.txt"
//!
//! [output]
//! dir = "runs/linear"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, SyntheticTask, TaskKind};
use crate::plan::{linear_plan, uniform_plan_for, LayerKind, RankPlan, ScalingRanges};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Defaults to the model's `max_len` (fixed-length sequences).
    pub min_len: Option<usize>,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub fresh_each_epoch: bool,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = SyntheticTask::new(TaskKind::Copy, 1, 4, 0);
        Self {
            kind: TaskKind::Copy,
            min_len: None,
            train_size: t.train_size,
            eval_size: t.eval_size,
            seed: 0,
            fresh_each_epoch: t.fresh_each_epoch,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub gamma: Option<[f64; 4]>,
    pub uniform: Option<f64>,
    pub file: Option<PathBuf>,
    pub mhsa_full_rank: bool,
    pub ffn_full_rank: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OutputSection {
    dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    model: ModelSpec,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    task: TaskSection,
    #[serde(default)]
    plan: PlanSection,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub task: TaskSection,
    pub plan: PlanSection,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            task: TaskSection::default(),
            plan: PlanSection::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let model = raw.model;
        model.validate().map_err(|e| Error::Config(format!("[model]: {e}")))?;
        raw.train.validate()?;
        let mut plan = raw.plan;
        plan.file = plan.file.map(|p| base.join(p));
        let cfg = RunConfig {
            model,
            train: raw.train,
            task: raw.task,
            plan,
            output_dir: raw.output.dir.map(|p| base.join(p)),
        };
        cfg.task()?.validate().map_err(|e| Error::Config(format!("[task]: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        let t = &self.task;
        let mut task = SyntheticTask::new(t.kind, self.model.max_len, self.model.vocab, t.seed);
        task.min_len = t.min_len.unwrap_or(self.model.max_len);
        task.train_size = t.train_size;
        task.eval_size = t.eval_size;
        task.fresh_each_epoch = t.fresh_each_epoch;
        Ok(task)
    }

    /// Overrides the model seed and the data-order seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// The plan named by the `[plan]` section, if any. More than one of
    /// `gamma`, `uniform` and `file` is a config error.
    pub fn resolve_plan(&self) -> Result<Option<RankPlan>> {
        let p = &self.plan;
        let given = [p.gamma.is_some(), p.uniform.is_some(), p.file.is_some()];
        if given.iter().filter(|&&g| g).count() > 1 {
            return Err(Error::Config("[plan]: set only one of gamma, uniform, file".into()));
        }
        let layers = self.model.layers();
        let plan = if let Some([a, b, c, d]) = p.gamma {
            let mut g = ScalingRanges::new(a, b, c, d)?;
            g.mhsa_full_rank = p.mhsa_full_rank;
            g.ffn_full_rank = p.ffn_full_rank;
            linear_plan(&layers, &g)?
        } else if let Some(alpha) = p.uniform {
            let kinds: Vec<LayerKind> = [(LayerKind::Mhsa, p.mhsa_full_rank), (LayerKind::Ffn, p.ffn_full_rank)]
                .into_iter()
                .filter(|(_, full)| !full)
                .map(|(k, _)| k)
                .collect();
            uniform_plan_for(&layers, alpha, &kinds)?
        } else if let Some(path) = &p.file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read plan {}: {e}", path.display())))?;
            RankPlan::from_text(&text)?
        } else {
            return Ok(None);
        };
        plan.check_against(&layers)?;
        Ok(Some(plan))
    }
}
