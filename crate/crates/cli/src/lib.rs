//! The `lrsms` command line: `plan`, `train`, `analyze` and `compare`.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 training
//! divergence, 4 corrupt input, 5 every compared run diverged.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use lrsms_core::checkpoint::Checkpoint;
use lrsms_core::config::RunConfig;
use lrsms_core::model::{Model, ModelSpec};
use lrsms_core::plan::{linear_plan, plan_summary, uniform_plan_for, LayerKind, RankPlan, ScalingRanges};
use lrsms_core::spectrum::{analyze_checkpoint, reports_csv, Energy};
use lrsms_core::trainer::{compare, compare_csv, train, Candidate, WARM_STEPS};
use lrsms_core::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_CORRUPT: u8 = 4;
pub const EXIT_ALL_FAILED: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "lrsms", version, about = "Low-rank factorized transformer training from scratch")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a rank plan and print its parameter summary.
    Plan(PlanArgs),
    /// Train one model, writing checkpoints and a run record.
    Train(TrainArgs),
    /// Rank-ratio report for one or more checkpoints.
    Analyze(AnalyzeArgs),
    /// Train full rank and each plan with the same seeds and tabulate.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["uniform", "gamma"])))]
struct PlanArgs {
    /// Run config supplying the model spec; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One scaling factor for every layer.
    #[arg(long)]
    uniform: Option<f64>,
    /// Linear ramp endpoints: mhsa_start,mhsa_end,ffn_start,ffn_end.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    /// Keep attention projections dense.
    #[arg(long)]
    mhsa_full_rank: bool,
    /// Keep feed-forward layers dense.
    #[arg(long)]
    ffn_full_rank: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Plan file; without it (or --full-rank) the config's [plan] is used.
    #[arg(long, conflicts_with = "full_rank")]
    plan: Option<PathBuf>,
    #[arg(long)]
    full_rank: bool,
    /// Output directory; defaults to the config's [output] dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the model and data-order seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long = "ckpt", required = true, num_args = 1..)]
    ckpts: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    /// frobenius (squared singular values) or nuclear (singular values).
    #[arg(long, default_value = "frobenius")]
    energy: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write a linear plan fitted to the last checkpoint's trend.
    #[arg(long)]
    suggest_gamma: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, num_args = 1..)]
    plans: Vec<PathBuf>,
    /// The full-rank baseline is always included; accepted for clarity.
    #[arg(long)]
    full_rank: bool,
    /// Comparison CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::Parse { .. } | Error::Checksum { .. } => EXIT_CORRUPT,
            _ => EXIT_USAGE,
        };
        Self { code, msg: e.to_string() }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::usage(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::write(path, contents).map_err(io(path))
}

fn set_threads() {
    if let Some(n) = std::env::var("LRSMS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    set_threads();
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Train(a) => cmd_train(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn read_plan(path: &Path, spec: &ModelSpec) -> Result<RankPlan, Failure> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let plan = RankPlan::from_text(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    plan.check_against(&spec.layers())
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(plan)
}

fn cmd_plan(a: PlanArgs) -> Result<u8, Failure> {
    let spec = match &a.config {
        Some(p) => load_config(p, None)?.model,
        None => ModelSpec::default(),
    };
    let layers = spec.layers();
    let plan = if let Some(alpha) = a.uniform {
        let kinds: Vec<LayerKind> = [(LayerKind::Mhsa, a.mhsa_full_rank), (LayerKind::Ffn, a.ffn_full_rank)]
            .into_iter()
            .filter(|(_, full)| !full)
            .map(|(k, _)| k)
            .collect();
        uniform_plan_for(&layers, alpha, &kinds)?
    } else {
        let g = a.gamma.unwrap_or_default();
        let [s1, e1, s2, e2] = g[..] else {
            return Err(Failure::usage(format!("--gamma needs 4 values, got {}", g.len())));
        };
        let mut gamma = ScalingRanges::new(s1, e1, s2, e2)?;
        gamma.mhsa_full_rank = a.mhsa_full_rank;
        gamma.ffn_full_rank = a.ffn_full_rank;
        linear_plan(&layers, &gamma)?
    };
    let summary = plan_summary(&plan, &layers, spec.fixed_param_count())?;
    write_file(&a.out, plan.to_text())?;
    println!("{summary}");
    if summary.inflates() {
        eprintln!(
            "warning: some factorized layers hold more parameters than their dense form \
             (r (m + n) > m n); a full-rank factorization costs up to 2x"
        );
    }
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs) -> Result<u8, Failure> {
    let cfg = load_config(&a.config, a.seed)?;
    let out = a
        .out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Failure::usage("no --out given and the config has no [output] dir"))?;
    let plan = match (&a.plan, a.full_rank) {
        (Some(p), _) => Some(read_plan(p, &cfg.model)?),
        (None, true) => None,
        (None, false) => cfg.resolve_plan()?,
    };
    let task = cfg.task()?;
    let mut model = Model::build(&cfg.model, plan.as_ref())?;
    std::fs::create_dir_all(&out).map_err(io(&out))?;
    let label = match &a.plan {
        Some(p) => p.file_stem().map_or("plan".into(), |s| s.to_string_lossy().into_owned()),
        None if plan.is_some() => "config-plan".into(),
        None => "full-rank".into(),
    };
    let write_stage = |epoch: usize, m: &Model| {
        Checkpoint::from_model(m, format!("epoch{epoch}")).write(&out.join(format!("ckpt-epoch{epoch:03}.lrsm")))
    };
    let result = train(&mut model, &task, &cfg.train, &label, write_stage);
    let (record, failure) = match result {
        Ok(r) => (r, None),
        Err(Error::Diverged { epoch, reason, record }) => (
            *record,
            Some(Failure {
                code: EXIT_DIVERGED,
                msg: format!("training diverged at epoch {epoch}: {reason}"),
            }),
        ),
        Err(e) => return Err(e.into()),
    };
    if failure.is_none() && cfg.train.checkpoint_every == 0 {
        let epoch = cfg.train.total_epochs;
        Checkpoint::from_model(&model, format!("epoch{epoch}")).write(&out.join("ckpt-final.lrsm"))?;
    }
    write_file(&out.join("record.csv"), record.to_csv())?;
    write_file(&out.join("timing.csv"), record.timing_csv(WARM_STEPS))?;
    if let Some(f) = failure {
        return Err(f);
    }
    let last = record.final_epoch().expect("at least the initial evaluation");
    println!(
        "{label}: params {} eval_loss {:.4} accuracy {:.4} memory {:.1} MiB (estimated)",
        record.params,
        last.eval_loss,
        last.eval_accuracy,
        record.memory_estimate as f64 / (1 << 20) as f64
    );
    Ok(EXIT_OK)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<u8, Failure> {
    let energy: Energy = a.energy.parse()?;
    if !(a.threshold > 0.0 && a.threshold <= 1.0) {
        return Err(Failure::usage(format!("--threshold {} must be in (0, 1]", a.threshold)));
    }
    let mut reports = Vec::with_capacity(a.ckpts.len());
    let mut last_spec = None;
    for path in &a.ckpts {
        let bytes = std::fs::read(path).map_err(io(path))?;
        let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| Failure {
            code: EXIT_CORRUPT,
            msg: format!("corrupt checkpoint {}: {e}", path.display()),
        })?;
        let report = analyze_checkpoint(&ckpt, a.threshold, energy).map_err(|e| Failure {
            code: EXIT_CORRUPT,
            msg: format!("{}: {e}", path.display()),
        })?;
        println!(
            "{} ({}): mean ratio {:.4} over {} matrices",
            path.display(),
            ckpt.stage(),
            report.mean_ratio(),
            report.records.len()
        );
        last_spec = Some(ckpt.spec().clone());
        reports.push(report);
    }
    write_file(&a.out, reports_csv(&reports))?;
    if let (Some(path), Some(report), Some(spec)) = (&a.suggest_gamma, reports.last(), last_spec) {
        let gamma = report.suggest_gamma()?;
        let plan = linear_plan(&spec.layers(), &gamma)?;
        write_file(path, plan.to_text())?;
        println!(
            "suggested gamma: {},{},{},{}",
            gamma.mhsa.start, gamma.mhsa.end, gamma.ffn.start, gamma.ffn.end
        );
    }
    Ok(EXIT_OK)
}

fn cmd_compare(a: CompareArgs) -> Result<u8, Failure> {
    let cfg = load_config(&a.config, a.seed)?;
    if a.plans.is_empty() {
        return Err(Failure::usage("compare needs at least one --plans file besides the full-rank baseline"));
    }
    let mut candidates = vec![Candidate {
        label: "full-rank".into(),
        plan: None,
    }];
    for p in &a.plans {
        let plan = read_plan(p, &cfg.model)?;
        let stem = p.file_stem().map_or("plan".into(), |s| s.to_string_lossy().into_owned());
        let mut label = stem.clone();
        let mut k = 2;
        while candidates.iter().any(|c| c.label == label) {
            label = format!("{stem}-{k}");
            k += 1;
        }
        candidates.push(Candidate { label, plan: Some(plan) });
    }
    let rows = compare(&cfg.model, &cfg.task()?, &cfg.train, &candidates)?;
    let csv = compare_csv(&rows);
    write_file(&a.out, &csv)?;
    print!("{csv}");
    if rows.iter().all(|r| r.diverged) {
        return Err(Failure {
            code: EXIT_ALL_FAILED,
            msg: "every compared run diverged".into(),
        });
    }
    Ok(EXIT_OK)
}
