//! Acceptance criteria 1-10, run in order. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any criterion fails.
//!
//! Criteria 6, 8 and 9 train the default desk model several times and take
//! the bulk of the runtime (tens of minutes on one core).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use lrsms_core::checkpoint::Checkpoint;
use lrsms_core::config::RunConfig;
use lrsms_core::factorized::{kaiming_uniform, spectral_init, FactorizedLinear};
use lrsms_core::linalg::{matmul, Matrix};
use lrsms_core::model::{Batch, Model, ModelSpec, Split};
use lrsms_core::plan::{
    linear_plan, plan_summary, rank_for, uniform_plan, Assignment, LayerKind, LayerSpec, RankPlan, ScalingRanges,
    Submodel,
};
use lrsms_core::spectrum::{analyze_checkpoint, k95, parse_reports_csv, reports_csv, Energy};
use lrsms_core::trainer::{median, time_steps, train, RunRecord};
use lrsms_core::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SEEDS: [u64; 3] = [0, 1, 2];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(m: usize, n: usize, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(m, n, |_, _| r.random_range(-1.0..1.0))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)])
}

/// Singular values (descending) and the rank-`r` truncation, both from nalgebra.
fn oracle_svd(w: &Matrix, r: usize) -> (Vec<f64>, Matrix) {
    let d = to_na(w).svd(true, true);
    let (u, vt) = (d.u.unwrap(), d.v_t.unwrap());
    let mut order: Vec<usize> = (0..d.singular_values.len()).collect();
    order.sort_by(|&a, &b| d.singular_values[b].total_cmp(&d.singular_values[a]));
    let trunc = Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        order[..r].iter().map(|&k| u[(i, k)] * d.singular_values[k] * vt[(k, j)]).sum()
    });
    (order.iter().map(|&k| d.singular_values[k]).collect(), trunc)
}

fn orthogonal(n: usize, r: &mut ChaCha8Rng) -> Matrix {
    let q = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0)).qr().q();
    Matrix::from_fn(n, n, |i, j| q[(i, j)])
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::load(&workspace().join("configs/desk.toml")).expect("configs/desk.toml loads");
    cfg.set_seed(seed);
    cfg
}

fn desk_gamma() -> ScalingRanges {
    ScalingRanges::new(0.1, 0.2, 0.2, 0.5).unwrap()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let mut r = rng(1);
    let mut worst_init: f64 = 0.0;
    let mut worst_ey: f64 = 0.0;
    for i in 0..100 {
        let (m, n) = if i == 0 {
            (512, 2048)
        } else {
            (r.random_range(1..=256), r.random_range(1..=512))
        };
        let w = kaiming_uniform(m, n, &mut r);
        let rank = r.random_range(1..=m.min(n));
        let layer = spectral_init(&w, rank).map_err(|e| e.to_string())?;
        let (sigma, trunc) = oracle_svd(&w, rank);
        let norm = w.frobenius_norm();
        let uv = layer.effective_weight();
        worst_init = worst_init.max(uv.sub(&trunc).unwrap().frobenius_norm() / norm);
        let residual = w.sub(&uv).unwrap().frobenius_norm();
        let tail = sigma[rank..].iter().map(|s| s * s).sum::<f64>().sqrt();
        worst_ey = worst_ey.max((residual - tail).abs() / norm);
    }
    check(worst_init < 1e-8 && worst_ey < 1e-8, || {
        format!("init error {worst_init:.2e}, Eckart-Young error {worst_ey:.2e}")
    })?;
    Ok(format!("100 matrices up to 512x2048; max init error {worst_init:.1e}, max Eckart-Young error {worst_ey:.1e}"))
}

// ---------------------------------------------------------------- 2

fn layer_fd(m: usize, n: usize, rank: usize, batch: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let layer = FactorizedLinear::new(random(m, rank, &mut g), random(n, rank, &mut g), Some(random(m, 1, &mut g))).unwrap();
    let x = random(n, batch, &mut g);
    let up = random(m, batch, &mut g);
    let probe = |l: &FactorizedLinear, x: &Matrix| -> f64 {
        let z = l.forward(x).unwrap();
        z.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
    };
    let grads = layer.backward(&x, &up).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let analytic = match which {
            0 => grads.grad_u.clone(),
            1 => grads.grad_v.clone(),
            _ => grads.grad_bias.clone().unwrap(),
        };
        for i in 0..analytic.len() {
            let eval = |d: f64| {
                let mut l = layer.clone();
                let t = match which {
                    0 => l.u_mut(),
                    1 => l.v_mut(),
                    _ => l.bias_mut().unwrap(),
                };
                t.as_mut_slice()[i] += d;
                probe(&l, &x)
            };
            worst = worst.max(rel_err(analytic.as_slice()[i], (eval(h) - eval(-h)) / (2.0 * h)));
        }
    }
    for i in 0..x.len() {
        let eval = |d: f64| {
            let mut xx = x.clone();
            xx.as_mut_slice()[i] += d;
            probe(&layer, &xx)
        };
        worst = worst.max(rel_err(grads.grad_input.as_slice()[i], (eval(h) - eval(-h)) / (2.0 * h)));
    }
    worst
}

fn model_fd(model: &Model, batch: &Batch) -> f64 {
    let (_, cache) = model.forward_loss(batch).unwrap();
    let grads = model.backward(&cache).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.value.as_slice().to_vec()).collect();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (ti, values) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            let orig = probe.tensors_mut()[ti].as_slice()[i];
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig + h;
            let lp = probe.forward_loss(batch).unwrap().0;
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig - h;
            let lm = probe.forward_loss(batch).unwrap().0;
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig;
            worst = worst.max(rel_err(a, (lp - lm) / (2.0 * h)));
        }
    }
    worst
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut worst_layer: f64 = 0.0;
    for c in 0..50 {
        let (m, n) = (r.random_range(1..=9), r.random_range(1..=9));
        let rank = r.random_range(1..=m.min(n));
        worst_layer = worst_layer.max(layer_fd(m, n, rank, r.random_range(1..=4), 100 + c));
    }
    let spec = ModelSpec {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        encoder_blocks: 1,
        decoder_blocks: 1,
        vocab: 7,
        max_len: 4,
        seed: 11,
    };
    let batch = Batch::from_pairs(&[(vec![2, 3, 4, 5], vec![2, 3, 4, 5]), (vec![6, 2, 3], vec![3, 2, 6])], 4).unwrap();
    let plan = linear_plan(&spec.layers(), &ScalingRanges::new(0.25, 0.5, 0.25, 0.75).unwrap()).unwrap();
    let dense = model_fd(&Model::build(&spec, None).unwrap(), &batch);
    let factored = model_fd(&Model::build(&spec, Some(&plan)).unwrap(), &batch);
    let worst_model = dense.max(factored);
    check(worst_layer < 1e-5 && worst_model < 1e-5, || {
        format!("layer error {worst_layer:.2e}, model error {worst_model:.2e}")
    })?;
    Ok(format!(
        "50 layer configs max rel error {worst_layer:.1e}; tiny model dense {dense:.1e}, factorized {factored:.1e}"
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let sorted = |a: f64, b: f64| (a.min(b), a.max(b));
    for draw in 0..1000 {
        let (ms, me) = sorted(r.random_range(0.0..=1.0), r.random_range(0.0..=1.0));
        let (fs, fe) = sorted(r.random_range(0.0..=1.0), r.random_range(0.0..=1.0));
        let blocks = r.random_range(1..=24);
        let (m, n) = (r.random_range(1..=600), r.random_range(1..=600));
        let g = ScalingRanges::new(ms, me, fs, fe).map_err(|e| e.to_string())?;
        let layers: Vec<LayerSpec> = (0..blocks)
            .flat_map(|b| {
                [(LayerKind::Mhsa, "a", m, n), (LayerKind::Ffn, "f", n, m)].map(|(kind, p, rows, cols)| LayerSpec {
                    id: format!("{p}{b}"),
                    kind,
                    submodel: Submodel::Encoder,
                    block: b,
                    blocks,
                    m: rows,
                    n: cols,
                })
            })
            .collect();
        let plan = linear_plan(&layers, &g).map_err(|e| e.to_string())?;
        let alpha = |id: &str| match plan.get(id).unwrap().assignment {
            Assignment::Factorized { alpha, .. } => alpha,
            Assignment::Dense => f64::NAN,
        };
        let fail = |what: &str| format!("draw {draw}: {what}");
        check(alpha("a0") == ms && alpha("f0") == fs, || fail("b = 0 endpoint"))?;
        for p in ["a", "f"] {
            for b in 1..blocks {
                check(alpha(&format!("{p}{b}")) >= alpha(&format!("{p}{}", b - 1)), || fail("monotone in b"))?;
            }
        }
        for e in plan.entries() {
            let rank = e.rank().unwrap();
            check(rank >= 1 && rank <= e.layer.m.min(e.layer.n), || fail("rank floor"))?;
        }
        let au = ms.max(1e-9);
        let flat = linear_plan(&layers, &ScalingRanges::new(au, au, au, au).unwrap()).unwrap();
        let uni = uniform_plan(&layers, au).unwrap();
        for (x, y) in flat.entries().iter().zip(uni.entries()) {
            check(x.rank() == y.rank(), || fail("degenerate range vs uniform"))?;
        }
        check(rank_for(0.0, m, n) == 1, || fail("clamp at alpha 0"))?;
    }
    Ok("1000 random (gamma, B, dims) draws: endpoint, monotonicity, degenerate range, rank floor".into())
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    for k in 1..=19 {
        for trial in 0..5 {
            let (m, n) = (k + r.random_range(0..10), k + r.random_range(0..10));
            let (qu, qv) = (orthogonal(m, &mut r), orthogonal(n, &mut r));
            let w = Matrix::from_fn(m, n, |i, j| (0..k).map(|t| qu[(i, t)] * qv[(j, t)]).sum());
            let got = k95(&w, 0.95, Energy::Frobenius).map_err(|e| e.to_string())?;
            check(got == k, || format!("rank {k} trial {trial}: k95 {got}"))?;
        }
    }
    for trial in 0..200 {
        let (m, n) = (r.random_range(2..=24), r.random_range(2..=24));
        let w = random(m, n, &mut r);
        let base = k95(&w, 0.95, Energy::Frobenius).unwrap();
        let c = if r.random_bool(0.5) { 1.0 } else { -1.0 } * 10f64.powf(r.random_range(-3.0..3.0));
        let variants = [
            matmul(&orthogonal(m, &mut r), &w).unwrap(),
            matmul(&w, &orthogonal(n, &mut r)).unwrap(),
            w.scaled(c),
        ];
        for v in &variants {
            let got = k95(v, 0.95, Energy::Frobenius).unwrap();
            check(got == base, || format!("trial {trial}: k95 {got} vs {base}"))?;
        }
    }
    Ok("equal-energy ranks 1..19 exact; 200 orthogonal and scale invariance trials".into())
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let spec = ModelSpec::default();
    let layers = spec.layers();
    let plan = linear_plan(&layers, &desk_gamma()).map_err(|e| e.to_string())?;
    let summary = plan_summary(&plan, &layers, spec.fixed_param_count()).map_err(|e| e.to_string())?;
    let walk = |m: &Model| m.tensors().iter().map(|t| t.value.len()).sum::<usize>();
    let dense = walk(&Model::build(&spec, None).unwrap());
    let low = walk(&Model::build(&spec, Some(&plan)).unwrap());
    check(summary.total_dense() == dense && summary.total_planned() == low, || {
        format!("summary {}/{} vs walk {dense}/{low}", summary.total_dense(), summary.total_planned())
    })?;
    let ratio = summary.compression();
    check(ratio >= 2.0, || format!("compression {ratio:.3}"))?;
    Ok(format!("{dense} -> {low} parameters, {ratio:.3}x (summary and parameter walk agree)"))
}

// ---------------------------------------------------------------- shared desk runs

struct DeskRun {
    record: RunRecord,
    stages: Vec<Checkpoint>,
    seconds: f64,
}

fn desk_run(seed: u64, plan: Option<&RankPlan>, label: &str, keep_stages: bool) -> Result<DeskRun, String> {
    let cfg = desk_config(seed);
    let task = cfg.task().map_err(|e| e.to_string())?;
    let mut model = Model::build(&cfg.model, plan).map_err(|e| e.to_string())?;
    let mut stages = Vec::new();
    let started = Instant::now();
    let result = train(&mut model, &task, &cfg.train, label, |epoch, m| {
        if keep_stages {
            stages.push(Checkpoint::from_model(m, format!("epoch{epoch}")));
        }
        Ok(())
    });
    let record = match result {
        Ok(r) => r,
        Err(Error::Diverged { record, .. }) => *record,
        Err(e) => return Err(e.to_string()),
    };
    let seconds = started.elapsed().as_secs_f64();
    eprintln!(
        "    {label} seed {seed}: accuracy {:.4} loss {:.4}{} ({seconds:.0} s)",
        record.final_accuracy(),
        record.final_loss(),
        if record.diverged { " DIVERGED" } else { "" }
    );
    Ok(DeskRun { record, stages, seconds })
}

#[derive(Default)]
struct Shared {
    dense: Vec<DeskRun>,
    linear: Vec<DeskRun>,
}

// ---------------------------------------------------------------- 6

fn criterion_6(shared: &mut Shared) -> Outcome {
    let spec = desk_config(0).model;
    let plan = linear_plan(&spec.layers(), &desk_gamma()).unwrap();
    for seed in SEEDS {
        shared.dense.push(desk_run(seed, None, "full-rank", seed == 0)?);
        shared.linear.push(desk_run(seed, Some(&plan), "linear", false)?);
    }
    let mean = |runs: &[DeskRun]| runs.iter().map(|r| r.record.final_accuracy()).sum::<f64>() / runs.len() as f64;
    let (dense, linear) = (mean(&shared.dense), mean(&shared.linear));
    let minutes = shared.dense.iter().chain(&shared.linear).map(|r| r.seconds).sum::<f64>() / 60.0;
    let detail = format!(
        "full-rank mean accuracy {:.2}%, linear {:.2}% (gap {:.2} points), {minutes:.1} min of training",
        100.0 * dense,
        100.0 * linear,
        100.0 * (dense - linear)
    );
    check(dense > 0.95 && (dense - linear) * 100.0 <= 2.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let cfg = desk_config(0);
    let spec = ModelSpec { d_ffn: 1024, ..cfg.model.clone() };
    let task = lrsms_core::model::SyntheticTask {
        seq_len: spec.max_len,
        vocab: spec.vocab,
        ..cfg.task().unwrap()
    };
    let plan = linear_plan(&spec.layers(), &desk_gamma()).unwrap();
    let summary = plan_summary(&plan, &spec.layers(), spec.fixed_param_count()).unwrap();
    check(summary.compression() >= 2.0, || format!("compression {:.3}", summary.compression()))?;
    let idx = &task.epoch_batches(cfg.train.seed, 0, cfg.train.batch_size)[0];
    let batch = task.batch(Split::Train, idx);
    let mut models = vec![Model::build(&spec, None).unwrap(), Model::build(&spec, Some(&plan)).unwrap()];
    let times = time_steps(&mut models, &batch, &cfg.train, 200).map_err(|e| e.to_string())?;
    let (dense, low) = (median(&times[0]).unwrap(), median(&times[1]).unwrap());
    let ratio = dense / low;
    let detail = format!(
        "d_ffn 1024, {:.2}x compression: median step {:.1} ms full rank vs {:.1} ms linear over 200 warm steps, speed-up {ratio:.3}x",
        summary.compression(),
        dense * 1e3,
        low * 1e3
    );
    check(ratio > 1.1, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn criterion_8(shared: &Shared) -> Outcome {
    let run = shared.dense.first().ok_or("no full-rank run from criterion 6")?;
    check(run.stages.len() >= 3, || format!("{} stages captured", run.stages.len()))?;
    let picks = [&run.stages[0], &run.stages[run.stages.len() / 2], run.stages.last().unwrap()];
    let reports: Vec<_> = picks
        .iter()
        .map(|c| analyze_checkpoint(c, 0.95, Energy::Frobenius))
        .collect::<lrsms_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let means: Vec<f64> = reports.iter().map(|r| r.mean_ratio()).collect();
    let slope = reports[2].trend(Some(Submodel::Encoder), None).map_err(|e| e.to_string())?;
    let stages: Vec<&str> = picks.iter().map(|c| c.stage()).collect();
    let detail = format!(
        "mean k95 ratio {} = {:.4} / {:.4} / {:.4}; encoder slope {:+.4} (se {:.4})",
        stages.join("/"),
        means[0],
        means[1],
        means[2],
        slope.slope,
        slope.slope_se
    );
    check(means[0] > means[1] && means[1] > means[2] && slope.slope >= 0.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn criterion_9(shared: &Shared) -> Outcome {
    let spec = desk_config(0).model;
    let layers = spec.layers();
    let fixed = spec.fixed_param_count();
    let linear_total = plan_summary(&linear_plan(&layers, &desk_gamma()).unwrap(), &layers, fixed).unwrap().total_planned();
    // bisect for the uniform factor with the same total
    let total = |a: f64| plan_summary(&uniform_plan(&layers, a).unwrap(), &layers, fixed).unwrap().total_planned();
    let (mut lo, mut hi) = (0.001, 1.0);
    for _ in 0..50 {
        let mid = (lo + hi) / 2.0;
        if total(mid) < linear_total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = [lo, hi]
        .into_iter()
        .min_by_key(|&a| total(a).abs_diff(linear_total))
        .unwrap();
    let uniform_total = total(alpha);
    let gap = (uniform_total as f64 - linear_total as f64).abs() / linear_total as f64;
    check(gap <= 0.05, || format!("uniform budget {uniform_total} vs linear {linear_total}"))?;
    let plan = uniform_plan(&layers, alpha).unwrap();
    let mut wins = 0;
    let mut diverged = 0;
    let mut rows = Vec::new();
    for (i, seed) in SEEDS.into_iter().enumerate() {
        let uni = desk_run(seed, Some(&plan), "uniform", false)?;
        let lin = &shared.linear.get(i).ok_or("missing linear run")?.record;
        if uni.record.diverged {
            diverged += 1;
        } else if lin.final_loss() <= uni.record.final_loss() {
            wins += 1;
        }
        rows.push(format!("seed {seed} {:.4} vs {:.4}", lin.final_loss(), uni.record.final_loss()));
    }
    let detail = format!(
        "alpha {alpha:.4} gives {uniform_total} vs linear {linear_total} params ({:.2}% apart); linear vs uniform loss: {}; linear wins {wins}/3, uniform diverged {diverged}/3",
        100.0 * gap,
        rows.join(", ")
    );
    check(wins >= 2 || diverged > 0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg = d.join("tiny.toml");
    let tiny = "[model]\nd_model = 16\nn_heads = 2\nd_ffn = 32\nencoder_blocks = 2\ndecoder_blocks = 1\nvocab = 8\nmax_len = 5\n\n\
                [train]\npeak_lr = 3e-3\nwarmup_epochs = 0\ntotal_epochs = 2\ncooldown_epochs = 1\nbatch_size = 8\ncheckpoint_every = 1\n\n\
                [task]\ntrain_size = 32\neval_size = 16\n";
    std::fs::write(&cfg, tiny).unwrap();
    let hot = d.join("hot.toml");
    std::fs::write(
        &hot,
        tiny.replace("peak_lr = 3e-3", "peak_lr = 1e3\nclip_norm = 1e6").replace("total_epochs = 2", "total_epochs = 8"),
    )
    .unwrap();
    let plan = d.join("plan.txt");
    let bad_plan = d.join("bad-plan.txt");
    let run = d.join("run");
    let ckpt = run.join("ckpt-epoch002.lrsm");
    let corrupt = d.join("corrupt.lrsm");

    let script: Vec<(Vec<String>, i32)> = vec![
        (vec!["plan".into(), "--config".into(), s(&cfg), "--gamma".into(), "0.1,0.2,0.2,0.5".into(), "--out".into(), s(&plan)], 0),
        (vec!["plan".into(), "--uniform".into(), "0.5".into(), "--gamma".into(), "0.1,0.2,0.2,0.5".into(), "--out".into(), s(&plan)], 2),
        (vec!["plan".into(), "--gamma".into(), "0.5,0.2,0.2,0.5".into(), "--out".into(), s(&d.join("x.txt"))], 2),
        (vec!["train".into(), "--config".into(), s(&cfg), "--plan".into(), s(&plan), "--out".into(), s(&run)], 0),
        (vec!["train".into(), "--config".into(), s(&d.join("missing.toml")), "--out".into(), s(&run)], 2),
        (vec!["train".into(), "--config".into(), s(&cfg), "--plan".into(), s(&bad_plan), "--out".into(), s(&d.join("r2"))], 2),
        (vec!["train".into(), "--config".into(), s(&hot), "--full-rank".into(), "--out".into(), s(&d.join("hot"))], 3),
        (vec!["analyze".into(), "--ckpt".into(), s(&ckpt), "--out".into(), s(&d.join("a.csv"))], 0),
        (vec!["analyze".into(), "--ckpt".into(), s(&corrupt), "--out".into(), s(&d.join("b.csv"))], 4),
        (vec!["compare".into(), "--config".into(), s(&cfg), "--full-rank".into(), "--plans".into(), s(&plan), "--out".into(), s(&d.join("c.csv"))], 0),
        (vec!["compare".into(), "--config".into(), s(&hot), "--plans".into(), s(&plan), "--out".into(), s(&d.join("h.csv"))], 5),
        (vec!["--help".into()], 0),
    ];
    for (i, (args, want)) in script.iter().enumerate() {
        // prepare inputs that depend on earlier steps
        if i == 5 {
            let text = std::fs::read_to_string(&plan).unwrap().replace("enc.0.attn.q", "enc.9.attn.q");
            std::fs::write(&bad_plan, text).unwrap();
        }
        if i == 8 {
            let mut bytes = std::fs::read(&ckpt).unwrap();
            let at = bytes.len() / 3;
            bytes[at] ^= 1;
            std::fs::write(&corrupt, bytes).unwrap();
        }
        let out = Command::new(env!("CARGO_BIN_EXE_lrsms"))
            .args(args)
            .env("LRSMS_THREADS", "1")
            .output()
            .map_err(|e| e.to_string())?;
        let got = out.status.code().unwrap_or(-1);
        check(got == *want, || {
            format!(
                "invocation {} `lrsms {}` exited {got}, expected {want}: {}",
                i + 1,
                args.join(" "),
                String::from_utf8_lossy(&out.stderr).trim()
            )
        })?;
    }

    // round trips: write -> read -> write is byte-identical
    let ck_bytes = std::fs::read(&ckpt).unwrap();
    let ck = Checkpoint::from_bytes(&ck_bytes).map_err(|e| e.to_string())?;
    check(ck.to_bytes() == ck_bytes, || "checkpoint rewrite differs".into())?;
    let plan_text = std::fs::read_to_string(&plan).unwrap();
    check(RankPlan::from_text(&plan_text).unwrap().to_text() == plan_text, || "plan rewrite differs".into())?;
    let report_text = std::fs::read_to_string(d.join("a.csv")).unwrap();
    check(reports_csv(&parse_reports_csv(&report_text).unwrap()) == report_text, || "report rewrite differs".into())?;
    let record_text = std::fs::read_to_string(run.join("record.csv")).unwrap();
    check(RunRecord::from_csv(&record_text).unwrap().to_csv() == record_text, || "record rewrite differs".into())?;
    let diverged = std::fs::read_to_string(d.join("hot/record.csv")).unwrap();
    check(diverged.contains("# status=diverged"), || "diverged record missing status".into())?;
    let cmp = std::fs::read_to_string(d.join("c.csv")).unwrap();
    check(cmp.lines().count() == 3, || format!("comparison has {} lines", cmp.lines().count()))?;
    Ok("12 scripted invocations honor exit codes 0/2/3/4/5; checkpoint, plan, report and record files round-trip byte-identically".into())
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    let total = Instant::now();
    for n in 1..=10 {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(&mut shared),
            7 => criterion_7(),
            8 => criterion_8(&shared),
            9 => criterion_9(&shared),
            _ => criterion_10(),
        }))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS ({secs:.1} s) {detail}"),
            Err(detail) => {
                println!("criterion {n}: FAIL ({secs:.1} s) {detail}");
                failed.push(n);
            }
        }
    }
    println!("acceptance: {} of 10 passed in {:.1} min", 10 - failed.len(), total.elapsed().as_secs_f64() / 60.0);
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
