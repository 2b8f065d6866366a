mod common;

use common::*;
use lrsms_core::checkpoint::Checkpoint;
use lrsms_core::factorized::kaiming_uniform;
use lrsms_core::linalg::{matmul, Matrix};
use lrsms_core::model::{Model, ModelSpec};
use lrsms_core::plan::{uniform_plan, LayerKind, Submodel};
use lrsms_core::spectrum::{
    analyze_checkpoint, k95, k95_from_sigma, parse_reports_csv, reports_csv, trend_fit, Energy,
};
use proptest::prelude::*;
use rand::Rng;

/// Sum of `k` rank-one terms with orthonormal directions and equal norms.
fn equal_energy(m: usize, n: usize, k: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    let (qu, qv) = (orthogonal(m, &mut r), orthogonal(n, &mut r));
    Matrix::from_fn(m, n, |i, j| (0..k).map(|t| qu[(i, t)] * qv[(j, t)]).sum())
}

fn small_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        d_model: 32,
        n_heads: 4,
        d_ffn: 64,
        encoder_blocks: 2,
        decoder_blocks: 1,
        vocab: 10,
        max_len: 6,
        seed,
    }
}

#[test]
fn equal_energy_rank_three() {
    assert_eq!(k95(&equal_energy(10, 8, 3, 1), 0.95, Energy::Frobenius).unwrap(), 3);
    assert_eq!(k95(&equal_energy(10, 8, 3, 1), 0.95, Energy::Nuclear).unwrap(), 3);
}

#[test]
fn gaussian_matches_scan_over_oracle_spectrum() {
    let w = Matrix::gaussian(32, 32, &mut rng(2));
    let sigma = gram_sigma(&w);
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    let mut expected = 0;
    for (i, s) in sigma.iter().enumerate() {
        acc += s * s;
        if acc >= 0.95 * total {
            expected = i + 1;
            break;
        }
    }
    assert_eq!(k95(&w, 0.95, Energy::Frobenius).unwrap(), expected);
}

#[test]
fn full_threshold_counts_numerical_rank() {
    let w = matmul(&random(12, 4, &mut rng(3)), &random(4, 9, &mut rng(4))).unwrap();
    assert_eq!(k95(&w, 1.0, Energy::Frobenius).unwrap(), 4);
}

#[test]
fn dominant_singular_value_wins_in_the_limit() {
    for eps in [1e-2, 1e-4, 1e-8] {
        let s: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat_n(eps, 20)).collect();
        let k = k95_from_sigma(&s, 0.95, Energy::Frobenius).unwrap();
        if eps <= 1e-2 {
            assert_eq!(k, 1);
        }
    }
}

#[test]
fn random_dense_matrices_follow_the_quarter_circle_share() {
    // a square random matrix needs about 62% of its components for 95% of sigma^2
    let ratios: Vec<f64> = (0..20)
        .map(|s| {
            let w = kaiming_uniform(64, 64, &mut rng(100 + s));
            let k = k95(&w, 0.95, Energy::Frobenius).unwrap();
            let sigma = gram_sigma(&w);
            let total: f64 = sigma.iter().map(|x| x * x).sum();
            let mut acc = 0.0;
            let scan = sigma.iter().position(|x| {
                acc += x * x;
                acc >= 0.95 * total
            });
            assert_eq!(k, scan.unwrap() + 1);
            k as f64 / 64.0
        })
        .collect();
    assert!(ratios.iter().all(|&r| (0.55..=0.7).contains(&r)), "{ratios:?}");
    let low = matmul(&random(64, 4, &mut rng(1)), &random(4, 64, &mut rng(2))).unwrap();
    assert!(k95(&low, 0.95, Energy::Frobenius).unwrap() as f64 / 64.0 < ratios[0] / 8.0);
}

#[test]
fn spectral_init_checkpoint_respects_rank_bound() {
    let spec = small_spec(5);
    let plan = uniform_plan(&spec.layers(), 0.25).unwrap();
    let ckpt = Checkpoint::from_model(&Model::build(&spec, Some(&plan)).unwrap(), "init");
    let report = analyze_checkpoint(&ckpt, 0.95, Energy::Frobenius).unwrap();
    assert_eq!(report.records.len(), spec.layers().len());
    for r in &report.records {
        let rank = plan.get(&r.layer).unwrap().rank().unwrap();
        assert!(r.k95 <= rank, "{} k95 {} rank {rank}", r.layer, r.k95);
    }
}

#[test]
fn full_rank_factorization_matches_dense_twin() {
    let spec = small_spec(6);
    let dense = Checkpoint::from_model(&Model::build(&spec, None).unwrap(), "dense");
    let full = Checkpoint::from_model(&Model::build(&spec, Some(&uniform_plan(&spec.layers(), 1.0).unwrap())).unwrap(), "full");
    let a = analyze_checkpoint(&dense, 0.95, Energy::Frobenius).unwrap();
    let b = analyze_checkpoint(&full, 0.95, Energy::Frobenius).unwrap();
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.layer, y.layer);
        assert!(x.k95.abs_diff(y.k95) <= 1);
    }
}

#[test]
fn report_is_sorted_and_round_trips() {
    let spec = small_spec(7);
    let ckpt = Checkpoint::from_model(&Model::build(&spec, None).unwrap(), "epoch0");
    let report = analyze_checkpoint(&ckpt, 0.9, Energy::Nuclear).unwrap();
    let keys: Vec<_> = report.records.iter().map(|r| (r.submodel, r.block, r.layer.clone())).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(report.records[0].submodel, Submodel::Encoder);
    let mut late = report.clone();
    late.records.iter_mut().for_each(|r| r.stage = "epoch5".into());
    let csv = reports_csv(&[report.clone(), late]);
    assert!(csv.lines().nth(1).unwrap() == "stage,layer,kind,submodel,block,k95,ktotal,ratio");
    let back = parse_reports_csv(&csv).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(reports_csv(&back), csv);
}

#[test]
fn missing_weights_are_schema_errors() {
    let spec = small_spec(8);
    let ckpt = Checkpoint::from_model(&Model::build(&spec, None).unwrap(), "x");
    let kept: Vec<_> = ckpt.tensors().iter().filter(|t| t.name != "enc.0.ffn.up.w").cloned().collect();
    let broken = Checkpoint::new(spec, "x", kept).unwrap();
    assert!(matches!(
        analyze_checkpoint(&broken, 0.95, Energy::Frobenius),
        Err(lrsms_core::Error::Schema(_))
    ));
}

#[test]
fn noisy_line_slope_within_three_standard_errors() {
    let mut r = rng(9);
    let normal = rand_distr::Normal::new(0.0, 0.01).unwrap();
    let blocks = 12;
    let pts: Vec<(f64, f64)> = (0..blocks)
        .flat_map(|b| std::iter::repeat_n(b, 6))
        .map(|b| {
            let y = 0.2 + 0.04 * b as f64 + r.sample(normal);
            (b as f64, y)
        })
        .collect();
    let fit = trend_fit(&pts).unwrap();
    assert!((fit.slope - 0.04).abs() < 3.0 * fit.slope_se, "{fit:?}");
}

#[test]
fn suggested_gamma_is_clipped_and_monotone() {
    let spec = small_spec(10);
    let ckpt = Checkpoint::from_model(&Model::build(&spec, None).unwrap(), "x");
    let g = analyze_checkpoint(&ckpt, 0.95, Energy::Frobenius).unwrap().suggest_gamma().unwrap();
    for kind in [LayerKind::Mhsa, LayerKind::Ffn] {
        let r = g.range(kind);
        assert!(r.start >= 0.05 && r.end <= 1.0 && r.start <= r.end);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn known_rank_equal_energy(k in 1usize..=19, extra in 0usize..8, seed in any::<u64>()) {
        let (m, n) = (k + extra + 1, k + 2 * extra);
        let w = equal_energy(m, n.max(k), k, seed);
        prop_assert_eq!(k95(&w, 0.95, Energy::Frobenius).unwrap(), k);
    }

    #[test]
    fn orthogonal_and_scale_invariance(m in 2usize..24, n in 2usize..24, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0], seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = random(m, n, &mut r);
        let base = k95(&w, 0.95, Energy::Frobenius).unwrap();
        let left = matmul(&orthogonal(m, &mut r), &w).unwrap();
        let right = matmul(&w, &orthogonal(n, &mut r)).unwrap();
        prop_assert_eq!(k95(&left, 0.95, Energy::Frobenius).unwrap(), base);
        prop_assert_eq!(k95(&right, 0.95, Energy::Frobenius).unwrap(), base);
        prop_assert_eq!(k95(&w.scaled(c), 0.95, Energy::Frobenius).unwrap(), base);
    }

    #[test]
    fn monotone_in_threshold(m in 1usize..20, n in 1usize..20, t1 in 0.01f64..=1.0, t2 in 0.01f64..=1.0, seed in any::<u64>()) {
        let w = random(m, n, &mut rng(seed));
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        for e in [Energy::Frobenius, Energy::Nuclear] {
            prop_assert!(k95(&w, lo, e).unwrap() <= k95(&w, hi, e).unwrap());
        }
    }
}
