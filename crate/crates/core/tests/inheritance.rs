mod common;

use std::collections::HashMap;

use chanprune::data::synthetic_dataset;
use chanprune::engine::{evaluate_accuracy, forward, recalibrate_bn, Mode};
use chanprune::inheritance::{
    geometric_median, gm_keep, gm_objective, inherit, select_channels, top_k, Criterion, GM_MAX_ITERS, GM_TOL,
};
use chanprune::ir::{builtin_arch, ParamRole};
use chanprune::planner::ratios_to_config;
use chanprune::Tensor;
use indexmap::IndexMap;
use proptest::prelude::*;

#[test]
fn spec_selection_examples() {
    assert_eq!(top_k(&[3.0, 1.0, 2.0], 2), common::rank_count_top_k(&[3.0, 1.0, 2.0], 2));
    assert_eq!(top_k(&[0.5, 0.5, 0.1], 2), vec![0, 1]);
    let pts = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![5.0, 5.0]];
    let gm = geometric_median(&pts, GM_TOL, GM_MAX_ITERS);
    assert!(gm.iter().all(|v| v.abs() < 1e-6), "{gm:?}");
    assert!(common::grid_geometric_median(&pts).iter().all(|v| v.abs() < 1e-6));
    assert_eq!(gm_keep(&pts, 2), vec![1, 2]);
}

#[test]
fn half_plan_on_tiny_vgg_slices_the_first_two_convs() {
    let s = builtin_arch("tiny_vgg", 4, [3, 16, 16], 0).unwrap();
    let ratios: IndexMap<String, f64> = s.blocks.iter().map(|b| (b.id.clone(), 0.5)).collect();
    let cfg = ratios_to_config(&s, &ratios);
    let p = inherit(&s, &cfg, Criterion::L1Norm, 0).unwrap();
    assert_eq!(p.param("conv1_1.conv", ParamRole::Weight).unwrap().shape, vec![4, 3, 3, 3]);
    assert_eq!(p.param("conv1_2.conv", ParamRole::Weight).unwrap().shape, vec![4, 4, 3, 3]);
    assert_eq!(p.param("fc", ParamRole::Weight).unwrap().shape, vec![4, 8 * 4 * 4]);
}

fn l1_rows(t: &Tensor) -> Vec<f64> {
    let row = t.data.len() / t.shape[0];
    (0..t.shape[0]).map(|r| t.data[r * row..(r + 1) * row].iter().map(|v| v.abs() as f64).sum()).collect()
}

fn batch(s: &chanprune::ir::ModelSnapshot, n: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = s.input_shape;
    Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn collinear(pts: &[Vec<f64>]) -> bool {
    let a = &pts[0];
    let Some(b) = pts.iter().find(|p| *p != a) else { return true };
    pts.iter().all(|p| ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])).abs() < 1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn top_k_agrees_with_rank_counting(
        scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.5, 1.0, 2.0, 3.0]), 1..20),
        k in 1usize..20,
    ) {
        let k = k.min(scores.len());
        prop_assert_eq!(top_k(&scores, k), common::rank_count_top_k(&scores, k));
    }

    #[test]
    fn weiszfeld_reaches_the_grid_optimum(
        dim in 1usize..=3,
        raw in prop::collection::vec(-5.0f64..5.0, 3..24),
    ) {
        let pts: Vec<Vec<f64>> = raw.chunks_exact(dim).map(|c| c.to_vec()).collect();
        prop_assume!(!pts.is_empty());
        let gm = geometric_median(&pts, GM_TOL, GM_MAX_ITERS);
        let grid = common::grid_geometric_median(&pts);
        let (fw, fg) = (gm_objective(&pts, &gm), common::objective(&pts, &grid));
        prop_assert!(fw <= fg + 1e-6, "weiszfeld {fw} vs grid {fg}");
    }

    #[test]
    fn gm_prunes_the_points_nearest_the_median(
        raw in prop::collection::vec(-9i32..9, 4..20),
        k in 1usize..10,
    ) {
        let pts: Vec<Vec<f64>> = raw.chunks_exact(2).map(|c| vec![c[0] as f64, c[1] as f64]).collect();
        let k = k.min(pts.len());
        // The median is unique only when the points are not collinear.
        let collinear = collinear(&pts);
        prop_assume!(!collinear);
        let grid = common::grid_geometric_median(&pts);
        let dist: Vec<f64> = pts.iter().map(|p| common::objective(&[p.clone()], &grid)).collect();
        // Skip near ties that the two median estimates could order differently.
        let mut sorted = dist.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] == 0.0 || w[1] - w[0] > 1e-4));
        let neg: Vec<f64> = dist.iter().map(|d| -d).collect();
        // Pruning the nearest with lower index first is keeping the k farthest with higher index first.
        let rev: Vec<f64> = neg.iter().rev().map(|d| -d).collect();
        let kept_rev = common::rank_count_top_k(&rev, k);
        let mut expected: Vec<usize> = kept_rev.iter().map(|&i| pts.len() - 1 - i).collect();
        expected.sort_unstable();
        prop_assert_eq!(gm_keep(&pts, k), expected);
    }

    #[test]
    fn snapshot_selections_match_the_oracles(seed in any::<u64>()) {
        let mut s = common::random_arch(seed);
        common::randomize_gammas(&mut s, seed);
        let cfg = common::random_config(&s, seed ^ 9);
        let l1 = select_channels(&s, &cfg, Criterion::L1Norm).unwrap();
        let bn = select_channels(&s, &cfg, Criterion::BnWeights).unwrap();
        for (id, &k) in &cfg.channels {
            let w = s.param(id, ParamRole::Weight).unwrap();
            prop_assert_eq!(&l1.kept[id], &common::rank_count_top_k(&l1_rows(w), k));
            let bn_id = common::bn_reading(&s, id).unwrap();
            let g: Vec<f64> = common::gamma(&s, &bn_id).iter().map(|v| v.abs() as f64).collect();
            prop_assert_eq!(&bn.kept[id], &common::rank_count_top_k(&g, k));
        }
    }

    #[test]
    fn pruned_forward_matches_the_masked_original(seed in any::<u64>(), crit in 0usize..3) {
        let mut s = common::random_arch(seed);
        common::randomize_gammas(&mut s, seed);
        let cfg = common::random_config(&s, seed ^ 5);
        let crit = Criterion::ALL[crit];
        let sel = select_channels(&s, &cfg, crit).unwrap();
        let kept: HashMap<String, Vec<usize>> = sel.kept.clone().into_iter().collect();
        let masked = common::mask_dropped_channels(&s, &kept);
        let pruned = inherit(&s, &cfg, crit, seed).unwrap();
        prop_assert_eq!(pruned.layers.len(), s.layers.len());
        let x = batch(&s, 3, seed);
        let a = forward(&pruned, &x, Mode::Eval).unwrap();
        let b = forward(&masked, &x, Mode::Eval).unwrap();
        for (p, q) in a.logits().iter().zip(b.logits()) {
            prop_assert!((p - q).abs() <= 1e-4 * (1.0 + q.abs()), "{p} vs {q}");
        }
    }
}

#[test]
fn random_init_redraws_weights_deterministically() {
    let s = builtin_arch("tiny_resnet", 4, [3, 16, 16], 0).unwrap();
    let cfg = common::random_config(&s, 2);
    let a = inherit(&s, &cfg, Criterion::RandomInit, 11).unwrap();
    let b = inherit(&s, &cfg, Criterion::RandomInit, 11).unwrap();
    let c = inherit(&s, &cfg, Criterion::RandomInit, 12).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
    let l1 = inherit(&s, &cfg, Criterion::L1Norm, 11).unwrap();
    let fc = |m: &chanprune::ir::ModelSnapshot| m.param("fc", ParamRole::Weight).unwrap().clone();
    assert_ne!(fc(&a), fc(&l1));
}

#[test]
fn keep_all_recalibration_preserves_accuracy() {
    use chanprune::trainer::{train, LrSchedule, TrainConfig, TrainMode};
    let (train_set, val) = synthetic_dataset(4, 100, [3, 16, 16], 0.3, 0);
    let s = builtin_arch("tiny_ir", 4, [3, 16, 16], 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: LrSchedule::Cosine { initial: 0.05 },
        weight_decay: 0.0,
        mode: TrainMode::Finetune,
        ..Default::default()
    };
    let (trained, _) = train(&s, &train_set, &cfg).unwrap();
    let keep_all = ratios_to_config(&trained, &IndexMap::new());
    let same = inherit(&trained, &keep_all, Criterion::GeometricMedian, 0).unwrap();
    assert!(same.bit_eq(&trained));
    let recal = recalibrate_bn(&same, &train_set).unwrap();
    let before = evaluate_accuracy(&trained, &val).unwrap();
    let after = evaluate_accuracy(&recal, &val).unwrap();
    assert!((before - after).abs() <= 0.005, "{before} vs {after}");
}
