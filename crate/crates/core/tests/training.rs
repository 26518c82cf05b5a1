use chanprune::data::{load_cifar10, synthetic_dataset, Split};
use chanprune::engine::evaluate_accuracy;
use chanprune::ir::builtin_arch;
use chanprune::trainer::{cross_entropy, loss, train, LrSchedule, TrainConfig, TrainMode};

fn quick(epochs: usize, sparsity: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: LrSchedule::Cosine { initial: 0.05 },
        weight_decay: 0.0,
        sparsity,
        mode: TrainMode::Sparse,
        ..TrainConfig::default()
    }
}

#[test]
fn trained_fixture_generalizes() {
    let (train_set, val) = synthetic_dataset(4, 250, [3, 16, 16], 0.3, 0);
    assert_eq!((train_set.len(), val.len()), (800, 200));
    let s = builtin_arch("tiny_vgg", 4, [3, 16, 16], 0).unwrap();
    let (trained, history) = train(&s, &train_set, &quick(8, 1e-4)).unwrap();
    assert_eq!(history.len(), 8);
    assert!(evaluate_accuracy(&trained, &val).unwrap() >= 0.9);
}

#[test]
fn identical_runs_are_bit_identical() {
    let (train_set, _) = synthetic_dataset(4, 40, [3, 16, 16], 0.3, 1);
    let s = builtin_arch("tiny_resnet", 4, [3, 16, 16], 1).unwrap();
    let cfg = TrainConfig { seed: 9, augment: true, ..quick(2, 1e-4) };
    let (a, ha) = train(&s, &train_set, &cfg).unwrap();
    let (b, hb) = train(&s, &train_set, &cfg).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(ha, hb);
}

#[test]
fn penalty_is_lambda_times_l1() {
    let logits = [0.0f32; 4];
    let (ce, _) = cross_entropy(&logits, &[1], 4);
    let g: &[f32] = &[0.5, -0.5];
    let total = loss(&logits, &[1], 4, &[g], 0.1);
    assert!((total - ce - 0.1).abs() < 1e-9);
    assert!((ce - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn cifar_test_split_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::with_capacity(10_000 * 3073);
    for i in 0..10_000 {
        bytes.push((i % 10) as u8);
        bytes.extend(std::iter::repeat_n((i % 256) as u8, 3072));
    }
    std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
    let test = load_cifar10(dir.path(), Split::Test).unwrap();
    assert_eq!(test.images.shape, vec![10_000, 3, 32, 32]);
    assert_eq!(test.labels[13], 3);
    assert!(load_cifar10(dir.path(), Split::Train).is_err());
    std::fs::write(dir.path().join("test_batch.bin"), &bytes[..3073 * 9_999]).unwrap();
    assert!(load_cifar10(dir.path(), Split::Test).is_err());
}
