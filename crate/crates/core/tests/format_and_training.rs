mod common;

use common::random_checkpoint;
use mergeguard::arch::ToyArchSpec;
use mergeguard::checkpoint::Checkpoint;
use mergeguard::model::{evaluate, init_checkpoint, train, TaskSpec, TrainConfig};
use mergeguard::pmck::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pmck_round_trip_is_exact(seed in any::<u64>(), note in "[a-z =|]{0,40}") {
        let mut c = random_checkpoint(&ToyArchSpec::TINY, seed);
        c.note(&note);
        let bytes = encode_checkpoint(&c).unwrap();
        let back: Checkpoint<f64> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

        let c32 = c.cast::<f32>().unwrap();
        let bytes = encode_checkpoint(&c32).unwrap();
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &c32);
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pmck");
    let c = random_checkpoint(&ToyArchSpec::TOY, 1);
    save_checkpoint(&c, &path).unwrap();
    assert_eq!(load_checkpoint::<f64>(&path).unwrap(), c);
    assert!(load_checkpoint::<f32>(&path).is_err());
}

#[test]
fn training_learns_an_easy_task() {
    let arch = ToyArchSpec::TOY;
    let init = init_checkpoint::<f64>(&arch, 3).unwrap();
    let task = TaskSpec::new(17, arch.n_classes, 2.0);
    let cfg = TrainConfig {
        epochs: 15,
        n_samples: 600,
        seed: 4,
        ..TrainConfig::default()
    };
    let trained = train(&init, &task, &cfg).unwrap();
    let (_, test) = mergeguard::model::generate_task::<f64>(&task, &arch, cfg.n_samples).unwrap();
    let before = evaluate(&init, &test).unwrap();
    let after = evaluate(&trained, &test).unwrap();
    assert!(after > 0.9, "accuracy {before} -> {after}");
    assert_eq!(train(&init, &task, &cfg).unwrap(), trained);
}

#[test]
fn zero_epochs_is_identity() {
    let arch = ToyArchSpec::TINY;
    let init = init_checkpoint::<f64>(&arch, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    assert_eq!(train(&init, &TaskSpec::new(1, 4, 2.0), &cfg).unwrap(), init);
}
