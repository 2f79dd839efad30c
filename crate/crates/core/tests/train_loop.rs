//! Training-loop behavior on small synthetic datasets.

use std::path::{Path, PathBuf};

use direcnet_core::data::{assign_splits, AugmentationConfig, DatasetManifest, Split};
use direcnet_core::model::{load_checkpoint, DiRecNetV2, HeadMode, Mode, ModelConfig};
use direcnet_core::train::{train, validation_accuracy, TrainConfig};

/// Write `per_class * 4` solid-color PNGs plus a manifest; 0.8/0.1/0.1 split.
fn solid_color_fixture(dir: &Path, per_class: usize, seed: u64) -> DatasetManifest {
    let classes: [(&str, [u8; 3]); 4] = [
        ("Earthquakes", [204, 26, 26]),
        ("Floods", [26, 51, 204]),
        ("Wildfire/Fire", [230, 153, 26]),
        ("Normal", [26, 204, 51]),
    ];
    let mut manifest_body = String::new();
    for (c, (name, base)) in classes.iter().enumerate() {
        for i in 0..per_class {
            let jitter = |v: u8, delta: i16| (v as i16 + delta).clamp(0, 255) as u8;
            let d = (i as i16 % 5) * 3 - 6;
            let px = image::Rgb([jitter(base[0], d), jitter(base[1], -d), jitter(base[2], d / 2)]);
            let img = image::RgbImage::from_pixel(32, 32, px);
            let file = format!("c{}_{}.png", c, i);
            img.save(dir.join(&file)).unwrap();
            manifest_body.push_str(&format!("{}\t{}\n", file, name));
        }
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest_body).unwrap();
    let mut manifest = DatasetManifest::load(&manifest_path).unwrap();
    assign_splits(&mut manifest, [0.8, 0.1, 0.1], seed).unwrap();
    manifest
}

fn tiny_model(head: HeadMode, seed: u64) -> DiRecNetV2<f32> {
    // Full topology at reduced width: 32x32 input keeps the run fast while
    // every layer kind still executes.
    let mut config = ModelConfig::reduced(head);
    config.input_height = 32;
    config.input_width = 32;
    config.num_classes = 4;
    DiRecNetV2::build(config, seed).unwrap()
}

fn tiny_train_config(dir: PathBuf, head: HeadMode) -> TrainConfig {
    let mut config = TrainConfig::new(head, dir);
    config.batch_size = 8;
    config.epochs = 2;
    config.seed = 11;
    config.augmentation = AugmentationConfig::disabled();
    config
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = solid_color_fixture(dir.path(), 5, 3);
    let mut model = tiny_model(HeadMode::Single, 1);
    let before: Vec<Vec<u32>> = model
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();

    let mut config = tiny_train_config(dir.path().join("ckpt"), HeadMode::Single);
    config.learning_rate = 0.0;
    config.epochs = 1;
    let outcome = train(&mut model, &manifest, &config).unwrap();

    let after: Vec<Vec<u32>> = model
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(before, after, "zero learning rate must not move parameters");
    assert_eq!(outcome.log.epochs.len(), 1);
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = solid_color_fixture(dir.path(), 5, 3);

    // Wall-clock columns differ between runs; compare everything else.
    let strip_wall = |log: String| -> String {
        log.lines()
            .map(|line| {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() == 6 && cols[0] != "epoch" {
                    cols[..5].join("\t")
                } else {
                    line.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let run = |tag: &str| {
        let mut model = tiny_model(HeadMode::Single, 9);
        let config = tiny_train_config(dir.path().join(tag), HeadMode::Single);
        let outcome = train(&mut model, &manifest, &config).unwrap();
        let bytes = std::fs::read(&outcome.best_checkpoint).unwrap();
        (strip_wall(outcome.log.to_delimited()), bytes)
    };
    let (log_a, ckpt_a) = run("a");
    let (log_b, ckpt_b) = run("b");
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b, "best checkpoints must be bitwise identical");
}

#[test]
fn best_epoch_is_argmax_of_validation_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = solid_color_fixture(dir.path(), 5, 3);
    let mut model = tiny_model(HeadMode::Single, 2);
    let mut config = tiny_train_config(dir.path().join("ckpt"), HeadMode::Single);
    config.epochs = 3;
    let outcome = train(&mut model, &manifest, &config).unwrap();
    let accs: Vec<f64> = outcome.log.epochs.iter().map(|e| e.val_accuracy).collect();
    let best = outcome.log.best_epoch;
    for (i, &a) in accs.iter().enumerate() {
        if i < best {
            assert!(a < accs[best], "earlier epoch {} ties or beats best", i);
        } else {
            assert!(a <= accs[best]);
        }
    }
    // The retained checkpoint reports the best epoch's accuracy.
    let (_m, meta) = load_checkpoint::<f32>(&outcome.best_checkpoint).unwrap();
    assert_eq!(meta.val_accuracy, accs[best]);
    assert_eq!(meta.epoch, best);
}

#[test]
fn eval_mode_never_mutates_model_state() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = solid_color_fixture(dir.path(), 10, 5);
    let mut model = tiny_model(HeadMode::Single, 3);
    let config = tiny_train_config(dir.path().join("ckpt"), HeadMode::Single);
    let outcome = train(&mut model, &manifest, &config).unwrap();

    let checksum = |m: &DiRecNetV2<f32>| {
        let mut bits: Vec<u32> = Vec::new();
        for p in m.params().iter() {
            bits.extend(p.value.data().iter().map(|v| v.to_bits()));
        }
        for s in m.bn_states() {
            bits.extend(s.running_mean.iter().map(|v| v.to_bits()));
            bits.extend(s.running_var.iter().map(|v| v.to_bits()));
        }
        bits
    };

    model.set_mode(Mode::Eval);
    let before = checksum(&model);
    let _ = validation_accuracy(&mut model, &manifest, Split::Val, &outcome.stats, 8).unwrap();
    let _ = validation_accuracy(&mut model, &manifest, Split::Test, &outcome.stats, 8).unwrap();
    assert_eq!(before, checksum(&model), "eval must not mutate parameters or statistics");
}

#[test]
fn multi_head_trains_with_bce() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = solid_color_fixture(dir.path(), 4, 5);
    let mut model = tiny_model(HeadMode::Multi, 3);
    let mut config = tiny_train_config(dir.path().join("ckpt"), HeadMode::Multi);
    config.epochs = 1;
    let outcome = train(&mut model, &manifest, &config).unwrap();
    assert_eq!(outcome.log.epochs.len(), 1);
    assert!(outcome.log.epochs[0].train_loss.is_finite());
}

#[test]
fn head_mode_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = solid_color_fixture(dir.path(), 4, 5);
    let mut model = tiny_model(HeadMode::Single, 3);
    let config = tiny_train_config(dir.path().join("ckpt"), HeadMode::Multi);
    assert!(train(&mut model, &manifest, &config).is_err());
}

#[test]
fn separable_fixture_reaches_high_train_accuracy() {
    // Reduced-width model on the solid-color set: must overfit quickly.
    let dir = tempfile::tempdir().unwrap();
    let manifest = solid_color_fixture(dir.path(), 10, 3);
    let mut model = tiny_model(HeadMode::Single, 7);
    let mut config = tiny_train_config(dir.path().join("ckpt"), HeadMode::Single);
    config.epochs = 200;
    config.learning_rate = 1e-3;
    config.target_train_accuracy = Some(0.95);
    let outcome = train(&mut model, &manifest, &config).unwrap();
    let best_train = outcome
        .log
        .epochs
        .iter()
        .map(|e| e.train_accuracy)
        .fold(0.0f64, f64::max);
    assert!(
        best_train >= 0.95,
        "expected >= 95% train accuracy, got {} after {} epochs",
        best_train,
        outcome.log.epochs.len()
    );
    // Train loss at the end must undercut the first epoch.
    let first = outcome.log.epochs.first().unwrap().train_loss;
    let last = outcome.log.epochs.last().unwrap().train_loss;
    assert!(last < first, "loss did not decrease: {} -> {}", first, last);
}
