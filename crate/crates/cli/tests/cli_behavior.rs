//! Command-line behavior: argument validation, exit codes, report formats,
//! prediction output, and threshold effects.

use std::path::Path;
use std::process::Command;

use direcnet_core::model::{save_checkpoint, CheckpointMeta, DiRecNetV2, HeadMode, Mode, ModelConfig};
use direcnet_core::tensor::Tensor;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_direcnet"))
}

fn write_fixture(dir: &Path, per_class: usize) {
    let classes: [(&str, [u8; 3]); 4] = [
        ("Earthquakes", [204, 26, 26]),
        ("Floods", [26, 51, 204]),
        ("Wildfire/Fire", [230, 153, 26]),
        ("Normal", [26, 204, 51]),
    ];
    let mut body = String::new();
    for (c, (name, base)) in classes.iter().enumerate() {
        for i in 0..per_class {
            let d = (i as i16 % 5) * 3 - 6;
            let jitter = |v: u8| (v as i16 + d).clamp(0, 255) as u8;
            let px = image::Rgb([jitter(base[0]), jitter(base[1]), jitter(base[2])]);
            let file = format!("c{}_{}.png", c, i);
            image::RgbImage::from_pixel(48, 48, px).save(dir.join(&file)).unwrap();
            body.push_str(&format!("{}\t{}\n", file, name));
        }
    }
    std::fs::write(dir.join("manifest.tsv"), body).unwrap();
}

/// A multi-head checkpoint with a fixed head: zero final weights and biases
/// (2, 2, -2, -2) give deterministic sigmoids of about 0.88/0.88/0.12/0.12
/// for any input, so exactly two classes clear the 0.5 threshold.
fn fixed_multi_checkpoint(dir: &Path) -> std::path::PathBuf {
    let mut config = ModelConfig::default_with_head(HeadMode::Multi);
    config.dropout_embed = 0.0;
    config.dropout_head = 0.0;
    let mut model = DiRecNetV2::<f32>::build(config, 4).unwrap();
    for p in model.params_mut().iter_mut() {
        if p.name == "head.fc.weight" {
            p.value = Tensor::zeros(p.value.dims());
        }
        if p.name == "head.fc.bias" {
            p.value = Tensor::new(&[4], vec![2.0, 2.0, -2.0, -2.0]).unwrap();
        }
    }
    model.set_mode(Mode::Train);
    let warm = Tensor::new(&[2, 3, 224, 224], vec![0.5f32; 2 * 3 * 224 * 224]).unwrap();
    let _ = model.classify(&warm).unwrap();

    let meta = CheckpointMeta {
        epoch: 0,
        val_accuracy: 0.0,
        seed: 4,
        classes: vec![
            "Earthquakes".into(),
            "Floods".into(),
            "Wildfire/Fire".into(),
            "Normal".into(),
        ],
        preproc_mean: [0.0; 3],
        preproc_std: [1.0; 3],
        preproc_fingerprint: String::new(),
    };
    let path = dir.join("fixed_multi.ckpt");
    save_checkpoint(&model, &meta, &path).unwrap();
    path
}

#[test]
fn missing_required_flag_is_usage_error_exit_2() {
    let output = binary().args(["train", "--out-dir", "/tmp/x"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("--manifest"), "{}", stderr);
}

#[test]
fn zero_epochs_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 5);
    let out_dir = dir.path().join("run");
    let output = binary()
        .args([
            "train",
            "--manifest",
            dir.path().join("manifest.tsv").to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--epochs",
            "0",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("epochs"), "{}", stderr);
    assert!(!out_dir.join("best.ckpt").exists(), "no partial checkpoint files");
}

#[test]
fn predict_multi_mode_prints_both_classes_above_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fixed_multi_checkpoint(dir.path());
    image::RgbImage::from_pixel(64, 64, image::Rgb([128, 128, 128]))
        .save(dir.path().join("query.png"))
        .unwrap();

    let output = binary()
        .args([
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            dir.path().join("query.png").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    let assigned = stdout.lines().find(|l| l.contains("->")).unwrap();
    assert!(
        assigned.contains("Earthquakes") && assigned.contains("Floods"),
        "expected both high-sigmoid classes, got: {}",
        assigned
    );
    assert!(!assigned.contains("Normal"), "{}", assigned);
}

#[test]
fn predict_single_mode_assigns_exactly_one_label_and_probs_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    // Single-head checkpoint with warmed statistics.
    let mut config = ModelConfig::default_with_head(HeadMode::Single);
    config.dropout_embed = 0.0;
    config.dropout_head = 0.0;
    let mut model = DiRecNetV2::<f32>::build(config, 9).unwrap();
    model.set_mode(Mode::Train);
    let warm = Tensor::new(&[2, 3, 224, 224], vec![0.4f32; 2 * 3 * 224 * 224]).unwrap();
    let _ = model.classify(&warm).unwrap();
    let meta = CheckpointMeta::fresh(
        9,
        vec![
            "Earthquakes".into(),
            "Floods".into(),
            "Wildfire/Fire".into(),
            "Normal".into(),
        ],
    );
    let ckpt = dir.path().join("single.ckpt");
    save_checkpoint(&model, &meta, &ckpt).unwrap();

    image::RgbImage::from_pixel(32, 32, image::Rgb([10, 200, 60]))
        .save(dir.path().join("q.png"))
        .unwrap();
    let output = binary()
        .args([
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            dir.path().join("q.png").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    let probs: Vec<f64> = stdout
        .lines()
        .filter(|l| l.starts_with("  ") && !l.contains("->"))
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(probs.len(), 4);
    let sum: f64 = probs.iter().sum();
    assert!((sum - 1.0).abs() < 1e-4, "probabilities sum to {}", sum);
    let arrow = stdout.lines().find(|l| l.contains("->")).unwrap();
    let assigned: Vec<&str> = arrow.trim_start_matches("  -> ").split(", ").collect();
    assert_eq!(assigned.len(), 1, "single mode assigns exactly one label: {}", arrow);
}

#[test]
fn predict_undecodable_image_is_a_hard_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fixed_multi_checkpoint(dir.path());
    std::fs::write(dir.path().join("junk.png"), b"not an image").unwrap();
    let output = binary()
        .args([
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            dir.path().join("junk.png").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn evaluate_multilabel_subset_report_and_threshold_monotonicity() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 10);
    let ckpt = fixed_multi_checkpoint(dir.path());

    let run_eval = |threshold: &str, report: &str| -> String {
        let output = binary()
            .args([
                "evaluate",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--manifest",
                dir.path().join("manifest.tsv").to_str().unwrap(),
                "--split",
                "test",
                "--mode",
                "multi",
                "--threshold",
                threshold,
                "--classes",
                "Earthquakes,Floods,Wildfire/Fire",
                "--report",
                dir.path().join(report).to_str().unwrap(),
                "--split-seed",
                "3",
            ])
            .output()
            .unwrap();
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        String::from_utf8_lossy(&output.stdout).into_owned()
    };

    let at_half = run_eval("0.5", "r_half");
    // Three-class report shaped like the published layout: one row per class.
    for class in ["Earthquakes", "Floods", "Wildfire/Fire"] {
        assert!(at_half.contains(class), "missing {} in:\n{}", class, at_half);
    }
    assert!(!at_half.lines().any(|l| l.starts_with("Normal")));
    assert!(dir.path().join("r_half.tsv").is_file());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r_half.json")).unwrap())
            .unwrap();
    assert_eq!(json["class_names"].as_array().unwrap().len(), 3);

    // Raising the threshold can only lower recall on the same predictions.
    let at_high = run_eval("0.99", "r_high");
    let recalls = |text: &str| -> Vec<f64> {
        text.lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("class"))
            .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
            .collect()
    };
    for (low, high) in recalls(&at_half).iter().zip(recalls(&at_high)) {
        assert!(high <= *low, "recall must not grow with the threshold");
    }
}

#[test]
fn score_command_rejects_degenerate_columns_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let rows = dir.path().join("rows.tsv");
    std::fs::write(&rows, "a\t0.9\t10.0\nb\t0.9\t20.0\n").unwrap();
    let output = binary()
        .args(["score", "--rows", rows.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("degenerate"));
}

#[test]
fn score_command_renders_three_decimals_and_sorts() {
    let dir = tempfile::tempdir().unwrap();
    let rows = dir.path().join("rows.tsv");
    std::fs::write(
        &rows,
        "alpha\t0.940\t89.09\nbeta\t0.845\t183.08\ngamma\t0.964\t176.13\n",
    )
    .unwrap();
    let output = binary()
        .args([
            "score",
            "--rows",
            rows.to_str().unwrap(),
            "--sort",
            "score2",
            "--out",
            dir.path().join("table").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    let first_row = stdout.lines().nth(1).unwrap();
    assert!(first_row.starts_with("gamma"), "sorted by score2: {}", first_row);
    // 3-decimal rendering on score columns
    let cols: Vec<&str> = first_row.split('\t').collect();
    assert_eq!(cols[3].split('.').nth(1).unwrap().len(), 3);
    assert!(dir.path().join("table.tsv").is_file());
    assert!(dir.path().join("table.json").is_file());
}

#[test]
fn commands_never_modify_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 5);
    let manifest = dir.path().join("manifest.tsv");
    let before = std::fs::read(&manifest).unwrap();
    let ckpt = fixed_multi_checkpoint(dir.path());
    let ckpt_before = std::fs::read(&ckpt).unwrap();

    let _ = binary()
        .args([
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--split",
            "val",
            "--mode",
            "multi",
        ])
        .output()
        .unwrap();

    assert_eq!(std::fs::read(&manifest).unwrap(), before);
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_before);
}
