//! Subcommand implementations.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use direcnet_core::data::{
    assign_splits, decode_image, preprocess, AugmentationConfig, ChannelStats, DatasetManifest,
    Split,
};
use direcnet_core::model::{
    load_checkpoint, DiRecNetV2, HeadMode, Mode, ModelConfig,
};
use direcnet_core::scoring::{build_score_table, ScoreColumn, ScoreRow, ScoringConfig};
use direcnet_core::tensor::Tensor;
use direcnet_core::train::{evaluate_model, train, TrainConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{measure_fps, MonotonicClock};
use crate::cfg::{resolve_data_path, ConfigFile};
use crate::fsutil::write_atomic;
use crate::{BenchArgs, EvaluateArgs, PredictArgs, ScoreArgs, TrainArgs};

fn parse_head_mode(s: &str) -> Result<HeadMode> {
    HeadMode::parse(s).ok_or_else(|| anyhow!("head mode must be 'single' or 'multi', got '{}'", s))
}

fn parse_fractions(s: Option<&str>) -> Result<[f64; 3]> {
    match s {
        None => Ok([0.8, 0.1, 0.1]),
        Some(text) => {
            let parts: Vec<f64> = text
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| anyhow!("fractions must be three comma-separated numbers"))?;
            if parts.len() != 3 {
                bail!("fractions must have exactly three values, got {}", parts.len());
            }
            Ok([parts[0], parts[1], parts[2]])
        }
    }
}

fn load_augmentation(path: Option<&Path>) -> Result<AugmentationConfig> {
    let Some(path) = path else {
        return Ok(AugmentationConfig::default());
    };
    let cfg = ConfigFile::load(path)?;
    let mut out = AugmentationConfig::default();
    out.flip_probability = cfg.resolve(None, "flip-probability", out.flip_probability)?;
    out.rotation_degrees = cfg.resolve(None, "rotation-degrees", out.rotation_degrees)?;
    out.shear_degrees = cfg.resolve(None, "shear-degrees", out.shear_degrees)?;
    out.zoom_delta = cfg.resolve(None, "zoom-delta", out.zoom_delta)?;
    out.shift_fraction = cfg.resolve(None, "shift-fraction", out.shift_fraction)?;
    out.enable_flip = cfg.resolve(None, "enable-flip", out.enable_flip)?;
    out.enable_rotation = cfg.resolve(None, "enable-rotation", out.enable_rotation)?;
    out.enable_shear = cfg.resolve(None, "enable-shear", out.enable_shear)?;
    out.enable_zoom = cfg.resolve(None, "enable-zoom", out.enable_zoom)?;
    out.enable_shift = cfg.resolve(None, "enable-shift", out.enable_shift)?;
    Ok(out)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file_cfg = match &args.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let head_mode = parse_head_mode(&args.head_mode)?;
    let epochs = file_cfg.resolve(args.epochs, "epochs", 300)?;
    let lr = file_cfg.resolve(args.lr, "lr", 1e-4)?;
    let batch_size = file_cfg.resolve(args.batch_size, "batch-size", 32)?;
    let seed = file_cfg.resolve(args.seed, "seed", 0)?;

    let manifest_path = resolve_data_path(&args.manifest);
    let mut manifest = DatasetManifest::load(&manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    let fractions = parse_fractions(args.fractions.as_deref())?;
    let warnings = assign_splits(&mut manifest, fractions, args.split_seed.unwrap_or(seed))
        .map_err(|e| anyhow!(e))?;
    for w in warnings {
        eprintln!("warning: {}", w);
    }

    let mut model: DiRecNetV2<f32> = match &args.resume {
        Some(ckpt) => {
            let (model, meta) = load_checkpoint(ckpt)
                .with_context(|| format!("loading resume checkpoint {}", ckpt.display()))?;
            if meta.classes != manifest.vocabulary.names() {
                bail!(
                    "checkpoint classes {:?} do not match manifest classes {:?}",
                    meta.classes,
                    manifest.vocabulary.names()
                );
            }
            model
        }
        None => {
            let mut config = ModelConfig::default_with_head(head_mode);
            config.num_classes = manifest.vocabulary.len();
            DiRecNetV2::build(config, seed).map_err(|e| anyhow!(e))?
        }
    };
    if model.config().head_mode != head_mode {
        bail!(
            "checkpoint head mode {} does not match --head-mode {}",
            model.config().head_mode.as_str(),
            head_mode.as_str()
        );
    }

    let mut config = TrainConfig::new(head_mode, args.out_dir.clone());
    config.epochs = epochs;
    config.learning_rate = lr;
    config.batch_size = batch_size;
    config.seed = seed;
    config.augmentation = load_augmentation(args.aug_config.as_deref())?;
    config.grad_clip = args.grad_clip;
    config.target_train_accuracy = args.target_train_accuracy;

    let outcome = train(&mut model, &manifest, &config).map_err(|e| anyhow!(e))?;
    write_atomic(&args.out_dir.join("train_log.tsv"), &outcome.log.to_delimited())?;
    println!(
        "best epoch {} (validation accuracy {:.4}); checkpoints at {} and {}",
        outcome.log.best_epoch,
        outcome.best_val_accuracy,
        outcome.best_checkpoint.display(),
        outcome.last_checkpoint.display()
    );
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let split = Split::parse(&args.split)
        .ok_or_else(|| anyhow!("split must be train, val or test, got '{}'", args.split))?;
    let (mut model, meta) = load_checkpoint::<f32>(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let mode = match &args.mode {
        Some(m) => parse_head_mode(m)?,
        None => model.config().head_mode,
    };

    let manifest_path = resolve_data_path(&args.manifest);
    let mut manifest = DatasetManifest::load(&manifest_path)?;
    if meta.classes != manifest.vocabulary.names() {
        bail!(
            "vocabulary mismatch: checkpoint {:?} vs manifest {:?}",
            meta.classes,
            manifest.vocabulary.names()
        );
    }
    let fractions = parse_fractions(args.fractions.as_deref())?;
    assign_splits(&mut manifest, fractions, args.split_seed.unwrap_or(meta.seed))
        .map_err(|e| anyhow!(e))?;

    let stats = ChannelStats {
        mean: meta.preproc_mean,
        std: meta.preproc_std,
    };
    let subset: Option<Vec<usize>> = match &args.classes {
        None => None,
        Some(list) => Some(
            list.split(',')
                .map(|name| {
                    manifest
                        .vocabulary
                        .index_of(name.trim())
                        .ok_or_else(|| anyhow!("unknown class '{}'", name.trim()))
                })
                .collect::<Result<_>>()?,
        ),
    };

    model.set_mode(Mode::Eval);
    let report = evaluate_model(
        &mut model,
        &manifest,
        split,
        &stats,
        mode,
        args.threshold,
        subset.as_deref(),
        args.batch_size.unwrap_or(32),
    )
    .map_err(|e| anyhow!(e))?;

    print!("{}", report.to_delimited());
    if let Some(base) = &args.report {
        write_atomic(&base.with_extension("tsv"), &report.to_delimited())?;
        write_atomic(&base.with_extension("json"), &report.to_json())?;
    }
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (mut model, meta) = load_checkpoint::<f32>(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let mode = match &args.mode {
        Some(m) => parse_head_mode(m)?,
        None => model.config().head_mode,
    };
    let stats = ChannelStats {
        mean: meta.preproc_mean,
        std: meta.preproc_std,
    };
    model.set_mode(Mode::Eval);
    let (h, w) = (model.config().input_height, model.config().input_width);
    let k = model.config().num_classes;

    for path in &args.images {
        let image_path = resolve_data_path(path);
        let decoded = decode_image(&image_path).map_err(|e| anyhow!(e))?;
        let tensor = preprocess::<f32>(&decoded, &stats, h, w);
        let batch = Tensor::new(
            &[1, 3, h, w],
            tensor.data().to_vec(),
        )
        .map_err(|e| anyhow!(e))?;
        let probs = model.classify(&batch).map_err(|e| anyhow!(e))?;
        let row = &probs.data()[..k];

        println!("{}", image_path.display());
        for (i, name) in meta.classes.iter().enumerate() {
            println!("  {:<16} {:.4}", name, row[i]);
        }
        let assigned: Vec<&str> = match mode {
            HeadMode::Single => {
                let best = direcnet_core::metrics::argmax_row(row);
                vec![meta.classes[best].as_str()]
            }
            HeadMode::Multi => meta
                .classes
                .iter()
                .enumerate()
                .filter(|(i, _)| row[*i] as f64 > args.threshold)
                .map(|(_, n)| n.as_str())
                .collect(),
        };
        if assigned.is_empty() {
            println!("  -> no class above threshold {}", args.threshold);
        } else {
            println!("  -> {}", assigned.join(", "));
        }
    }
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let (mut model, model_id) = match &args.checkpoint {
        Some(ckpt) => {
            let (model, _) = load_checkpoint::<f32>(ckpt)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            (model, ckpt.display().to_string())
        }
        None => {
            let config = ModelConfig::default_with_head(HeadMode::Single);
            let model = DiRecNetV2::build(config, args.seed).map_err(|e| anyhow!(e))?;
            (model, format!("fresh(seed={})", args.seed))
        }
    };

    let (h, w) = (model.config().input_height, model.config().input_width);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let input = Tensor::new(
        &[args.batch_size, 3, h, w],
        (0..args.batch_size * 3 * h * w)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect(),
    )
    .map_err(|e| anyhow!(e))?;

    // A fresh model has no running statistics yet; one train-mode pass
    // initializes them before timing eval-mode inference.
    if !model.bn_states().iter().all(|s| s.initialized) {
        model.set_mode(Mode::Train);
        let _ = model.classify(&input).map_err(|e| anyhow!(e))?;
    }
    model.set_mode(Mode::Eval);

    let mut clock = MonotonicClock::default();
    let result = measure_fps(
        &model_id,
        args.batch_size,
        args.warmup,
        args.iterations,
        args.repeats,
        &mut clock,
        || {
            model.classify(&input).map_err(|e| anyhow!(e))?;
            Ok(())
        },
    )?;

    print!("{}", result.to_delimited());
    if let Some(out) = &args.out {
        write_atomic(out, &result.to_delimited())?;
    }
    Ok(())
}

/// Parse `name<TAB>weighted_f1<TAB>fps` rows; `#` lines and a `model...`
/// header are skipped.
pub fn parse_score_rows(text: &str) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split('\t').collect();
        if parts.len() != 3 {
            bail!("rows file line {}: expected 3 tab-separated columns", idx + 1);
        }
        if idx == 0 && parts[1].parse::<f64>().is_err() {
            continue; // header
        }
        rows.push(ScoreRow {
            model_name: parts[0].to_string(),
            weighted_f1: parts[1]
                .parse()
                .map_err(|_| anyhow!("line {}: bad weighted F1 '{}'", idx + 1, parts[1]))?,
            fps: parts[2]
                .parse()
                .map_err(|_| anyhow!("line {}: bad FPS '{}'", idx + 1, parts[2]))?,
        });
    }
    Ok(rows)
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.rows)
        .with_context(|| format!("cannot read rows file {}", args.rows.display()))?;
    let rows = parse_score_rows(&text)?;

    let mut config = ScoringConfig {
        c: args.c,
        f1_exponent_scale: args.f1_scale,
        ..ScoringConfig::default()
    };
    if let Some(lambdas) = &args.lambda {
        config.lambdas = lambdas
            .split(',')
            .map(|t| -> Result<(String, f64)> {
                let l: f64 = t.trim().parse().map_err(|_| anyhow!("bad lambda '{}'", t))?;
                Ok((format!("lambda={}", t.trim()), l))
            })
            .collect::<Result<_>>()?;
    }

    let table = build_score_table(&rows, &config).map_err(|e| anyhow!(e))?;
    let rendered = match &args.sort {
        None => table.to_delimited(),
        Some(column) => {
            let selector = match column.as_str() {
                "wf1" => ScoreColumn::WeightedF1,
                "fps" => ScoreColumn::Fps,
                "score2" => ScoreColumn::Score2,
                other => {
                    if let Some(idx) = other.strip_prefix("score1:") {
                        ScoreColumn::Score1(idx.parse().map_err(|_| anyhow!("bad sort column"))?)
                    } else {
                        bail!("sort column must be wf1, fps, score2 or score1:N");
                    }
                }
            };
            let mut out = String::new();
            out.push_str("model\tweighted_f1\tfps");
            for label in &table.lambda_labels {
                out.push('\t');
                out.push_str(label);
            }
            out.push_str("\tscore2\n");
            for row in table.sorted_by(selector) {
                out.push_str(&format!("{}\t{:.3}\t{:.2}", row.model_name, row.weighted_f1, row.fps));
                for s in &row.score1 {
                    out.push_str(&format!("\t{:.3}", s));
                }
                out.push_str(&format!("\t{:.3}\n", row.score2));
            }
            out
        }
    };

    print!("{}", rendered);
    if let Some(base) = &args.out {
        write_atomic(&base.with_extension("tsv"), &rendered)?;
        write_atomic(&base.with_extension("json"), &table.to_json())?;
    }
    Ok(())
}
