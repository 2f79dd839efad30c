//! Training regime: seed-shuffled epochs with augmentation, one Adam step per
//! batch, per-epoch validation, and best-validation-accuracy model selection.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    augment, compute_channel_stats, decode_image, resize_bilinear, split_fingerprint, standardize,
    AugmentationConfig, ChannelStats, DatasetManifest, Split, StatsCache,
};
use crate::error::{DataError, MetricsError, TrainError};
use crate::metrics::{argmax_row, multilabel_metrics, single_label_metrics, MetricsReport};
use crate::model::{save_checkpoint, CheckpointMeta, DiRecNetV2, HeadMode, Mode};
use crate::params::Adam;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::util::mix_seed;

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub head_mode: HeadMode,
    pub augmentation: AugmentationConfig,
    pub checkpoint_dir: PathBuf,
    /// Optional global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
    /// Stop once epoch train accuracy reaches this value; off by default.
    pub target_train_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn new(head_mode: HeadMode, checkpoint_dir: PathBuf) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 300,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            head_mode,
            augmentation: AugmentationConfig::default(),
            checkpoint_dir,
            grad_clip: None,
            target_train_accuracy: None,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(TrainError::Config("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// One epoch's aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

/// Per-epoch record plus the index of the selected epoch (highest validation
/// accuracy, earliest on ties).
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub notes: Vec<String>,
}

impl TrainLog {
    /// Tab-separated rows, one epoch per line, for external plotting.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\ttrain_accuracy\tval_loss\tval_accuracy\twall_seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\n",
                e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.wall_seconds
            ));
        }
        out.push_str(&format!("# best_epoch\t{}\n", self.best_epoch));
        for note in &self.notes {
            out.push_str(&format!("# note\t{}\n", note));
        }
        out
    }
}

/// Result of one training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: TrainLog,
    pub best_val_accuracy: f64,
    pub stats: ChannelStats,
}

/// Lazily decoded, resized image store, bounded by a byte budget.
struct ImageStore<'a> {
    manifest: &'a DatasetManifest,
    target: (usize, usize),
    cache: HashMap<usize, crate::data::RawImage>,
    budget_bytes: usize,
    used_bytes: usize,
}

impl<'a> ImageStore<'a> {
    fn new(manifest: &'a DatasetManifest, target: (usize, usize)) -> Self {
        ImageStore {
            manifest,
            target,
            cache: HashMap::new(),
            budget_bytes: 1 << 30,
            used_bytes: 0,
        }
    }

    fn resized(&mut self, index: usize) -> Result<crate::data::RawImage, DataError> {
        if let Some(img) = self.cache.get(&index) {
            return Ok(img.clone());
        }
        let sample = &self.manifest.samples[index];
        let decoded = decode_image(&self.manifest.absolute_path(sample))?;
        let resized = resize_bilinear(&decoded, self.target.0, self.target.1);
        let bytes = resized.data.len() * 4;
        if self.used_bytes + bytes <= self.budget_bytes {
            self.used_bytes += bytes;
            self.cache.insert(index, resized.clone());
        }
        Ok(resized)
    }
}

fn batch_tensor<T: Scalar>(images: &[crate::data::RawImage], h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(&[images.len(), 3, h, w], data).expect("sized batch")
}

/// Accuracy rule shared by training and validation: argmax of the prediction
/// must equal the sample's single hot index. (Multi-head models are trained
/// on single-label data; for genuinely multi-hot rows the row counts as
/// correct only when every label clears 0.5 and every non-label stays below.)
fn exact_match_correct<T: Scalar>(probs_row: &[T], labels: &[usize]) -> bool {
    if labels.len() == 1 {
        argmax_row(probs_row) == labels[0]
    } else {
        let half = T::from_f64(0.5);
        probs_row
            .iter()
            .enumerate()
            .all(|(c, &p)| labels.contains(&c) == (p > half))
    }
}

/// Forward a list of samples in eval mode, in manifest order, returning the
/// probability matrix.
pub fn predict_indices<T: Scalar>(
    model: &mut DiRecNetV2<T>,
    manifest: &DatasetManifest,
    indices: &[usize],
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<Tensor<T>, TrainError> {
    let (h, w) = (model.config().input_height, model.config().input_width);
    let k = model.config().num_classes;
    let mut store = ImageStore::new(manifest, (h, w));
    let mut probs = Vec::with_capacity(indices.len() * k);
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut images = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let mut img = store.resized(i)?;
            standardize(&mut img, stats);
            images.push(img);
        }
        let batch = batch_tensor::<T>(&images, h, w);
        let out = model.classify(&batch)?;
        probs.extend_from_slice(out.data());
    }
    Ok(Tensor::new(&[indices.len(), k], probs)?)
}

/// Fraction of split samples whose prediction matches the accuracy rule.
pub fn validation_accuracy<T: Scalar>(
    model: &mut DiRecNetV2<T>,
    manifest: &DatasetManifest,
    split: Split,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let indices = manifest.split_indices(split);
    if indices.is_empty() {
        return Err(TrainError::Data(DataError::EmptySplit(split.as_str().into())));
    }
    let probs = predict_indices(model, manifest, &indices, stats, batch_size)?;
    let k = model.config().num_classes;
    let correct = indices
        .iter()
        .enumerate()
        .filter(|(row, &i)| {
            exact_match_correct(&probs.data()[row * k..(row + 1) * k], &manifest.samples[i].labels)
        })
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Run eval-mode inference over a split and compute the metric report:
/// single-label metrics for `HeadMode::Single`, thresholded per-class binary
/// metrics over `class_subset` for `HeadMode::Multi`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model<T: Scalar>(
    model: &mut DiRecNetV2<T>,
    manifest: &DatasetManifest,
    split: Split,
    stats: &ChannelStats,
    mode: HeadMode,
    threshold: f64,
    class_subset: Option<&[usize]>,
    batch_size: usize,
) -> Result<MetricsReport, TrainError> {
    let indices = manifest.split_indices(split);
    if indices.is_empty() {
        return Err(TrainError::Data(DataError::EmptySplit(split.as_str().into())));
    }
    model.set_mode(Mode::Eval);
    let probs = predict_indices(model, manifest, &indices, stats, batch_size)?;
    let report = match mode {
        HeadMode::Single => {
            let mut y_true = Vec::with_capacity(indices.len());
            for &i in &indices {
                let labels = &manifest.samples[i].labels;
                if labels.len() != 1 {
                    return Err(TrainError::Metrics(MetricsError::Contract(format!(
                        "sample '{}' is multi-label; single-label metrics need one label",
                        manifest.samples[i].path.display()
                    ))));
                }
                y_true.push(labels[0]);
            }
            single_label_metrics(&y_true, &probs, manifest.vocabulary.names())?
        }
        HeadMode::Multi => {
            let labels = manifest.label_matrix::<T>(&indices);
            let default_subset = manifest.vocabulary.disaster_subset();
            let subset = class_subset.unwrap_or(&default_subset);
            multilabel_metrics(&labels, &probs, threshold, subset, manifest.vocabulary.names())?
        }
    };
    Ok(report)
}

/// Train with the configured regime and retain the checkpoint whose
/// validation accuracy is highest (earliest epoch on ties). Deterministic
/// under a fixed seed.
pub fn train<T: Scalar>(
    model: &mut DiRecNetV2<T>,
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if model.config().head_mode != config.head_mode {
        return Err(TrainError::Config(format!(
            "model head mode {} does not match training config {}",
            model.config().head_mode.as_str(),
            config.head_mode.as_str()
        )));
    }
    let train_indices = manifest.split_indices(Split::Train);
    let val_indices = manifest.split_indices(Split::Val);
    if train_indices.is_empty() {
        return Err(TrainError::Data(DataError::EmptySplit("train".into())));
    }
    if val_indices.is_empty() {
        return Err(TrainError::Data(DataError::EmptySplit("val".into())));
    }
    if config.head_mode == HeadMode::Single {
        if let Some(&i) = train_indices
            .iter()
            .chain(&val_indices)
            .find(|&&i| !manifest.samples[i].is_single_label())
        {
            return Err(TrainError::Config(format!(
                "sample '{}' is multi-label but the head mode is single",
                manifest.samples[i].path.display()
            )));
        }
    }

    std::fs::create_dir_all(&config.checkpoint_dir).map_err(DataError::Io)?;
    let (h, w) = (model.config().input_height, model.config().input_width);
    let k = model.config().num_classes;

    // Training-split statistics, cached beside the checkpoints.
    let fingerprint = split_fingerprint(manifest, Split::Train);
    let stats_path = config.checkpoint_dir.join("channel_stats.tsv");
    let stats = match StatsCache::load(&stats_path) {
        Ok(cache) if cache.fingerprint == fingerprint => cache.stats,
        _ => {
            let stats = compute_channel_stats(manifest, Split::Train, h, w)?;
            StatsCache {
                stats,
                fingerprint: fingerprint.clone(),
            }
            .save(&stats_path)?;
            stats
        }
    };

    let mut optimizer = Adam::new(
        model.params(),
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, "dropout", &[]));
    let mut store = ImageStore::new(manifest, (h, w));

    let meta = |epoch: usize, val_acc: f64| CheckpointMeta {
        epoch,
        val_accuracy: val_acc,
        seed: config.seed,
        classes: manifest.vocabulary.names().to_vec(),
        preproc_mean: stats.mean,
        preproc_std: stats.std,
        preproc_fingerprint: fingerprint.clone(),
    };

    let best_path = config.checkpoint_dir.join("best.ckpt");
    let last_path = config.checkpoint_dir.join("last.ckpt");
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64)> = None;

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        model.set_mode(Mode::Train);

        let mut order = train_indices.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, "shuffle", &[epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() == 1 {
                log.notes.push(format!(
                    "epoch {}: skipped final train batch of 1 (batch statistics undefined)",
                    epoch
                ));
                continue;
            }
            let mut images = Vec::with_capacity(chunk.len());
            let mut kept = Vec::with_capacity(chunk.len());
            for &i in chunk {
                match store.resized(i) {
                    Ok(resized) => {
                        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                            config.seed,
                            "augment",
                            &[epoch as u64, i as u64],
                        ));
                        let mut img = augment(&resized, &config.augmentation, &mut aug_rng);
                        standardize(&mut img, &stats);
                        images.push(img);
                        kept.push(i);
                    }
                    Err(e) => log.notes.push(format!("epoch {}: skipped sample: {}", epoch, e)),
                }
            }
            if kept.len() < 2 {
                continue;
            }

            let batch = batch_tensor::<T>(&images, h, w);
            let targets = manifest.label_matrix::<T>(&kept);

            let mut tape = Tape::new();
            let bindings = model.bind_params(&mut tape, true);
            let input = tape.leaf(batch, false);
            let probs = model.forward_on_tape(&mut tape, &bindings, input, &mut dropout_rng, None)?;
            let loss = match config.head_mode {
                HeadMode::Single => tape.categorical_cross_entropy(&targets, probs)?,
                HeadMode::Multi => tape.binary_cross_entropy(&targets, probs)?,
            };
            let loss_value = tape.value(loss).data()[0].to_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }

            for (row, &i) in kept.iter().enumerate() {
                let row_probs = &tape.value(probs).data()[row * k..(row + 1) * k];
                if exact_match_correct(row_probs, &manifest.samples[i].labels) {
                    correct += 1;
                }
            }

            let mut grads = tape.backward(loss)?;
            model.accumulate_grads(&mut grads, &bindings)?;
            if let Some(clip) = config.grad_clip {
                clip_global_norm(model, clip);
            }
            optimizer.step(model.params_mut())?;
            model.params_mut().zero_grads();

            loss_sum += loss_value * kept.len() as f64;
            seen += kept.len();
        }
        if seen == 0 {
            return Err(TrainError::Config(format!(
                "epoch {} processed no batches (all skipped)",
                epoch
            )));
        }

        model.set_mode(Mode::Eval);
        let (val_loss, val_accuracy) =
            validation_pass(model, manifest, &val_indices, &stats, config)?;

        let train_accuracy = correct as f64 / seen as f64;
        let stats_row = EpochStats {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy,
            val_loss,
            val_accuracy,
            wall_seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log.epochs.push(stats_row);

        let improved = best.map(|(_, acc)| val_accuracy > acc).unwrap_or(true);
        if improved {
            best = Some((epoch, val_accuracy));
            log.best_epoch = epoch;
            save_checkpoint(model, &meta(epoch, val_accuracy), &best_path)?;
        }

        if let Some(target) = config.target_train_accuracy {
            if train_accuracy >= target {
                log.notes
                    .push(format!("epoch {}: reached target train accuracy {}", epoch, target));
                break;
            }
        }
    }

    let (best_epoch, best_val) = best.expect("at least one epoch ran");
    let last_epoch = log.epochs.last().map(|e| e.epoch).unwrap_or(0);
    let last_val = log.epochs.last().map(|e| e.val_accuracy).unwrap_or(0.0);
    save_checkpoint(model, &meta(last_epoch, last_val), &last_path)?;
    log.best_epoch = best_epoch;

    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log,
        best_val_accuracy: best_val,
        stats,
    })
}

fn validation_pass<T: Scalar>(
    model: &mut DiRecNetV2<T>,
    manifest: &DatasetManifest,
    val_indices: &[usize],
    stats: &ChannelStats,
    config: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    let probs = predict_indices(model, manifest, val_indices, stats, config.batch_size)?;
    let k = model.config().num_classes;
    let targets = manifest.label_matrix::<T>(val_indices);
    // Loss on the full validation set, computed off-tape via a throwaway tape.
    let mut tape = Tape::new();
    let p = tape.leaf(probs.clone(), false);
    let loss = match config.head_mode {
        HeadMode::Single => tape.categorical_cross_entropy(&targets, p)?,
        HeadMode::Multi => tape.binary_cross_entropy(&targets, p)?,
    };
    let val_loss = tape.value(loss).data()[0].to_f64();
    let correct = val_indices
        .iter()
        .enumerate()
        .filter(|(row, &i)| {
            exact_match_correct(&probs.data()[row * k..(row + 1) * k], &manifest.samples[i].labels)
        })
        .count();
    Ok((val_loss, correct as f64 / val_indices.len() as f64))
}

fn clip_global_norm<T: Scalar>(model: &mut DiRecNetV2<T>, clip: f64) {
    let mut sq = 0.0f64;
    for p in model.params().iter() {
        if let Some(g) = &p.grad {
            for &v in g {
                sq += v.to_f64() * v.to_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let scale = T::from_f64(clip / norm);
        for p in model.params_mut().iter_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
}

/// Deterministic per-sample RNG stream for outside callers that re-create
/// the augmentation draws (exposed for tests).
pub fn augment_rng(seed: u64, epoch: usize, sample_index: usize) -> impl Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, "augment", &[epoch as u64, sample_index as u64]))
}
