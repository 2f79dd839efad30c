//! Per-channel dataset statistics: streaming single-pass mean/std over all
//! pixels of a split, plus a text cache file keyed by a split fingerprint.

use std::path::Path;

use crate::error::DataError;
use crate::util::fnv1a64;

use super::image_ops::{decode_image, resize_bilinear};
use super::{DatasetManifest, Split};

/// Standard deviations below this floor are clamped, so constant channels do
/// not produce division by zero downstream.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and standard deviation over a training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Streaming accumulator: population statistics from running sums.
#[derive(Debug, Default, Clone)]
pub struct StatsAccumulator {
    count: u64,
    sum: [f64; 3],
    sum_sq: [f64; 3],
}

impl StatsAccumulator {
    pub fn add_image(&mut self, data: &[f32], hw: usize) {
        debug_assert_eq!(data.len(), 3 * hw);
        for c in 0..3 {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for &v in &data[c * hw..(c + 1) * hw] {
                let v = v as f64;
                s += v;
                s2 += v * v;
            }
            self.sum[c] += s;
            self.sum_sq[c] += s2;
        }
        self.count += hw as u64;
    }

    pub fn finish(&self) -> Option<ChannelStats> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = self.sum[c] / n;
            let var = (self.sum_sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt().max(STD_FLOOR);
        }
        Some(ChannelStats { mean, std })
    }
}

/// Single-pass per-channel statistics over every pixel of every image in the
/// split, computed on the resized images the model will actually consume.
pub fn compute_channel_stats(
    manifest: &DatasetManifest,
    split: Split,
    target_h: usize,
    target_w: usize,
) -> Result<ChannelStats, DataError> {
    let indices = manifest.split_indices(split);
    if indices.is_empty() {
        return Err(DataError::EmptySplit(split.as_str().into()));
    }
    let mut acc = StatsAccumulator::default();
    for &i in &indices {
        let img = decode_image(&manifest.absolute_path(&manifest.samples[i]))?;
        let resized = resize_bilinear(&img, target_h, target_w);
        acc.add_image(&resized.data, target_h * target_w);
    }
    acc.finish().ok_or_else(|| DataError::EmptySplit(split.as_str().into()))
}

/// Stable identifier of a split's contents: hash over the sorted sample
/// paths assigned to it.
pub fn split_fingerprint(manifest: &DatasetManifest, split: Split) -> String {
    let mut paths: Vec<String> = manifest
        .split_indices(split)
        .iter()
        .map(|&i| manifest.samples[i].path.to_string_lossy().into_owned())
        .collect();
    paths.sort();
    let joined = paths.join("\n");
    format!("{:016x}", fnv1a64(joined.as_bytes()))
}

/// Text cache: three means, three standard deviations, and the fingerprint
/// of the source split.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsCache {
    pub stats: ChannelStats,
    pub fingerprint: String,
}

impl StatsCache {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let body = format!(
            "mean\t{}\t{}\t{}\nstd\t{}\t{}\t{}\nfingerprint\t{}\n",
            self.stats.mean[0],
            self.stats.mean[1],
            self.stats.mean[2],
            self.stats.std[0],
            self.stats.std[1],
            self.stats.std[2],
            self.fingerprint
        );
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        let mut fingerprint = String::new();
        for line in text.lines() {
            let mut parts = line.split('\t');
            match parts.next() {
                Some("mean") | Some("std") => {
                    let target: &mut [f64; 3] = if line.starts_with("mean") { &mut mean } else { &mut std };
                    for slot in target.iter_mut() {
                        *slot = parts
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| DataError::Config(format!("bad stats cache line '{}'", line)))?;
                    }
                }
                Some("fingerprint") => {
                    fingerprint = parts.next().unwrap_or("").to_string();
                }
                _ => {}
            }
        }
        Ok(StatsCache {
            stats: ChannelStats { mean, std },
            fingerprint,
        })
    }
}
