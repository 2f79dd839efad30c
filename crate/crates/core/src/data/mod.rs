//! Manifest-driven dataset ingestion: label vocabulary, samples with one-hot
//! or multi-hot labels, deterministic stratified splits, preprocessing and
//! augmentation.
//!
//! Manifest format: UTF-8 text, one `relative_path<TAB>label[;label...]` row
//! per sample. Lines starting with `#` are comments; a `#classes<TAB>a;b;c`
//! directive before the first sample overrides the default vocabulary.

mod augment;
mod image_ops;
mod split;
mod stats;

pub use augment::{augment, AugmentationConfig};
pub use image_ops::{decode_image, preprocess, resize_bilinear, standardize, to_tensor, RawImage};
pub use split::assign_splits;
pub use stats::{compute_channel_stats, split_fingerprint, ChannelStats, StatsCache};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::DataError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered class names; index order binds classes to model output units and
/// is recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl LabelVocabulary {
    /// The default single-label vocabulary.
    pub fn default_single() -> Self {
        LabelVocabulary {
            names: vec![
                "Earthquakes".into(),
                "Floods".into(),
                "Wildfire/Fire".into(),
                "Normal".into(),
            ],
        }
    }

    pub fn new(names: Vec<String>) -> Result<Self, DataError> {
        if names.is_empty() {
            return Err(DataError::Config("vocabulary must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(DataError::Config(format!("duplicate class name '{}'", n)));
            }
        }
        Ok(LabelVocabulary { names })
    }

    /// Indices of the three disaster classes used by the multi-label
    /// evaluation protocol (everything except `Normal`).
    pub fn disaster_subset(&self) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.as_str() != "Normal")
            .map(|(i, _)| i)
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One dataset row: an image path plus its class indices (sorted, unique).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub labels: Vec<usize>,
}

impl Sample {
    pub fn is_single_label(&self) -> bool {
        self.labels.len() == 1
    }

    /// One-hot / multi-hot encoding over `k` classes.
    pub fn label_vector<T: Scalar>(&self, k: usize) -> Vec<T> {
        let mut v = vec![T::zero(); k];
        for &c in &self.labels {
            v[c] = T::one();
        }
        v
    }
}

/// Dataset split identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A loaded manifest: root directory, samples, optional split assignment.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub vocabulary: LabelVocabulary,
    pub samples: Vec<Sample>,
    assignments: Option<Vec<Split>>,
}

impl DatasetManifest {
    /// Parse and validate a manifest file. Image paths are resolved relative
    /// to the manifest's directory and must exist; labels must belong to the
    /// vocabulary; duplicate paths are rejected. Every error carries the
    /// offending line number.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        let display = path.display().to_string();
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));

        let mut vocabulary = LabelVocabulary::default_single();
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim_end();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix("#classes\t") {
                if !samples.is_empty() {
                    return Err(DataError::Manifest {
                        path: display.clone(),
                        line: line_no,
                        message: "#classes directive must precede all samples".into(),
                    });
                }
                vocabulary = LabelVocabulary::new(rest.split(';').map(str::to_string).collect())
                    .map_err(|e| DataError::Manifest {
                        path: display.clone(),
                        line: line_no,
                        message: e.to_string(),
                    })?;
                continue;
            }
            if trimmed.starts_with('#') {
                continue;
            }
            let (rel, label_text) = trimmed.split_once('\t').ok_or_else(|| DataError::Manifest {
                path: display.clone(),
                line: line_no,
                message: "expected `path<TAB>label[;label...]`".into(),
            })?;
            if !seen.insert(rel.to_string()) {
                return Err(DataError::DuplicatePath {
                    sample: rel.into(),
                    path: display.clone(),
                    line: line_no,
                });
            }
            let mut labels = Vec::new();
            for label in label_text.split(';') {
                let index = vocabulary
                    .index_of(label)
                    .ok_or_else(|| DataError::UnknownLabel {
                        label: label.into(),
                        path: display.clone(),
                        line: line_no,
                    })?;
                if !labels.contains(&index) {
                    labels.push(index);
                }
            }
            if labels.is_empty() {
                return Err(DataError::Manifest {
                    path: display.clone(),
                    line: line_no,
                    message: "sample carries no labels".into(),
                });
            }
            labels.sort_unstable();
            let image_path = root.join(rel);
            if !image_path.is_file() {
                return Err(DataError::MissingImage(image_path.display().to_string()));
            }
            samples.push(Sample {
                path: PathBuf::from(rel),
                labels,
            });
        }

        Ok(DatasetManifest {
            root,
            vocabulary,
            samples,
            assignments: None,
        })
    }

    /// Build directly from parts (used by tests and synthetic fixtures).
    pub fn from_parts(root: PathBuf, vocabulary: LabelVocabulary, samples: Vec<Sample>) -> Self {
        DatasetManifest {
            root,
            vocabulary,
            samples,
            assignments: None,
        }
    }

    pub fn assignments(&self) -> Option<&[Split]> {
        self.assignments.as_deref()
    }

    pub(crate) fn set_assignments(&mut self, assignments: Vec<Split>) {
        debug_assert_eq!(assignments.len(), self.samples.len());
        self.assignments = Some(assignments);
    }

    /// Indices of the samples assigned to `split`, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        match &self.assignments {
            Some(a) => a
                .iter()
                .enumerate()
                .filter(|(_, s)| **s == split)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn absolute_path(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.path)
    }

    /// Multi-hot label matrix `[N, K]` over the given sample indices.
    pub fn label_matrix<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let k = self.vocabulary.len();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend(self.samples[i].label_vector::<T>(k));
        }
        Tensor::new(&[indices.len(), k], data).expect("sized matrix")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.tsv");
        fs::write(&path, body).unwrap();
        path
    }

    fn touch_images(dir: &Path, names: &[&str]) {
        for n in names {
            // A valid 1x1 PNG so later decode stages work on these fixtures.
            let img = image::RgbImage::from_pixel(1, 1, image::Rgb([10, 20, 30]));
            img.save(dir.join(n)).unwrap();
        }
    }

    #[test]
    fn minimal_manifest_one_per_class() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["a.png", "b.png", "c.png", "d.png"]);
        let path = write_manifest(
            dir.path(),
            "a.png\tEarthquakes\nb.png\tFloods\nc.png\tWildfire/Fire\nd.png\tNormal\n",
        );
        let manifest = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest.samples.len(), 4);
        for (i, s) in manifest.samples.iter().enumerate() {
            assert_eq!(s.labels, vec![i]);
            let v = s.label_vector::<f32>(4);
            assert_eq!(v.iter().sum::<f32>(), 1.0);
            assert_eq!(v[i], 1.0);
        }
    }

    #[test]
    fn multi_label_row_gets_two_ones() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["img7.png"]);
        let path = write_manifest(dir.path(), "img7.png\tFloods;Wildfire/Fire\n");
        let manifest = DatasetManifest::load(&path).unwrap();
        let v = manifest.samples[0].label_vector::<f64>(4);
        assert_eq!(v, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn unknown_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["a.png"]);
        let path = write_manifest(dir.path(), "# comment\na.png\tVolcano\n");
        match DatasetManifest::load(&path).unwrap_err() {
            DataError::UnknownLabel { label, line, .. } => {
                assert_eq!(label, "Volcano");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn duplicate_path_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["a.png"]);
        let path = write_manifest(dir.path(), "a.png\tFloods\na.png\tNormal\n");
        assert!(matches!(
            DatasetManifest::load(&path).unwrap_err(),
            DataError::DuplicatePath { line: 2, .. }
        ));
    }

    #[test]
    fn missing_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "ghost.png\tFloods\n");
        assert!(matches!(
            DatasetManifest::load(&path).unwrap_err(),
            DataError::MissingImage(_)
        ));
    }

    #[test]
    fn classes_directive_overrides_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["a.png"]);
        let path = write_manifest(dir.path(), "#classes\tCat;Dog\na.png\tDog\n");
        let manifest = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest.vocabulary.names(), &["Cat".to_string(), "Dog".to_string()]);
        assert_eq!(manifest.samples[0].labels, vec![1]);
    }

    #[test]
    fn disaster_subset_excludes_normal() {
        let vocab = LabelVocabulary::default_single();
        assert_eq!(vocab.disaster_subset(), vec![0, 1, 2]);
    }
}
