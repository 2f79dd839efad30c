//! Deterministic stratified splitting.
//!
//! Samples are grouped into strata by their full label set. Within each
//! stratum they are ordered by a stable hash of (seed, path), so adding new
//! files perturbs existing assignments as little as possible, and split
//! counts are apportioned by largest remainder so they match the requested
//! fractions exactly up to rounding.

use crate::error::DataError;
use crate::util::fnv1a64;

use super::{DatasetManifest, Split};

/// Per-class counts rounded by the largest-remainder rule; ties go to the
/// earlier split (train, then val, then test).
pub(crate) fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - quotas[i].floor();
        let rj = quotas[j] - quotas[j].floor();
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for k in 0..(n - assigned) {
        counts[order[k % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Assign every sample to train/val/test, stratified per label set,
/// deterministic under `seed`. Returns warnings for strata whose nonempty
/// class received an empty split.
pub fn assign_splits(
    manifest: &mut DatasetManifest,
    fractions: [f64; 3],
    seed: u64,
) -> Result<Vec<String>, DataError> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(DataError::Fractions(format!(
            "fractions {:?} must be non-negative and sum to 1",
            fractions
        )));
    }

    // Group sample indices by label set.
    let mut strata: Vec<(Vec<usize>, Vec<usize>)> = Vec::new(); // (label set, indices)
    for (i, sample) in manifest.samples.iter().enumerate() {
        match strata.iter_mut().find(|(labels, _)| labels == &sample.labels) {
            Some((_, idxs)) => idxs.push(i),
            None => strata.push((sample.labels.clone(), vec![i])),
        }
    }

    let mut assignments = vec![Split::Train; manifest.samples.len()];
    let mut warnings = Vec::new();
    for (labels, mut idxs) in strata {
        idxs.sort_by_key(|&i| {
            let path = manifest.samples[i].path.to_string_lossy().into_owned();
            let mut bytes = seed.to_le_bytes().to_vec();
            bytes.extend_from_slice(path.as_bytes());
            (fnv1a64(&bytes), path)
        });
        let counts = apportion(idxs.len(), fractions);
        for (slot, &count) in counts.iter().enumerate() {
            if count == 0 && !idxs.is_empty() && fractions[slot] > 0.0 {
                warnings.push(format!(
                    "stratum {:?} ({} samples): empty {} split",
                    labels,
                    idxs.len(),
                    [Split::Train, Split::Val, Split::Test][slot].as_str()
                ));
            }
        }
        let (n_train, n_val, _) = (counts[0], counts[1], counts[2]);
        for (pos, &i) in idxs.iter().enumerate() {
            assignments[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    manifest.set_assignments(assignments);
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelVocabulary, Sample};
    use std::path::PathBuf;

    fn synthetic_manifest(class_counts: &[usize]) -> DatasetManifest {
        let vocab = LabelVocabulary::default_single();
        let mut samples = Vec::new();
        for (c, &count) in class_counts.iter().enumerate() {
            for i in 0..count {
                samples.push(Sample {
                    path: PathBuf::from(format!("c{}/img{}.png", c, i)),
                    labels: vec![c],
                });
            }
        }
        DatasetManifest::from_parts(PathBuf::from("."), vocab, samples)
    }

    #[test]
    fn exact_division_gives_exact_counts() {
        assert_eq!(apportion(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        let mut manifest = synthetic_manifest(&[10]);
        assign_splits(&mut manifest, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(manifest.split_indices(Split::Train).len(), 8);
        assert_eq!(manifest.split_indices(Split::Val).len(), 1);
        assert_eq!(manifest.split_indices(Split::Test).len(), 1);
    }

    #[test]
    fn same_seed_reproduces_assignment() {
        let mut a = synthetic_manifest(&[37, 22, 15, 9]);
        let mut b = synthetic_manifest(&[37, 22, 15, 9]);
        assign_splits(&mut a, [0.8, 0.1, 0.1], 42).unwrap();
        assign_splits(&mut b, [0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(a.assignments(), b.assignments());

        let mut c = synthetic_manifest(&[37, 22, 15, 9]);
        assign_splits(&mut c, [0.8, 0.1, 0.1], 43).unwrap();
        assert_ne!(a.assignments(), c.assignments());
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_stratified() {
        let counts = [53usize, 101, 17, 64];
        let mut manifest = synthetic_manifest(&counts);
        assign_splits(&mut manifest, [0.8, 0.1, 0.1], 3).unwrap();
        let train = manifest.split_indices(Split::Train);
        let val = manifest.split_indices(Split::Val);
        let test = manifest.split_indices(Split::Test);
        assert_eq!(train.len() + val.len() + test.len(), counts.iter().sum::<usize>());

        // Per class, counts stay within rounding of the exact fractions.
        for (c, &count) in counts.iter().enumerate() {
            let in_split = |idxs: &[usize]| {
                idxs.iter()
                    .filter(|&&i| manifest.samples[i].labels == vec![c])
                    .count()
            };
            let quota = count as f64 * 0.8;
            let got = in_split(&train) as f64;
            assert!(
                (got - quota).abs() <= 1.0,
                "class {}: train {} vs quota {}",
                c,
                got,
                quota
            );
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        let mut manifest = synthetic_manifest(&[10]);
        assert!(matches!(
            assign_splits(&mut manifest, [0.5, 0.1, 0.1], 1).unwrap_err(),
            DataError::Fractions(_)
        ));
    }

    #[test]
    fn empty_split_for_tiny_class_warns_but_succeeds() {
        let mut manifest = synthetic_manifest(&[3]);
        let warnings = assign_splits(&mut manifest, [0.8, 0.1, 0.1], 1).unwrap();
        assert!(!warnings.is_empty());
    }
}
