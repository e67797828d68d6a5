//! Few-shot subsets and cohort transfer splits.

use sha2::{Digest, Sha256};

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSample {
    pub k: usize,
    /// Manifest entry indices, ascending.
    pub indices: Vec<usize>,
    /// One message per class that had fewer than `k` train slides.
    pub warnings: Vec<String>,
}

/// Draws `min(k, class size)` train slides per class. Each class is shuffled
/// by its own `(seed, class)` stream and the sample is a prefix of that
/// order, so samples for growing `k` are nested.
pub fn few_shot_sample(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FewShotSample> {
    if k == 0 {
        return Err(Error::Config("few-shot K must be at least 1".into()));
    }
    let mut indices = Vec::new();
    let mut warnings = Vec::new();
    for (c, name) in manifest.classes.iter().enumerate() {
        let mut pool: Vec<usize> = manifest
            .indices_in(Split::Train)
            .into_iter()
            .filter(|&i| manifest.entries[i].label == c)
            .collect();
        if pool.is_empty() {
            return Err(Error::Config(format!("class `{name}` has no train slides")));
        }
        // Shuffle from a canonical order so manifest line order does not matter.
        pool.sort_by(|&a, &b| manifest.entries[a].slide_id.cmp(&manifest.entries[b].slide_id));
        rng::shuffle(&mut pool, &mut rng::stream(seed, "few-shot", &[c as u64]));
        if pool.len() < k {
            warnings.push(format!("class `{name}` has {} train slides; K = {k} clamped", pool.len()));
        }
        indices.extend_from_slice(&pool[..k.min(pool.len())]);
    }
    indices.sort_unstable();
    Ok(FewShotSample { k, indices, warnings })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSet {
    /// `<cohort>:test` for the training cohort, `<cohort>:all` otherwise.
    pub name: String,
    pub cohort: String,
    pub internal: bool,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferSplits {
    pub train: Vec<usize>,
    pub tests: Vec<TestSet>,
}

/// Train on the train split of `train_cohort`; test on its test split
/// (when listed in `test_cohorts`) and on every slide of other cohorts.
pub fn split_by_cohort(manifest: &DatasetManifest, train_cohort: &str, test_cohorts: &[String]) -> Result<TransferSplits> {
    let known = manifest.cohorts();
    for c in std::iter::once(train_cohort).chain(test_cohorts.iter().map(String::as_str)) {
        if !known.iter().any(|k| k == c) {
            return Err(Error::Config(format!("unknown cohort `{c}` (manifest has {})", known.join(", "))));
        }
    }
    fn in_cohort<'a>(m: &'a DatasetManifest, c: &'a str) -> impl Iterator<Item = usize> + 'a {
        (0..m.entries.len()).filter(move |&i| m.entries[i].cohort == c)
    }
    let train: Vec<usize> = in_cohort(manifest, train_cohort)
        .filter(|&i| manifest.entries[i].split == Split::Train)
        .collect();
    if train.is_empty() {
        return Err(Error::Config(format!("cohort `{train_cohort}` has no train slides")));
    }
    let mut tests = Vec::new();
    for c in test_cohorts {
        let internal = c == train_cohort;
        let indices: Vec<usize> = in_cohort(manifest, c)
            .filter(|&i| !internal || manifest.entries[i].split == Split::Test)
            .collect();
        tests.push(TestSet {
            name: format!("{c}:{}", if internal { "test" } else { "all" }),
            cohort: c.clone(),
            internal,
            indices,
        });
    }
    Ok(TransferSplits { train, tests })
}

/// sha256 over the sorted slide ids of a subset.
pub fn split_hash(manifest: &DatasetManifest, indices: &[usize]) -> String {
    let mut ids: Vec<&str> = indices.iter().map(|&i| manifest.entries[i].slide_id.as_str()).collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::Path;

    fn manifest(per_class: &[usize], cohorts: &[&str]) -> DatasetManifest {
        let mut text = String::from("slidetune-manifest\t1\ntask\tt\ndim\t1\nclasses");
        for c in 0..per_class.len() {
            text.push_str(&format!("\tc{c}"));
        }
        text.push('\n');
        for co in cohorts {
            for (c, &n) in per_class.iter().enumerate() {
                for j in 0..n + 2 {
                    let split = if j < n { "train" } else { "test" };
                    text.push_str(&format!("entry\t{co}-{c}-{j}\tc{c}\t{co}\t{split}\tx.emb\n"));
                }
            }
        }
        DatasetManifest::parse(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn one_shot_takes_one_per_class() {
        let m = manifest(&[5, 6, 7], &["A"]);
        let s = few_shot_sample(&m, 1, 0).unwrap();
        let mut labels: Vec<usize> = s.indices.iter().map(|&i| m.entries[i].label).collect();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2]);
        assert!(s.warnings.is_empty());
        assert!(s.indices.iter().all(|&i| m.entries[i].split == Split::Train));
    }

    #[test]
    fn large_k_clamps_to_full_train_split() {
        let m = manifest(&[2, 3], &["A"]);
        let s = few_shot_sample(&m, 10, 4).unwrap();
        assert_eq!(s.indices, m.indices_in(Split::Train));
        assert_eq!(s.warnings.len(), 2);
        assert!(matches!(few_shot_sample(&m, 0, 0), Err(Error::Config(_))));
        assert!(matches!(few_shot_sample(&manifest(&[2, 0], &["A"]), 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn transfer_splits() {
        let m = manifest(&[3, 3], &["A", "B"]);
        let s = split_by_cohort(&m, "A", &["A".into(), "B".into()]).unwrap();
        assert_eq!(s.train.len(), 6);
        assert_eq!(s.tests[0].name, "A:test");
        assert_eq!(s.tests[0].indices.len(), 4);
        assert_eq!(s.tests[1].name, "B:all");
        assert_eq!(s.tests[1].indices.len(), 10);
        for t in &s.tests {
            assert!(t.indices.iter().all(|i| !s.train.contains(i)));
        }
        assert!(matches!(split_by_cohort(&m, "C", &[]), Err(Error::Config(_))));
        let single = manifest(&[2, 2], &["A"]);
        let s = split_by_cohort(&single, "A", &["A".into()]).unwrap();
        assert_eq!(s.train, single.indices_in(Split::Train));
        assert_eq!(s.tests[0].indices, single.indices_in(Split::Test));
    }

    #[test]
    fn split_hash_ignores_order() {
        let m = manifest(&[2, 2], &["A"]);
        assert_eq!(split_hash(&m, &[0, 1, 2]), split_hash(&m, &[2, 0, 1]));
        assert_ne!(split_hash(&m, &[0, 1]), split_hash(&m, &[0, 2]));
    }

    proptest! {
        #[test]
        fn samples_are_nested(seed in 0u64..1000, k1 in 1usize..8, extra in 0usize..8) {
            let m = manifest(&[6, 9, 4], &["A"]);
            let small = few_shot_sample(&m, k1, seed).unwrap();
            let large = few_shot_sample(&m, k1 + extra, seed).unwrap();
            prop_assert!(small.indices.iter().all(|i| large.indices.contains(i)));
        }
    }
}
