//! Synthetic bag corpus standing in for foundation-model patch features.
//!
//! Class `c` has a unit-norm center `μ_c`. A slide of class `c` with `n`
//! patches has `⌈ρn⌉` informative patches drawn from `N(σ_sep·μ_c, σ²I)` and
//! the rest from the shared background `N(0, σ²I)`. Every patch of cohort
//! `k` is shifted by `cohort_shift · z_k` with `z_k ~ N(0, I)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embedding::{write_embedding, Dtype};
use super::manifest::{DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
use crate::aggregate::{mean_pool, SlideBag};
use crate::error::{Error, Result};
use crate::gradcore::Matrix;
use crate::optim::LabeledBag;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub task: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub informative_fraction: f64,
    pub cohort_shift: f64,
    pub cohorts: Vec<String>,
    pub seed: u64,
    pub dtype: Dtype,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            task: "synthetic".into(),
            num_classes: 10,
            feature_dim: 64,
            train_per_class: 50,
            test_per_class: 20,
            patches_min: 8,
            patches_max: 32,
            class_separation: 3.0,
            noise_scale: 1.0,
            informative_fraction: 1.0,
            cohort_shift: 0.0,
            cohorts: vec!["main".into()],
            seed: 0,
            dtype: Dtype::F64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction <= 1.0) {
            return fail(format!("informative_fraction must lie in (0, 1], got {}", self.informative_fraction));
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return fail(format!("patch range [{}, {}] must satisfy 1 <= min <= max", self.patches_min, self.patches_max));
        }
        if self.train_per_class + self.test_per_class == 0 {
            return fail("corpus would have no slides".into());
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("noise_scale", self.noise_scale),
            ("cohort_shift", self.cohort_shift),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.cohorts.is_empty() {
            return fail("need at least one cohort".into());
        }
        for (i, c) in self.cohorts.iter().enumerate() {
            if c.is_empty() || c.chars().any(|ch| ch.is_whitespace() || ch == '/' || ch == '\\') {
                return fail(format!("bad cohort name `{c}`"));
            }
            if self.cohorts[..i].contains(c) {
                return fail(format!("cohort `{c}` listed twice"));
            }
        }
        if self.task.is_empty() || self.task.chars().any(char::is_whitespace) {
            return fail(format!("bad task name `{}`", self.task));
        }
        Ok(())
    }

    pub fn class_name(c: usize) -> String {
        format!("class{c:02}")
    }

    pub fn slide_id(cohort: &str, class: usize, j: usize) -> String {
        format!("{cohort}-c{class:02}-{j:04}")
    }

    /// Number of informative patches in a bag of `n`.
    pub fn informative_count(&self, n: usize) -> usize {
        // Guard against products like 0.7 * 10 = 7.000000000000001.
        ((self.informative_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
    }
}

fn gaussian(r: &mut StreamRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.sample(StandardNormal)).collect()
}

/// Unit-norm class centers.
pub fn class_centers(config: &SynthConfig) -> Vec<Vec<f64>> {
    (0..config.num_classes)
        .map(|c| {
            let mut r = rng::stream(config.seed, "synth-center", &[c as u64]);
            loop {
                let v = gaussian(&mut r, config.feature_dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.iter().map(|x| x / norm).collect();
                }
            }
        })
        .collect()
}

/// Per-cohort offsets `cohort_shift · z_k`.
pub fn cohort_offsets(config: &SynthConfig) -> Vec<Vec<f64>> {
    (0..config.cohorts.len())
        .map(|k| {
            let mut r = rng::stream(config.seed, "synth-cohort", &[k as u64]);
            gaussian(&mut r, config.feature_dim)
                .into_iter()
                .map(|z| config.cohort_shift * z)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub slide_id: String,
    pub label: usize,
    pub cohort: String,
    pub split: Split,
    pub features: Matrix,
}

impl SyntheticSlide {
    pub fn to_labeled(&self) -> Result<LabeledBag> {
        Ok(LabeledBag {
            bag: SlideBag::new(self.slide_id.clone(), self.features.clone())?,
            label: self.label,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub centers: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
    pub slides: Vec<SyntheticSlide>,
}

impl SyntheticCorpus {
    pub fn labeled(&self, cohort: Option<&str>, split: Split) -> Result<Vec<LabeledBag>> {
        self.slides
            .iter()
            .filter(|s| s.split == split && cohort.is_none_or(|c| s.cohort == c))
            .map(SyntheticSlide::to_labeled)
            .collect()
    }
}

/// Generates every slide in memory. Each slide draws from its own stream,
/// so slides are generated in parallel without changing the result.
pub fn generate_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let centers = class_centers(config);
    let offsets = cohort_offsets(config);
    let per_class = config.train_per_class + config.test_per_class;
    let mut coords = Vec::new();
    for k in 0..config.cohorts.len() {
        for c in 0..config.num_classes {
            for j in 0..per_class {
                coords.push((k, c, j));
            }
        }
    }
    let d = config.feature_dim;
    let slides = coords
        .par_iter()
        .map(|&(k, c, j)| {
            let mut r = rng::stream(config.seed, "synth-slide", &[k as u64, c as u64, j as u64]);
            let n = r.random_range(config.patches_min..=config.patches_max);
            let informative = config.informative_count(n);
            let mut data = Vec::with_capacity(n * d);
            for i in 0..n {
                for f in 0..d {
                    let z: f64 = r.sample(StandardNormal);
                    let signal = if i < informative { config.class_separation * centers[c][f] } else { 0.0 };
                    data.push(signal + config.noise_scale * z + offsets[k][f]);
                }
            }
            Ok(SyntheticSlide {
                slide_id: SynthConfig::slide_id(&config.cohorts[k], c, j),
                label: c,
                cohort: config.cohorts[k].clone(),
                split: if j < config.train_per_class { Split::Train } else { Split::Test },
                features: Matrix::new(n, d, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus {
        config: config.clone(),
        centers,
        offsets,
        slides,
    })
}

/// Writes `manifest.tsv` and `embeddings/<slide_id>.emb` under `out`.
pub fn write_corpus(corpus: &SyntheticCorpus, out: &Path) -> Result<DatasetManifest> {
    let config = &corpus.config;
    let emb_dir = out.join("embeddings");
    fs::create_dir_all(&emb_dir).map_err(|e| Error::io(&emb_dir, e))?;
    corpus
        .slides
        .par_iter()
        .map(|s| write_embedding(&emb_dir.join(format!("{}.emb", s.slide_id)), &s.features, config.dtype))
        .collect::<Result<()>>()?;
    let manifest = DatasetManifest {
        task: config.task.clone(),
        classes: (0..config.num_classes).map(SynthConfig::class_name).collect(),
        dim: config.feature_dim,
        entries: corpus
            .slides
            .iter()
            .map(|s| ManifestEntry {
                slide_id: s.slide_id.clone(),
                label: s.label,
                cohort: s.cohort.clone(),
                split: s.split,
                path: PathBuf::from("embeddings").join(format!("{}.emb", s.slide_id)),
            })
            .collect(),
        root: out.to_path_buf(),
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Validates, generates and writes in one call.
pub fn generate_synthetic_corpus(config: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    write_corpus(&generate_corpus(config)?, out)
}

/// Nearest-centroid classifier on bag means: centroids are per-class means
/// of the training bag means. Returns one predicted class per test bag.
pub fn nearest_centroid_predict(train: &[LabeledBag], test: &[LabeledBag], num_classes: usize) -> Result<Vec<usize>> {
    let dim = train.first().ok_or_else(|| Error::Config("empty training set".into()))?.bag.dim();
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for lb in train {
        let m = mean_pool(&lb.bag)?;
        counts[lb.label] += 1;
        for (s, v) in sums[lb.label].iter_mut().zip(m.as_slice()) {
            *s += v;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    test.iter()
        .map(|lb| {
            let m = mean_pool(&lb.bag)?;
            let mut best = (f64::INFINITY, 0);
            for (c, centroid) in centroids.iter().enumerate() {
                if let Some(centroid) = centroid {
                    let dist: f64 = centroid.iter().zip(m.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
                    if dist < best.0 {
                        best = (dist, c);
                    }
                }
            }
            Ok(best.1)
        })
        .collect()
}
