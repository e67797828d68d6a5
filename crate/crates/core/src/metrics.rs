//! Classification metrics, percentile-bootstrap intervals and seed summaries.
//!
//! Classes that never occur in the labels are left out of balanced accuracy
//! and of the macro AUC average, and reported in `absent_classes`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;
pub const MIN_BOOTSTRAP_RESAMPLES: usize = 100;
pub const CI_METHOD: &str = "percentile-bootstrap-over-slides";
pub const AUC_AVERAGING: &str = "macro-one-vs-rest";

/// A metric value together with the classes that had no support.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub absent_classes: Vec<usize>,
}

fn check_labels(op: &'static str, labels: &[usize], preds: &[usize], k: usize) -> Result<()> {
    if labels.len() != preds.len() {
        return Err(Error::shape(op, format!("{} predictions", labels.len()), format!("{} predictions", preds.len())));
    }
    if labels.is_empty() {
        return Err(Error::shape(op, "at least one sample", "0 samples"));
    }
    for &v in labels.iter().chain(preds) {
        if v >= k {
            return Err(Error::Index { index: v, len: k });
        }
    }
    Ok(())
}

/// `k × k` counts, rows are true classes, columns predicted.
pub fn confusion_matrix(labels: &[usize], preds: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_labels("confusion_matrix", labels, preds, k)?;
    let mut m = vec![vec![0usize; k]; k];
    for (&y, &p) in labels.iter().zip(preds) {
        m[y][p] += 1;
    }
    Ok(m)
}

/// Recall per class; `None` for classes without true samples.
pub fn per_class_recall(labels: &[usize], preds: &[usize], k: usize) -> Result<Vec<Option<f64>>> {
    let cm = confusion_matrix(labels, preds, k)?;
    Ok(cm
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let support: usize = row.iter().sum();
            (support > 0).then(|| row[c] as f64 / support as f64)
        })
        .collect())
}

pub fn accuracy(labels: &[usize], preds: &[usize], k: usize) -> Result<f64> {
    check_labels("accuracy", labels, preds, k)?;
    let correct = labels.iter().zip(preds).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean of per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(labels: &[usize], preds: &[usize], k: usize) -> Result<MetricValue> {
    let recalls = per_class_recall(labels, preds, k)?;
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    Ok(MetricValue {
        value: present.iter().sum::<f64>() / present.len() as f64,
        absent_classes: absent(&recalls),
    })
}

fn absent(recalls: &[Option<f64>]) -> Vec<usize> {
    recalls.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(c, _)| c).collect()
}

/// Support-weighted mean of per-class F1. A class with no true and no
/// predicted samples has F1 0 and weight 0.
pub fn weighted_f1(labels: &[usize], preds: &[usize], k: usize) -> Result<MetricValue> {
    let cm = confusion_matrix(labels, preds, k)?;
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut absent_classes = Vec::new();
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let support: usize = cm[c].iter().sum();
        let predicted: usize = cm.iter().map(|row| row[c]).sum();
        if support == 0 {
            absent_classes.push(c);
            continue;
        }
        let denom = (support + predicted) as f64;
        let f1 = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        total += f1 * support as f64 / n;
    }
    Ok(MetricValue {
        value: total,
        absent_classes,
    })
}

/// Mann-Whitney AUC of `scores` for `positive[i]` vs the rest, ties 0.5.
/// Returns `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * idx[i..j].iter().filter(|&&s| positive[s]).count() as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Macro one-vs-rest ROC AUC over classes present in `labels`. `scores` has
/// one row of `k` class scores per sample.
pub fn roc_auc(labels: &[usize], scores: &[Vec<f64>], k: usize) -> Result<MetricValue> {
    if labels.len() != scores.len() {
        return Err(Error::shape("roc_auc", format!("{} score rows", labels.len()), format!("{} rows", scores.len())));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != k) {
        return Err(Error::shape("roc_auc", format!("score rows of length {k}"), format!("a row of length {}", row.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Index { index: bad, len: k });
    }
    let mut aucs = Vec::new();
    let mut absent_classes = Vec::new();
    for c in 0..k {
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        if !positive.contains(&true) {
            absent_classes.push(c);
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        match binary_auc(&col, &positive) {
            Some(a) => aucs.push(a),
            None => {
                return Err(Error::UndefinedMetric(format!(
                    "ROC AUC needs at least two classes in the labels; only class {c} is present"
                )))
            }
        }
    }
    if aucs.is_empty() {
        return Err(Error::UndefinedMetric("ROC AUC on an empty sample".into()));
    }
    Ok(MetricValue {
        value: aucs.iter().sum::<f64>() / aucs.len() as f64,
        absent_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    BalancedAccuracy,
    RocAuc,
    WeightedF1,
    Accuracy,
}

impl Metric {
    pub const REPORTED: [Metric; 3] = [Metric::BalancedAccuracy, Metric::RocAuc, Metric::WeightedF1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::BalancedAccuracy => "bal_acc",
            Metric::RocAuc => "roc_auc",
            Metric::WeightedF1 => "weighted_f1",
            Metric::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bal_acc" => Ok(Metric::BalancedAccuracy),
            "roc_auc" => Ok(Metric::RocAuc),
            "weighted_f1" => Ok(Metric::WeightedF1),
            "accuracy" => Ok(Metric::Accuracy),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Labels, hard predictions and class-probability rows for one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub num_classes: usize,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn metric(&self, metric: Metric) -> Result<f64> {
        let k = self.num_classes;
        Ok(match metric {
            Metric::BalancedAccuracy => balanced_accuracy(&self.labels, &self.predicted, k)?.value,
            Metric::RocAuc => roc_auc(&self.labels, &self.scores, k)?.value,
            Metric::WeightedF1 => weighted_f1(&self.labels, &self.predicted, k)?.value,
            Metric::Accuracy => accuracy(&self.labels, &self.predicted, k)?,
        })
    }

    /// Metric on the sample selected by `idx` (with repeats). `None` when
    /// the metric is undefined on that sample.
    fn metric_on(&self, metric: Metric, idx: &[usize]) -> Result<Option<f64>> {
        let k = self.num_classes;
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let preds: Vec<usize> = idx.iter().map(|&i| self.predicted[i]).collect();
        let value = match metric {
            Metric::BalancedAccuracy => balanced_accuracy(&labels, &preds, k)?.value,
            Metric::WeightedF1 => weighted_f1(&labels, &preds, k)?.value,
            Metric::Accuracy => accuracy(&labels, &preds, k)?,
            Metric::RocAuc => {
                let scores: Vec<Vec<f64>> = idx.iter().map(|&i| self.scores[i].clone()).collect();
                match roc_auc(&labels, &scores, k) {
                    Ok(v) => v.value,
                    Err(Error::UndefinedMetric(_)) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
        };
        Ok(Some(value))
    }
}

/// Linear-interpolation percentile of sorted values, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95% percentile-bootstrap interval of `metric`, resampling slides with
/// replacement. Attempt `a` draws from its own `(seed, a)` stream, so the
/// result is the same however the attempts are scheduled. Resamples on which
/// the metric is undefined are redrawn, up to `10 × resamples` attempts.
pub fn bootstrap_ci(preds: &Predictions, metric: Metric, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if resamples < MIN_BOOTSTRAP_RESAMPLES {
        return Err(Error::Config(format!("need at least {MIN_BOOTSTRAP_RESAMPLES} bootstrap resamples, got {resamples}")));
    }
    let n = preds.len();
    if n == 0 {
        return Err(Error::DegenerateData("bootstrap on an empty sample".into()));
    }
    let max_attempts = 10 * resamples;
    let mut values = Vec::with_capacity(resamples);
    let mut attempted = 0;
    while values.len() < resamples && attempted < max_attempts {
        let batch = (resamples - values.len()).min(max_attempts - attempted);
        let results = (attempted..attempted + batch)
            .into_par_iter()
            .map(|a| {
                let mut r = rng::stream(seed, "bootstrap", &[a as u64]);
                let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
                preds.metric_on(metric, &idx)
            })
            .collect::<Result<Vec<_>>>()?;
        attempted += batch;
        values.extend(results.into_iter().flatten());
    }
    let undefined = attempted - values.len();
    if values.len() < resamples || undefined as f64 > 0.9 * attempted as f64 {
        return Err(Error::DegenerateData(format!(
            "{metric} undefined on {undefined} of {attempted} bootstrap resamples"
        )));
    }
    values.sort_by(f64::total_cmp);
    Ok((percentile(&values, 0.025), percentile(&values, 0.975)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub metric: Metric,
    pub point: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Metrics for one trained model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub method: String,
    pub test_set: String,
    pub seed: u64,
    pub n_test: usize,
    pub metrics: Vec<MetricEstimate>,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub absent_classes: Vec<usize>,
    pub ci_method: String,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub auc_averaging: String,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        task: &str,
        method: &str,
        test_set: &str,
        seed: u64,
        preds: &Predictions,
        resamples: usize,
        bootstrap_seed: u64,
    ) -> Result<Self> {
        let k = preds.num_classes;
        let mut metrics = Vec::new();
        for metric in Metric::REPORTED {
            let point = preds.metric(metric)?;
            let (ci_lower, ci_upper) = bootstrap_ci(preds, metric, resamples, bootstrap_seed)?;
            metrics.push(MetricEstimate {
                metric,
                point,
                ci_lower,
                ci_upper,
            });
        }
        let recalls = per_class_recall(&preds.labels, &preds.predicted, k)?;
        Ok(Self {
            task: task.to_string(),
            method: method.to_string(),
            test_set: test_set.to_string(),
            seed,
            n_test: preds.len(),
            metrics,
            absent_classes: absent(&recalls),
            per_class_recall: recalls,
            confusion: confusion_matrix(&preds.labels, &preds.predicted, k)?,
            ci_method: CI_METHOD.to_string(),
            bootstrap_resamples: resamples,
            bootstrap_seed,
            auc_averaging: AUC_AVERAGING.to_string(),
        })
    }

    pub fn get(&self, metric: Metric) -> Option<&MetricEstimate> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn point(&self, metric: Metric) -> Option<f64> {
        self.get(metric).map(|m| m.point)
    }

    /// Line-oriented `key value` rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} {v}").expect("write to string");
        line("report", "v1".into());
        line("task", self.task.clone());
        line("method", self.method.clone());
        line("test_set", self.test_set.clone());
        line("seed", self.seed.to_string());
        line("n_test", self.n_test.to_string());
        line("ci_method", self.ci_method.clone());
        line("bootstrap_resamples", self.bootstrap_resamples.to_string());
        line("bootstrap_seed", self.bootstrap_seed.to_string());
        line("auc_averaging", self.auc_averaging.clone());
        for m in &self.metrics {
            line(m.metric.name(), format!("{:.6} ({:.6}-{:.6})", m.point, m.ci_lower, m.ci_upper));
        }
        let recall: Vec<String> = self
            .per_class_recall
            .iter()
            .map(|r| r.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}")))
            .collect();
        line("per_class_recall", recall.join(" "));
        let absent: Vec<String> = self.absent_classes.iter().map(usize::to_string).collect();
        line("absent_classes", if absent.is_empty() { "-".into() } else { absent.join(" ") });
        for (c, row) in self.confusion.iter().enumerate() {
            let row: Vec<String> = row.iter().map(usize::to_string).collect();
            line(&format!("confusion.{c}"), row.join(" "));
        }
        s
    }

    pub const CSV_HEADER: &'static str = "task,method,test_set,seed,n_test,metric,point,ci_lower,ci_upper,ci_method,bootstrap_resamples,auc_averaging";

    pub fn to_csv_rows(&self) -> String {
        let mut s = String::new();
        for m in &self.metrics {
            writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{},{}",
                self.task,
                self.method,
                self.test_set,
                self.seed,
                self.n_test,
                m.metric,
                m.point,
                m.ci_lower,
                m.ci_upper,
                self.ci_method,
                self.bootstrap_resamples,
                self.auc_averaging
            )
            .expect("write to string");
        }
        s
    }
}

/// A metric across seeds: mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SeedSummary {
    pub fn count(&self) -> usize {
        self.values.len()
    }
}

/// Mean and population std of `values` (one per seed).
pub fn summarize(metric: &str, seeds: &[u64], values: &[f64]) -> Result<SeedSummary> {
    if values.len() < 2 {
        return Err(Error::Config(format!("seed summary needs at least 2 seeds, got {}", values.len())));
    }
    let n = values.len() as f64;
    // Centered on the first value so constant inputs give exactly zero spread.
    let base = values[0];
    let mean = base + values.iter().map(|v| v - base).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(SeedSummary {
        metric: metric.to_string(),
        seeds: seeds.to_vec(),
        values: values.to_vec(),
        mean,
        std: var.sqrt(),
    })
}

/// Seed summary of `metric` over reports of one task, method and test set.
pub fn aggregate_seeds(reports: &[EvalReport], metric: Metric) -> Result<SeedSummary> {
    if let Some(first) = reports.first() {
        if let Some(other) = reports
            .iter()
            .find(|r| r.task != first.task || r.method != first.method || r.test_set != first.test_set)
        {
            return Err(Error::Config(format!(
                "cannot aggregate {}/{}/{} with {}/{}/{}",
                first.task, first.method, first.test_set, other.task, other.method, other.test_set
            )));
        }
    }
    let values = reports
        .iter()
        .map(|r| r.point(metric).ok_or_else(|| Error::Config(format!("report is missing {metric}"))))
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    summarize(metric.name(), &seeds, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auc(labels: &[usize], scores: &[Vec<f64>], k: usize) -> f64 {
        let mut aucs = Vec::new();
        for c in 0..k {
            let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != c).collect();
            if pos.is_empty() {
                continue;
            }
            let mut wins = 0.0;
            for &p in &pos {
                for &q in &neg {
                    let (a, b) = (scores[p][c], scores[q][c]);
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
            aucs.push(wins / (pos.len() * neg.len()) as f64);
        }
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap().value, 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1], &[0, 1, 1], 2).unwrap().value, 0.75);
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap().value, 0.5);
        let v = balanced_accuracy(&[0, 0, 2], &[0, 1, 2], 4).unwrap();
        assert_eq!(v.value, 0.75);
        assert_eq!(v.absent_classes, vec![1, 3]);
        assert!(matches!(balanced_accuracy(&[0, 1], &[0], 2), Err(Error::Shape { .. })));
    }

    #[test]
    fn weighted_f1_examples() {
        assert_eq!(weighted_f1(&[0, 1, 1], &[0, 1, 1], 2).unwrap().value, 1.0);
        let v = weighted_f1(&[0, 0, 1, 1], &[0, 0, 0, 1], 2).unwrap().value;
        assert!((v - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((v - 0.733_333_333_333_333_3).abs() < 1e-12);
        // a third class with no support and no predictions changes nothing
        assert_eq!(weighted_f1(&[0, 0, 1, 1], &[0, 0, 0, 1], 3).unwrap().value, v);
    }

    #[test]
    fn auc_examples() {
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.1, 0.9]];
        assert_eq!(roc_auc(&[0, 0, 1, 1], &scores, 2).unwrap().value, 1.0);
        let flat = vec![vec![0.5, 0.5]; 4];
        assert_eq!(roc_auc(&[0, 1, 0, 1], &flat, 2).unwrap().value, 0.5);
        let err = roc_auc(&[1, 1], &flat[..2], 2).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(ref m) if m.contains("class 1")), "{err}");
    }

    #[test]
    fn auc_matches_pair_enumeration_on_a_3_class_instance() {
        let mut r = rng::stream(5, "auc-test", &[]);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let scores: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| (r.random_range(0..5) as f64) / 4.0).collect()).collect();
        let got = roc_auc(&labels, &scores, 3).unwrap().value;
        assert!((got - brute_auc(&labels, &scores, 3)).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_edge_cases() {
        let perfect = Predictions {
            labels: vec![0, 1, 0, 1, 1],
            predicted: vec![0, 1, 0, 1, 1],
            scores: vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3], vec![0.1, 0.9], vec![0.4, 0.6]],
            num_classes: 2,
        };
        for m in Metric::REPORTED {
            assert_eq!(bootstrap_ci(&perfect, m, 200, 1).unwrap(), (1.0, 1.0), "{m}");
        }
        assert!(matches!(bootstrap_ci(&perfect, Metric::Accuracy, 50, 1), Err(Error::Config(_))));
        let a = bootstrap_ci(&perfect, Metric::RocAuc, 300, 7).unwrap();
        assert_eq!(a, bootstrap_ci(&perfect, Metric::RocAuc, 300, 7).unwrap());
    }

    #[test]
    fn bootstrap_rejects_degenerate_auc() {
        // One positive among 60: most resamples lose it and AUC is undefined.
        let mut labels = vec![0; 60];
        labels[0] = 1;
        let p = Predictions {
            predicted: labels.clone(),
            scores: labels.iter().map(|&y| vec![1.0 - y as f64, y as f64]).collect(),
            labels,
            num_classes: 2,
        };
        // P(class 1 survives a resample) ≈ 0.63, so this one is fine.
        assert!(bootstrap_ci(&p, Metric::RocAuc, 100, 0).is_ok());
        let single = Predictions {
            labels: vec![0; 10],
            predicted: vec![0; 10],
            scores: vec![vec![0.6, 0.4]; 10],
            num_classes: 2,
        };
        assert!(matches!(bootstrap_ci(&single, Metric::RocAuc, 100, 0), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn seed_summaries() {
        let s = summarize("x", &[0, 1], &[0.8, 0.9]).unwrap();
        assert!((s.mean - 0.85).abs() < 1e-15);
        assert!((s.std - 0.05).abs() < 1e-12);
        assert_eq!(summarize("x", &[0, 1, 2], &[0.7; 3]).unwrap().std, 0.0);
        assert!(matches!(summarize("x", &[0], &[0.7]), Err(Error::Config(_))));
    }

    fn report(task: &str, seed: u64, value: f64) -> EvalReport {
        EvalReport {
            task: task.into(),
            method: "m".into(),
            test_set: "test".into(),
            seed,
            n_test: 1,
            metrics: vec![MetricEstimate {
                metric: Metric::BalancedAccuracy,
                point: value,
                ci_lower: value,
                ci_upper: value,
            }],
            per_class_recall: vec![],
            confusion: vec![],
            absent_classes: vec![],
            ci_method: CI_METHOD.into(),
            bootstrap_resamples: 100,
            bootstrap_seed: 0,
            auc_averaging: AUC_AVERAGING.into(),
        }
    }

    #[test]
    fn aggregate_seeds_checks_task_and_count() {
        let s = aggregate_seeds(&[report("t", 0, 0.8), report("t", 1, 0.9)], Metric::BalancedAccuracy).unwrap();
        assert_eq!(s.seeds, vec![0, 1]);
        assert!((s.mean - 0.85).abs() < 1e-15);
        assert!(matches!(
            aggregate_seeds(&[report("t", 0, 0.8), report("u", 1, 0.9)], Metric::BalancedAccuracy),
            Err(Error::Config(_))
        ));
        assert!(matches!(aggregate_seeds(&[report("t", 0, 0.8)], Metric::BalancedAccuracy), Err(Error::Config(_))));
    }

    #[test]
    fn report_text_carries_method_fields() {
        let p = Predictions {
            labels: vec![0, 1, 0, 1],
            predicted: vec![0, 1, 1, 1],
            scores: vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.4, 0.6], vec![0.1, 0.9]],
            num_classes: 2,
        };
        let r = EvalReport::compute("task", "simlp", "test", 3, &p, 100, 0).unwrap();
        let text = r.to_text();
        assert!(text.contains("ci_method percentile-bootstrap-over-slides"));
        assert!(text.contains("auc_averaging macro-one-vs-rest"));
        assert!(text.contains("bootstrap_resamples 100"));
        assert!(text.contains("bal_acc 0.750000 ("));
        assert_eq!(r.to_csv_rows().lines().count(), 3);
        for m in &r.metrics {
            assert!(m.ci_lower <= m.ci_upper);
            assert!((0.0..=1.0).contains(&m.ci_lower) && (0.0..=1.0).contains(&m.ci_upper));
        }
    }

    proptest! {
        #[test]
        fn auc_equals_pair_enumeration(seed in 0u64..10_000, n in 2usize..50, k in 2usize..5) {
            let mut r = rng::stream(seed, "auc-prop", &[]);
            let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| (r.random_range(0..8) as f64) / 7.0).collect()).collect();
            let got = roc_auc(&labels, &scores, k).unwrap().value;
            prop_assert!((got - brute_auc(&labels, &scores, k)).abs() <= 1e-12);
        }

        #[test]
        fn balanced_accuracy_is_relabeling_invariant(seed in 0u64..10_000, n in 1usize..40) {
            let k = 4;
            let mut r = rng::stream(seed, "relabel", &[]);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let mut perm: Vec<usize> = (0..k).collect();
            rng::shuffle(&mut perm, &mut r);
            let l2: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
            let p2: Vec<usize> = preds.iter().map(|&y| perm[y]).collect();
            let a = balanced_accuracy(&labels, &preds, k).unwrap().value;
            let b = balanced_accuracy(&l2, &p2, k).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn symmetric_binary_confusion_f1_is_mean_of_class_f1(m in 1usize..20, e in 0usize..10) {
            // each class has m+e samples, e of which are misclassified
            let mut labels = vec![0; m + e];
            labels.extend(vec![1; m + e]);
            let mut preds = vec![0; m];
            preds.extend(vec![1; e]);
            preds.extend(vec![1; m]);
            preds.extend(vec![0; e]);
            let cm = confusion_matrix(&labels, &preds, 2).unwrap();
            let f1 = |c: usize| {
                let tp = cm[c][c] as f64;
                let denom = (cm[c].iter().sum::<usize>() + cm.iter().map(|r| r[c]).sum::<usize>()) as f64;
                2.0 * tp / denom
            };
            let w = weighted_f1(&labels, &preds, 2).unwrap().value;
            prop_assert!((w - (f1(0) + f1(1)) / 2.0).abs() <= 1e-12);
        }
    }
}
