//! Acceptance criteria. Runs as a plain binary so each criterion prints one
//! PASS/FAIL line; exits non-zero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use slidetune::data::{
    decode_embedding, encode_embedding, generate_corpus, generate_synthetic_corpus, nearest_centroid_predict, Dtype, Split,
    SynthConfig, MANIFEST_FILE,
};
use slidetune::gradcore::{softmax_cross_entropy, ActivationKind, Matrix};
use slidetune::harness::{run_plan, ExperimentPlan, Method, Protocol, RunRecord, DEFAULT_SEEDS, DEFAULT_SHOTS, DEFAULT_TRANSFER_SEEDS};
use slidetune::heads::{gradcheck_spec, HeadKind};
use slidetune::metrics::{balanced_accuracy, bootstrap_ci, roc_auc, summarize, weighted_f1, Metric, Predictions};
use slidetune::rng;
use slidetune::{build_model, train, AggregatorKind, Error, ModelSpec, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn labels_of(data: &[slidetune::LabeledBag]) -> Vec<usize> {
    data.iter().map(|d| d.label).collect()
}

fn test_bal_acc(model: &slidetune::SlideModel, data: &[slidetune::LabeledBag], k: usize) -> f64 {
    let preds: Vec<usize> = data.iter().map(|d| model.predict(&d.bag).unwrap().0).collect();
    balanced_accuracy(&labels_of(data), &preds, k).unwrap().value
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (d, k) = (12, 4);
    let mut specs = vec![("linear".to_string(), ModelSpec::linear_probe(d, k))];
    for act in ActivationKind::ALL {
        specs.push((
            format!("simlp+{act}"),
            ModelSpec {
                head: HeadKind::Mlp {
                    hidden: 32,
                    activation: act,
                },
                ..ModelSpec::simlp(d, k)
            },
        ));
    }
    specs.push((
        "abmil".to_string(),
        ModelSpec {
            aggregator: AggregatorKind::GatedAttention { hidden: 16 },
            ..ModelSpec::abmil(d, k)
        },
    ));
    let mut worst = 0.0f64;
    let mut all = true;
    let mut parts = Vec::new();
    for (name, spec) in &specs {
        let mut spec_worst = 0.0f64;
        for seed in 0..5 {
            let report = gradcheck_spec(*spec, seed, 6, 1e-5, 1e-4).unwrap();
            spec_worst = spec_worst.max(report.max_rel_error());
            all &= report.passed();
        }
        worst = worst.max(spec_worst);
        parts.push(format!("{name} {spec_worst:.1e}"));
    }
    let elapsed = start.elapsed();
    let pass = all && worst <= 1e-4 && elapsed < Duration::from_secs(60);
    outcome(pass, format!("max rel error {worst:.2e} [{}] in {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn loss_sanity() -> Outcome {
    let mut worst = 0.0f64;
    for k in [2usize, 3, 30] {
        for target in [0, k - 1] {
            let (loss, _) = softmax_cross_entropy(&vec![0.7; k], target).unwrap();
            worst = worst.max((loss - (k as f64).ln()).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max |loss - ln K| = {worst:.1e} over K in {{2, 3, 30}}"))
}

fn separable_corpus() -> SynthConfig {
    SynthConfig {
        num_classes: 10,
        feature_dim: 64,
        train_per_class: 50,
        test_per_class: 20,
        informative_fraction: 1.0,
        class_separation: 3.0,
        noise_scale: 1.0,
        ..SynthConfig::default()
    }
}

fn separable_learning() -> Outcome {
    let start = Instant::now();
    let corpus = generate_corpus(&separable_corpus()).unwrap();
    let train_set = corpus.labeled(None, Split::Train).unwrap();
    let test_set = corpus.labeled(None, Split::Test).unwrap();
    let oracle_preds = nearest_centroid_predict(&train_set, &test_set, 10).unwrap();
    let oracle = balanced_accuracy(&labels_of(&test_set), &oracle_preds, 10).unwrap().value;
    let mut accs = Vec::new();
    for spec in [ModelSpec::simlp(64, 10), ModelSpec::linear_probe(64, 10)] {
        let mut model = build_model(spec, 0).unwrap();
        train(&mut model, &train_set, &TrainConfig::default()).unwrap();
        accs.push(test_bal_acc(&model, &test_set, 10));
    }
    let elapsed = start.elapsed();
    let pass = oracle >= 0.99 && accs[0] >= 0.95 && accs[1] >= 0.90 && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "nearest-centroid {oracle:.4}, simlp {:.4}, linear {:.4} in {:.1}s",
            accs[0],
            accs[1],
            elapsed.as_secs_f64()
        ),
    )
}

fn suite(manifest: &Path, out: &Path, methods: Vec<Method>, protocol: Protocol, seeds: &[u64]) -> Vec<RunRecord> {
    let mut plan = ExperimentPlan::new(manifest, methods, protocol, out);
    plan.seeds = seeds.to_vec();
    plan.bootstrap_resamples = 100;
    plan.skip_checkpoints = true;
    let outcome = run_plan(&plan).unwrap();
    for r in &outcome.records {
        assert!(r.succeeded(), "{} seed {} failed: {:?}", r.method, r.seed, r.error);
    }
    outcome.records
}

fn seed_stats(records: &[RunRecord], method: &str, cell: &str, test_set: &str) -> (f64, f64) {
    let runs: Vec<&RunRecord> = records.iter().filter(|r| r.method == method && r.cell == cell).collect();
    let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    let values: Vec<f64> = runs
        .iter()
        .map(|r| r.report_for(test_set).unwrap().point(Metric::BalancedAccuracy).unwrap())
        .collect();
    let s = summarize("bal_acc", &seeds, &values).unwrap();
    (s.mean, s.std)
}

fn standard_methods(d: usize, k: usize) -> Vec<Method> {
    ["simlp", "linear", "abmil"].iter().map(|n| Method::named(n, d, k).unwrap()).collect()
}

fn fewshot_monotonicity(dir: &Path) -> Outcome {
    let corpus_dir = dir.join("fewshot-corpus");
    generate_synthetic_corpus(&separable_corpus(), &corpus_dir).unwrap();
    let records = suite(
        &corpus_dir.join(MANIFEST_FILE),
        &dir.join("fewshot-out"),
        standard_methods(64, 10),
        Protocol::Fewshot {
            shots: DEFAULT_SHOTS.to_vec(),
        },
        &DEFAULT_SEEDS,
    );
    let mut pass = true;
    let mut parts = Vec::new();
    for method in ["simlp", "linear", "abmil"] {
        let stats: Vec<(usize, f64, f64)> = DEFAULT_SHOTS
            .iter()
            .map(|&k| {
                let (m, s) = seed_stats(&records, method, &format!("k={k}"), "test");
                (k, m, s)
            })
            .collect();
        let gain = stats.last().unwrap().1 - stats[0].1;
        pass &= gain >= 0.05;
        if method == "simlp" {
            pass &= stats.iter().all(|s| s.2 <= 0.05);
        }
        let curve: Vec<String> = stats.iter().map(|(k, m, s)| format!("K{k} {m:.3}+-{s:.3}")).collect();
        parts.push(format!("{method}: {} (gain {gain:.3})", curve.join(" ")));
    }
    outcome(pass, parts.join("; "))
}

fn ablation_direction(dir: &Path) -> Outcome {
    let corpus_dir = dir.join("ablation-corpus");
    generate_synthetic_corpus(&separable_corpus(), &corpus_dir).unwrap();
    let grid = slidetune::harness::ablation_grid(64, 10);
    let records = suite(&corpus_dir.join(MANIFEST_FILE), &dir.join("ablation-out"), grid, Protocol::Ablation, &DEFAULT_SEEDS);
    let mut pass = true;
    let mut parts = Vec::new();
    for act in ActivationKind::ALL {
        let mean_cell = format!("mean+{act}");
        let max_cell = format!("max+{act}");
        let (m, _) = seed_stats(&records, &mean_cell, &mean_cell, "test");
        let (x, _) = seed_stats(&records, &max_cell, &max_cell, "test");
        pass &= m >= x;
        parts.push(format!("{act}: mean {m:.4} vs max {x:.4}"));
    }
    outcome(pass, parts.join(", "))
}

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
                wins += match scores[p][c].total_cmp(&scores[q][c]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        aucs.push(wins / (pos.len() * neg.len()) as f64);
    }
    aucs.iter().sum::<f64>() / aucs.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut r = rng::stream(2024, "acceptance-auc", &[]);
    let mut worst_auc = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(2..=50);
        let k = r.random_range(2..=4);
        let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores so ties are common.
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| r.random_range(0..6) as f64 / 5.0).collect()).collect();
        let got = roc_auc(&labels, &scores, k).unwrap().value;
        worst_auc = worst_auc.max((got - brute_auc(&labels, &scores, k)).abs());
    }
    let worked = [
        balanced_accuracy(&[0, 0, 1], &[0, 1, 1], 2).unwrap().value == 0.75,
        balanced_accuracy(&[0, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap().value == 0.5,
        (weighted_f1(&[0, 0, 1, 1], &[0, 0, 0, 1], 2).unwrap().value - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15,
        weighted_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap().value == 1.0,
    ];
    let mut covered = 0;
    let trials = 200;
    for t in 0..trials {
        let mut r = rng::stream(t, "acceptance-coverage", &[]);
        let predicted: Vec<usize> = (0..200).map(|_| usize::from(!r.random_bool(0.8))).collect();
        let preds = Predictions {
            labels: vec![0; 200],
            scores: predicted.iter().map(|&p| vec![1.0 - p as f64, p as f64]).collect(),
            predicted,
            num_classes: 2,
        };
        let (lo, hi) = bootstrap_ci(&preds, Metric::Accuracy, 1000, t).unwrap();
        if lo <= 0.8 && 0.8 <= hi {
            covered += 1;
        }
    }
    let coverage = covered as f64 / trials as f64;
    let pass = worst_auc <= 1e-12 && worked.iter().all(|&w| w) && (0.90..=0.99).contains(&coverage);
    outcome(
        pass,
        format!(
            "auc max deviation {worst_auc:.1e} on 100 instances, {}/{} worked examples, CI coverage {coverage:.3}",
            worked.iter().filter(|&&w| w).count(),
            worked.len()
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let config = SynthConfig {
        num_classes: 3,
        feature_dim: 8,
        train_per_class: 6,
        test_per_class: 6,
        patches_min: 3,
        patches_max: 7,
        ..SynthConfig::default()
    };
    let corpus_dir = dir.join("determinism-corpus");
    generate_synthetic_corpus(&config, &corpus_dir).unwrap();
    let manifest = corpus_dir.join(MANIFEST_FILE);
    let methods: Vec<Method> = standard_methods(8, 3)
        .into_iter()
        .map(|m| m.with_hidden(Some(32), Some(16)))
        .collect();
    let run = |out: &str, jobs: usize| {
        let mut plan = ExperimentPlan::new(&manifest, methods.clone(), Protocol::Benchmark, dir.join(out));
        plan.seeds = vec![0, 1];
        plan.bootstrap_resamples = 200;
        plan.jobs = jobs;
        plan.train_config.epochs = 5;
        run_plan(&plan).unwrap().records
    };
    let a = run("det-a", 1);
    let b = run("det-b", 1);
    let c = run("det-c", 3);
    let same_reports = |x: &[RunRecord], y: &[RunRecord]| {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.reports == q.reports && p.plan_hash == q.plan_hash)
    };
    let same_ckpts = a.iter().zip(&b).all(|(p, q)| {
        std::fs::read(p.checkpoint.as_ref().unwrap()).unwrap() == std::fs::read(q.checkpoint.as_ref().unwrap()).unwrap()
    });
    let jobs_ckpts = a.iter().zip(&c).all(|(p, q)| {
        std::fs::read(p.checkpoint.as_ref().unwrap()).unwrap() == std::fs::read(q.checkpoint.as_ref().unwrap()).unwrap()
    });
    let pass = same_reports(&a, &b) && same_ckpts && same_reports(&a, &c) && jobs_ckpts;
    outcome(
        pass,
        format!(
            "{} runs: rerun reports equal {}, checkpoints bitwise equal {}, jobs=3 reports equal {}, jobs=3 checkpoints equal {}",
            a.len(),
            same_reports(&a, &b),
            same_ckpts,
            same_reports(&a, &c),
            jobs_ckpts
        ),
    )
}

fn transfer_corpus(shift: f64) -> SynthConfig {
    // Null control: few train slides keep seed-to-seed spread visible, and
    // large test sets keep test-sampling noise below it.
    let (train, test, sep) = if shift == 0.0 { (10, 2500, 0.5) } else { (50, 200, 3.0) };
    SynthConfig {
        num_classes: 4,
        feature_dim: 16,
        train_per_class: train,
        test_per_class: test,
        patches_min: 4,
        patches_max: 8,
        class_separation: sep,
        noise_scale: 1.0,
        cohort_shift: shift,
        cohorts: vec!["A".into(), "B".into()],
        seed: 3,
        dtype: Dtype::F32,
        ..SynthConfig::default()
    }
}

fn transfer_control(dir: &Path) -> Outcome {
    let protocol = Protocol::Transfer {
        train_cohort: "A".into(),
        test_cohorts: vec!["A".into(), "B".into()],
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for shift in [0.0, 2.0] {
        let corpus_dir = dir.join(format!("transfer-corpus-{shift}"));
        generate_synthetic_corpus(&transfer_corpus(shift), &corpus_dir).unwrap();
        let out = dir.join(format!("transfer-out-{shift}"));
        let records = suite(&corpus_dir.join(MANIFEST_FILE), &out, standard_methods(16, 4), protocol.clone(), &DEFAULT_TRANSFER_SEEDS);
        let table = std::fs::read_to_string(out.join("transfer-transfer-stability.txt")).unwrap();
        pass &= table.lines().count() == 2 + 3 * 2 && table.contains("bal_acc_std");
        for method in ["simlp", "linear", "abmil"] {
            let runs = records.iter().filter(|r| r.method == method).count();
            pass &= runs == 10;
            let (im, is) = seed_stats(&records, method, "transfer", "A:test");
            let (em, es) = seed_stats(&records, method, "transfer", "B:all");
            if shift == 0.0 {
                let bound = 2.0 * (is * is + es * es).sqrt();
                pass &= (im - em).abs() < bound;
                parts.push(format!("null {method}: |{im:.4}-{em:.4}| < {bound:.4}"));
            } else {
                pass &= im - em >= 0.02;
                parts.push(format!("shift {method}: drop {:.4} (std {es:.4})", im - em));
            }
        }
    }
    outcome(pass, parts.join(", "))
}

fn format_robustness() -> Outcome {
    let mut lossless = 0;
    for i in 0..1000u64 {
        let mut r = rng::stream(i, "acceptance-format", &[]);
        let (n, d) = (r.random_range(1..40), r.random_range(1..40));
        let data: Vec<f64> = (0..n * d)
            .map(|_| f64::from_bits(r.random::<u64>() & !(0x7ffu64 << 52)) * r.random_range(-1e6..1e6))
            .collect();
        let m = Matrix::new(n, d, data).unwrap();
        let back = decode_embedding(&encode_embedding(&m, Dtype::F64).unwrap()).unwrap();
        if back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()) && back.shape() == m.shape() {
            lossless += 1;
        }
    }
    let bytes = encode_embedding(&Matrix::new(3, 4, vec![1.5; 12]).unwrap(), Dtype::F64).unwrap();
    let mut positioned = 0;
    let mut cases = 0;
    for cut in 0..bytes.len() {
        cases += 1;
        if matches!(decode_embedding(&bytes[..cut]), Err(Error::Format { offset, .. }) if offset as usize <= cut) {
            positioned += 1;
        }
    }
    for (pos, byte) in [(0usize, b'Z'), (7, 0), (8, 2), (9, 9)] {
        cases += 1;
        let mut bad = bytes.clone();
        bad[pos] = byte;
        if matches!(decode_embedding(&bad), Err(Error::Format { offset, .. }) if offset as usize == pos) {
            positioned += 1;
        }
    }
    let pass = lossless == 1000 && positioned == cases;
    outcome(pass, format!("{lossless}/1000 lossless roundtrips, {positioned}/{cases} corrupt files rejected with offsets"))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 gradient correctness", Box::new(gradient_correctness)),
        ("2 loss sanity", Box::new(loss_sanity)),
        ("3 separable-corpus learning", Box::new(separable_learning)),
        ("4 few-shot monotonicity", Box::new(|| fewshot_monotonicity(dir.path()))),
        ("5 ablation direction", Box::new(|| ablation_direction(dir.path()))),
        ("6 metric oracles", Box::new(metric_oracles)),
        ("7 determinism", Box::new(|| determinism(dir.path()))),
        ("8 transfer null control and shift", Box::new(|| transfer_control(dir.path()))),
        ("9 format robustness", Box::new(format_robustness)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check));
        let o = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} ({}) [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
