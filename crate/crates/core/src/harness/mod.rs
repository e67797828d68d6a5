//! Multi-seed experiment runner: benchmark, few-shot, transfer and ablation
//! suites over one manifest, with an append-only JSON-lines record log.

mod tables;

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::AggregatorKind;
use crate::data::{few_shot_sample, split_by_cohort, split_hash, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::gradcore::ActivationKind;
use crate::heads::{build_model, HeadKind, ModelSpec, DEFAULT_MLP_HIDDEN};
use crate::metrics::{EvalReport, Predictions, DEFAULT_BOOTSTRAP_RESAMPLES};
use crate::optim::{train, LabeledBag, TrainConfig};

pub use tables::{ablation_table, benchmark_table, fewshot_table, per_seed_table, render_tables, transfer_table, Table};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const DEFAULT_TRANSFER_SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
pub const DEFAULT_SHOTS: [usize; 5] = [1, 5, 10, 20, 50];
pub const RECORDS_FILE: &str = "records.jsonl";

/// Method names accepted on the command line.
pub const METHOD_NAMES: [&str; 9] = [
    "simlp",
    "linear",
    "abmil",
    "mean+relu",
    "mean+gelu",
    "mean+swiglu",
    "max+relu",
    "max+gelu",
    "max+swiglu",
];

/// Resolves a method name to its model spec. `simlp` is `mean+relu`.
pub fn method_spec(name: &str, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
    let spec = match name {
        "simlp" => ModelSpec::simlp(input_dim, num_classes),
        "linear" => ModelSpec::linear_probe(input_dim, num_classes),
        "abmil" => ModelSpec::abmil(input_dim, num_classes),
        other => {
            let (pool, act) = other.split_once('+').ok_or_else(|| unknown_method(other))?;
            let aggregator = match pool {
                "mean" => AggregatorKind::Mean,
                "max" => AggregatorKind::Max,
                _ => return Err(unknown_method(other)),
            };
            let activation: ActivationKind = act.parse().map_err(|_| unknown_method(other))?;
            ModelSpec {
                aggregator,
                head: HeadKind::Mlp {
                    hidden: DEFAULT_MLP_HIDDEN,
                    activation,
                },
                input_dim,
                num_classes,
            }
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn unknown_method(name: &str) -> Error {
    Error::Config(format!("unknown method `{name}` (expected one of {})", METHOD_NAMES.join(", ")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub spec: ModelSpec,
}

impl Method {
    pub fn named(name: &str, input_dim: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            spec: method_spec(name, input_dim, num_classes)?,
        })
    }

    /// Overrides hidden widths (MLP and attention) where the spec has them.
    pub fn with_hidden(mut self, mlp: Option<usize>, attention: Option<usize>) -> Self {
        if let (HeadKind::Mlp { activation, .. }, Some(h)) = (self.spec.head, mlp) {
            self.spec.head = HeadKind::Mlp { hidden: h, activation };
        }
        if let (AggregatorKind::GatedAttention { .. }, Some(h)) = (self.spec.aggregator, attention) {
            self.spec.aggregator = AggregatorKind::GatedAttention { hidden: h };
        }
        self
    }
}

/// The pooling × activation ablation grid, mean rows first.
pub fn ablation_grid(input_dim: usize, num_classes: usize) -> Vec<Method> {
    ["mean", "max"]
        .iter()
        .flat_map(|p| ActivationKind::ALL.iter().map(move |a| format!("{p}+{a}")))
        .map(|n| Method::named(&n, input_dim, num_classes).expect("grid names are valid"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Protocol {
    Benchmark,
    Fewshot { shots: Vec<usize> },
    Transfer { train_cohort: String, test_cohorts: Vec<String> },
    Ablation,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Benchmark => "benchmark",
            Protocol::Fewshot { .. } => "fewshot",
            Protocol::Transfer { .. } => "transfer",
            Protocol::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Benchmark | Protocol::Ablation => f.write_str(self.name()),
            Protocol::Fewshot { shots } => {
                let s: Vec<String> = shots.iter().map(usize::to_string).collect();
                write!(f, "fewshot k={}", s.join(","))
            }
            Protocol::Transfer {
                train_cohort,
                test_cohorts,
            } => write!(f, "transfer train={train_cohort} test={}", test_cohorts.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub manifest: PathBuf,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
    pub train_config: TrainConfig,
    pub bootstrap_resamples: usize,
    pub output_dir: PathBuf,
    /// Worker threads; results do not depend on it.
    #[serde(skip)]
    pub jobs: usize,
    /// Skips writing checkpoint files.
    #[serde(skip)]
    pub skip_checkpoints: bool,
}

impl ExperimentPlan {
    pub fn new(manifest: impl Into<PathBuf>, methods: Vec<Method>, protocol: Protocol, output_dir: impl Into<PathBuf>) -> Self {
        let seeds = match protocol {
            Protocol::Transfer { .. } => DEFAULT_TRANSFER_SEEDS.to_vec(),
            _ => DEFAULT_SEEDS.to_vec(),
        };
        Self {
            manifest: manifest.into(),
            methods,
            seeds,
            protocol,
            train_config: TrainConfig::default(),
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            output_dir: output_dir.into(),
            jobs: 1,
            skip_checkpoints: false,
        }
    }

    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let distinct: HashSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("seed list has duplicates".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods".into()));
        }
        let mut names = HashSet::new();
        for m in &self.methods {
            if !names.insert(&m.name) {
                return Err(Error::Config(format!("method `{}` listed twice", m.name)));
            }
            m.spec.validate()?;
            if m.spec.input_dim != manifest.dim {
                return Err(Error::Config(format!(
                    "method `{}` expects dim {}, manifest has {}",
                    m.name, m.spec.input_dim, manifest.dim
                )));
            }
            if m.spec.num_classes != manifest.num_classes() {
                return Err(Error::Config(format!(
                    "method `{}` has {} classes, manifest has {}",
                    m.name,
                    m.spec.num_classes,
                    manifest.num_classes()
                )));
            }
        }
        self.train_config.validate()?;
        if self.bootstrap_resamples < crate::metrics::MIN_BOOTSTRAP_RESAMPLES {
            return Err(Error::Config(format!(
                "need at least {} bootstrap resamples",
                crate::metrics::MIN_BOOTSTRAP_RESAMPLES
            )));
        }
        match &self.protocol {
            Protocol::Fewshot { shots } => {
                if shots.is_empty() || shots.contains(&0) {
                    return Err(Error::Config("few-shot K list must be non-empty with K >= 1".into()));
                }
            }
            Protocol::Transfer {
                train_cohort,
                test_cohorts,
            } => {
                if manifest.cohorts().len() < 2 {
                    return Err(Error::Config("transfer needs a manifest with at least 2 cohorts".into()));
                }
                split_by_cohort(manifest, train_cohort, test_cohorts)?;
            }
            Protocol::Ablation => {
                for m in &self.methods {
                    let pooled = matches!(m.spec.aggregator, AggregatorKind::Mean | AggregatorKind::Max);
                    if !pooled || !matches!(m.spec.head, HeadKind::Mlp { .. }) {
                        return Err(Error::Config(format!("`{}` is not a pooling x activation grid cell", m.name)));
                    }
                }
            }
            Protocol::Benchmark => {}
        }
        Ok(())
    }

    /// sha256 over the manifest text, the embedding bytes, training config,
    /// method specs, seeds, protocol and bootstrap settings.
    pub fn hash(&self, manifest: &DatasetManifest) -> Result<String> {
        let data = manifest.data_hash()?;
        let mut h = Sha256::new();
        let mut field = |tag: &str, value: &str| {
            h.update(tag.as_bytes());
            h.update([0]);
            h.update(value.as_bytes());
            h.update([0]);
        };
        field("manifest", &manifest.content_hash());
        field("data", &data);
        field("train", &serde_json::to_string(&self.train_config).expect("config serializes"));
        for m in &self.methods {
            field("method", &format!("{}={}", m.name, m.spec));
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        field("seeds", &seeds.join(","));
        field("protocol", &self.protocol.to_string());
        field("bootstrap", &self.bootstrap_resamples.to_string());
        Ok(hex::encode(h.finalize()))
    }
}

/// One evaluated test set inside a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRef {
    pub name: String,
    pub hash: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub plan_hash: String,
    pub protocol: String,
    pub method: String,
    pub spec: String,
    pub seed: u64,
    /// Protocol cell: `test`, `k=5`, `transfer` or the grid cell name.
    pub cell: String,
    pub train_split: SplitRef,
    pub test_splits: Vec<SplitRef>,
    pub checkpoint: Option<PathBuf>,
    pub final_loss: Option<f64>,
    pub reports: Vec<EvalReport>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }

    pub fn report_for(&self, test_set: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.test_set == test_set)
    }
}

struct Job {
    method: usize,
    seed: u64,
    cell: String,
    train: Vec<usize>,
    tests: Vec<(String, Vec<usize>)>,
    warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub plan_hash: String,
    pub records: Vec<RunRecord>,
    pub tables: Vec<Table>,
}

/// Runs whatever suite `plan.protocol` names.
pub fn run_plan(plan: &ExperimentPlan) -> Result<SuiteOutcome> {
    let manifest = DatasetManifest::load(&plan.manifest)?;
    plan.validate(&manifest)?;
    manifest.preflight()?;
    let jobs = build_jobs(plan, &manifest)?;
    let plan_hash = plan.hash(&manifest)?;
    let records = execute(plan, &manifest, &plan_hash, jobs)?;
    append_records(&plan.output_dir.join(RECORDS_FILE), &records)?;
    let tables = render_tables(&records)?;
    for t in &tables {
        let stem = plan.output_dir.join(format!("{}-{}", plan.protocol.name(), t.slug()));
        fs::write(stem.with_extension("csv"), t.to_csv()).map_err(|e| Error::io(stem.with_extension("csv"), e))?;
        fs::write(stem.with_extension("txt"), t.to_text()).map_err(|e| Error::io(stem.with_extension("txt"), e))?;
    }
    Ok(SuiteOutcome {
        plan_hash,
        records,
        tables,
    })
}

fn expect_protocol(plan: &ExperimentPlan, name: &str) -> Result<()> {
    if plan.protocol.name() != name {
        return Err(Error::Config(format!("plan protocol is {}, not {name}", plan.protocol.name())));
    }
    Ok(())
}

pub fn run_benchmark(plan: &ExperimentPlan) -> Result<SuiteOutcome> {
    expect_protocol(plan, "benchmark")?;
    run_plan(plan)
}

pub fn run_fewshot(plan: &ExperimentPlan) -> Result<SuiteOutcome> {
    expect_protocol(plan, "fewshot")?;
    run_plan(plan)
}

pub fn run_transfer(plan: &ExperimentPlan) -> Result<SuiteOutcome> {
    expect_protocol(plan, "transfer")?;
    run_plan(plan)
}

pub fn run_ablation(plan: &ExperimentPlan) -> Result<SuiteOutcome> {
    expect_protocol(plan, "ablation")?;
    run_plan(plan)
}

fn build_jobs(plan: &ExperimentPlan, manifest: &DatasetManifest) -> Result<Vec<Job>> {
    let mut jobs = Vec::new();
    let test = manifest.indices_in(Split::Test);
    let standard = |method, seed, cell: String| Job {
        method,
        seed,
        cell,
        train: manifest.indices_in(Split::Train),
        tests: vec![("test".to_string(), test.clone())],
        warnings: Vec::new(),
    };
    match &plan.protocol {
        Protocol::Benchmark | Protocol::Ablation => {
            for (m, method) in plan.methods.iter().enumerate() {
                for &seed in &plan.seeds {
                    let cell = match plan.protocol {
                        Protocol::Ablation => method.name.clone(),
                        _ => "test".to_string(),
                    };
                    jobs.push(standard(m, seed, cell));
                }
            }
        }
        Protocol::Fewshot { shots } => {
            for &k in shots {
                for m in 0..plan.methods.len() {
                    for &seed in &plan.seeds {
                        let sample = few_shot_sample(manifest, k, seed)?;
                        jobs.push(Job {
                            train: sample.indices,
                            warnings: sample.warnings,
                            ..standard(m, seed, format!("k={k}"))
                        });
                    }
                }
            }
        }
        Protocol::Transfer {
            train_cohort,
            test_cohorts,
        } => {
            let splits = split_by_cohort(manifest, train_cohort, test_cohorts)?;
            for m in 0..plan.methods.len() {
                for &seed in &plan.seeds {
                    jobs.push(Job {
                        method: m,
                        seed,
                        cell: "transfer".to_string(),
                        train: splits.train.clone(),
                        tests: splits.tests.iter().map(|t| (t.name.clone(), t.indices.clone())).collect(),
                        warnings: Vec::new(),
                    });
                }
            }
        }
    }
    Ok(jobs)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn execute(plan: &ExperimentPlan, manifest: &DatasetManifest, plan_hash: &str, jobs: Vec<Job>) -> Result<Vec<RunRecord>> {
    // Load every bag any job touches, once, in manifest order.
    let mut needed: Vec<usize> = jobs
        .iter()
        .flat_map(|j| j.train.iter().chain(j.tests.iter().flat_map(|t| t.1.iter())))
        .copied()
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let loaded = manifest.load_labeled(&needed)?;
    let mut bags: Vec<Option<LabeledBag>> = vec![None; manifest.entries.len()];
    for (i, lb) in needed.into_iter().zip(loaded) {
        bags[i] = Some(lb);
    }
    let ckpt_dir = plan.output_dir.join("checkpoints").join(&plan_hash[..16]);
    if !plan.skip_checkpoints {
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", plan.jobs)))?;
    let ctx = RunContext {
        plan,
        manifest,
        plan_hash,
        bags: &bags,
        ckpt_dir: &ckpt_dir,
    };
    Ok(pool.install(|| jobs.par_iter().map(|job| ctx.run(job)).collect()))
}

struct RunContext<'a> {
    plan: &'a ExperimentPlan,
    manifest: &'a DatasetManifest,
    plan_hash: &'a str,
    bags: &'a [Option<LabeledBag>],
    ckpt_dir: &'a Path,
}

impl RunContext<'_> {
    fn subset(&self, idx: &[usize]) -> Vec<LabeledBag> {
        idx.iter().map(|&i| self.bags[i].clone().expect("bag was preloaded")).collect()
    }

    fn split_ref(&self, name: &str, idx: &[usize]) -> SplitRef {
        SplitRef {
            name: name.to_string(),
            hash: split_hash(self.manifest, idx),
            size: idx.len(),
        }
    }

    fn run(&self, job: &Job) -> RunRecord {
        let start = Instant::now();
        let method = &self.plan.methods[job.method];
        let mut record = RunRecord {
            plan_hash: self.plan_hash.to_string(),
            protocol: self.plan.protocol.name().to_string(),
            method: method.name.clone(),
            spec: method.spec.to_string(),
            seed: job.seed,
            cell: job.cell.clone(),
            train_split: self.split_ref("train", &job.train),
            test_splits: job.tests.iter().map(|(n, idx)| self.split_ref(n, idx)).collect(),
            checkpoint: None,
            final_loss: None,
            reports: Vec::new(),
            warnings: job.warnings.clone(),
            error: None,
            wall_time_secs: 0.0,
        };
        if let Err(e) = self.train_and_evaluate(job, &mut record) {
            record.error = Some(e.to_string());
            record.reports.clear();
        }
        record.wall_time_secs = start.elapsed().as_secs_f64();
        record
    }

    fn train_and_evaluate(&self, job: &Job, record: &mut RunRecord) -> Result<()> {
        let method = &self.plan.methods[job.method];
        let train_ids: HashSet<&str> = job.train.iter().map(|&i| self.manifest.entries[i].slide_id.as_str()).collect();
        for (name, idx) in &job.tests {
            if idx.iter().any(|&i| train_ids.contains(self.manifest.entries[i].slide_id.as_str())) {
                return Err(Error::State(format!("test set `{name}` overlaps the training slides")));
            }
        }
        let mut model = build_model(method.spec, job.seed)?;
        let config = TrainConfig {
            seed: job.seed,
            ..self.plan.train_config
        };
        let outcome = train(&mut model, &self.subset(&job.train), &config)?;
        record.final_loss = outcome.final_loss();
        if !self.plan.skip_checkpoints {
            let path = self
                .ckpt_dir
                .join(format!("{}__{}__seed{}.ckpt", sanitize(&method.name), sanitize(&job.cell), job.seed));
            model.save(&path)?;
            record.checkpoint = Some(path);
        }
        for (name, idx) in &job.tests {
            let test = self.subset(idx);
            let preds = predict_all(&model, &test)?;
            record.reports.push(EvalReport::compute(
                &self.manifest.task,
                &method.name,
                name,
                job.seed,
                &preds,
                self.plan.bootstrap_resamples,
                job.seed,
            )?);
        }
        Ok(())
    }
}

/// Class probabilities and argmax predictions for every bag.
pub fn predict_all(model: &crate::heads::SlideModel, data: &[LabeledBag]) -> Result<Predictions> {
    let mut predicted = Vec::with_capacity(data.len());
    let mut scores = Vec::with_capacity(data.len());
    for lb in data {
        let (class, probs) = model.predict(&lb.bag)?;
        predicted.push(class);
        scores.push(probs);
    }
    Ok(Predictions {
        labels: data.iter().map(|d| d.label).collect(),
        predicted,
        scores,
        num_classes: model.spec().num_classes,
    })
}

/// Appends records as JSON lines through one writer.
pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let record = serde_json::from_str(line).map_err(|e| Error::Format {
                offset,
                message: format!("bad record: {e}"),
            })?;
            out.push(record);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Records of one plan. With several plans in the log, `plan` (a hash
/// prefix) must pick one.
pub fn select_plan(records: Vec<RunRecord>, plan: Option<&str>) -> Result<Vec<RunRecord>> {
    if records.is_empty() {
        return Err(Error::Config("no records".into()));
    }
    let mut hashes: Vec<&str> = records.iter().map(|r| r.plan_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    let chosen = match plan {
        Some(prefix) => {
            let matching: Vec<&str> = hashes.iter().copied().filter(|h| h.starts_with(prefix)).collect();
            match matching.as_slice() {
                [one] => one.to_string(),
                [] => return Err(Error::Config(format!("no records for plan `{prefix}`"))),
                _ => return Err(Error::Config(format!("plan prefix `{prefix}` is ambiguous"))),
            }
        }
        None if hashes.len() == 1 => hashes[0].to_string(),
        None => {
            let short: Vec<&str> = hashes.iter().map(|h| &h[..12.min(h.len())]).collect();
            return Err(Error::Config(format!(
                "log mixes {} plans ({}); choose one",
                hashes.len(),
                short.join(", ")
            )));
        }
    };
    Ok(records.into_iter().filter(|r| r.plan_hash == chosen).collect())
}
