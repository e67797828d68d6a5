use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slidetune::data::{generate_corpus, write_corpus, DatasetManifest, Dtype, Split, SynthConfig};
use slidetune::error::{Error, Result};
use slidetune::harness::{
    ablation_grid, predict_all, read_records, render_tables, run_plan, select_plan, ExperimentPlan, Method, Protocol,
    DEFAULT_SEEDS, DEFAULT_SHOTS, DEFAULT_TRANSFER_SEEDS,
};
use slidetune::heads::{build_model, gradcheck_spec, SlideModel};
use slidetune::metrics::{EvalReport, DEFAULT_BOOTSTRAP_RESAMPLES};
use slidetune::optim::{train, TrainConfig};
use slidetune::{AggregatorKind, HeadKind, ModelSpec};

const OUT_ENV: &str = "SLIDETUNE_OUT";
const DEFAULT_OUT_ROOT: &str = "slidetune-out";

#[derive(Parser)]
#[command(name = "slidetune", version, about = "Slide-level classifiers over patch-embedding bags")]
struct Cli {
    /// Root for default output directories.
    #[arg(long, global = true, env = OUT_ENV, default_value = DEFAULT_OUT_ROOT)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (manifest + embedding files).
    Synth(SynthArgs),
    /// Train one model on the train split of a manifest.
    Train(TrainCmd),
    /// Evaluate a checkpoint with bootstrap confidence intervals.
    Eval(EvalArgs),
    /// Every method x seed on the standard split.
    Benchmark(SuiteArgs),
    /// Few-shot curves over K slides per class.
    Fewshot(FewshotArgs),
    /// Train on one cohort, test on the others.
    Transfer(TransferArgs),
    /// Pooling x activation grid.
    Ablate(SuiteArgs),
    /// Re-render summary tables from a record log.
    Report(ReportArgs),
    /// Finite-difference check of every model family.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file with SynthConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    patches_min: Option<usize>,
    #[arg(long)]
    patches_max: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    informative_fraction: Option<f64>,
    #[arg(long)]
    cohort_shift: Option<f64>,
    /// Comma-separated cohort names.
    #[arg(long, value_delimiter = ',')]
    cohorts: Option<Vec<String>>,
    #[arg(long)]
    dtype: Option<Dtype>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta1)]
    beta1: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta2)]
    beta2: f64,
    /// Overrides the MLP hidden width.
    #[arg(long)]
    mlp_hidden: Option<usize>,
    /// Overrides the attention hidden width.
    #[arg(long)]
    attention_hidden: Option<usize>,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            seed,
            ..TrainConfig::default()
        }
    }

    fn method(&self, name: &str, manifest: &DatasetManifest) -> Result<Method> {
        let m = Method::named(name, manifest.dim, manifest.num_classes())?.with_hidden(self.mlp_hidden, self.attention_hidden);
        m.spec.validate()?;
        Ok(m)
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// simlp, linear, abmil, mean+<act> or max+<act> (act: relu, gelu, swiglu).
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_RESAMPLES)]
    bootstrap: usize,
    /// Seed for the bootstrap resampling streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Report file; `.json` next to it gets the machine-readable form.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SuiteArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_RESAMPLES)]
    bootstrap: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_checkpoints: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct FewshotArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long)]
    train_cohort: String,
    /// Comma-separated cohorts to test on; defaults to all cohorts.
    #[arg(long, value_delimiter = ',')]
    test_cohorts: Option<Vec<String>>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    /// Plan hash prefix when the log holds several plans.
    #[arg(long)]
    plan: Option<String>,
    /// Also write the tables as CSV into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 6)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    patches: usize,
    #[arg(long, default_value_t = 8)]
    mlp_hidden: usize,
    #[arg(long, default_value_t = 5)]
    attention_hidden: usize,
    /// Random initializations per spec.
    #[arg(long, default_value_t = 5)]
    inits: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.out_root;
    match cli.command {
        Command::Synth(a) => synth(a, &root),
        Command::Train(a) => train_cmd(a, &root),
        Command::Eval(a) => eval(a, &root),
        Command::Benchmark(a) => suite(a, Protocol::Benchmark, &root),
        Command::Fewshot(a) => {
            let shots = a.shots.unwrap_or_else(|| DEFAULT_SHOTS.to_vec());
            suite(a.suite, Protocol::Fewshot { shots }, &root)
        }
        Command::Transfer(a) => {
            let manifest = DatasetManifest::load(&a.suite.manifest)?;
            let test_cohorts = a.test_cohorts.unwrap_or_else(|| manifest.cohorts());
            suite(
                a.suite,
                Protocol::Transfer {
                    train_cohort: a.train_cohort,
                    test_cohorts,
                },
                &root,
            )
        }
        Command::Ablate(a) => suite(a, Protocol::Ablation, &root),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(a: SynthArgs, root: &Path) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$( if let Some(v) = a.$flag.clone() { config.$field = v; } )*};
    }
    set!(seed => seed, task => task, classes => num_classes, dim => feature_dim,
        train_per_class => train_per_class, test_per_class => test_per_class,
        patches_min => patches_min, patches_max => patches_max, separation => class_separation,
        noise => noise_scale, informative_fraction => informative_fraction,
        cohort_shift => cohort_shift, cohorts => cohorts, dtype => dtype);
    config.validate()?;
    let out = a.out.unwrap_or_else(|| root.join("synth"));
    ensure_empty_dir(&out, a.force)?;
    let corpus = generate_corpus(&config)?;
    let manifest = write_corpus(&corpus, &out)?;
    let config_path = out.join("synth-config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config).expect("config serializes") + "\n")
        .map_err(|e| Error::io(&config_path, e))?;
    println!(
        "corpus {}: C={} d={} slides={} (train {}, test {}) rho={} cohorts={} shift={}",
        out.display(),
        config.num_classes,
        config.feature_dim,
        manifest.entries.len(),
        manifest.indices_in(Split::Train).len(),
        manifest.indices_in(Split::Test).len(),
        config.informative_fraction,
        config.cohorts.join(","),
        config.cohort_shift
    );
    Ok(())
}

/// Loads a manifest and fails listing every missing or mis-sized embedding.
fn load_checked(path: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(path)?;
    let problems = manifest.embedding_problems();
    if problems.len() > 1 {
        for p in &problems {
            eprintln!("  {p}");
        }
    }
    if let Some(p) = problems.into_iter().next() {
        return Err(p.into());
    }
    Ok(manifest)
}

fn train_cmd(a: TrainCmd, root: &Path) -> Result<()> {
    let config = a.train.config(a.seed);
    config.validate()?;
    let manifest = load_checked(&a.manifest)?;
    let method = a.train.method(&a.method, &manifest)?;
    let out = a.out.unwrap_or_else(|| root.join("train").join(format!("{}-seed{}", a.method.replace('+', "-"), a.seed)));
    let ckpt = out.join("model.ckpt");
    if ckpt.exists() && !a.force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", ckpt.display())));
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let data = manifest.load_labeled(&manifest.indices_in(Split::Train))?;
    let mut model = build_model(method.spec, a.seed)?;
    let outcome = train(&mut model, &data, &config)?;
    model.save(&ckpt)?;
    let trace = out.join("loss_trace.csv");
    fs::write(&trace, outcome.loss_trace_csv()).map_err(|e| Error::io(&trace, e))?;
    match outcome.final_loss() {
        Some(l) => println!("final train loss {l:.6}"),
        None => println!("final train loss n/a (0 epochs)"),
    }
    println!("parameters {}", model.param_count());
    println!("spec {}", method.spec);
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn eval(a: EvalArgs, root: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let model = SlideModel::load(&a.checkpoint)?;
    let spec = model.spec();
    if spec.num_classes != manifest.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, manifest has {}",
            spec.num_classes,
            manifest.num_classes()
        )));
    }
    if spec.input_dim != manifest.dim {
        return Err(Error::Config(format!("checkpoint expects dim {}, manifest has {}", spec.input_dim, manifest.dim)));
    }
    let split = if a.split == "train" { Split::Train } else { Split::Test };
    let data = manifest.load_labeled(&manifest.indices_in(split))?;
    if data.is_empty() {
        return Err(Error::Config(format!("manifest has no {split} slides")));
    }
    let preds = predict_all(&model, &data)?;
    let method = a.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = EvalReport::compute(&manifest.task, &method, &split.to_string(), 0, &preds, a.bootstrap, a.seed)?;
    let text = report.to_text();
    print!("{text}");
    let out = a.out.unwrap_or_else(|| root.join("eval").join("report.txt"));
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
    let json = out.with_extension("json");
    fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes") + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(())
}

fn suite(a: SuiteArgs, protocol: Protocol, root: &Path) -> Result<()> {
    let config = a.train.config(0);
    config.validate()?;
    let manifest = load_checked(&a.manifest)?;
    let methods = match (&a.methods, &protocol) {
        (Some(names), _) => names.iter().map(|n| a.train.method(n, &manifest)).collect::<Result<Vec<_>>>()?,
        (None, Protocol::Ablation) => ablation_grid(manifest.dim, manifest.num_classes())
            .into_iter()
            .map(|m| m.with_hidden(a.train.mlp_hidden, None))
            .collect(),
        (None, _) => ["simlp", "linear", "abmil"]
            .iter()
            .map(|n| a.train.method(n, &manifest))
            .collect::<Result<Vec<_>>>()?,
    };
    let out = a.out.clone().unwrap_or_else(|| root.join(protocol.name()));
    let mut plan = ExperimentPlan::new(&a.manifest, methods, protocol, &out);
    plan.seeds = a.seeds.clone().unwrap_or_else(|| match plan.protocol {
        Protocol::Transfer { .. } => DEFAULT_TRANSFER_SEEDS.to_vec(),
        _ => DEFAULT_SEEDS.to_vec(),
    });
    plan.train_config = config;
    plan.bootstrap_resamples = a.bootstrap;
    plan.jobs = a.jobs;
    plan.skip_checkpoints = a.no_checkpoints;
    plan.validate(&manifest)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let outcome = run_plan(&plan)?;
    for t in &outcome.tables {
        println!("{}", t.to_text());
    }
    let failed: Vec<String> = outcome
        .records
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{} seed {} {}: {e}", r.method, r.seed, r.cell)))
        .collect();
    for w in outcome.records.iter().flat_map(|r| &r.warnings) {
        eprintln!("warning: {w}");
    }
    println!("plan {}", outcome.plan_hash);
    println!("records {}", out.join(slidetune::harness::RECORDS_FILE).display());
    if !failed.is_empty() {
        for f in &failed {
            eprintln!("failed: {f}");
        }
        return Err(Error::State(format!("{} of {} runs failed", failed.len(), outcome.records.len())));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let records = select_plan(read_records(&a.records)?, a.plan.as_deref())?;
    let tables = render_tables(&records)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for t in &tables {
        println!("{}", t.to_text());
        if let Some(dir) = &a.out {
            let path = dir.join(format!("{}.csv", t.slug()));
            fs::write(&path, t.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut specs = vec![ModelSpec::linear_probe(a.dim, a.classes)];
    for activation in slidetune::gradcore::ActivationKind::ALL {
        for aggregator in [AggregatorKind::Mean, AggregatorKind::Max] {
            specs.push(ModelSpec {
                aggregator,
                head: HeadKind::Mlp {
                    hidden: a.mlp_hidden,
                    activation,
                },
                input_dim: a.dim,
                num_classes: a.classes,
            });
        }
    }
    specs.push(ModelSpec {
        aggregator: AggregatorKind::GatedAttention {
            hidden: a.attention_hidden,
        },
        ..ModelSpec::linear_probe(a.dim, a.classes)
    });
    let mut worst_overall = 0.0f64;
    let mut failures = 0;
    for spec in specs {
        let mut worst = 0.0f64;
        let mut ok = true;
        for i in 0..a.inits {
            let report = gradcheck_spec(spec, a.seed + i, a.patches, a.step, a.tolerance)?;
            worst = worst.max(report.max_rel_error());
            ok &= report.passed();
        }
        worst_overall = worst_overall.max(worst);
        if !ok {
            failures += 1;
        }
        println!("{:<6} {spec}  max_rel_error {worst:.3e}", if ok { "ok" } else { "FAIL" });
    }
    println!("overall max_rel_error {worst_overall:.3e} (tolerance {:e})", a.tolerance);
    if failures > 0 {
        return Err(Error::State(format!("{failures} spec(s) exceed the gradient tolerance")));
    }
    Ok(())
}
