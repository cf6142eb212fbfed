//! Command-line driver: run configuration, subcommands and exit codes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use hcnn::analysis::{
    heatmap_pgm, invariant_array, nearest_translated, write_corpus, AttributeArray,
};
use hcnn::checkpoint::Checkpoint;
use hcnn::data::{
    load_cifar_raw, standardize_pair, synth, CifarFormat, LabeledImageSet, Split, SynthKind,
    SynthSpec,
};
use hcnn::model::{count_parameters, forward, ForwardMode, NetworkConfig};
use hcnn::selfcheck::{self, preset};
use hcnn::training::{evaluate, train, AugmentationPolicy, Schedule, TrainOptions};
use hcnn::{BoundaryMode, HcnnError};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_SELFTEST: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<HcnnError> for CliError {
    fn from(e: HcnnError) -> Self {
        let code = match &e {
            HcnnError::NonFinite(_) => EXIT_NUMERIC,
            HcnnError::Data(_) | HcnnError::Format(_) | HcnnError::Io(_) => EXIT_DATA,
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Cifar10 {
        path: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar100 {
        path: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic {
        synth: SynthKind,
        train_count: usize,
        test_count: usize,
        seed: u64,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_classes")]
        num_classes: usize,
    },
}

fn default_side() -> usize {
    32
}
fn default_classes() -> usize {
    10
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "yes")]
    pub log_wall_time: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        self.schedule.validate()?;
        if self.threads == 0 {
            return Err(CliError::config("threads must be at least 1"));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            schedule: self.schedule.clone(),
            augmentation: self.augmentation.clone(),
            seed: self.seed,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            log_wall_time: self.log_wall_time,
            eval_batch: 100,
        }
    }
}

/// Unstandardized train and test splits, truncated to the configured limits.
pub fn load_raw(spec: &DatasetSpec) -> CliResult<(LabeledImageSet, LabeledImageSet)> {
    let limit = |set: LabeledImageSet, n: Option<usize>| match n {
        Some(n) => set.head(n).map_err(CliError::from),
        None => Ok(set),
    };
    match spec {
        DatasetSpec::Cifar10 {
            path,
            train_limit,
            test_limit,
        }
        | DatasetSpec::Cifar100 {
            path,
            train_limit,
            test_limit,
        } => {
            let format = if matches!(spec, DatasetSpec::Cifar10 { .. }) {
                CifarFormat::Ten
            } else {
                CifarFormat::Hundred
            };
            let (train, test) = load_cifar_raw(path, format)?;
            Ok((limit(train, *train_limit)?, limit(test, *test_limit)?))
        }
        DatasetSpec::Synthetic {
            synth: kind,
            train_count,
            test_count,
            seed,
            side,
            num_classes,
        } => {
            let make = |count, seed| {
                synth(&SynthSpec {
                    kind: *kind,
                    count,
                    seed,
                    side: *side,
                    num_classes: *num_classes,
                })
            };
            let train = make(*train_count, *seed)?;
            let mut test = make(*test_count, seed.wrapping_add(1_000_003))?;
            test.split = Split::Test;
            Ok((train, test))
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hcnn",
    version,
    about = "Hierarchical attribute CNN: train, evaluate, analyze"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Print per-layer and total parameter counts.
    Params(ParamsArgs),
    /// Invariant attribute arrays and translated nearest-neighbour retrieval.
    Analyze(AnalyzeArgs),
    /// Run the built-in gradient, invariance, equivalence and counting checks.
    Selftest(SelftestArgs),
}

/// Flags that override fields of the run configuration.
#[derive(Debug, Clone, Args)]
pub struct Overrides {
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable translations and flips.
    #[arg(long)]
    pub no_augment: bool,
    /// Omit wall-clock times from the metrics log.
    #[arg(long)]
    pub no_wall_time: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(e) = self.epochs {
            cfg.schedule.epochs = e;
        }
        if let Some(m) = self.max_steps {
            cfg.max_steps = Some(m);
        }
        if let Some(lr) = self.lr {
            cfg.schedule.initial_lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.schedule.batch_size = b;
        }
        if self.no_augment {
            cfg.augmentation.enabled = false;
        }
        if self.no_wall_time {
            cfg.log_wall_time = false;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration naming the dataset.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for `eval.json`; defaults to the checkpoint's directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// cifar10, cifar100, cifar10_plus, cifar100_plus, toy or desk.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Depth j of the invariant arrays (3 <= j <= J-1); defaults to J-1.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Attribute shifts to query; repeat the flag for several.
    #[arg(long = "tau", default_values_t = vec![1isize, 2])]
    pub taus: Vec<isize>,
    /// Box-filter width along v_{j-1}.
    #[arg(long, default_value_t = 2)]
    pub width: usize,
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    /// Corpus size (first images of the test split); defaults to all.
    #[arg(long)]
    pub corpus: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Number of query heatmaps to write.
    #[arg(long, default_value_t = 4)]
    pub heatmaps: usize,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn with_threads<T>(n: usize, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T>
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("run_config.json"), &cfg)?;
    let (mut train_set, mut test_set) = load_raw(&cfg.dataset)?;
    standardize_pair(&mut train_set, &mut test_set)?;
    let out = with_threads(cfg.threads, || {
        let out = train(
            &cfg.network,
            &train_set,
            Some(&test_set),
            &cfg.train_options(),
            Some(&cfg.output_dir),
        )?;
        let (acc, preds) = evaluate(&cfg.network, &out.checkpoint.params, &test_set, 100)?;
        Ok((out, acc, preds))
    })?;
    let (out, test_acc, preds) = out;
    write_json(
        &cfg.output_dir.join("predictions.json"),
        &json!({ "split": "test", "accuracy": test_acc, "predictions": preds }),
    )?;
    let counts = count_parameters(&cfg.network)?;
    let summary = json!({
        "steps": out.checkpoint.step,
        "epochs": out.records.len(),
        "final_train_loss": out.records.last().map(|r| r.train_loss),
        "final_train_acc": out.final_train_acc,
        "test_acc": test_acc,
        "parameters": counts.total,
        "trainable_scalars": counts.trainable,
    });
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    println!(
        "trained {} steps: train acc {:.4}, test acc {:.4}; outputs in {}",
        out.checkpoint.step,
        out.final_train_acc,
        test_acc,
        cfg.output_dir.display()
    );
    Ok(())
}

/// Loads a checkpoint and the requested split standardized with the
/// checkpoint's statistics.
fn checkpoint_and_split(
    checkpoint: &Path,
    config: &Path,
    split: &str,
) -> CliResult<(Checkpoint, RunConfig, LabeledImageSet)> {
    let cfg = RunConfig::load(config)?;
    let ck = Checkpoint::load(checkpoint).map_err(|e| match e {
        HcnnError::Config(m) => CliError::config(m),
        e => CliError::data(format!("{}: {e}", checkpoint.display())),
    })?;
    if ck.config != cfg.network {
        return Err(CliError::config(format!(
            "checkpoint {} was trained with a different network configuration than {}",
            checkpoint.display(),
            config.display()
        )));
    }
    let (train_set, test_set) = load_raw(&cfg.dataset)?;
    let mut set = match split {
        "train" => train_set,
        "test" => test_set,
        other => return Err(CliError::config(format!("unknown split {other:?}"))),
    };
    let stats = match &ck.stats {
        Some(s) => s.clone(),
        None => {
            return Err(CliError::config(
                "checkpoint carries no standardization statistics",
            ))
        }
    };
    set.standardize(&stats)?;
    Ok((ck, cfg, set))
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let (ck, _, set) = checkpoint_and_split(&args.checkpoint, &args.config, &args.split)?;
    let (acc, preds) = with_threads(args.threads, || {
        Ok(evaluate(&ck.config, &ck.params, &set, 100)?)
    })?;
    let dir = args.output_dir.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    create_dir(&dir)?;
    write_json(
        &dir.join("eval.json"),
        &json!({ "split": args.split, "count": set.len(), "accuracy": acc, "predictions": preds }),
    )?;
    println!("accuracy {acc:.6} on {} {} images", set.len(), args.split);
    Ok(())
}

pub fn cmd_params(args: &ParamsArgs) -> CliResult<()> {
    let config = match (&args.config, &args.preset) {
        (Some(p), _) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            // Accept either a bare network config or a full run config.
            match serde_json::from_str::<NetworkConfig>(&text) {
                Ok(c) => c,
                Err(_) => {
                    serde_json::from_str::<RunConfig>(&text)
                        .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
                        .network
                }
            }
        }
        (None, Some(name)) => {
            preset(name).ok_or_else(|| CliError::config(format!("unknown preset {name:?}")))?
        }
        (None, None) => NetworkConfig::cifar10(),
    };
    let counts = count_parameters(&config)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&counts).expect("serializable")
        );
        return Ok(());
    }
    println!(
        "{:>5} {:>10} {:>10} {:>10}",
        "layer", "filters", "stored", "aux"
    );
    for l in &counts.layers {
        println!(
            "{:>5} {:>10} {:>10} {:>10}",
            l.depth, l.filters, l.stored_filters, l.auxiliary
        );
    }
    println!("total {}", counts.total);
    println!("trainable {}", counts.trainable);
    Ok(())
}

#[derive(Debug, Serialize)]
struct QueryRecord<'a> {
    query_id: u64,
    query_label: Option<usize>,
    tau: isize,
    matches: &'a [hcnn::analysis::Match],
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let (ck, cfg, set) = checkpoint_and_split(&args.checkpoint, &args.config, "test")?;
    let network = ck.config.clone().with_boundary(BoundaryMode::Periodic);
    network.validate()?;
    let depth = args.depth.unwrap_or(network.depth - 1);
    let n = args.corpus.unwrap_or(set.len()).min(set.len());
    let dir = args
        .output_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("analysis"));
    create_dir(&dir)?;
    let corpus = with_threads(args.threads, || {
        let mut corpus = Vec::with_capacity(n);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(50) {
            let (x, labels) = set.gather(chunk);
            let acts = forward(&network, &ck.params, &x, ForwardMode::EVAL)?;
            for (b, &i) in chunk.iter().enumerate() {
                let mut a = invariant_array(&acts, depth, b, i as u64)?;
                a.label = Some(labels[b]);
                corpus.push(a);
            }
        }
        Ok(corpus)
    })?;
    write_corpus(&dir.join(format!("corpus_depth{depth}.hatr")), &corpus)?;
    let summary = retrieval_report(
        &corpus,
        &args.taus,
        args.width,
        args.queries,
        args.top,
        &dir,
    )?;
    for (i, q) in corpus.iter().take(args.heatmaps).enumerate() {
        let pgm = heatmap_pgm(&q.values, 8)?;
        fs::write(dir.join(format!("query{i}_depth{depth}.pgm")), pgm)
            .map_err(|e| CliError::data(e.to_string()))?;
    }
    write_json(&dir.join("analysis_summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("serializable"));
    Ok(())
}

/// Class agreement of the top-1 translated neighbour (the query itself
/// excluded) over the first `queries` corpus entries, per shift.
#[derive(Debug, Clone, Serialize)]
pub struct RetrievalSummary {
    pub depth: usize,
    pub queries: usize,
    pub corpus: usize,
    pub width: usize,
    pub agreement: Vec<(isize, f64)>,
}

pub fn retrieval_report(
    corpus: &[AttributeArray],
    taus: &[isize],
    width: usize,
    queries: usize,
    top: usize,
    dir: &Path,
) -> CliResult<RetrievalSummary> {
    let queries = queries.min(corpus.len());
    let mut lines = String::new();
    let mut agreement = Vec::new();
    for &tau in taus {
        let mut hits = 0;
        for q in &corpus[..queries] {
            let ranked = nearest_translated(q, tau, corpus, width)?;
            let others: Vec<_> = ranked
                .into_iter()
                .filter(|m| m.image_id != q.image_id)
                .collect();
            if others.first().and_then(|m| m.label) == q.label {
                hits += 1;
            }
            let rec = QueryRecord {
                query_id: q.image_id,
                query_label: q.label,
                tau,
                matches: &others[..top.min(others.len())],
            };
            lines.push_str(&serde_json::to_string(&rec).expect("serializable"));
            lines.push('\n');
        }
        agreement.push((tau, hits as f64 / queries.max(1) as f64));
    }
    fs::write(dir.join("matches.jsonl"), lines).map_err(|e| CliError::data(e.to_string()))?;
    Ok(RetrievalSummary {
        depth: corpus.first().map_or(0, |c| c.depth),
        queries,
        corpus: corpus.len(),
        width,
        agreement,
    })
}

pub fn cmd_selftest(args: &SelftestArgs) -> CliResult<()> {
    let results = selfcheck::run_all(args.seed)?;
    for r in &results {
        println!(
            "{} {:<24} {:.3e} (tolerance {:.0e}) {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.value,
            r.tolerance,
            r.detail
        );
    }
    if let Some(d) = &args.output_dir {
        create_dir(d)?;
        write_json(&d.join("selftest.json"), &results)?;
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_SELFTEST,
            message: "self-test failed".into(),
        })
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Params(a) => cmd_params(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}
