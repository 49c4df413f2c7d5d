//! Experiment orchestration: the objective-comparison matrix, its on-disk
//! reports, and the command-line interface.
//!
//! A comparison runs every (objective, seed) cell on byte-identical data
//! splits and identical per-seed initial weights, so cells differ only in
//! the training objective and seed. Outputs under the chosen directory:
//!
//! * `runs/<objective>-<seed>.jsonl` — one epoch record per line;
//! * `runs/<objective>-<seed>.report.json` — the cell's `RunRecord`;
//! * `summary.json` — config, all records, failures, per-objective stats;
//! * `summary.csv` — one row per cell, plot-ready.
//!
//! Re-running an identical config reproduces every byte except wall-clock
//! fields.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adversarial::{AdvConfig, DeltaInit, ObjectiveKind};
use crate::autodiff::{fnv1a, run_op_suite};
use crate::data::{generate, load, save, split, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Activation, HiddenLayer, ModelConfig, ModelParams, TaskKind};
use crate::optim::{train, EpochRecord, TrainConfig};

/// Where a comparison's dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generate from a spec.
    Spec(DatasetSpec),
    /// Load a dataset file.
    Path(PathBuf),
}

/// One full comparison: the cross product of objectives and seeds on a
/// shared dataset, architecture, and evaluation attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Train/dev/test fractions; must sum to one.
    pub split: (f64, f64, f64),
    pub model: ModelConfig,
    /// Template for every cell; `objective` and `seed` are overwritten
    /// per cell.
    pub train: TrainConfig,
    /// Evaluation attack for robust accuracy.
    pub attack: AdvConfig,
    pub objectives: Vec<ObjectiveKind>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objectives.is_empty() {
            return Err(Error::Config("at least one objective required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        let mut objs = self.objectives.clone();
        objs.dedup();
        if objs.len() != self.objectives.len()
            || (1..self.objectives.len())
                .any(|i| self.objectives[..i].contains(&self.objectives[i]))
        {
            return Err(Error::Config("objectives must be distinct".into()));
        }
        if (1..self.seeds.len()).any(|i| self.seeds[..i].contains(&self.seeds[i])) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.attack.validate()?;
        Ok(())
    }
}

/// The fully resolved configuration of a single cell; its serialized form
/// is what the config hash covers.
#[derive(Debug, Clone, Serialize)]
struct CellConfig {
    data: DatasetSpec,
    split: (f64, f64, f64),
    model: ModelConfig,
    train: TrainConfig,
    attack: AdvConfig,
}

fn config_hash(cell: &CellConfig) -> Result<String> {
    Ok(format!(
        "{:016x}",
        fnv1a(serde_json::to_string(cell)?.as_bytes())
    ))
}

/// Outcome of one (objective, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub objective: ObjectiveKind,
    pub seed: u64,
    /// 1-based epoch whose parameters were evaluated.
    pub best_epoch: usize,
    /// Test-set evaluation, clean and robust.
    pub report: EvalReport,
    pub wall_clock_seconds: f64,
    /// Hash of the cell's fully resolved config.
    pub config_hash: String,
}

/// A cell that errored; the rest of the matrix still runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub objective: ObjectiveKind,
    pub seed: u64,
    pub message: String,
}

/// Seed-aggregated statistics for one objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSummary {
    pub objective: ObjectiveKind,
    pub runs: usize,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub robust_mean: f64,
    pub robust_std: f64,
    pub wall_clock_mean_seconds: f64,
    /// Mean wall clock relative to the standard objective's mean; absent
    /// when standard was not part of the matrix.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ratio_to_standard: Option<f64>,
}

/// Everything `compare` produced, as written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
    pub failures: Vec<CellFailure>,
    pub per_objective: Vec<ObjectiveSummary>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero when fewer than two
/// samples.
fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Default evaluation attack for a training-time perturbation budget: the
/// same radius probed harder (five steps of half the radius, from zero).
/// A zero budget means nothing to attack.
pub fn eval_attack_from(train_attack: &AdvConfig) -> Option<AdvConfig> {
    if train_attack.epsilon == 0.0 {
        return None;
    }
    Some(AdvConfig {
        epsilon: train_attack.epsilon,
        step_size: train_attack.epsilon / 2.0,
        steps: 5,
        init: DeltaInit::Zero,
        ..*train_attack
    })
}

/// Initial weights for a cell. Derived from the seed alone, so every
/// objective trained under one seed starts from identical parameters.
fn init_params(model: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(model, &mut ChaCha8Rng::seed_from_u64(seed ^ fnv1a(b"init")))
}

struct CellOutput {
    record: RunRecord,
    log: Vec<EpochRecord>,
}

fn run_cell(
    cell: &CellConfig,
    task_kind: TaskKind,
    train_set: &[crate::data::ExampleGroup],
    dev_set: &[crate::data::ExampleGroup],
    test_set: &[crate::data::ExampleGroup],
) -> Result<CellOutput> {
    let hash = config_hash(cell)?;
    let start = Instant::now();
    let params = init_params(&cell.model, cell.train.seed)?;
    let outcome = train(&params, task_kind, train_set, dev_set, &cell.train)?;
    let report = evaluate(
        &outcome.params,
        task_kind,
        test_set,
        Some(&cell.attack),
        cell.train.eval_batch_size,
    )?;
    Ok(CellOutput {
        record: RunRecord {
            objective: cell.train.objective,
            seed: cell.train.seed,
            best_epoch: outcome.best_epoch,
            report,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            config_hash: hash,
        },
        log: outcome.log,
    })
}

fn write_jsonl(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn summary_csv(records: &[RunRecord]) -> String {
    let mut csv = String::from(
        "objective,seed,best_epoch,clean_accuracy,exact_match,f1,robust_accuracy,\
         wall_clock_seconds,config_hash\n",
    );
    for r in records {
        let robust = r
            .report
            .robust_accuracy
            .map(|v| v.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.objective,
            r.seed,
            r.best_epoch,
            r.report.accuracy,
            r.report.exact_match,
            r.report.f1,
            robust,
            r.wall_clock_seconds,
            r.config_hash,
        );
    }
    csv
}

fn per_objective_stats(
    objectives: &[ObjectiveKind],
    records: &[RunRecord],
) -> Vec<ObjectiveSummary> {
    let wall_of = |objective: ObjectiveKind| -> Option<f64> {
        let walls: Vec<f64> = records
            .iter()
            .filter(|r| r.objective == objective)
            .map(|r| r.wall_clock_seconds)
            .collect();
        (!walls.is_empty()).then(|| mean(&walls))
    };
    let standard_wall = wall_of(ObjectiveKind::Standard);
    objectives
        .iter()
        .filter_map(|&objective| {
            let cells: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.objective == objective)
                .collect();
            if cells.is_empty() {
                return None;
            }
            let clean: Vec<f64> = cells.iter().map(|r| r.report.accuracy).collect();
            let robust: Vec<f64> = cells
                .iter()
                .map(|r| r.report.robust_accuracy.unwrap_or(r.report.accuracy))
                .collect();
            let walls: Vec<f64> = cells.iter().map(|r| r.wall_clock_seconds).collect();
            let wall_mean = mean(&walls);
            Some(ObjectiveSummary {
                objective,
                runs: cells.len(),
                clean_mean: mean(&clean),
                clean_std: sample_std(&clean),
                robust_mean: mean(&robust),
                robust_std: sample_std(&robust),
                wall_clock_mean_seconds: wall_mean,
                wall_clock_ratio_to_standard: standard_wall.map(|s| wall_mean / s),
            })
        })
        .collect()
}

/// Runs the full matrix. Cell failures are recorded and the remaining
/// cells still run; the caller can see them in `failures`.
pub fn compare(cfg: &ExperimentConfig) -> Result<CompareSummary> {
    cfg.validate()?;
    let dataset = match &cfg.data {
        DataSource::Spec(spec) => generate(spec)?,
        DataSource::Path(path) => load(path)?,
    };
    let task_kind = dataset.spec.task_kind;
    let (train_set, dev_set, test_set) = split(&dataset, cfg.split)?;
    let runs_dir = cfg.output_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &objective in &cfg.objectives {
        for &seed in &cfg.seeds {
            let mut train_cfg = cfg.train;
            train_cfg.objective = objective;
            train_cfg.seed = seed;
            let cell = CellConfig {
                data: dataset.spec.clone(),
                split: cfg.split,
                model: cfg.model.clone(),
                train: train_cfg,
                attack: cfg.attack,
            };
            match run_cell(&cell, task_kind, &train_set, &dev_set, &test_set) {
                Ok(out) => {
                    let stem = format!("{objective}-{seed}");
                    write_jsonl(&runs_dir.join(format!("{stem}.jsonl")), &out.log)?;
                    fs::write(
                        runs_dir.join(format!("{stem}.report.json")),
                        serde_json::to_string_pretty(&out.record)?,
                    )?;
                    records.push(out.record);
                }
                Err(e) => failures.push(CellFailure {
                    objective,
                    seed,
                    message: e.to_string(),
                }),
            }
        }
    }

    let summary = CompareSummary {
        config: cfg.clone(),
        per_objective: per_objective_stats(&cfg.objectives, &records),
        records,
        failures,
    };
    fs::write(
        cfg.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    fs::write(
        cfg.output_dir.join("summary.csv"),
        summary_csv(&summary.records),
    )?;
    Ok(summary)
}

/// The frozen desk-scale comparison: 2000/500/500 ranking examples over a
/// 64-token vocabulary with 5% label noise, five seeds, standard versus
/// combined training, robust accuracy probed with a five-step attack at
/// the training radius.
pub fn reference_experiment(output_dir: impl Into<PathBuf>) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Spec(DatasetSpec {
            task_kind: TaskKind::RelevanceRanking,
            num_examples: 3000,
            vocab_size: 64,
            // Short contexts keep the key token's share of the pooled
            // representation above the perturbation radius at init; with
            // long filler runs the inner ascent can erase the signal
            // before training grows any margin, and runs collapse to the
            // uniform predictor on some seeds.
            seq_len: 6,
            options: 4,
            key_token_count: 16,
            label_noise_rate: 0.05,
            seed: 7,
        }),
        split: (2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0),
        model: ModelConfig {
            vocab_size: 64,
            d_emb: 16,
            hidden: vec![HiddenLayer {
                size: 32,
                activation: Activation::Relu,
            }],
            dropout_rate: 0.1,
        },
        train: TrainConfig {
            objective: ObjectiveKind::Alice,
            // A random inner start keeps the smoothness ascent alive (the
            // divergence between a point and itself has zero gradient, so
            // a single sign step from zero would never move), and a half-
            // radius step makes the training-time attack gentle enough
            // that every seed escapes the uniform-predictor plateau.
            adversarial: AdvConfig {
                init: DeltaInit::UniformBall,
                step_size: 0.025,
                ..AdvConfig::default()
            },
            learning_rate: 0.02,
            batch_size: 32,
            epochs: 16,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            eval_batch_size: 64,
            seed: 1,
        },
        attack: AdvConfig {
            epsilon: 0.05,
            step_size: 0.025,
            steps: 5,
            init: DeltaInit::Zero,
            ..AdvConfig::default()
        },
        objectives: vec![ObjectiveKind::Standard, ObjectiveKind::Alice],
        seeds: vec![1, 2, 3, 4, 5],
        output_dir: output_dir.into(),
    }
}

// ---------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------

/// Keys any subcommand may read from a `--config` file. One file can
/// drive several subcommands; each reads the keys it understands, but an
/// unknown key is always an error.
const KNOWN_KEYS: &[&str] = &[
    "activation",
    "alpha",
    "batch_size",
    "checkpoint",
    "clip_norm",
    "d_emb",
    "data",
    "data_seed",
    "dropout",
    "epochs",
    "epsilon",
    "eval_batch_size",
    "eval_epsilon",
    "eval_step_size",
    "eval_steps",
    "fd_step",
    "hidden",
    "init",
    "key_token_count",
    "label_noise_rate",
    "learning_rate",
    "num_examples",
    "objective",
    "objectives",
    "options",
    "out",
    "out_dir",
    "seed",
    "seeds",
    "seq_len",
    "split",
    "step_size",
    "steps",
    "task",
    "tolerance",
    "trials",
    "vocab_size",
    "warmup_fraction",
];

/// A parsed `--config` file: either a flat JSON object or `key=value`
/// lines (`#` comments and blank lines ignored). Values in the key=value
/// form are parsed as JSON where possible and fall back to strings.
#[derive(Debug, Default)]
struct FileConfig(BTreeMap<String, Value>);

impl FileConfig {
    fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let map = if trimmed.starts_with('{') {
            match serde_json::from_str::<Value>(text)? {
                Value::Object(m) => m.into_iter().collect(),
                _ => return Err(Error::Config("config JSON must be an object".into())),
            }
        } else {
            let mut map = BTreeMap::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(Error::Config(format!(
                        "config line {} is not key=value: {line:?}",
                        lineno + 1
                    )));
                };
                let value = value.trim();
                let parsed = serde_json::from_str::<Value>(value)
                    .unwrap_or_else(|_| Value::String(value.to_string()));
                map.insert(key.trim().to_string(), parsed);
            }
            map
        };
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            if map[key].is_object() {
                return Err(Error::Config(format!(
                    "config key {key:?} must be flat, not a nested object"
                )));
            }
        }
        Ok(FileConfig(map))
    }

    fn open(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn type_err(key: &str, want: &str, got: &Value) -> Error {
        Error::Config(format!("config key {key:?} must be {want}, got {got}"))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| Self::type_err(key, "a number", v)),
        }
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| Self::type_err(key, "a non-negative integer", v)),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(Self::type_err(key, "a string", v)),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.string(key)?.map(PathBuf::from))
    }

    /// An array of numbers, or a comma-separated string.
    fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_u64()
                        .map(|v| v as usize)
                        .ok_or_else(|| Self::type_err(key, "an array of integers", v))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(Value::String(s)) => parse_usize_csv(key, s).map(Some),
            Some(v) => Err(Self::type_err(key, "an integer array or comma list", v)),
        }
    }

    fn split(&self, key: &str) -> Result<Option<(f64, f64, f64)>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) if items.len() == 3 => {
                let mut parts = [0.0; 3];
                for (slot, item) in parts.iter_mut().zip(items) {
                    *slot = item
                        .as_f64()
                        .ok_or_else(|| Self::type_err(key, "three numbers", item))?;
                }
                Ok(Some((parts[0], parts[1], parts[2])))
            }
            Some(v) => Err(Self::type_err(key, "an array of three numbers", v)),
        }
    }

    /// `seeds` as either an explicit list or a replication count.
    fn seeds(&self, key: &str) -> Result<Option<SeedsSpec>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::Number(_)) => Ok(self.u64(key)?.map(SeedsSpec::Count)),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_u64()
                        .ok_or_else(|| Self::type_err(key, "integer seeds", v))
                })
                .collect::<Result<Vec<_>>>()
                .map(|list| Some(SeedsSpec::List(list))),
            Some(v) => Err(Self::type_err(key, "a count or an array of seeds", v)),
        }
    }
}

fn parse_usize_csv(what: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|part| !part.trim().is_empty())
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{what}: {part:?} is not an integer")))
        })
        .collect()
}

#[derive(Debug, Clone)]
enum SeedsSpec {
    Count(u64),
    List(Vec<u64>),
}

/// Flag beats file beats default.
fn pick<T>(flag: Option<T>, file: Result<Option<T>>, default: T) -> Result<T> {
    Ok(flag.or(file?).unwrap_or(default))
}

// ---------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "advtrain",
    version,
    about = "Adversarial training on synthetic multiple-choice tasks",
    disable_help_subcommand = true
)]
struct Cli {
    /// Seed for anything not given a more specific seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file (flat JSON object or key=value lines); flags override
    /// its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset file.
    Generate(GenerateArgs),
    /// Train one model; writes checkpoint, epoch log, and test report.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset file.
    Evaluate(EvaluateArgs),
    /// Run the objective-by-seed comparison matrix.
    Compare(Box<CompareArgs>),
    /// Finite-difference check of every autodiff op.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct DataFlags {
    /// Dataset file to load instead of generating.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Task kind: ranking or pairwise.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    num_examples: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Options per question (ranking) or candidates per question
    /// (pairwise).
    #[arg(long)]
    options: Option<usize>,
    #[arg(long)]
    key_token_count: Option<usize>,
    #[arg(long)]
    label_noise_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long)]
    d_emb: Option<usize>,
    /// Hidden layer sizes, comma-separated (e.g. "32" or "32,16").
    #[arg(long)]
    hidden: Option<String>,
    /// Activation for every hidden layer: relu or tanh.
    #[arg(long)]
    activation: Option<String>,
    /// Dropout rate in [0, 1).
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Debug, Args)]
struct AttackFlags {
    /// Perturbation radius (l-infinity).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Inner ascent step size.
    #[arg(long)]
    step_size: Option<f64>,
    /// Inner ascent step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Smoothness term weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Inner start point: zero or uniform.
    #[arg(long)]
    init: Option<String>,
}

#[derive(Debug, Args)]
struct OptimFlags {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Destination dataset file.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training objective: standard, adv, smart, or alice.
    #[arg(long)]
    objective: Option<String>,
    /// Output directory for checkpoint.json, log.jsonl, report.json.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    optim: OptimFlags,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Checkpoint file produced by `train`.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Dataset file to evaluate on (no splitting).
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Attack radius; omit for a clean-only report.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Groups per evaluation batch.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Comma-separated objectives (standard,adv,smart,alice).
    #[arg(long)]
    objectives: Option<String>,
    /// Number of replication seeds; seeds are consecutive from --seed
    /// (default base 1).
    #[arg(long)]
    seeds: Option<u64>,
    /// Output directory for runs/, summary.json, summary.csv.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    optim: OptimFlags,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Randomized trials per op.
    #[arg(long)]
    trials: Option<usize>,
    /// Relative-error tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Central-difference step.
    #[arg(long)]
    fd_step: Option<f64>,
    /// Emit the full report as JSON instead of text lines.
    #[arg(long)]
    json: bool,
}

/// Entry point for the binary: parses `args` (without argv[0]) and runs.
/// Returns the process exit code: 0 success, 1 runtime failure, 2 usage
/// or configuration error.
pub fn cli<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let argv = std::iter::once("advtrain".to_string()).chain(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let file = match &cli.config {
        Some(path) => match FileConfig::open(path) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        },
        None => FileConfig::default(),
    };
    let result = match cli.command {
        Command::Generate(ref args) => cmd_generate(args, &file, cli.seed),
        Command::Train(ref args) => cmd_train(args, &file, cli.seed),
        Command::Evaluate(ref args) => cmd_evaluate(args, &file, cli.seed),
        Command::Compare(ref args) => cmd_compare(args, &file, cli.seed),
        Command::Gradcheck(ref args) => cmd_gradcheck(args, &file, cli.seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidValue { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn resolve_dataset_spec(
    flags: &DataFlags,
    file: &FileConfig,
    seed: Option<u64>,
) -> Result<DatasetSpec> {
    let d = DatasetSpec::default();
    let task_kind = match flags.task.clone().or(file.string("task")?) {
        Some(s) => s.parse()?,
        None => d.task_kind,
    };
    Ok(DatasetSpec {
        task_kind,
        num_examples: pick(
            flags.num_examples,
            file.usize("num_examples"),
            d.num_examples,
        )?,
        vocab_size: pick(flags.vocab_size, file.usize("vocab_size"), d.vocab_size)?,
        seq_len: pick(flags.seq_len, file.usize("seq_len"), d.seq_len)?,
        options: pick(flags.options, file.usize("options"), d.options)?,
        key_token_count: pick(
            flags.key_token_count,
            file.usize("key_token_count"),
            d.key_token_count,
        )?,
        label_noise_rate: pick(
            flags.label_noise_rate,
            file.f64("label_noise_rate"),
            d.label_noise_rate,
        )?,
        seed: file.u64("data_seed")?.or(seed).unwrap_or(d.seed),
    })
}

/// Loads `--data` when given, otherwise generates from the resolved spec.
fn resolve_dataset(flags: &DataFlags, file: &FileConfig, seed: Option<u64>) -> Result<Dataset> {
    match flags.data.clone().or(file.path("data")?) {
        Some(path) => load(path),
        None => generate(&resolve_dataset_spec(flags, file, seed)?),
    }
}

fn resolve_model(flags: &ModelFlags, file: &FileConfig, vocab_size: usize) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let activation = match flags.activation.clone().or(file.string("activation")?) {
        Some(s) => s.parse()?,
        None => Activation::Relu,
    };
    let hidden = match flags.hidden.clone() {
        Some(s) => Some(parse_usize_csv("hidden", &s)?),
        None => file.usize_list("hidden")?,
    };
    let hidden = match hidden {
        Some(sizes) => sizes
            .into_iter()
            .map(|size| HiddenLayer { size, activation })
            .collect(),
        None => d.hidden,
    };
    Ok(ModelConfig {
        vocab_size,
        d_emb: pick(flags.d_emb, file.usize("d_emb"), d.d_emb)?,
        hidden,
        dropout_rate: pick(flags.dropout, file.f64("dropout"), d.dropout_rate)?,
    })
}

fn resolve_attack(flags: &AttackFlags, file: &FileConfig) -> Result<AdvConfig> {
    let d = AdvConfig::default();
    let init = match flags.init.clone().or(file.string("init")?) {
        Some(s) => s.parse()?,
        None => d.init,
    };
    Ok(AdvConfig {
        epsilon: pick(flags.epsilon, file.f64("epsilon"), d.epsilon)?,
        step_size: pick(flags.step_size, file.f64("step_size"), d.step_size)?,
        steps: pick(flags.steps, file.usize("steps"), d.steps)?,
        alpha: pick(flags.alpha, file.f64("alpha"), d.alpha)?,
        init,
        ..d
    })
}

fn resolve_train(
    objective_flag: &Option<String>,
    optim: &OptimFlags,
    adversarial: AdvConfig,
    file: &FileConfig,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let objective = match objective_flag.clone().or(file.string("objective")?) {
        Some(s) => s.parse()?,
        None => d.objective,
    };
    Ok(TrainConfig {
        objective,
        adversarial,
        learning_rate: pick(
            optim.learning_rate,
            file.f64("learning_rate"),
            d.learning_rate,
        )?,
        batch_size: pick(optim.batch_size, file.usize("batch_size"), d.batch_size)?,
        epochs: pick(optim.epochs, file.usize("epochs"), d.epochs)?,
        warmup_fraction: pick(
            optim.warmup_fraction,
            file.f64("warmup_fraction"),
            d.warmup_fraction,
        )?,
        clip_norm: pick(optim.clip_norm, file.f64("clip_norm"), d.clip_norm)?,
        eval_batch_size: pick(None, file.usize("eval_batch_size"), d.eval_batch_size)?,
        seed: seed.or(file.u64("seed")?).unwrap_or(d.seed),
    })
}

fn resolve_split(file: &FileConfig) -> Result<(f64, f64, f64)> {
    Ok(file.split("split")?.unwrap_or((0.8, 0.1, 0.1)))
}

/// Evaluation attack for `train` reports: explicit eval_* keys first,
/// otherwise derived from the training attack.
fn resolve_eval_attack(train_attack: &AdvConfig, file: &FileConfig) -> Result<Option<AdvConfig>> {
    let derived = eval_attack_from(train_attack);
    let epsilon = file.f64("eval_epsilon")?;
    let step_size = file.f64("eval_step_size")?;
    let steps = file.usize("eval_steps")?;
    if epsilon.is_none() && step_size.is_none() && steps.is_none() {
        return Ok(derived);
    }
    let base = derived.unwrap_or(AdvConfig {
        init: DeltaInit::Zero,
        ..AdvConfig::default()
    });
    let epsilon = epsilon.unwrap_or(base.epsilon);
    if epsilon == 0.0 {
        return Ok(None);
    }
    Ok(Some(AdvConfig {
        epsilon,
        step_size: step_size.unwrap_or(epsilon / 2.0),
        steps: steps.unwrap_or(5),
        ..base
    }))
}

fn cmd_generate(args: &GenerateArgs, file: &FileConfig, seed: Option<u64>) -> Result<i32> {
    let out = args
        .out
        .clone()
        .or(file.path("out")?)
        .ok_or_else(|| Error::Config("generate needs --out <PATH>".into()))?;
    let spec = resolve_dataset_spec(&args.data, file, seed)?;
    let dataset = generate(&spec)?;
    save(&dataset, &out)?;
    println!(
        "wrote {} {} example groups to {}",
        dataset.groups.len(),
        spec.task_kind,
        out.display()
    );
    Ok(0)
}

fn cmd_train(args: &TrainArgs, file: &FileConfig, seed: Option<u64>) -> Result<i32> {
    let out_dir = args
        .out_dir
        .clone()
        .or(file.path("out_dir")?)
        .unwrap_or_else(|| PathBuf::from("advtrain-run"));
    let dataset = resolve_dataset(&args.data, file, seed)?;
    let task_kind = dataset.spec.task_kind;
    let split_fractions = resolve_split(file)?;
    let (train_set, dev_set, test_set) = split(&dataset, split_fractions)?;
    let model = resolve_model(&args.model, file, dataset.spec.vocab_size)?;
    let attack = resolve_attack(&args.attack, file)?;
    let train_cfg = resolve_train(&args.objective, &args.optim, attack, file, seed)?;
    let eval_attack = resolve_eval_attack(&attack, file)?;

    fs::create_dir_all(&out_dir)?;
    let cell = CellConfig {
        data: dataset.spec.clone(),
        split: split_fractions,
        model: model.clone(),
        train: train_cfg,
        attack: eval_attack.unwrap_or(attack),
    };
    let hash = config_hash(&cell)?;
    let start = Instant::now();
    let params = init_params(&model, train_cfg.seed)?;
    let outcome = train(&params, task_kind, &train_set, &dev_set, &train_cfg)?;
    let report = evaluate(
        &outcome.params,
        task_kind,
        &test_set,
        eval_attack.as_ref(),
        train_cfg.eval_batch_size,
    )?;
    let record = RunRecord {
        objective: train_cfg.objective,
        seed: train_cfg.seed,
        best_epoch: outcome.best_epoch,
        report,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config_hash: hash,
    };
    outcome.params.save(out_dir.join("checkpoint.json"))?;
    write_jsonl(&out_dir.join("log.jsonl"), &outcome.log)?;
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    println!(
        "{} seed {}: best epoch {}, test accuracy {:.4}{}",
        record.objective,
        record.seed,
        record.best_epoch,
        record.report.accuracy,
        match record.report.robust_accuracy {
            Some(r) => format!(", robust {r:.4}"),
            None => String::new(),
        }
    );
    Ok(0)
}

fn cmd_evaluate(args: &EvaluateArgs, file: &FileConfig, seed: Option<u64>) -> Result<i32> {
    let _ = seed;
    let checkpoint = args
        .checkpoint
        .clone()
        .or(file.path("checkpoint")?)
        .ok_or_else(|| Error::Config("evaluate needs --checkpoint <PATH>".into()))?;
    let data_path = args
        .data
        .clone()
        .or(file.path("data")?)
        .ok_or_else(|| Error::Config("evaluate needs --data <PATH>".into()))?;
    let params = ModelParams::load(checkpoint)?;
    let dataset = load(data_path)?;
    let attack = match args.epsilon.or(file.f64("eval_epsilon")?) {
        None | Some(0.0) => None,
        Some(eps) => Some(AdvConfig {
            epsilon: eps,
            step_size: args
                .step_size
                .or(file.f64("eval_step_size")?)
                .unwrap_or(eps / 2.0),
            steps: args.steps.or(file.usize("eval_steps")?).unwrap_or(5),
            init: DeltaInit::Zero,
            ..AdvConfig::default()
        }),
    };
    let batch_size = pick(args.batch_size, file.usize("eval_batch_size"), 64)?;
    let report = evaluate(
        &params,
        dataset.spec.task_kind,
        &dataset.groups,
        attack.as_ref(),
        batch_size,
    )?;
    let text = serde_json::to_string_pretty(&report)?;
    match args.out.clone().or(file.path("out")?) {
        Some(path) => fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(0)
}

fn cmd_compare(args: &CompareArgs, file: &FileConfig, seed: Option<u64>) -> Result<i32> {
    let out_dir = args
        .out_dir
        .clone()
        .or(file.path("out_dir")?)
        .unwrap_or_else(|| PathBuf::from("advtrain-compare"));
    let objectives = match args.objectives.clone().or(file.string("objectives")?) {
        Some(list) => list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<ObjectiveKind>())
            .collect::<Result<Vec<_>>>()?,
        None => ObjectiveKind::ALL.to_vec(),
    };
    let seeds = match args.seeds {
        Some(count) => SeedsSpec::Count(count),
        None => file.seeds("seeds")?.unwrap_or(SeedsSpec::Count(5)),
    };
    let seeds = match seeds {
        SeedsSpec::List(list) => list,
        SeedsSpec::Count(n) => {
            let base = seed.or(file.u64("seed")?).unwrap_or(1);
            (base..base + n).collect()
        }
    };
    let attack = resolve_attack(&args.attack, file)?;
    let train_cfg = resolve_train(&None, &args.optim, attack, file, seed)?;
    let data = match args.data.data.clone().or(file.path("data")?) {
        Some(path) => DataSource::Path(path),
        None => DataSource::Spec(resolve_dataset_spec(&args.data, file, seed)?),
    };
    let vocab_size = match &data {
        DataSource::Spec(spec) => spec.vocab_size,
        DataSource::Path(path) => load(path)?.spec.vocab_size,
    };
    let cfg = ExperimentConfig {
        data,
        split: resolve_split(file)?,
        model: resolve_model(&args.model, file, vocab_size)?,
        train: train_cfg,
        attack: resolve_eval_attack(&attack, file)?.unwrap_or(attack),
        objectives,
        seeds,
        output_dir: out_dir,
    };
    let summary = compare(&cfg)?;
    print_summary_table(&summary);
    Ok(if summary.failures.is_empty() { 0 } else { 1 })
}

fn print_summary_table(summary: &CompareSummary) {
    println!(
        "{:<10} {:>4}  {:>8} {:>8}  {:>8} {:>8}  {:>8} {:>6}",
        "objective", "runs", "clean", "±std", "robust", "±std", "wall_s", "ratio"
    );
    for s in &summary.per_objective {
        println!(
            "{:<10} {:>4}  {:>8.4} {:>8.4}  {:>8.4} {:>8.4}  {:>8.2} {:>6}",
            s.objective.to_string(),
            s.runs,
            s.clean_mean,
            s.clean_std,
            s.robust_mean,
            s.robust_std,
            s.wall_clock_mean_seconds,
            match s.wall_clock_ratio_to_standard {
                Some(r) => format!("{r:.2}"),
                None => "-".to_string(),
            }
        );
    }
    for f in &summary.failures {
        println!("FAILED {}-{}: {}", f.objective, f.seed, f.message);
    }
    println!("outputs in {}", summary.config.output_dir.display());
}

fn cmd_gradcheck(args: &GradcheckArgs, file: &FileConfig, seed: Option<u64>) -> Result<i32> {
    let trials = pick(args.trials, file.usize("trials"), 100)?;
    let tolerance = pick(args.tolerance, file.f64("tolerance"), 1e-4)?;
    let fd_step = pick(args.fd_step, file.f64("fd_step"), 1e-5)?;
    let seed = seed.or(file.u64("seed")?).unwrap_or(7);
    let report = run_op_suite(trials, fd_step, tolerance, seed)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for entry in &report.entries {
            println!(
                "{} {:<24} max_error {:>12.3e} ({} trials)",
                if entry.passed { "pass" } else { "FAIL" },
                entry.name,
                entry.max_error,
                entry.trials
            );
        }
        let passed = report.entries.iter().filter(|e| e.passed).count();
        println!(
            "gradcheck: {passed}/{} ops within tolerance {tolerance}",
            report.entries.len()
        );
    }
    Ok(if report.all_passed() { 0 } else { 1 })
}
