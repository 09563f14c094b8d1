//! Experiment protocols: single runs, encoding ablations, training-set
//! sparsity, injected noise and the local/global mixing sweep. Every
//! protocol produces an [`OutputRecord`] that is written as a CSV metrics
//! table plus a JSON snapshot of the spec that produced it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    inject_noise, load_interactions, split_by_ratio, synthetic_clusters, BipartiteGraph,
    InteractionDataset, NoiseSpec, Split, SplitSpec, SyntheticSpec,
};
use crate::encoding::EncodingFlags;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, RankingMetrics};
use crate::model::{PgtrConfig, PgtrModel};
use crate::train::{train, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Evaluate,
    Ablate,
    Sparsity,
    Noise,
    Lambda3,
    Encode,
    Params,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Evaluate => "evaluate",
            Self::Ablate => "ablate",
            Self::Sparsity => "sparsity",
            Self::Noise => "noise",
            Self::Lambda3 => "lambda3",
            Self::Encode => "encode",
            Self::Params => "params",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Self::Train,
            "evaluate" => Self::Evaluate,
            "ablate" => Self::Ablate,
            "sparsity" => Self::Sparsity,
            "noise" => Self::Noise,
            "lambda3" => Self::Lambda3,
            "encode" => Self::Encode,
            "params" => Self::Params,
            other => return Err(Error::InvalidArgument(format!("unknown command `{other}`"))),
        })
    }
}

/// Everything that determines an experiment's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub command: Command,
    /// Interaction file; the synthetic generator is used when absent.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub model: PgtrConfig,
    pub split: SplitSpec,
    /// Noise proportion for single runs; `0` means clean.
    pub noise: f64,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub seed: u64,
    /// Run independent sweep points concurrently.
    pub parallel: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            command: Command::Train,
            data: None,
            synthetic: SyntheticSpec::default(),
            model: PgtrConfig::default(),
            split: SplitSpec::default(),
            noise: 0.0,
            train: TrainConfig::default(),
            out: PathBuf::from("out"),
            seed: 2024,
            parallel: false,
        }
    }
}

impl ExperimentSpec {
    /// Pushes the master seed into every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.split.seed = seed;
        self.model.seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
        self
    }

    pub fn load_dataset(&self) -> Result<InteractionDataset> {
        match &self.data {
            Some(path) => load_interactions(path),
            None => synthetic_clusters(&self.synthetic),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub setting: String,
    pub recall: f64,
    pub ndcg: f64,
    /// Percent drop against the first row, for the noise protocol.
    pub recall_drop_pct: Option<f64>,
    pub ndcg_drop_pct: Option<f64>,
    pub val_recall: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub id: String,
    pub spec: ExperimentSpec,
    pub rows: Vec<MetricRow>,
    pub runtime_seconds: f64,
}

impl OutputRecord {
    /// Writes `<id>.csv` and `<id>.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{}.csv", self.id));
        let mut w = csv::Writer::from_path(&csv_path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{}.json", self.id));
        self.spec.save(&json_path)?;
        Ok((csv_path, json_path))
    }
}

/// Outcome of one train-and-test cycle.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub test: RankingMetrics,
    pub val_recall: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

/// Builds the graph from `graph_train`, trains a fresh model on it and
/// selects on the split's validation part.
pub fn fit(
    graph_train: &InteractionDataset,
    split: &Split,
    model_cfg: &PgtrConfig,
    train_cfg: &TrainConfig,
) -> Result<(PgtrModel, TrainOutcome)> {
    let graph = BipartiteGraph::build(graph_train)?;
    let mut model = PgtrModel::new(&graph, model_cfg)?;
    let outcome = train(&mut model, graph_train, &split.validation, train_cfg)?;
    Ok((model, outcome))
}

/// Trains as in [`fit`] and tests on the split's test part, masking
/// everything seen in training.
pub fn run_single(
    graph_train: &InteractionDataset,
    split: &Split,
    model_cfg: &PgtrConfig,
    train_cfg: &TrainConfig,
) -> Result<RunResult> {
    let (model, outcome) = fit(graph_train, split, model_cfg, train_cfg)?;
    let test = evaluate(
        &model,
        &[graph_train, &split.validation],
        &split.test,
        train_cfg.k,
    )?;
    Ok(RunResult {
        test,
        val_recall: outcome.best_val_recall,
        best_epoch: outcome.best_epoch,
        epochs: outcome.history.len(),
    })
}

pub fn row(setting: impl Into<String>, r: &RunResult) -> MetricRow {
    MetricRow {
        setting: setting.into(),
        recall: r.test.recall,
        ndcg: r.test.ndcg,
        recall_drop_pct: None,
        ndcg_drop_pct: None,
        val_recall: r.val_recall,
        best_epoch: r.best_epoch,
    }
}

/// Runs `points` through `f`, concurrently when asked. Output order always
/// follows `points`.
fn sweep<P, F>(parallel: bool, points: Vec<P>, f: F) -> Result<Vec<MetricRow>>
where
    P: Send + Sync,
    F: Fn(&P) -> Result<MetricRow> + Send + Sync,
{
    if parallel {
        points.par_iter().map(&f).collect()
    } else {
        points.iter().map(f).collect()
    }
}

pub fn finish(
    id: &str,
    spec: &ExperimentSpec,
    rows: Vec<MetricRow>,
    start: Instant,
) -> OutputRecord {
    OutputRecord {
        id: id.to_string(),
        spec: spec.clone(),
        rows,
        runtime_seconds: start.elapsed().as_secs_f64(),
    }
}

/// The split a spec describes, and the training set it trains on (the
/// split's training part, with noise added when the spec asks for it).
pub fn prepare(spec: &ExperimentSpec) -> Result<(InteractionDataset, Split, InteractionDataset)> {
    let data = spec.load_dataset()?;
    let split = split_by_ratio(&data, &spec.split)?;
    let train_set = if spec.noise > 0.0 {
        noisy(&split, &data, spec.noise, spec.seed)?
    } else {
        split.train.clone()
    };
    Ok((data, split, train_set))
}

/// One run with the spec as given.
pub fn run_train(spec: &ExperimentSpec) -> Result<OutputRecord> {
    let start = Instant::now();
    let (_, split, train_set) = prepare(spec)?;
    let r = run_single(&train_set, &split, &spec.model, &spec.train)?;
    Ok(finish("train", spec, vec![row("pgtr", &r)], start))
}

pub const ABLATION_LABELS: [&str; 6] = ["full", "-PL", "-DG", "-PR", "-TP", "-All"];

/// Encoding flags for an ablation row label.
pub fn ablation_flags(base: EncodingFlags, label: &str) -> Result<EncodingFlags> {
    let mut flags = base;
    match label {
        "full" => {}
        "-All" => flags = EncodingFlags::NONE,
        other => {
            let short = other
                .strip_prefix('-')
                .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation `{other}`")))?;
            flags.disable(&short.to_ascii_lowercase())?;
        }
    }
    Ok(flags)
}

pub fn run_ablation(spec: &ExperimentSpec) -> Result<OutputRecord> {
    let start = Instant::now();
    let data = spec.load_dataset()?;
    let split = split_by_ratio(&data, &spec.split)?;
    let rows = sweep(spec.parallel, ABLATION_LABELS.to_vec(), |label| {
        let mut cfg = spec.model.clone();
        cfg.encoding.flags = ablation_flags(cfg.encoding.flags, label)?;
        Ok(row(
            *label,
            &run_single(&split.train, &split, &cfg, &spec.train)?,
        ))
    })?;
    Ok(finish("ablate", spec, rows, start))
}

pub const SPARSITY_FRACTIONS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

pub fn run_sparsity(spec: &ExperimentSpec) -> Result<OutputRecord> {
    let start = Instant::now();
    let data = spec.load_dataset()?;
    let rows = sweep(spec.parallel, SPARSITY_FRACTIONS.to_vec(), |&fraction| {
        let split = split_by_ratio(
            &data,
            &SplitSpec {
                train_fraction: fraction,
                ..spec.split
            },
        )?;
        Ok(row(
            format!("{fraction}"),
            &run_single(&split.train, &split, &spec.model, &spec.train)?,
        ))
    })?;
    Ok(finish("sparsity", spec, rows, start))
}

pub const NOISE_LEVELS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

fn noisy(
    split: &Split,
    full: &InteractionDataset,
    proportion: f64,
    seed: u64,
) -> Result<InteractionDataset> {
    Ok(inject_noise(&split.train, full, &NoiseSpec { proportion, seed })?.data)
}

/// Percent decrease of `value` against `baseline`.
pub fn percent_drop(baseline: f64, value: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        (baseline - value) / baseline * 100.0
    }
}

pub fn run_noise(spec: &ExperimentSpec) -> Result<OutputRecord> {
    let start = Instant::now();
    let data = spec.load_dataset()?;
    let split = split_by_ratio(&data, &spec.split)?;
    let mut rows = sweep(spec.parallel, NOISE_LEVELS.to_vec(), |&level| {
        let train_set = if level == 0.0 {
            split.train.clone()
        } else {
            noisy(&split, &data, level, spec.seed)?
        };
        Ok(row(
            format!("{level}"),
            &run_single(&train_set, &split, &spec.model, &spec.train)?,
        ))
    })?;
    let (base_recall, base_ndcg) = (rows[0].recall, rows[0].ndcg);
    for r in &mut rows {
        r.recall_drop_pct = Some(percent_drop(base_recall, r.recall));
        r.ndcg_drop_pct = Some(percent_drop(base_ndcg, r.ndcg));
    }
    Ok(finish("noise", spec, rows, start))
}

/// `0, 0.1, ..., 1.0`.
pub fn lambda3_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn run_lambda3(spec: &ExperimentSpec) -> Result<OutputRecord> {
    let start = Instant::now();
    let data = spec.load_dataset()?;
    let split = split_by_ratio(&data, &spec.split)?;
    let rows = sweep(spec.parallel, lambda3_grid(), |&lambda3| {
        let cfg = PgtrConfig {
            lambda3,
            ..spec.model.clone()
        };
        Ok(row(
            format!("{lambda3}"),
            &run_single(&split.train, &split, &cfg, &spec.train)?,
        ))
    })?;
    Ok(finish("lambda3", spec, rows, start))
}
