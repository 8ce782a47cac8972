//! End-to-end experiments: data, split, federated training, aggregation for
//! the new user, streaming inference and metrics, repeated over seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, AdapterParams, ExportScaling, GateKind};
use crate::client::{ClientState, ClientUpdate, Sample, TrainTrace};
use crate::data::{
    generate_synthetic, make_split, read_fmeb, sample_partitions, EmbeddingDataset, FederatedSplit,
    SplitConfig, SplitPartitions, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, compute_metrics, ConfusionMatrix, MeanStd, Metrics};
use crate::numerics::{streams, EmbeddingVec, RngStream};
use crate::prototyping::{classify_stream, classify_text_only, InferenceConfig, PrototypeStore};
use crate::server::{adaptive_aggregate, run_federated_training, uniform_aggregate, AggregationReport};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Data,
    Split,
    Train,
    Aggregate,
    Infer,
    Metrics,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Aggregate => "aggregate",
            Stage::Infer => "infer",
            Stage::Metrics => "metrics",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Files { images: PathBuf, prompts: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// `None` resolves to the embedding dimension.
    pub hidden_dim: Option<usize>,
    pub gate: GateKind,
    /// Constant added to the output-layer bias at initialization. Large
    /// values saturate a sigmoid gate to the identity.
    pub gate_bias_init: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            hidden_dim: None,
            gate: GateKind::Sigmoid,
            gate_bias_init: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_adaptive_aggregation: bool,
    pub no_prototyping: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub alpha: f64,
    pub export_scaling: ExportScaling,
    /// Softmax temperature over ξ; 1 is the plain exponential weighting.
    pub aggregation_temperature: f64,
    pub ablation: Ablation,
    pub repeats: usize,
    /// Repeat `r` runs with seed `seed + r`.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            split: SplitConfig::default(),
            adapter: AdapterConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            alpha: 1.0,
            export_scaling: ExportScaling::Scaled,
            aggregation_temperature: 1.0,
            ablation: Ablation::default(),
            repeats: 5,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha must be finite and nonnegative"));
        }
        if !(self.aggregation_temperature > 0.0) {
            return Err(Error::config("aggregation_temperature must be positive"));
        }
        if self.adapter.hidden_dim == Some(0) {
            return Err(Error::config("adapter hidden_dim must be positive"));
        }
        if !self.adapter.gate_bias_init.is_finite() {
            return Err(Error::config("gate_bias_init must be finite"));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        self.split.validate()?;
        self.train.validate()?;
        self.inference.validate()
    }

    fn resolve(&mut self, dim: usize) {
        if self.adapter.hidden_dim.is_none() {
            self.adapter.hidden_dim = Some(dim);
        }
    }
}

/// Images, per-class prompts, and class names for one repeat.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub images: EmbeddingDataset,
    pub prompts: BTreeMap<usize, EmbeddingVec>,
}

pub fn load_data(source: &DataSource, seed: u64) -> Result<LoadedData> {
    match source {
        DataSource::Synthetic(cfg) => {
            let (images, prompts) = generate_synthetic(cfg, cfg.seed.unwrap_or(seed))?;
            Ok(LoadedData { images, prompts })
        }
        DataSource::Files { images, prompts } => {
            let images = read_fmeb(images)?;
            let prompt_file = crate::data::read_fmeb_with_dim(prompts, Some(images.dim))?;
            if prompt_file.class_names != images.class_names {
                return Err(Error::ClassSetMismatch(
                    "image and prompt files have different class tables".into(),
                ));
            }
            let prompts = prompt_file.to_prompt_map()?;
            Ok(LoadedData { images, prompts })
        }
    }
}

/// Everything the new user and the server need after training.
#[derive(Debug, Clone)]
pub struct TrainedFederation {
    pub seed: u64,
    pub data: LoadedData,
    pub split: FederatedSplit,
    pub partitions: SplitPartitions,
    pub global_adapter: AdapterParams,
    pub updates: Vec<ClientUpdate>,
    pub traces: Vec<Vec<TrainTrace>>,
}

fn samples(ds: &EmbeddingDataset, indices: &[usize]) -> Vec<Sample> {
    indices
        .iter()
        .map(|&i| Sample {
            embedding: ds.records[i].embedding.clone(),
            class: ds.records[i].class,
        })
        .collect()
}

/// Data, split, and all training rounds for one seed.
pub fn train_phase(cfg: &ExperimentConfig, seed: u64) -> StageResult<TrainedFederation> {
    let data = load_data(&cfg.data, seed).at(Stage::Data)?;
    let dim = data.images.dim;
    let split = make_split(data.images.num_classes(), &cfg.split, seed).at(Stage::Split)?;
    let partitions = sample_partitions(&data.images, &split, &cfg.split, seed).at(Stage::Split)?;

    let hidden = cfg.adapter.hidden_dim.unwrap_or(dim);
    let mut initial = init_adapter(&mut RngStream::new(seed, streams::ADAPTER_INIT), dim, hidden, cfg.adapter.gate)
        .at(Stage::Train)?;
    for b in initial.b2.iter_mut() {
        *b += cfg.adapter.gate_bias_init;
    }

    let mut clients = split
        .client_classes
        .iter()
        .enumerate()
        .map(|(k, classes)| {
            let prompts = classes.iter().map(|c| (*c, data.prompts[c].clone())).collect();
            ClientState::new(
                k,
                samples(&data.images, &partitions.client_train[k]),
                samples(&data.images, &partitions.client_val[k]),
                prompts,
                initial.clone(),
                cfg.alpha,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()
        .at(Stage::Train)?;
    let run = run_federated_training(&mut clients, initial, &cfg.train, cfg.export_scaling).at(Stage::Train)?;
    Ok(TrainedFederation {
        seed,
        data,
        split,
        partitions,
        global_adapter: run.global_adapter,
        updates: run.updates,
        traces: run.traces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrototypeSummary {
    pub steps: usize,
    pub accepted: usize,
    pub counts: Vec<usize>,
    pub centroids: Vec<Option<Vec<f64>>>,
}

impl From<PrototypeStore> for PrototypeSummary {
    fn from(store: PrototypeStore) -> Self {
        Self {
            steps: store.steps,
            accepted: store.total_accepted(),
            counts: store.counts,
            centroids: store.centroids,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepeatReport {
    pub seed: u64,
    /// Test classes as indices into the class table, in label order.
    pub unseen_classes: Vec<usize>,
    pub unseen_class_names: Vec<String>,
    pub num_test_samples: usize,
    pub metrics: Metrics,
    /// Unadapted text-prototype classification of the same test stream.
    pub zero_shot_metrics: Metrics,
    /// Accuracy on the held-out unseen validation portion.
    pub validation_accuracy: Option<f64>,
    pub epsilon: f64,
    pub aggregation: AggregationReport,
    pub prototypes: Option<PrototypeSummary>,
    /// `loss_traces[round][client]`
    pub loss_traces: Vec<Vec<TrainTrace>>,
}

fn predict(
    cfg: &ExperimentConfig,
    adapter: &AdapterParams,
    inputs: &[&EmbeddingVec],
    text: &[&EmbeddingVec],
) -> Result<(Vec<usize>, Option<PrototypeStore>)> {
    let adapted: Vec<Vec<f64>> = inputs
        .iter()
        .map(|z| adapter.forward(z).map(|f| f.adapted))
        .collect::<Result<_>>()?;
    if cfg.ablation.no_prototyping {
        Ok((classify_text_only(&adapted, text, &cfg.inference)?, None))
    } else {
        let out = classify_stream(&adapted, text, &cfg.inference)?;
        Ok((out.predictions, Some(out.store)))
    }
}

/// Aggregation for the new user, then streaming inference over the unseen
/// test portion.
pub fn infer_phase(cfg: &ExperimentConfig, fed: &TrainedFederation) -> StageResult<RepeatReport> {
    let unseen = &fed.split.unseen_classes;
    let label_of: BTreeMap<usize, usize> = unseen.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let text: Vec<&EmbeddingVec> = unseen.iter().map(|c| &fed.data.prompts[c]).collect();

    let aggregation = if cfg.ablation.no_adaptive_aggregation {
        uniform_aggregate(&fed.updates)
    } else {
        adaptive_aggregate(&fed.updates, &text, cfg.aggregation_temperature)
    }
    .at(Stage::Aggregate)?;
    let adapter = &aggregation.aggregated_adapter;

    let records = &fed.data.images.records;
    let gather = |idx: &[usize]| -> (Vec<&EmbeddingVec>, Vec<usize>) {
        idx.iter()
            .map(|&i| (&records[i].embedding, label_of[&records[i].class]))
            .unzip()
    };
    let (test_z, test_y) = gather(&fed.partitions.unseen_test);
    let (predictions, store) = predict(cfg, adapter, &test_z, &text).at(Stage::Infer)?;
    let zero_shot = classify_text_only(&test_z, &text, &cfg.inference).at(Stage::Infer)?;

    let validation_accuracy = if fed.partitions.unseen_val.is_empty() {
        None
    } else {
        let (val_z, val_y) = gather(&fed.partitions.unseen_val);
        let (val_pred, _) = predict(cfg, adapter, &val_z, &text).at(Stage::Infer)?;
        let hits = val_pred.iter().zip(&val_y).filter(|(p, y)| p == y).count();
        Some(hits as f64 / val_y.len() as f64)
    };

    let k = unseen.len();
    let metrics = ConfusionMatrix::from_predictions(k, &test_y, &predictions)
        .and_then(|cm| compute_metrics(&cm))
        .at(Stage::Metrics)?;
    let zero_shot_metrics = ConfusionMatrix::from_predictions(k, &test_y, &zero_shot)
        .and_then(|cm| compute_metrics(&cm))
        .at(Stage::Metrics)?;

    Ok(RepeatReport {
        seed: fed.seed,
        unseen_classes: unseen.clone(),
        unseen_class_names: unseen.iter().map(|c| fed.data.images.class_names[*c].clone()).collect(),
        num_test_samples: test_y.len(),
        metrics,
        zero_shot_metrics,
        validation_accuracy,
        epsilon: cfg.inference.epsilon(k),
        aggregation,
        prototypes: store.map(PrototypeSummary::from),
        loss_traces: fed.traces.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    /// Fully resolved configuration; rerunning it reproduces this report.
    pub config: ExperimentConfig,
    pub repeats: Vec<RepeatReport>,
    pub summary: BTreeMap<String, MeanStd>,
    pub zero_shot_summary: BTreeMap<String, MeanStd>,
    pub validation_accuracy: Option<MeanStd>,
}

impl ExperimentReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.summary["accuracy"].mean
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn resolved(cfg: &ExperimentConfig) -> StageResult<ExperimentConfig> {
    cfg.validate().at(Stage::Config)?;
    let mut cfg = cfg.clone();
    let dim = match &cfg.data {
        DataSource::Synthetic(s) => s.dim,
        DataSource::Files { .. } => load_data(&cfg.data, cfg.seed).at(Stage::Data)?.images.dim,
    };
    cfg.resolve(dim);
    Ok(cfg)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> StageResult<ExperimentReport> {
    let cfg = resolved(cfg)?;
    let repeats: Vec<RepeatReport> = (0..cfg.repeats as u64)
        .into_par_iter()
        .map(|r| {
            let fed = train_phase(&cfg, cfg.seed + r)?;
            infer_phase(&cfg, &fed)
        })
        .collect::<StageResult<_>>()?;
    Ok(summarize(cfg, repeats))
}

pub fn summarize(cfg: ExperimentConfig, repeats: Vec<RepeatReport>) -> ExperimentReport {
    let metrics: Vec<Metrics> = repeats.iter().map(|r| r.metrics).collect();
    let zero_shot: Vec<Metrics> = repeats.iter().map(|r| r.zero_shot_metrics).collect();
    let val: Vec<f64> = repeats.iter().filter_map(|r| r.validation_accuracy).collect();
    ExperimentReport {
        config: cfg,
        summary: aggregate_runs(&metrics),
        zero_shot_summary: aggregate_runs(&zero_shot),
        validation_accuracy: if val.len() == repeats.len() { MeanStd::of(&val) } else { None },
        repeats,
    }
}

/// The four combinations of the two ablation flags, full method first.
pub fn run_ablation(cfg: &ExperimentConfig) -> StageResult<Vec<(String, ExperimentReport)>> {
    let variants = [
        ("fed_mp", Ablation::default()),
        ("no_adaptive_aggregation", Ablation { no_adaptive_aggregation: true, no_prototyping: false }),
        ("no_prototyping", Ablation { no_adaptive_aggregation: false, no_prototyping: true }),
        ("no_adaptive_aggregation_no_prototyping", Ablation { no_adaptive_aggregation: true, no_prototyping: true }),
    ];
    variants
        .iter()
        .map(|(name, flags)| {
            let mut c = cfg.clone();
            c.ablation = *flags;
            run_experiment(&c).map(|r| (name.to_string(), r))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "values")]
pub enum SweepAxis {
    Shots(Vec<usize>),
    Clients(Vec<usize>),
    EpsilonFraction(Vec<f64>),
    /// Coarse grid at 0.1 over `[lo, hi]`, then 0.01 around the best
    /// validation accuracy.
    Alpha { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    pub best_alpha: Option<f64>,
}

fn hundredths(lo: f64, hi: f64) -> Result<(i64, i64)> {
    if !(lo >= 0.0) || !(hi >= lo) || !hi.is_finite() {
        return Err(Error::config(format!("invalid alpha range [{lo}, {hi}]")));
    }
    Ok(((lo * 100.0).round() as i64, (hi * 100.0).round() as i64))
}

pub fn run_sweep(cfg: &ExperimentConfig, axis: &SweepAxis) -> StageResult<SweepReport> {
    let point = |value: f64, c: ExperimentConfig| -> StageResult<SweepPoint> {
        Ok(SweepPoint {
            value,
            report: run_experiment(&c)?,
        })
    };
    let mut points = Vec::new();
    let mut best_alpha = None;
    match axis {
        SweepAxis::Shots(values) => {
            for &v in values {
                let mut c = cfg.clone();
                c.split.train_shots = v;
                points.push(point(v as f64, c)?);
            }
        }
        SweepAxis::Clients(values) => {
            for &v in values {
                let mut c = cfg.clone();
                c.split.num_clients = v;
                points.push(point(v as f64, c)?);
            }
        }
        SweepAxis::EpsilonFraction(values) => {
            for &v in values {
                let mut c = cfg.clone();
                c.inference.epsilon_fraction = v;
                points.push(point(v, c)?);
            }
        }
        SweepAxis::Alpha { lo, hi } => {
            let (lo, hi) = hundredths(*lo, *hi).at(Stage::Config)?;
            let mut evaluated = Vec::new();
            let mut eval = |h: i64, points: &mut Vec<SweepPoint>| -> StageResult<()> {
                if evaluated.contains(&h) {
                    return Ok(());
                }
                evaluated.push(h);
                let mut c = cfg.clone();
                c.alpha = h as f64 / 100.0;
                points.push(point(c.alpha, c)?);
                Ok(())
            };
            let mut h = lo;
            while h <= hi {
                eval(h, &mut points)?;
                h += 10;
            }
            let score = |p: &SweepPoint| p.report.validation_accuracy.map(|m| m.mean).unwrap_or(p.report.mean_accuracy());
            let coarse_best = best_by(&points, score);
            let centre = (coarse_best * 100.0).round() as i64;
            for h in (centre - 9).max(lo)..=(centre + 9).min(hi) {
                eval(h, &mut points)?;
            }
            best_alpha = Some(best_by(&points, score));
        }
    }
    Ok(SweepReport {
        axis: axis.clone(),
        points,
        best_alpha,
    })
}

/// Value of the highest-scoring point; ties go to the smallest value.
fn best_by(points: &[SweepPoint], score: impl Fn(&SweepPoint) -> f64) -> f64 {
    let mut best: Option<(&SweepPoint, f64)> = None;
    for p in points {
        let s = score(p);
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && b.value <= p.value) => Some((b, bs)),
            _ => Some((p, s)),
        };
    }
    best.map(|(p, _)| p.value).unwrap_or(0.0)
}

/// On-disk form of the training output: adapters in JSON, each client's
/// `T′` as a separate FMEB file next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub global_adapter: AdapterParams,
    pub clients: Vec<ManifestClient>,
    pub loss_traces: Vec<Vec<TrainTrace>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClient {
    pub client_id: usize,
    pub adapter_weights: AdapterParams,
    /// Relative to the manifest directory.
    pub prompts_file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_training(dir: &Path, cfg: &ExperimentConfig, fed: &TrainedFederation) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clients = Vec::new();
    for u in &fed.updates {
        let file = format!("client_{:03}.fmeb", u.client_id);
        crate::data::write_fmeb(&u.prompts_dataset()?, dir.join(&file))?;
        clients.push(ManifestClient {
            client_id: u.client_id,
            adapter_weights: u.adapter_weights.clone(),
            prompts_file: file,
        });
    }
    let manifest = TrainingManifest {
        config: cfg.clone(),
        seed: fed.seed,
        global_adapter: fed.global_adapter.clone(),
        clients,
        loss_traces: fed.traces.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_training(dir: &Path) -> Result<(TrainingManifest, Vec<ClientUpdate>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: TrainingManifest = serde_json::from_str(&text)?;
    let updates = manifest
        .clients
        .iter()
        .map(|c| {
            let ds = crate::data::read_fmeb_with_dim(dir.join(&c.prompts_file), Some(c.adapter_weights.dim()))?;
            ClientUpdate::from_parts(c.client_id, c.adapter_weights.clone(), &ds)
        })
        .collect::<Result<_>>()?;
    Ok((manifest, updates))
}

/// Trains once with `cfg.seed` and returns the resolved config with it.
pub fn run_training(cfg: &ExperimentConfig) -> StageResult<(ExperimentConfig, TrainedFederation)> {
    let cfg = resolved(cfg)?;
    let fed = train_phase(&cfg, cfg.seed)?;
    Ok((cfg, fed))
}

/// Inference from stored client updates. Data and split are rebuilt from
/// the manifest's configuration and seed.
pub fn run_inference(
    cfg: &ExperimentConfig,
    manifest: &TrainingManifest,
    updates: Vec<ClientUpdate>,
) -> StageResult<ExperimentReport> {
    let cfg = resolved(cfg)?;
    let seed = manifest.seed;
    let data = load_data(&cfg.data, seed).at(Stage::Data)?;
    let split = make_split(data.images.num_classes(), &cfg.split, seed).at(Stage::Split)?;
    let partitions = sample_partitions(&data.images, &split, &cfg.split, seed).at(Stage::Split)?;
    if updates.len() != split.client_classes.len() {
        return Err(StageError {
            stage: Stage::Config,
            source: Error::config(format!(
                "manifest holds {} clients, configuration implies {}",
                updates.len(),
                split.client_classes.len()
            )),
        });
    }
    let fed = TrainedFederation {
        seed,
        data,
        split,
        partitions,
        global_adapter: manifest.global_adapter.clone(),
        updates,
        traces: manifest.loss_traces.clone(),
    };
    let report = infer_phase(&cfg, &fed)?;
    let mut cfg = cfg;
    cfg.repeats = 1;
    cfg.seed = seed;
    Ok(summarize(cfg, vec![report]))
}
