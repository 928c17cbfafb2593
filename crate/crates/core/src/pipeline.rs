//! End-to-end stages driven by an `ExperimentConfig`, plus run manifests.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{export_attention, AttentionMaps, AttentionSample, Model, Vocab};
use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic, ingest, split, training_examples, Split};
use crate::error::Result;
use crate::graph::{build_swing_graph, InteractionLog, SwingGraph};
use crate::inference::{clip_history, context_items, evaluate, EvalReport};
use crate::reasoning::{train, TrainReport};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub log: InteractionLog,
    pub split: Split,
    pub vocab: Vocab,
}

/// Reads or generates the log, filters it and splits it. The vocabulary
/// covers every item that survives filtering.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let log = match &cfg.data {
        Some(path) => ingest(path, cfg.min_interactions)?,
        None => generate_synthetic(&cfg.synth)?.0.preprocess(cfg.min_interactions)?,
    };
    let split = split(&log, cfg.split)?;
    let vocab = Vocab::new(log.item_set())?;
    Ok(Dataset { log, split, vocab })
}

/// Built from the training split only.
pub fn build_graph(cfg: &ExperimentConfig, data: &Dataset) -> Result<SwingGraph> {
    build_swing_graph(&data.split.train, &cfg.swing_params())
}

pub fn train_model(cfg: &ExperimentConfig, data: &Dataset, graph: &SwingGraph) -> Result<(Model<f64>, TrainReport)> {
    let mut model = Model::new(cfg.backbone_config(), data.vocab.clone())?;
    let examples = training_examples(&data.split.train, cfg.train_prefixes);
    let report = train(&mut model, &examples, &data.split.valid, graph, &cfg.reasoning_config())?;
    Ok((model, report))
}

pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &Model<f64>,
    data: &Dataset,
    graph: &SwingGraph,
) -> Result<EvalReport> {
    evaluate(model, &data.split.test, graph, &cfg.reasoning_config().inference())
}

/// Attention averaged over the first `samples` test users with `train_steps` reasoning tokens.
pub fn attention_maps(
    cfg: &ExperimentConfig,
    model: &Model<f64>,
    data: &Dataset,
    graph: &SwingGraph,
    samples: usize,
) -> Result<AttentionMaps> {
    let r = cfg.reasoning_config();
    let batch = data
        .split
        .test
        .iter()
        .take(samples)
        .map(|ex| {
            let history = clip_history(&ex.history, model.config().max_history).to_vec();
            let (_, ctx) = context_items(graph, &history, r.window, r.hops, r.max_candidates, r.use_context)?;
            Ok((ctx, history, r.train_steps))
        })
        .collect::<Result<Vec<AttentionSample>>>()?;
    export_attention(model, &batch)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub graph: SwingGraph,
    pub model: Model<f64>,
    pub train: TrainReport,
    pub eval: EvalReport,
    pub metrics_csv: Vec<u8>,
}

/// Data, graph, training and test evaluation in memory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let graph = build_graph(cfg, &data)?;
    let (model, train) = train_model(cfg, &data, &graph)?;
    let eval = evaluate_model(cfg, &model, &data, &graph)?;
    let mut metrics_csv = Vec::new();
    eval.write_csv(&mut metrics_csv)?;
    Ok(RunOutput { graph, model, train, eval, metrics_csv })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Config echo, seed, and content hashes of the files a stage read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            stage: stage.to_string(),
            seed: cfg.seed,
            config: cfg.to_text(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Writes `<stage>.manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let path = dir.as_ref().join(format!("{}.manifest.json", self.stage));
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// The config this stage ran with.
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config)
    }
}
