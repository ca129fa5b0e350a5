//! End-to-end runs: build, attach, train, evaluate and write artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, ModuleGraph};
use crate::checkpoint::{self, CheckpointScope, LoadMode};
use crate::config::RunConfig;
use crate::delta::attach_method;
use crate::error::{Error, Result};
use crate::harness::{evaluate, generate_dataset, train, write_metrics, Accuracy, Dataset, MetricsLog};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "delta.dfck";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    /// Trainable backbone scalars (delta modules plus unfrozen pretrained
    /// tensors; the head is not counted).
    pub trainable_count: usize,
    pub trainable_fraction: f64,
    pub final_top1: f64,
    pub final_top5: f64,
    pub wall_seconds: f64,
}

impl RunSummary {
    /// The summary with its one non-deterministic field cleared.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

pub struct RunOutcome {
    pub graph: ModuleGraph,
    pub dataset: Dataset,
    pub log: MetricsLog,
    pub summary: RunSummary,
}

/// The untrained graph with the config's method attached and its dataset.
pub fn prepare(config: &RunConfig) -> Result<(ModuleGraph, Dataset)> {
    config.validate()?;
    let mut graph = build_backbone(&config.backbone_config()?, config.seed)?;
    attach_method(&mut graph, &config.method, config.seed)?;
    Ok((graph, generate_dataset(&config.dataset)?))
}

pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let (mut graph, dataset) = prepare(config)?;
    let log = train(&mut graph, &dataset, &config.train_options())?;
    let acc = evaluate(&graph, &dataset.eval, config.batch_size)?;
    let inv = graph.parameter_inventory();
    let summary = RunSummary {
        method: config.method.label(),
        seed: config.seed,
        trainable_count: inv.trainable_backbone(),
        trainable_fraction: inv.trainable_fraction(),
        final_top1: acc.top1,
        final_top5: acc.top5,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome {
        graph,
        dataset,
        log,
        summary,
    })
}

#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub loss_csv: PathBuf,
    pub accuracy_csv: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::WriteFailed(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::WriteFailed(format!("{}: {e}", path.display())))
}

/// Write metrics CSVs, the summary, the resolved config and a checkpoint of
/// the tuned parameters into `dir`.
pub fn write_artifacts(config: &RunConfig, outcome: &RunOutcome, dir: &Path) -> Result<Artifacts> {
    let (loss_csv, accuracy_csv) = write_metrics(&outcome.log, dir)?;
    let summary = dir.join(SUMMARY_FILE);
    write_json(&summary, &outcome.summary)?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::save_weights(&outcome.graph, &ckpt, CheckpointScope::Trainable)?;
    Ok(Artifacts {
        dir: dir.to_path_buf(),
        loss_csv,
        accuracy_csv,
        summary,
        checkpoint: ckpt,
    })
}

/// Rebuild the config's graph from its seed, load tuned weights and
/// evaluate on the eval split.
pub fn evaluate_checkpoint(config: &RunConfig, path: &Path) -> Result<Accuracy> {
    let (mut graph, dataset) = prepare(config)?;
    checkpoint::load_weights(&mut graph, path, LoadMode::Trainable)?;
    evaluate(&graph, &dataset.eval, config.batch_size)
}
