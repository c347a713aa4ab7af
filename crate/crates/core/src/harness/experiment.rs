use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, ece_from_confidence, ECE_BINS};
use crate::adapt::{AdaptConfig, AdaptEngine};
use crate::cloud::{CloudCore, LoopbackUplink, StepRecord};
use crate::edge::{run_offline, run_stream, EdgeConfig, EdgeNode, EdgeRun, EdgeShared, Prediction};
use crate::error::{Error, Result};
use crate::filtration::{FilterStrategy, FiltrationConfig};
use crate::nn::{encode_checkpoint, AffineParamSet, Model};
use crate::sample::Sample;
use crate::wire::param_update_len;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Frozen edge model, no cloud.
    NoAdapt,
    /// Every sample uploaded.
    UploadAll,
    /// Upper entropy bound frozen at its initial value.
    StaticThreshold,
    /// Dynamic upper bound plus fixed lower bound.
    Cema,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::NoAdapt,
        Scenario::UploadAll,
        Scenario::StaticThreshold,
        Scenario::Cema,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::NoAdapt => "no-adapt",
            Scenario::UploadAll => "upload-all",
            Scenario::StaticThreshold => "static-threshold",
            Scenario::Cema => "cema",
        }
    }

    pub fn strategy(self) -> FilterStrategy {
        match self {
            Scenario::NoAdapt | Scenario::Cema => FilterStrategy::DynamicHighLow,
            Scenario::UploadAll => FilterStrategy::UploadAll,
            Scenario::StaticThreshold => FilterStrategy::FixedHigh,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub edge: EdgeConfig,
    pub adapt: AdaptConfig,
    pub filtration: FiltrationConfig,
    /// Replaces the scenario's filtration strategy.
    pub strategy: Option<FilterStrategy>,
    /// Seed of the cloud's replay draws.
    pub seed: u64,
    /// Free-form description of the stream, copied into the report.
    pub stream_label: String,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, num_classes: usize) -> Self {
        Self {
            scenario,
            edge: EdgeConfig::default(),
            adapt: AdaptConfig::desk_scale(),
            filtration: FiltrationConfig::new(num_classes),
            strategy: None,
            seed: 0,
            stream_label: String::new(),
        }
    }

    fn resolved_filtration(&self) -> FiltrationConfig {
        let mut f = self.filtration.clone();
        f.strategy = self.strategy.unwrap_or(self.scenario.strategy());
        f
    }
}

/// One row of results. Field order is the CSV column order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub strategy: String,
    pub stream: String,
    pub seed: u64,
    /// `ok` or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub samples: u64,
    pub accuracy: f64,
    pub ece: f64,
    pub uploads: u64,
    pub upload_fraction: f64,
    pub queue_drops: u64,
    pub steps: u64,
    pub final_version: u64,
    pub update_interval: u64,
    pub buffer_capacity: u64,
    /// Payload bytes of one parameter update.
    pub update_bytes: u64,
    /// Payload bytes of all parameter updates sent.
    pub param_payload_bytes: u64,
    /// Bytes of a full edge checkpoint.
    pub checkpoint_bytes: u64,
    pub upload_payload_bytes: u64,
    pub wall_time_s: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: RunReport,
    pub predictions: Vec<Prediction>,
    pub uploaded_ids: Vec<u64>,
    /// Affine parameters the edge held at the end of the stream.
    pub final_affine: AffineParamSet,
    pub steps: Vec<StepRecord>,
}

/// Runs one scenario over `stream` with an in-process cloud.
///
/// The edge and the cloud exchange wire-encoded messages through a
/// deterministic loopback: uploads leave after every inference batch and
/// the resulting updates reach the mailbox before the next batch. For fixed
/// inputs and seeds the outcome is bit-reproducible. Failures are reported
/// in the returned report rather than as an error.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    foundation: &Model<f32>,
    edge: &Model<f32>,
    stream: &[Sample],
) -> ExperimentOutcome {
    let started = Instant::now();
    let filtration = cfg.resolved_filtration();
    let mut report = RunReport {
        scenario: cfg.scenario.name().into(),
        strategy: serde_json::to_value(filtration.strategy)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default(),
        stream: cfg.stream_label.clone(),
        seed: cfg.seed,
        samples: stream.len() as u64,
        update_interval: cfg.edge.update_interval as u64,
        buffer_capacity: cfg.adapt.buffer_capacity as u64,
        checkpoint_bytes: encode_checkpoint(edge).len() as u64,
        update_bytes: param_update_len(&edge.spec().hidden_dims) as u64,
        ..RunReport::default()
    };
    let result = execute(cfg, filtration, foundation, edge, stream);
    report.wall_time_s = started.elapsed().as_secs_f64();
    match result {
        Ok((run, loop_stats, final_affine)) => {
            fill_metrics(&mut report, &run, stream);
            let (uploaded_ids, steps, param_bytes, upload_bytes) = loop_stats;
            report.steps = steps.len() as u64;
            report.param_payload_bytes = param_bytes;
            report.upload_payload_bytes = upload_bytes;
            report.status = "ok".into();
            ExperimentOutcome {
                report,
                predictions: run.predictions,
                uploaded_ids,
                final_affine,
                steps,
            }
        }
        Err(e) => {
            report.status = "failed".into();
            report.error = Some(e.to_string());
            ExperimentOutcome {
                report,
                predictions: Vec::new(),
                uploaded_ids: Vec::new(),
                final_affine: edge.extract_affine(0),
                steps: Vec::new(),
            }
        }
    }
}

type LoopStats = (Vec<u64>, Vec<StepRecord>, u64, u64);

fn execute(
    cfg: &ExperimentConfig,
    filtration: FiltrationConfig,
    foundation: &Model<f32>,
    edge: &Model<f32>,
    stream: &[Sample],
) -> Result<(EdgeRun, LoopStats, AffineParamSet)> {
    let mut node = EdgeNode::new(edge.clone(), filtration)?;
    if cfg.scenario == Scenario::NoAdapt {
        let run = run_offline(&mut node, stream, &cfg.edge)?;
        return Ok((
            run,
            (Vec::new(), Vec::new(), 0, 0),
            node.model().extract_affine(node.version()),
        ));
    }
    let engine = AdaptEngine::new(
        foundation.clone(),
        edge.clone(),
        cfg.adapt.clone(),
        cfg.seed,
    )?;
    let mut cloud = CloudCore::new(engine);
    let shared = EdgeShared::new(cfg.edge.queue_capacity, cfg.edge.update_interval);
    let mut link = LoopbackUplink::new(&mut cloud);
    let run = run_stream(&mut node, stream, &cfg.edge, &shared, &mut link)?;
    let stats = (
        link.uploaded_ids().to_vec(),
        link.steps().to_vec(),
        link.update_bytes(),
        link.upload_bytes(),
    );
    Ok((run, stats, node.model().extract_affine(node.version())))
}

fn fill_metrics(report: &mut RunReport, run: &EdgeRun, stream: &[Sample]) {
    let labels: Vec<u32> = stream.iter().map(|s| s.label.unwrap_or(u32::MAX)).collect();
    let preds: Vec<u32> = run.predictions.iter().map(|p| p.class).collect();
    report.accuracy = accuracy(&preds, &labels);
    let conf: Vec<f64> = run
        .predictions
        .iter()
        .map(|p| (p.confidence as f64).clamp(0.0, 1.0))
        .collect();
    let correct: Vec<bool> = preds.iter().zip(&labels).map(|(p, y)| p == y).collect();
    report.ece = ece_from_confidence(&conf, &correct, ECE_BINS).unwrap_or(f64::NAN);
    report.uploads = run.stats.uploads;
    report.upload_fraction = if stream.is_empty() {
        0.0
    } else {
        run.stats.uploads as f64 / stream.len() as f64
    };
    report.queue_drops = run.stats.drops;
    report.final_version = run.stats.final_version;
}

/// Writes `report.json` (array of reports) and `runs.csv` into `dir`.
pub fn write_reports(dir: impl AsRef<Path>, reports: &[RunReport]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    let mut w = csv::Writer::from_path(dir.join("runs.csv")).map_err(csv_err)?;
    for r in reports {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the rows of a `runs.csv` written by [`write_reports`].
pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<RunReport>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
