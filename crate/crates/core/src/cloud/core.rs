use log::{debug, error};
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptEngine, AffineParamSet};
use crate::error::Result;
use crate::sample::Sample;

/// One line of the per-step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub version: u64,
    /// Samples pooled when the step fired, before the batch was taken.
    pub pool_size: usize,
    pub foundation_loss: f64,
    pub edge_loss: f64,
    pub buffer_size: usize,
}

/// Totals reported when a cloud shuts down.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CloudReport {
    pub steps: u64,
    pub failed_steps: u64,
    /// Samples consumed by adaptation steps.
    pub samples_ingested: u64,
    /// Residual pooled samples that never filled a batch.
    pub samples_discarded: u64,
    pub final_version: u64,
    pub buffer_occupancy: usize,
}

/// Pools uploaded samples from every edge and runs one adaptation step per
/// full batch of `upload_batch` samples.
pub struct CloudCore {
    engine: AdaptEngine,
    pool: Vec<Sample>,
    report: CloudReport,
}

impl CloudCore {
    pub fn new(engine: AdaptEngine) -> Self {
        Self {
            engine,
            pool: Vec::new(),
            report: CloudReport::default(),
        }
    }

    pub fn engine(&self) -> &AdaptEngine {
        &self.engine
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn version(&self) -> u64 {
        self.engine.version()
    }

    /// Adds samples to the pool and runs every step the pool can fill.
    /// A step that fails on a non-finite loss is logged and skipped; its
    /// samples are not retried.
    pub fn submit(&mut self, samples: Vec<Sample>) -> Vec<(StepRecord, AffineParamSet)> {
        self.pool.extend(samples);
        let n = self.engine.config().upload_batch;
        let mut out = Vec::new();
        while self.pool.len() >= n {
            let pool_size = self.pool.len();
            let batch: Vec<Sample> = self.pool.drain(..n).collect();
            self.report.samples_ingested += n as u64;
            match self.step(&batch, pool_size) {
                Ok(r) => out.push(r),
                Err(e) => {
                    self.report.failed_steps += 1;
                    error!("adaptation step skipped: {e}");
                }
            }
        }
        out
    }

    fn step(&mut self, batch: &[Sample], pool_size: usize) -> Result<(StepRecord, AffineParamSet)> {
        let outcome = self.engine.step(batch)?;
        self.report.steps += 1;
        let record = StepRecord {
            step: self.report.steps,
            version: outcome.update.version,
            pool_size,
            foundation_loss: outcome.foundation_loss,
            edge_loss: outcome.edge_loss,
            buffer_size: outcome.buffer_size,
        };
        debug!("{}", serde_json::to_string(&record).unwrap_or_default());
        Ok((record, outcome.update))
    }

    /// Final totals; residual pooled samples are discarded.
    pub fn finish(&mut self) -> CloudReport {
        self.report.samples_discarded += self.pool.len() as u64;
        self.pool.clear();
        self.report.final_version = self.engine.version();
        self.report.buffer_occupancy = self.engine.buffer().len();
        self.report.clone()
    }
}
