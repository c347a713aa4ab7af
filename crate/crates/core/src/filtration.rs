//! Edge-side sample selection.
//!
//! A sample is uploaded when its prediction entropy lies strictly inside
//! `(e_min, e_max_t)`. The upper bound starts at `e_max_factor · ln C` and is
//! rescaled after every inference batch by the ratio of the running average
//! entropy to its previous value; the lower bound is fixed. An optional
//! redundancy filter rejects samples whose probability vector is too close
//! to a moving average of recently accepted ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the selection rule are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterStrategy {
    /// Every sample is uploaded.
    UploadAll,
    /// Upper bound only, frozen at its initial value.
    FixedHigh,
    /// Upper bound only, rescaled after every batch.
    DynamicHigh,
    /// Rescaled upper bound and fixed lower bound.
    DynamicHighLow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiltrationConfig {
    pub num_classes: usize,
    pub e_max_factor: f64,
    pub e_min_factor: f64,
    pub lambda: f64,
    pub strategy: FilterStrategy,
    pub redundancy_enabled: bool,
    pub redundancy_eps: f64,
    pub redundancy_decay: f64,
}

impl Default for FiltrationConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            e_max_factor: 0.4,
            e_min_factor: 0.02,
            lambda: 1.0,
            strategy: FilterStrategy::DynamicHighLow,
            redundancy_enabled: false,
            redundancy_eps: 0.05,
            redundancy_decay: 0.1,
        }
    }
}

impl FiltrationConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    pub fn with_strategy(mut self, strategy: FilterStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("filtration needs at least two classes"));
        }
        if !(0.0 < self.e_min_factor
            && self.e_min_factor < self.e_max_factor
            && self.e_max_factor < 1.0)
        {
            return Err(Error::config(format!(
                "need 0 < e_min_factor ({}) < e_max_factor ({}) < 1",
                self.e_min_factor, self.e_max_factor
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be positive"));
        }
        if self.redundancy_enabled {
            if !(0.0..1.0).contains(&self.redundancy_eps) {
                return Err(Error::config("redundancy_eps must lie in [0, 1)"));
            }
            if !(self.redundancy_decay > 0.0 && self.redundancy_decay < 1.0) {
                return Err(Error::config("redundancy_decay must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn ln_c(&self) -> f64 {
        (self.num_classes as f64).ln()
    }
}

/// Mutable thresholds and running statistics for one edge stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiltrationState {
    config: FiltrationConfig,
    /// Current upper bound.
    pub e_max_t: f64,
    pub e_min: f64,
    pub seen_count: u64,
    /// Sum of every observed entropy, uploaded or not.
    pub entropy_sum: f64,
    /// Running average after the previous batch; `None` before the first.
    pub e_avg_prev: Option<f64>,
    /// Moving average of accepted probability vectors.
    pub redundancy_avg: Option<Vec<f64>>,
}

impl FiltrationState {
    pub fn new(config: FiltrationConfig) -> Result<Self> {
        config.validate()?;
        let ln_c = config.ln_c();
        Ok(Self {
            e_max_t: config.e_max_factor * ln_c,
            e_min: config.e_min_factor * ln_c,
            seen_count: 0,
            entropy_sum: 0.0,
            e_avg_prev: None,
            redundancy_avg: None,
            config,
        })
    }

    pub fn config(&self) -> &FiltrationConfig {
        &self.config
    }

    /// Average entropy of every sample seen so far.
    pub fn e_avg(&self) -> Option<f64> {
        (self.seen_count > 0).then(|| self.entropy_sum / self.seen_count as f64)
    }

    /// Binary upload score: `e_min < entropy < e_max_t`, both strict, with
    /// the bounds the strategy leaves active.
    pub fn score(&self, entropy: f64) -> bool {
        let high = entropy < self.e_max_t;
        let low = entropy > self.e_min;
        match self.config.strategy {
            FilterStrategy::UploadAll => true,
            FilterStrategy::FixedHigh | FilterStrategy::DynamicHigh => high,
            FilterStrategy::DynamicHighLow => high && low,
        }
    }

    /// Folds a batch of entropies (all inferred samples) into the running
    /// average, then rescales `e_max_t` by `λ · avg_t / avg_{t-1}`. The first
    /// batch only records the average.
    pub fn update_threshold(&mut self, batch_entropies: &[f64]) {
        if batch_entropies.is_empty() {
            return;
        }
        self.entropy_sum += batch_entropies.iter().sum::<f64>();
        self.seen_count += batch_entropies.len() as u64;
        let avg = self.entropy_sum / self.seen_count as f64;
        let dynamic = matches!(
            self.config.strategy,
            FilterStrategy::DynamicHigh | FilterStrategy::DynamicHighLow
        );
        if let Some(prev) = self.e_avg_prev {
            if dynamic && prev > 0.0 {
                self.e_max_t = self.config.lambda * self.e_max_t * (avg / prev);
            }
        }
        self.e_avg_prev = Some(avg);
    }

    /// Redundancy filter. Passes when no average exists yet or when the
    /// cosine similarity to the average is below `1 − ε`; a passing sample
    /// is folded into the average. Always passes when disabled.
    pub fn redundancy_pass(&mut self, probs: &[f64]) -> bool {
        if !self.config.redundancy_enabled {
            return true;
        }
        let decay = self.config.redundancy_decay;
        match &mut self.redundancy_avg {
            None => {
                self.redundancy_avg = Some(probs.to_vec());
                true
            }
            Some(avg) => {
                if cosine_similarity(probs, avg) >= 1.0 - self.config.redundancy_eps {
                    return false;
                }
                for (m, &p) in avg.iter_mut().zip(probs) {
                    *m = (1.0 - decay) * *m + decay * p;
                }
                true
            }
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
