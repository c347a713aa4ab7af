use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::accuracy;
use crate::adapt::cross_entropy_loss;
use crate::error::{Error, Result};
use crate::nn::{argmax, Model, ModelSpec, NormMode, ParamMask, Sgd};
use crate::sample::{features_tensor, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out accuracy below this aborts; 0 disables the check.
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            min_accuracy: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: Model<f32>,
    /// Mean cross-entropy of the last epoch, `NaN` with zero epochs.
    pub final_loss: f64,
    pub heldout_accuracy: f64,
}

fn labels_of(samples: &[Sample]) -> Result<Vec<u32>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::config(format!("sample {} has no label", s.id)))
        })
        .collect()
}

/// Accuracy of running-statistics inference on labeled samples.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<f64> {
    let labels = labels_of(samples)?;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(512) {
        let logits = model.infer(&features_tensor(chunk)?)?;
        preds.extend(logits.iter_rows().map(|r| argmax(r) as u32));
    }
    Ok(accuracy(&preds, &labels))
}

/// Supervised training of every parameter with batch-statistics forward
/// passes and mini-batch SGD with momentum. The learning rate follows a
/// cosine decay from `learning_rate` to zero over all steps.
pub fn pretrain(
    spec: ModelSpec,
    train: &[Sample],
    heldout: &[Sample],
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    if cfg.batch_size < 2 {
        return Err(Error::config("pretraining batch size must be at least 2"));
    }
    let train_labels = labels_of(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(spec, &mut rng)?;
    let mut opt = Sgd::new(
        model.spec(),
        cfg.learning_rate,
        cfg.momentum,
        ParamMask::AllParams,
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)).max(1);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            // A trailing batch of one has zero batch variance.
            if idx.len() < 2 {
                continue;
            }
            let x = features_tensor(idx.iter().map(|&i| &train[i]))?;
            let y: Vec<usize> = idx.iter().map(|&i| train_labels[i] as usize).collect();
            let (logits, cache) = model.forward(&x, NormMode::BatchStats)?;
            let loss = cross_entropy_loss(&logits, &y)?;
            if !loss.value.is_finite() {
                return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
            }
            let grads = model.backward(&cache, &loss.dlogits, ParamMask::AllParams)?;
            let progress = step as f64 / total_steps as f64;
            opt.learning_rate =
                (cfg.learning_rate as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
                    as f32;
            opt.step(&mut model, &grads)?;
            step += 1;
            loss_sum += loss.value;
            batches += 1;
        }
        final_loss = loss_sum / batches.max(1) as f64;
        info!("epoch {epoch}: loss {final_loss:.4}");
    }
    let heldout_accuracy = evaluate(&model, heldout)?;
    if heldout_accuracy < cfg.min_accuracy {
        return Err(Error::Training(format!(
            "held-out accuracy {:.2}% below required {:.2}% after {} epochs (last loss {final_loss:.4}, lr {}, {} training samples)",
            100.0 * heldout_accuracy,
            100.0 * cfg.min_accuracy,
            cfg.epochs,
            cfg.learning_rate,
            train.len()
        )));
    }
    Ok(Pretrained {
        model,
        final_loss,
        heldout_accuracy,
    })
}
