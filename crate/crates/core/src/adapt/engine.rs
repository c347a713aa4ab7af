use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{ReplayBuffer, DEFAULT_BUFFER_CAPACITY};
use super::loss::{
    distillation_loss, log_softmax, sample_weight, weighted_entropy_loss, DistillWeights, LossGrad,
    TeacherTargets,
};
use crate::error::{Error, Result};
use crate::nn::{
    argmax, softmax_entropy, AffineParamSet, Model, NormMode, ParamMask, Sgd, Tensor2,
};
use crate::sample::{features_tensor, Sample};

/// Hyperparameters of the cloud-side adaptation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    /// Weight of the KL term.
    pub alpha: f32,
    /// Weight of the pseudo-label cross-entropy term.
    pub beta: f32,
    /// Samples per adaptation step (N).
    pub upload_batch: usize,
    /// Replay samples added to each edge distillation batch.
    pub replay_draw: usize,
    pub buffer_capacity: usize,
    /// Reference entropy inside the confidence weight; `None` means
    /// `0.4 · ln C`.
    pub e_max_ref: Option<f64>,
    /// Normalization statistics of the edge replica while distilling.
    /// Running statistics match how the deployed edge infers, so the
    /// transmitted scale and shift act on the same normalized activations.
    pub edge_norm: NormMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.00025,
            momentum: 0.9,
            alpha: 3.0,
            beta: 3.0,
            upload_batch: 32,
            replay_draw: 96,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            e_max_ref: None,
            edge_norm: NormMode::RunningStats,
        }
    }
}

impl AdaptConfig {
    /// Learning rate used with the small synthetic-task models.
    pub const DESK_SCALE_LEARNING_RATE: f32 = 0.02;

    /// Defaults with the learning rate raised for small MLPs on
    /// synthetic streams.
    pub fn desk_scale() -> Self {
        Self {
            learning_rate: Self::DESK_SCALE_LEARNING_RATE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("alpha and beta must be non-negative"));
        }
        if self.upload_batch == 0 {
            return Err(Error::config("upload batch must be at least 1"));
        }
        Ok(())
    }

    pub fn edge_batch(&self) -> usize {
        self.upload_batch + self.replay_draw
    }

    pub fn resolve_e_max_ref(&self, num_classes: usize) -> f64 {
        self.e_max_ref.unwrap_or(0.4 * (num_classes as f64).ln())
    }
}

fn check_loss<T>(stage: &'static str, loss: &LossGrad<T>, ids: &[u64]) -> Result<()> {
    if loss.value.is_finite() {
        return Ok(());
    }
    let bad = loss
        .per_sample
        .iter()
        .zip(ids)
        .filter(|(v, _)| !v.is_finite())
        .map(|(_, &id)| id)
        .collect();
    Err(Error::NonFiniteLoss {
        stage,
        sample_ids: bad,
    })
}

fn non_finite_forward<'a>(stage: &'static str, ids: &'a [u64]) -> impl FnOnce(Error) -> Error + 'a {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            stage,
            sample_ids: ids.to_vec(),
        },
        other => other,
    }
}

/// Confidence weights `exp(e_max_ref − E)` for the rows of `logits`.
pub fn confidence_weights(logits: &Tensor2<f32>, e_max_ref: f64) -> Result<Vec<f32>> {
    let (_, ent) = softmax_entropy(logits)?;
    Ok(ent
        .iter()
        .map(|&e| sample_weight(e as f64, e_max_ref) as f32)
        .collect())
}

/// Weighted entropy loss of `model` on `batch` with fixed weights, using
/// batch statistics. Does not touch running statistics.
pub fn weighted_entropy_value(
    model: &Model<f32>,
    batch: &Tensor2<f32>,
    weights: &[f32],
) -> Result<f64> {
    let logits = model.logits(batch, NormMode::BatchStats)?;
    Ok(weighted_entropy_loss(&logits, weights)?.value)
}

/// Result of one foundation-model step.
#[derive(Debug, Clone)]
pub struct FoundationStep {
    /// Loss before the update.
    pub loss: f64,
    /// The constant confidence weights used in the step.
    pub weights: Vec<f32>,
}

/// One SGD-momentum step of the foundation model on the confidence-weighted
/// entropy of `batch`, updating only normalization scale and shift and
/// normalizing with batch statistics. Weights come from the pre-step
/// entropies and carry no gradient.
pub fn adapt_foundation(
    foundation: &mut Model<f32>,
    opt: &mut Sgd<f32>,
    batch: &[Sample],
    e_max_ref: f64,
) -> Result<FoundationStep> {
    let ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
    let x = features_tensor(batch)?;
    let before = foundation.clone();
    let (logits, cache) = foundation
        .forward(&x, NormMode::BatchStats)
        .map_err(non_finite_forward("foundation adaptation", &ids))?;
    let weights = confidence_weights(&logits, e_max_ref)?;
    let loss = weighted_entropy_loss(&logits, &weights)?;
    if let Err(e) = check_loss("foundation adaptation", &loss, &ids) {
        *foundation = before;
        return Err(e);
    }
    let grads = foundation.backward(&cache, &loss.dlogits, ParamMask::AffineOnly)?;
    opt.step(foundation, &grads)?;
    Ok(FoundationStep {
        loss: loss.value,
        weights,
    })
}

/// Teacher argmax labels under batch statistics; ties go to the lowest class.
pub fn pseudo_labels(foundation: &Model<f32>, batch: &Tensor2<f32>) -> Result<Vec<usize>> {
    let logits = foundation.logits(batch, NormMode::BatchStats)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

/// Teacher outputs for a distillation batch: log-probabilities, hard labels
/// and confidence weights. The foundation model is only read.
pub fn teacher_targets(
    foundation: &Model<f32>,
    batch: &Tensor2<f32>,
    e_max_ref: f64,
) -> Result<(TeacherTargets<f32>, Vec<f32>)> {
    let logits = foundation.logits(batch, NormMode::BatchStats)?;
    let labels = logits.iter_rows().map(argmax).collect();
    let weights = confidence_weights(&logits, e_max_ref)?;
    Ok((
        TeacherTargets {
            log_probs: log_softmax(&logits),
            labels,
        },
        weights,
    ))
}

/// Result of one edge-model distillation step.
#[derive(Debug, Clone)]
pub struct EdgeStep {
    pub loss: f64,
    pub batch_size: usize,
    pub replayed: usize,
}

/// One SGD-momentum step of the edge model on the uploaded samples plus a
/// uniform replay draw, distilling from the (already adapted) foundation
/// model. Only the edge model's normalization scale and shift move.
#[allow(clippy::too_many_arguments)]
pub fn adapt_edge(
    edge: &mut Model<f32>,
    opt: &mut Sgd<f32>,
    foundation: &Model<f32>,
    uploaded: &[Sample],
    buffer: &ReplayBuffer,
    cfg: &AdaptConfig,
    e_max_ref: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EdgeStep> {
    let replay = buffer.draw(cfg.replay_draw, rng);
    let rows: Vec<&Sample> = uploaded.iter().chain(replay.iter().copied()).collect();
    if rows.is_empty() {
        return Err(Error::config("edge adaptation needs at least one sample"));
    }
    let ids: Vec<u64> = rows.iter().map(|s| s.id).collect();
    let x = features_tensor(rows.iter().copied())?;
    let (teacher, weights) = teacher_targets(foundation, &x, e_max_ref)
        .map_err(non_finite_forward("edge distillation", &ids))?;

    let before = edge.clone();
    let (logits, cache) = edge
        .forward(&x, cfg.edge_norm)
        .map_err(non_finite_forward("edge distillation", &ids))?;
    let coef = DistillWeights {
        alpha: cfg.alpha as f64,
        beta: cfg.beta as f64,
    };
    let loss = distillation_loss(&logits, Some(&teacher), &weights, coef)?;
    if let Err(e) = check_loss("edge distillation", &loss, &ids) {
        *edge = before;
        return Err(e);
    }
    let grads = edge.backward(&cache, &loss.dlogits, ParamMask::AffineOnly)?;
    opt.step(edge, &grads)?;
    Ok(EdgeStep {
        loss: loss.value,
        batch_size: rows.len(),
        replayed: replay.len(),
    })
}

/// Everything produced by one full cloud step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub update: AffineParamSet,
    pub foundation_loss: f64,
    pub edge_loss: f64,
    pub buffer_size: usize,
    pub edge_batch: usize,
}

/// Owns the foundation model, the edge replica, both optimizers and the
/// replay buffer, and runs the cloud adaptation step.
#[derive(Debug, Clone)]
pub struct AdaptEngine {
    foundation: Model<f32>,
    edge: Model<f32>,
    foundation_opt: Sgd<f32>,
    edge_opt: Sgd<f32>,
    buffer: ReplayBuffer,
    cfg: AdaptConfig,
    e_max_ref: f64,
    rng: ChaCha8Rng,
    version: u64,
}

impl AdaptEngine {
    pub fn new(
        foundation: Model<f32>,
        edge: Model<f32>,
        cfg: AdaptConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let (fs, es) = (foundation.spec(), edge.spec());
        if fs.num_classes != es.num_classes || fs.input_dim != es.input_dim {
            return Err(Error::config(format!(
                "foundation ({} -> {}) and edge ({} -> {}) disagree on input_dim or num_classes",
                fs.input_dim, fs.num_classes, es.input_dim, es.num_classes
            )));
        }
        let foundation_opt = Sgd::new(fs, cfg.learning_rate, cfg.momentum, ParamMask::AffineOnly)?;
        let edge_opt = Sgd::new(es, cfg.learning_rate, cfg.momentum, ParamMask::AffineOnly)?;
        let e_max_ref = cfg.resolve_e_max_ref(fs.num_classes);
        Ok(Self {
            foundation,
            edge,
            foundation_opt,
            edge_opt,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            cfg,
            e_max_ref,
            rng: ChaCha8Rng::seed_from_u64(seed),
            version: 0,
        })
    }

    pub fn foundation(&self) -> &Model<f32> {
        &self.foundation
    }

    pub fn edge(&self) -> &Model<f32> {
        &self.edge
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn e_max_ref(&self) -> f64 {
        self.e_max_ref
    }

    pub fn ingest(&mut self, batch: &[Sample]) {
        self.buffer.ingest(batch.iter().cloned());
    }

    /// Buffer ingest, foundation step, edge step; returns the new versioned
    /// affine parameters of the edge model. On a non-finite loss neither
    /// model changes and the version does not advance.
    pub fn step(&mut self, uploaded: &[Sample]) -> Result<StepOutcome> {
        self.ingest(uploaded);
        let snapshot = (self.foundation.clone(), self.foundation_opt.clone());
        let f = adapt_foundation(
            &mut self.foundation,
            &mut self.foundation_opt,
            uploaded,
            self.e_max_ref,
        )?;
        let e = adapt_edge(
            &mut self.edge,
            &mut self.edge_opt,
            &self.foundation,
            uploaded,
            &self.buffer,
            &self.cfg,
            self.e_max_ref,
            &mut self.rng,
        );
        let e = match e {
            Ok(e) => e,
            Err(err) => {
                (self.foundation, self.foundation_opt) = snapshot;
                return Err(err);
            }
        };
        self.version += 1;
        Ok(StepOutcome {
            update: self.edge.extract_affine(self.version),
            foundation_loss: f.loss,
            edge_loss: e.loss,
            buffer_size: self.buffer.len(),
            edge_batch: e.batch_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use rand_distr::{Distribution, StandardNormal};

    fn samples(n: usize, dim: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                Sample::new(
                    i as u64,
                    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
                )
            })
            .collect()
    }

    fn models(seed: u64) -> (Model<f32>, Model<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Model::init(ModelSpec::new(6, vec![16, 16], 4), &mut rng).unwrap(),
            Model::init(ModelSpec::new(6, vec![8], 4), &mut rng).unwrap(),
        )
    }

    #[test]
    fn degenerate_gamma_gives_uniform_loss() {
        let (mut f, _) = models(1);
        for b in &mut f.params_mut().blocks {
            b.norm.gamma.iter_mut().for_each(|g| *g = 0.0);
        }
        f.params_mut().head.bias.iter_mut().for_each(|b| *b = 0.0);
        let batch = samples(8, 6, 2);
        let mut opt = Sgd::new(f.spec(), 1e-3, 0.9, ParamMask::AffineOnly).unwrap();
        let e_ref = 0.4 * 4f64.ln();
        let step = adapt_foundation(&mut f, &mut opt, &batch, e_ref).unwrap();
        let h = sample_weight(4f64.ln(), e_ref);
        assert!((step.loss - h * 4f64.ln()).abs() < 1e-5, "{}", step.loss);
    }

    #[test]
    fn one_hot_predictions_barely_move() {
        let (mut f, _) = models(2);
        // Huge head bias: every prediction is class 0 with probability ~1.
        f.params_mut().head.bias[0] = 60.0;
        let batch = samples(8, 6, 3);
        let mut opt = Sgd::new(f.spec(), 0.00025, 0.9, ParamMask::AffineOnly).unwrap();
        let before = f.clone();
        let step = adapt_foundation(&mut f, &mut opt, &batch, 0.4 * 4f64.ln()).unwrap();
        assert!(step.loss < 1e-12);
        for (a, b) in f.params().blocks.iter().zip(&before.params().blocks) {
            for (x, y) in a.norm.gamma.iter().zip(&b.norm.gamma) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn affine_only_steps_leave_weights_bit_identical() {
        let (f, e) = models(3);
        let mut engine = AdaptEngine::new(
            f.clone(),
            e.clone(),
            AdaptConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        engine.step(&samples(32, 6, 4)).unwrap();
        for (model, orig) in [(engine.foundation(), &f), (engine.edge(), &e)] {
            for (a, b) in model.params().blocks.iter().zip(&orig.params().blocks) {
                assert_eq!(a.linear, b.linear);
            }
            assert_eq!(model.params().head, orig.params().head);
        }
        assert_ne!(
            engine.edge().params().blocks[0].norm.gamma,
            e.params().blocks[0].norm.gamma
        );
    }

    #[test]
    fn edge_step_reads_foundation_only() {
        let (f, mut e) = models(4);
        let cfg = AdaptConfig::default();
        let mut opt = Sgd::new(e.spec(), 0.01, 0.9, ParamMask::AffineOnly).unwrap();
        let mut buffer = ReplayBuffer::new(100);
        buffer.ingest(samples(50, 6, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = f.clone();
        let step = adapt_edge(
            &mut e,
            &mut opt,
            &f,
            &samples(32, 6, 6),
            &buffer,
            &cfg,
            0.55,
            &mut rng,
        )
        .unwrap();
        assert_eq!(f, before);
        assert_eq!(step.batch_size, 128);
        assert_eq!(step.replayed, 96);
    }

    #[test]
    fn empty_buffer_uses_uploaded_only() {
        let (f, mut e) = models(5);
        let cfg = AdaptConfig::default();
        let mut opt = Sgd::new(e.spec(), 0.01, 0.9, ParamMask::AffineOnly).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let step = adapt_edge(
            &mut e,
            &mut opt,
            &f,
            &samples(32, 6, 7),
            &ReplayBuffer::new(0),
            &cfg,
            0.55,
            &mut rng,
        )
        .unwrap();
        assert_eq!(step.batch_size, 32);
    }

    #[test]
    fn versions_increase_and_engine_is_deterministic() {
        let (f, e) = models(6);
        let cfg = AdaptConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let run = || {
            let mut engine = AdaptEngine::new(f.clone(), e.clone(), cfg.clone(), 42).unwrap();
            (0..4)
                .map(|i| engine.step(&samples(32, 6, 100 + i)).unwrap().update)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(
            a.iter().map(|u| u.version).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert_eq!(a, run());
    }

    #[test]
    fn pseudo_labels_follow_teacher_argmax() {
        let mut f = Model::<f32>::zeros(ModelSpec::new(2, vec![2], 3)).unwrap();
        f.params_mut().head.bias = vec![0.1, 0.7, 0.2];
        let x = Tensor2::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pseudo_labels(&f, &x).unwrap(), vec![1, 1]);
        f.params_mut().head.bias = vec![0.5, 0.5, 0.0];
        assert_eq!(pseudo_labels(&f, &x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn mismatched_models_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Model::init(ModelSpec::new(6, vec![4], 4), &mut rng).unwrap();
        let e = Model::init(ModelSpec::new(6, vec![4], 5), &mut rng).unwrap();
        assert!(AdaptEngine::new(f, e, AdaptConfig::default(), 0).is_err());
    }
}
