//! Central-difference gradient checks on f64 networks.

use cema::adapt::loss::{
    cross_entropy_loss, distillation_loss, log_softmax, weighted_entropy_loss, DistillWeights,
    LossGrad, TeacherTargets,
};
use cema::nn::{Gradients, Model, ModelSpec, NormMode, ParamMask, Tensor2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Probe step for the normalization scale and shift.
pub const H_AFFINE: f64 = 1e-3;
/// Weights feeding a batch-normalized unit make the loss strongly curved, so
/// at 1e-3 the O(h²) truncation term alone exceeds the tolerance for small
/// weight gradients; full-parameter checks probe closer.
pub const H_ALL: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    WeightedEntropy,
    Distill,
    CrossEntropy,
}

pub struct Case {
    pub model: Model<f64>,
    pub batch: Tensor2<f64>,
    mode: NormMode,
    kind: LossKind,
    weights: Vec<f64>,
    teacher: TeacherTargets<f64>,
    labels: Vec<usize>,
}

pub fn random_case(seed: u64, kind: LossKind, mode: NormMode) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=6)).collect();
    let input_dim = rng.random_range(2..=5);
    let classes = rng.random_range(2..=5);
    let rows = rng.random_range(4..=8);
    let mut model =
        Model::<f64>::init(ModelSpec::new(input_dim, hidden, classes), &mut rng).unwrap();
    for block in &mut model.params_mut().blocks {
        for g in &mut block.norm.gamma {
            *g = rng.random_range(0.5..1.5);
        }
        for b in &mut block.norm.beta {
            *b = rng.random_range(-0.3..0.3);
        }
        for m in &mut block.norm.running_mean {
            *m = rng.random_range(-0.5..0.5);
        }
        for v in &mut block.norm.running_var {
            *v = rng.random_range(0.5..2.0);
        }
    }
    let data = (0..rows * input_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let batch = Tensor2::from_vec(rows, input_dim, data).unwrap();
    let weights = (0..rows).map(|_| rng.random_range(0.3..2.5)).collect();
    let t_logits: Vec<f64> = (0..rows * classes)
        .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let t_logits = Tensor2::from_vec(rows, classes, t_logits).unwrap();
    let teacher = TeacherTargets {
        log_probs: log_softmax(&t_logits),
        labels: t_logits.iter_rows().map(cema::nn::argmax).collect(),
    };
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Case {
        model,
        batch,
        mode,
        kind,
        weights,
        teacher,
        labels,
    }
}

impl Case {
    fn loss(&self, logits: &Tensor2<f64>) -> LossGrad<f64> {
        match self.kind {
            LossKind::WeightedEntropy => weighted_entropy_loss(logits, &self.weights).unwrap(),
            LossKind::Distill => distillation_loss(
                logits,
                Some(&self.teacher),
                &self.weights,
                DistillWeights {
                    alpha: 3.0,
                    beta: 3.0,
                },
            )
            .unwrap(),
            LossKind::CrossEntropy => cross_entropy_loss(logits, &self.labels).unwrap(),
        }
    }

    fn value_and_pattern(&self, model: &Model<f64>) -> (f64, Vec<bool>) {
        let mut m = model.clone();
        let (logits, cache) = m.forward(&self.batch, self.mode).unwrap();
        (self.loss(&logits).value, cache.relu_pattern())
    }

    pub fn analytic(&self, mask: ParamMask) -> Gradients<f64> {
        let mut m = self.model.clone();
        let (logits, cache) = m.forward(&self.batch, self.mode).unwrap();
        let loss = self.loss(&logits);
        self.model.backward(&cache, &loss.dlogits, mask).unwrap()
    }
}

/// Every trainable scalar as (getter, setter) coordinates.
fn coordinates(model: &Model<f64>, mask: ParamMask) -> Vec<(usize, usize, usize)> {
    // (block or usize::MAX for head, tensor kind, index)
    let mut out = Vec::new();
    for (b, block) in model.params().blocks.iter().enumerate() {
        if mask == ParamMask::AllParams {
            out.extend((0..block.linear.weight.data().len()).map(|i| (b, 0, i)));
            out.extend((0..block.linear.bias.len()).map(|i| (b, 1, i)));
        }
        out.extend((0..block.norm.width()).map(|i| (b, 2, i)));
        out.extend((0..block.norm.width()).map(|i| (b, 3, i)));
    }
    if mask == ParamMask::AllParams {
        out.extend((0..model.params().head.weight.data().len()).map(|i| (usize::MAX, 0, i)));
        out.extend((0..model.params().head.bias.len()).map(|i| (usize::MAX, 1, i)));
    }
    out
}

fn slot(model: &mut Model<f64>, c: (usize, usize, usize)) -> &mut f64 {
    let p = model.params_mut();
    let (b, kind, i) = c;
    if b == usize::MAX {
        return match kind {
            0 => &mut p.head.weight.data_mut()[i],
            _ => &mut p.head.bias[i],
        };
    }
    let block = &mut p.blocks[b];
    match kind {
        0 => &mut block.linear.weight.data_mut()[i],
        1 => &mut block.linear.bias[i],
        2 => &mut block.norm.gamma[i],
        _ => &mut block.norm.beta[i],
    }
}

fn grad_at(g: &Gradients<f64>, c: (usize, usize, usize)) -> f64 {
    let (b, kind, i) = c;
    if b == usize::MAX {
        let h = g.head.as_ref().unwrap();
        return if kind == 0 {
            h.weight.data()[i]
        } else {
            h.bias[i]
        };
    }
    let bg = &g.blocks[b];
    match kind {
        0 => bg.weight.as_ref().unwrap().data()[i],
        1 => bg.bias.as_ref().unwrap()[i],
        2 => bg.gamma[i],
        _ => bg.beta[i],
    }
}

/// Relative error `|a − n| / max(|a|, |n|)`, with a 1e-6 floor for entries
/// that vanish analytically (pre-normalization biases under batch statistics).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Returns the worst relative error, or `None` when a ±h probe crosses a
/// ReLU kink (the loss is not differentiable across it).
pub fn check(case: &Case, mask: ParamMask, h: f64) -> Option<f64> {
    let analytic = case.analytic(mask);
    let (_, base_pattern) = case.value_and_pattern(&case.model);
    let mut worst: f64 = 0.0;
    for c in coordinates(&case.model, mask) {
        let mut plus = case.model.clone();
        *slot(&mut plus, c) += h;
        let mut minus = case.model.clone();
        *slot(&mut minus, c) -= h;
        let (lp, pp) = case.value_and_pattern(&plus);
        let (lm, pm) = case.value_and_pattern(&minus);
        if pp != base_pattern || pm != base_pattern {
            return None;
        }
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(grad_at(&analytic, c), numeric));
    }
    Some(worst)
}

/// Outcome of checking `wanted` differentiable configurations.
pub struct Survey {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// Checks `wanted` random configurations, skipping those that straddle a
/// ReLU kink.
pub fn survey(kind: LossKind, mode: NormMode, mask: ParamMask, h: f64, wanted: usize) -> Survey {
    let mut s = Survey {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    let mut seed = 0;
    while s.checked < wanted {
        seed += 1;
        let case = random_case(seed * 7919 + kind as u64, kind, mode);
        match check(&case, mask, h) {
            Some(e) => {
                s.worst = s.worst.max(e);
                s.checked += 1;
            }
            None => s.skipped += 1,
        }
        assert!(
            s.skipped < 4 * wanted,
            "too many configurations hit ReLU kinks"
        );
    }
    s
}
