//! Adaptation objectives and their exact gradients with respect to logits.
//!
//! Every loss here is a batch mean of per-sample terms scaled by a weight
//! that the caller computes beforehand and that is treated as a constant.

use crate::error::{Error, Result};
use crate::nn::{log_softmax_row, Real, Tensor2};

/// Confidence weight `exp(e_max_ref − entropy)`: 1 at the reference
/// entropy, larger for more confident samples.
pub fn sample_weight(entropy: f64, e_max_ref: f64) -> f64 {
    (e_max_ref - entropy).exp()
}

/// `KL(p ‖ q) = Σ p (ln p − ln q)` for probability vectors, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Value of a batch loss and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    /// Batch mean of the weighted per-sample terms.
    pub value: f64,
    /// Weighted per-sample terms.
    pub per_sample: Vec<f64>,
    pub dlogits: Tensor2<T>,
}

/// Teacher signal for distillation: log-probabilities and hard labels.
/// Both are constants with respect to the student.
#[derive(Debug, Clone)]
pub struct TeacherTargets<T> {
    pub log_probs: Tensor2<T>,
    pub labels: Vec<usize>,
}

/// Coefficients of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillWeights {
    pub alpha: f64,
    pub beta: f64,
}

fn check_weights<T: Real>(logits: &Tensor2<T>, weights: &[T]) -> Result<()> {
    if weights.len() != logits.rows() {
        return Err(Error::Internal(format!(
            "{} weights for {} rows",
            weights.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Internal("empty batch".into()));
    }
    Ok(())
}

/// `L = (1/N) Σᵢ wᵢ · E(pᵢ)` with `E(p) = −Σ p ln p`.
///
/// `∂E/∂z_k = −p_k (ln p_k + E)`.
pub fn weighted_entropy_loss<T: Real>(logits: &Tensor2<T>, weights: &[T]) -> Result<LossGrad<T>> {
    distillation_loss(
        logits,
        None,
        weights,
        DistillWeights {
            alpha: 0.0,
            beta: 0.0,
        },
    )
}

/// `L = (1/N) Σᵢ wᵢ · [α KL(pᵢ ‖ qᵢ) + β CE(pᵢ, ŷᵢ) + E(pᵢ)]`
/// where `p` is the student softmax, `q` the teacher softmax and `ŷ` the
/// teacher's hard label.
///
/// Per-logit gradient of each term:
/// `KL: p_k (ln p_k − ln q_k − KL)`, `CE: p_k − [k = ŷ]`,
/// `E: −p_k (ln p_k + E)`.
pub fn distillation_loss<T: Real>(
    logits: &Tensor2<T>,
    teacher: Option<&TeacherTargets<T>>,
    weights: &[T],
    coef: DistillWeights,
) -> Result<LossGrad<T>> {
    check_weights(logits, weights)?;
    let (n_rows, c) = (logits.rows(), logits.cols());
    if let Some(t) = teacher {
        if t.log_probs.rows() != n_rows || t.log_probs.cols() != c || t.labels.len() != n_rows {
            return Err(Error::Internal(
                "teacher targets do not match student batch".into(),
            ));
        }
        if t.labels.iter().any(|&l| l >= c) {
            return Err(Error::Internal("teacher label out of range".into()));
        }
    }
    let alpha = T::from_f64_lossy(coef.alpha);
    let beta = T::from_f64_lossy(coef.beta);
    let n = T::from_usize(n_rows).expect("batch size fits");

    let mut dlogits = Tensor2::zeros(n_rows, c);
    let mut per_sample = Vec::with_capacity(n_rows);
    for (r, &w) in weights.iter().enumerate() {
        let log_p = log_softmax_row(logits.row(r));
        let p: Vec<T> = log_p.iter().map(|v| v.exp()).collect();
        let ent: T = -p.iter().zip(&log_p).map(|(&pi, &li)| pi * li).sum::<T>();
        let g = dlogits.row_mut(r);
        let mut term = ent;
        for k in 0..c {
            g[k] = -p[k] * (log_p[k] + ent);
        }
        if let Some(t) = teacher {
            let log_q = t.log_probs.row(r);
            let label = t.labels[r];
            let kl: T = p
                .iter()
                .zip(&log_p)
                .zip(log_q)
                .map(|((&pi, &lp), &lq)| pi * (lp - lq))
                .sum();
            let ce = -log_p[label];
            term = term + alpha * kl + beta * ce;
            for k in 0..c {
                let onehot = if k == label { T::one() } else { T::zero() };
                g[k] = g[k] + alpha * p[k] * (log_p[k] - log_q[k] - kl) + beta * (p[k] - onehot);
            }
        }
        for gk in g.iter_mut() {
            *gk = *gk * w / n;
        }
        per_sample.push((w * term).as_f64());
    }
    let value = per_sample.iter().sum::<f64>() / n_rows as f64;
    Ok(LossGrad {
        value,
        per_sample,
        dlogits,
    })
}

/// Supervised cross-entropy `(1/N) Σᵢ −ln p_{yᵢ}`; used for pretraining.
pub fn cross_entropy_loss<T: Real>(logits: &Tensor2<T>, labels: &[usize]) -> Result<LossGrad<T>> {
    if labels.len() != logits.rows() || logits.rows() == 0 {
        return Err(Error::Internal(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    let c = logits.cols();
    if labels.iter().any(|&l| l >= c) {
        return Err(Error::Internal("label out of range".into()));
    }
    let n = T::from_usize(logits.rows()).expect("batch size fits");
    let mut dlogits = Tensor2::zeros(logits.rows(), c);
    let mut per_sample = Vec::with_capacity(logits.rows());
    for (r, &label) in labels.iter().enumerate() {
        let log_p = log_softmax_row(logits.row(r));
        per_sample.push((-log_p[label]).as_f64());
        for (k, g) in dlogits.row_mut(r).iter_mut().enumerate() {
            let onehot = if k == label { T::one() } else { T::zero() };
            *g = (log_p[k].exp() - onehot) / n;
        }
    }
    let value = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(LossGrad {
        value,
        per_sample,
        dlogits,
    })
}

/// Per-row log-softmax of a logit matrix.
pub fn log_softmax<T: Real>(logits: &Tensor2<T>) -> Tensor2<T> {
    let mut out = Tensor2::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r)
            .copy_from_slice(&log_softmax_row(logits.row(r)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weight_values() {
        assert_eq!(sample_weight(0.9, 0.9), 1.0);
        assert!((sample_weight(0.5, 1.5) - std::f64::consts::E).abs() < 1e-12);
        assert!((sample_weight(2.5, 1.5) - 0.36787944117144233).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_entropy_loss() {
        let t = Tensor2::<f64>::zeros(3, 5);
        let l = weighted_entropy_loss(&t, &[2.0, 2.0, 2.0]).unwrap();
        assert!((l.value - 2.0 * 5f64.ln()).abs() < 1e-12);
        // Uniform distribution is a stationary point of the entropy.
        assert!(l.dlogits.data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn aligned_teacher_gives_near_zero_loss() {
        let logits = Tensor2::<f64>::from_vec(2, 3, vec![40.0, 0.0, 0.0, 0.0, 0.0, 40.0]).unwrap();
        let teacher = TeacherTargets {
            log_probs: log_softmax(&logits),
            labels: vec![0, 2],
        };
        let l = distillation_loss(
            &logits,
            Some(&teacher),
            &[1.0, 1.0],
            DistillWeights {
                alpha: 3.0,
                beta: 3.0,
            },
        )
        .unwrap();
        assert!(l.value < 1e-15);
        assert!(l.dlogits.data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn zero_coefficients_reduce_to_weighted_entropy() {
        let logits = Tensor2::<f64>::from_vec(2, 3, vec![0.3, -1.0, 2.0, 1.0, 1.5, -0.2]).unwrap();
        let teacher = TeacherTargets {
            log_probs: log_softmax(&logits.map(|v| -v)),
            labels: vec![1, 0],
        };
        let w = [0.7, 1.9];
        let a = distillation_loss(
            &logits,
            Some(&teacher),
            &w,
            DistillWeights {
                alpha: 0.0,
                beta: 0.0,
            },
        )
        .unwrap();
        let b = weighted_entropy_loss(&logits, &w).unwrap();
        assert!((a.value - b.value).abs() < 1e-15);
        assert_eq!(a.dlogits, b.dlogits);
    }

    #[test]
    fn mismatched_weights_rejected() {
        let t = Tensor2::<f32>::zeros(3, 2);
        assert!(weighted_entropy_loss(&t, &[1.0]).is_err());
    }

    fn prob_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_on_self(
            (p, q) in (2usize..8).prop_flat_map(|c| (prob_vec(c), prob_vec(c)))
        ) {
            prop_assert!(kl_divergence(&p, &p).abs() < 1e-12);
            prop_assert!(kl_divergence(&p, &q) >= -1e-12);
        }
    }
}
