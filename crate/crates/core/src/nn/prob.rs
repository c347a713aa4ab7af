use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

/// Row-wise softmax and Shannon entropy (natural log).
///
/// Uses a max shift before exponentiating, so logits `z` and `z + c` give
/// identical results.
pub fn softmax_entropy<T: Real>(logits: &Tensor2<T>) -> Result<(Tensor2<T>, Vec<T>)> {
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            location: "logits passed to softmax".into(),
        });
    }
    let mut probs = Tensor2::zeros(logits.rows(), logits.cols());
    let mut entropy = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let z = logits.row(r);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        let p = probs.row_mut(r);
        let mut h = T::zero();
        for (pj, &zj) in p.iter_mut().zip(z) {
            let log_p = zj - max - log_sum;
            *pj = log_p.exp();
            h = h - *pj * log_p;
        }
        entropy.push(h.max(T::zero()));
    }
    Ok((probs, entropy))
}

/// Natural-log softmax of one row, with the same max shift.
pub fn log_softmax_row<T: Real>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let log_sum = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    z.iter().map(|&v| v - max - log_sum).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
