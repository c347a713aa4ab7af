use crate::error::{Error, Result};

/// Default number of confidence bins.
pub const ECE_BINS: usize = 15;

/// Expected calibration error from per-sample probability vectors.
///
/// Confidence is the maximum probability and the prediction its index (ties
/// to the lowest index). Bins are equal-width over `[0, 1]`; bin `b` holds
/// confidences in `(b/B, (b+1)/B]`, with 0 placed in the first bin.
/// `ECE = Σ_b (n_b / n) · |acc_b − conf_b|`.
pub fn compute_ece<P: AsRef<[f64]>>(probs: &[P], labels: &[u32], bins: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::config(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut conf = Vec::with_capacity(probs.len());
    let mut correct = Vec::with_capacity(probs.len());
    for (p, &y) in probs.iter().zip(labels) {
        let p = p.as_ref();
        if p.is_empty() {
            return Err(Error::config("empty probability row"));
        }
        let k = crate::nn::argmax(p);
        conf.push(p[k]);
        correct.push(k as u32 == y);
    }
    ece_from_confidence(&conf, &correct, bins)
}

/// ECE from confidences and correctness flags, with the binning of
/// [`compute_ece`].
pub fn ece_from_confidence(confidence: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::config("ECE needs at least one bin"));
    }
    if confidence.len() != correct.len() {
        return Err(Error::config("confidence and correctness lengths differ"));
    }
    if confidence.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0f64; bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::config(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        hits[b] += ok as usize;
        conf_sum[b] += c;
    }
    let n = confidence.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predictions: &[u32], labels: &[u32]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / predictions.len() as f64
}
