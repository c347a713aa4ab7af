use super::model::{Model, NormMode};
use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

/// Activations kept from a forward pass so that `backward` is exact.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    pub(crate) mode: NormMode,
    pub(crate) blocks: Vec<BlockCache<T>>,
    pub(crate) head_input: Tensor2<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    pub(crate) input: Tensor2<T>,
    pub(crate) normalized: Tensor2<T>,
    pub(crate) inv_std: Vec<T>,
    /// ReLU gate: true where the normalized-and-shifted value was positive.
    pub(crate) active: Vec<bool>,
}

impl<T: Real> ForwardCache<T> {
    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.head_input.rows()
    }

    /// Concatenated ReLU gates of every block. Two passes with equal
    /// patterns lie in the same linear region of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.active.iter().copied())
            .collect()
    }
}

fn check_finite<T: Real>(t: &Tensor2<T>, location: impl FnOnce() -> String) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: location(),
        })
    }
}

impl<T: Real> Model<T> {
    fn check_batch(&self, batch: &Tensor2<T>) -> Result<()> {
        if batch.rows() == 0 {
            return Err(Error::config("forward needs at least one row"));
        }
        if batch.cols() != self.spec().input_dim {
            return Err(Error::config(format!(
                "batch width {} does not match input_dim {}",
                batch.cols(),
                self.spec().input_dim
            )));
        }
        check_finite(batch, || "input batch".to_string())
    }

    /// Forward pass returning logits and the cache needed by `backward`.
    ///
    /// In [`NormMode::BatchStats`] each normalization layer uses the biased
    /// batch mean and variance and folds them into its running statistics as
    /// `(1 - m) * old + m * batch`.
    pub fn forward(
        &mut self,
        batch: &Tensor2<T>,
        mode: NormMode,
    ) -> Result<(Tensor2<T>, ForwardCache<T>)> {
        let (logits, cache, stats) = self.run(batch, mode, true)?;
        if mode == NormMode::BatchStats {
            let m = T::from_f64_lossy(self.spec().norm_momentum as f64);
            for (block, (mean, var)) in self.params_mut().blocks.iter_mut().zip(stats) {
                let norm = &mut block.norm;
                for j in 0..mean.len() {
                    norm.running_mean[j] = (T::one() - m) * norm.running_mean[j] + m * mean[j];
                    norm.running_var[j] = (T::one() - m) * norm.running_var[j] + m * var[j];
                }
            }
        }
        Ok((logits, cache.expect("cache requested")))
    }

    /// Logits under either normalization mode without touching the running
    /// statistics. Pure in `(params, batch)`.
    pub fn logits(&self, batch: &Tensor2<T>, mode: NormMode) -> Result<Tensor2<T>> {
        Ok(self.run(batch, mode, false)?.0)
    }

    /// Inference with running statistics. Pure in `(params, batch)`.
    pub fn infer(&self, batch: &Tensor2<T>) -> Result<Tensor2<T>> {
        self.logits(batch, NormMode::RunningStats)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        batch: &Tensor2<T>,
        mode: NormMode,
        keep_cache: bool,
    ) -> Result<(Tensor2<T>, Option<ForwardCache<T>>, Vec<(Vec<T>, Vec<T>)>)> {
        self.check_batch(batch)?;
        let eps = T::from_f64_lossy(self.spec().norm_eps as f64);
        let n = T::from_usize(batch.rows()).expect("batch size fits");

        let mut x = batch.clone();
        let mut caches = Vec::new();
        let mut stats = Vec::new();
        for (li, block) in self.params().blocks.iter().enumerate() {
            let mut h = x.matmul_t(&block.linear.weight);
            for r in 0..h.rows() {
                for (v, &b) in h.row_mut(r).iter_mut().zip(&block.linear.bias) {
                    *v = *v + b;
                }
            }
            check_finite(&h, || format!("block {li} linear output"))?;

            let width = h.cols();
            let norm = &block.norm;
            let (mean, var) = match mode {
                NormMode::BatchStats => {
                    let mean: Vec<T> = h.column_sums().into_iter().map(|s| s / n).collect();
                    let mut var = vec![T::zero(); width];
                    for row in h.iter_rows() {
                        for j in 0..width {
                            let d = row[j] - mean[j];
                            var[j] = var[j] + d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v = *v / n);
                    (mean, var)
                }
                NormMode::RunningStats => (norm.running_mean.clone(), norm.running_var.clone()),
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

            let mut normalized = h;
            let mut out = Tensor2::zeros(normalized.rows(), width);
            let mut active = if keep_cache {
                vec![false; normalized.rows() * width]
            } else {
                Vec::new()
            };
            for r in 0..normalized.rows() {
                let xr = normalized.row_mut(r);
                let or = out.row_mut(r);
                for j in 0..width {
                    let xh = (xr[j] - mean[j]) * inv_std[j];
                    xr[j] = xh;
                    let y = norm.gamma[j] * xh + norm.beta[j];
                    if y > T::zero() {
                        or[j] = y;
                        if keep_cache {
                            active[r * width + j] = true;
                        }
                    }
                }
            }
            check_finite(&out, || format!("block {li} normalization output"))?;
            if keep_cache {
                caches.push(BlockCache {
                    input: x,
                    normalized,
                    inv_std,
                    active,
                });
            }
            if mode == NormMode::BatchStats {
                stats.push((mean, var));
            }
            x = out;
        }

        let head = &self.params().head;
        let mut logits = x.matmul_t(&head.weight);
        for r in 0..logits.rows() {
            for (v, &b) in logits.row_mut(r).iter_mut().zip(&head.bias) {
                *v = *v + b;
            }
        }
        check_finite(&logits, || "classifier logits".to_string())?;
        let cache = keep_cache.then_some(ForwardCache {
            mode,
            blocks: caches,
            head_input: x,
        });
        Ok((logits, cache, stats))
    }
}
