use super::forward::ForwardCache;
use super::model::{Model, NormMode, ParamMask};
use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

/// Gradients for one `[Linear → Norm → ReLU]` block.
///
/// `weight` and `bias` are `None` under [`ParamMask::AffineOnly`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<T = f32> {
    pub weight: Option<Tensor2<T>>,
    pub bias: Option<Vec<T>>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T = f32> {
    pub weight: Tensor2<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub mask: ParamMask,
    pub blocks: Vec<BlockGrads<T>>,
    /// Classifier gradients; `None` under [`ParamMask::AffineOnly`].
    pub head: Option<LinearGrads<T>>,
}

impl<T: Real> Gradients<T> {
    /// Flattened `[γ₀, β₀, γ₁, β₁, ..]` gradients.
    pub fn affine_flat(&self) -> Vec<T> {
        self.blocks
            .iter()
            .flat_map(|b| b.gamma.iter().chain(b.beta.iter()).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        let z = T::zero();
        self.blocks.iter().all(|b| {
            b.gamma.iter().chain(&b.beta).all(|&v| v == z)
                && b.weight
                    .as_ref()
                    .is_none_or(|w| w.data().iter().all(|&v| v == z))
                && b.bias.as_ref().is_none_or(|w| w.iter().all(|&v| v == z))
        }) && self
            .head
            .as_ref()
            .is_none_or(|h| h.weight.data().iter().chain(&h.bias).all(|&v| v == z))
    }
}

impl<T: Real> Model<T> {
    /// Exact gradients of a loss with respect to the masked parameter set,
    /// given `dL/dlogits` and the cache of the forward pass that produced
    /// the logits.
    ///
    /// In batch-statistics mode the dependence of the batch mean and variance
    /// on every row is differentiated; in running-statistics mode the
    /// normalization is a fixed per-feature affine map.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &Tensor2<T>,
        mask: ParamMask,
    ) -> Result<Gradients<T>> {
        let params = self.params();
        if cache.blocks.len() != params.blocks.len() {
            return Err(Error::Internal(format!(
                "cache has {} blocks, model has {}",
                cache.blocks.len(),
                params.blocks.len()
            )));
        }
        if dlogits.rows() != cache.head_input.rows() || dlogits.cols() != self.num_classes() {
            return Err(Error::Internal(format!(
                "dL/dlogits is {}x{}, expected {}x{}",
                dlogits.rows(),
                dlogits.cols(),
                cache.head_input.rows(),
                self.num_classes()
            )));
        }
        let n_rows = dlogits.rows();
        let n = T::from_usize(n_rows).expect("batch size fits");

        let head = match mask {
            ParamMask::AllParams => Some(LinearGrads {
                weight: dlogits.t_matmul(&cache.head_input),
                bias: dlogits.column_sums(),
            }),
            ParamMask::AffineOnly => None,
        };
        // Upstream gradient w.r.t. the current block's output.
        let mut upstream = dlogits.matmul(&params.head.weight);

        let mut grads = Vec::with_capacity(params.blocks.len());
        for (li, (block, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let width = block.norm.width();
            if upstream.cols() != width
                || bc.normalized.cols() != width
                || bc.inv_std.len() != width
            {
                return Err(Error::Internal(format!("block {li} cache width mismatch")));
            }
            // Through the ReLU gate.
            for (g, &on) in upstream.data_mut().iter_mut().zip(&bc.active) {
                if !on {
                    *g = T::zero();
                }
            }
            let dy = upstream;
            let mut dgamma = vec![T::zero(); width];
            let mut dbeta = vec![T::zero(); width];
            for r in 0..n_rows {
                let g = dy.row(r);
                let xh = bc.normalized.row(r);
                for j in 0..width {
                    dgamma[j] = dgamma[j] + g[j] * xh[j];
                    dbeta[j] = dbeta[j] + g[j];
                }
            }

            let needs_input_grad = li > 0 || mask == ParamMask::AllParams;
            let mut dh = Tensor2::zeros(n_rows, width);
            if needs_input_grad {
                match cache.mode {
                    NormMode::BatchStats => {
                        // dx̂ = dy·γ, then
                        // dh = inv_std/N · (N·dx̂ − Σ dx̂ − x̂·Σ dx̂·x̂)
                        let mut sum_dxh = vec![T::zero(); width];
                        let mut sum_dxh_xh = vec![T::zero(); width];
                        for r in 0..n_rows {
                            let g = dy.row(r);
                            let xh = bc.normalized.row(r);
                            for j in 0..width {
                                let d = g[j] * block.norm.gamma[j];
                                sum_dxh[j] = sum_dxh[j] + d;
                                sum_dxh_xh[j] = sum_dxh_xh[j] + d * xh[j];
                            }
                        }
                        for r in 0..n_rows {
                            let g = dy.row(r);
                            let xh = bc.normalized.row(r);
                            let out = dh.row_mut(r);
                            for j in 0..width {
                                let d = g[j] * block.norm.gamma[j];
                                out[j] = bc.inv_std[j] / n
                                    * (n * d - sum_dxh[j] - xh[j] * sum_dxh_xh[j]);
                            }
                        }
                    }
                    NormMode::RunningStats => {
                        for r in 0..n_rows {
                            let g = dy.row(r);
                            let out = dh.row_mut(r);
                            for j in 0..width {
                                out[j] = g[j] * block.norm.gamma[j] * bc.inv_std[j];
                            }
                        }
                    }
                }
            }

            let (dw, db) = match mask {
                ParamMask::AllParams => (Some(dh.t_matmul(&bc.input)), Some(dh.column_sums())),
                ParamMask::AffineOnly => (None, None),
            };
            upstream = if li > 0 {
                dh.matmul(&block.linear.weight)
            } else {
                Tensor2::zeros(0, 0)
            };
            grads.push(BlockGrads {
                weight: dw,
                bias: db,
                gamma: dgamma,
                beta: dbeta,
            });
        }
        grads.reverse();
        Ok(Gradients {
            mask,
            blocks: grads,
            head,
        })
    }
}
