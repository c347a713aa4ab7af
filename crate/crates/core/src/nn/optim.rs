use super::backward::Gradients;
use super::model::{Model, ModelSpec, ParamMask};
use super::tensor::Real;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum over a masked parameter set.
///
/// `v ← momentum·v + g; p ← p − lr·v`
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T = f32> {
    pub learning_rate: T,
    pub momentum: T,
    mask: ParamMask,
    /// One flat velocity buffer per parameter tensor, in declaration order.
    velocity: Vec<Vec<T>>,
}

fn slots(spec: &ModelSpec, mask: ParamMask) -> Vec<usize> {
    let mut out = Vec::new();
    let mut fan_in = spec.input_dim;
    for &w in &spec.hidden_dims {
        if mask == ParamMask::AllParams {
            out.push(w * fan_in);
            out.push(w);
        }
        out.push(w);
        out.push(w);
        fan_in = w;
    }
    if mask == ParamMask::AllParams {
        out.push(spec.num_classes * fan_in);
        out.push(spec.num_classes);
    }
    out
}

impl<T: Real> Sgd<T> {
    pub fn new(spec: &ModelSpec, learning_rate: T, momentum: T, mask: ParamMask) -> Result<Self> {
        if learning_rate.is_nan() || learning_rate <= T::zero() {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        let velocity = slots(spec, mask)
            .into_iter()
            .map(|n| vec![T::zero(); n])
            .collect();
        Ok(Self {
            learning_rate,
            momentum,
            mask,
            velocity,
        })
    }

    pub fn mask(&self) -> ParamMask {
        self.mask
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.mask != self.mask {
            return Err(Error::Internal(format!(
                "gradients computed with {:?} but optimizer uses {:?}",
                grads.mask, self.mask
            )));
        }
        if grads.blocks.len() != model.params().blocks.len() {
            return Err(Error::Internal("gradient block count mismatch".into()));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        let mut slot = self.velocity.iter_mut();
        let mut update = |param: &mut [T], grad: &[T]| -> Result<()> {
            let v = slot
                .next()
                .ok_or_else(|| Error::Internal("velocity slots exhausted".into()))?;
            if v.len() != param.len() || grad.len() != param.len() {
                return Err(Error::Internal("gradient shape mismatch".into()));
            }
            for ((p, vi), &g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = mu * *vi + g;
                *p = *p - lr * *vi;
            }
            Ok(())
        };

        let params = model.params_mut();
        for (block, g) in params.blocks.iter_mut().zip(&grads.blocks) {
            if self.mask == ParamMask::AllParams {
                let (gw, gb) = match (&g.weight, &g.bias) {
                    (Some(w), Some(b)) => (w, b),
                    _ => return Err(Error::Internal("missing weight gradients".into())),
                };
                update(block.linear.weight.data_mut(), gw.data())?;
                update(&mut block.linear.bias, gb)?;
            }
            update(&mut block.norm.gamma, &g.gamma)?;
            update(&mut block.norm.beta, &g.beta)?;
        }
        if self.mask == ParamMask::AllParams {
            let h = grads
                .head
                .as_ref()
                .ok_or_else(|| Error::Internal("missing head gradients".into()))?;
            update(params.head.weight.data_mut(), h.weight.data())?;
            update(&mut params.head.bias, &h.bias)?;
        }
        Ok(())
    }
}
