use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

/// Architecture of a multilayer perceptron made of
/// `[Linear → Norm → ReLU]` blocks followed by a linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub norm_eps: f32,
    pub norm_momentum: f32,
}

pub const DEFAULT_NORM_EPS: f32 = 1e-5;
pub const DEFAULT_NORM_MOMENTUM: f32 = 0.1;

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            norm_eps: DEFAULT_NORM_EPS,
            norm_momentum: DEFAULT_NORM_MOMENTUM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(Error::config(format!("hidden layer {i} has zero width")));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::config(format!(
                "norm_eps must be positive, got {}",
                self.norm_eps
            )));
        }
        if !(self.norm_momentum > 0.0 && self.norm_momentum < 1.0) {
            return Err(Error::config(format!(
                "norm_momentum must lie in (0, 1), got {}",
                self.norm_momentum
            )));
        }
        Ok(())
    }

    /// Widths `[input, hidden.., classes]`.
    fn layer_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    /// Number of trainable reals: every weight, bias, scale and shift.
    pub fn parameter_count(&self) -> usize {
        let widths = self.layer_widths();
        let linear: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        linear + self.affine_count()
    }

    /// Number of normalization scale and shift entries.
    pub fn affine_count(&self) -> usize {
        self.hidden_dims.iter().map(|w| 2 * w).sum()
    }

    /// Reals stored in a checkpoint: trainable parameters plus running statistics.
    pub fn stored_reals(&self) -> usize {
        self.parameter_count() + self.affine_count()
    }
}

/// Which statistics the normalization layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch and fold them into
    /// the running averages.
    BatchStats,
    /// Normalize with the stored running averages; never mutates them.
    RunningStats,
}

/// Which parameters receive gradients and optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamMask {
    AffineOnly,
    AllParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    /// Stored as (out × in).
    pub weight: Tensor2<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock<T = f32> {
    pub linear: Linear<T>,
    pub norm: NormLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub blocks: Vec<DenseBlock<T>>,
    pub head: Linear<T>,
}

impl<T: Real> Linear<T> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor2::zeros(fan_out, fan_in),
            bias: vec![T::zero(); fan_out],
        }
    }

    fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64_lossy(rng.random_range(-limit..limit)))
            .collect();
        Self {
            weight: Tensor2::from_vec(fan_out, fan_in, data).expect("sized by construction"),
            bias: vec![T::zero(); fan_out],
        }
    }

    fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: cast_vec(&self.bias),
        }
    }
}

impl<T: Real> NormLayer<T> {
    fn identity(width: usize) -> Self {
        Self {
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    fn cast<U: Real>(&self) -> NormLayer<U> {
        NormLayer {
            gamma: cast_vec(&self.gamma),
            beta: cast_vec(&self.beta),
            running_mean: cast_vec(&self.running_mean),
            running_var: cast_vec(&self.running_var),
        }
    }
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect()
}

/// A model specification together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    /// Glorot-uniform weights, zero biases, identity normalization.
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let widths = spec.layer_widths();
        let n_hidden = spec.hidden_dims.len();
        let blocks = (0..n_hidden)
            .map(|i| DenseBlock {
                linear: Linear::glorot(widths[i], widths[i + 1], rng),
                norm: NormLayer::identity(widths[i + 1]),
            })
            .collect();
        let head = Linear::glorot(widths[n_hidden], widths[n_hidden + 1], rng);
        Ok(Self {
            spec,
            params: ModelParams { blocks, head },
        })
    }

    /// All weights and biases zero, identity normalization.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.layer_widths();
        let n_hidden = spec.hidden_dims.len();
        let blocks = (0..n_hidden)
            .map(|i| DenseBlock {
                linear: Linear::zeros(widths[i], widths[i + 1]),
                norm: NormLayer::identity(widths[i + 1]),
            })
            .collect();
        let head = Linear::zeros(widths[n_hidden], widths[n_hidden + 1]);
        Ok(Self {
            spec,
            params: ModelParams { blocks, head },
        })
    }

    /// Wraps existing parameters after checking every shape against `spec`.
    pub fn from_parts(spec: ModelSpec, params: ModelParams<T>) -> Result<Self> {
        spec.validate()?;
        let widths = spec.layer_widths();
        if params.blocks.len() != spec.hidden_dims.len() {
            return Err(Error::config(format!(
                "spec has {} hidden blocks, params have {}",
                spec.hidden_dims.len(),
                params.blocks.len()
            )));
        }
        let check_linear = |name: String, l: &Linear<T>, fan_in: usize, fan_out: usize| {
            if l.weight.rows() != fan_out || l.weight.cols() != fan_in || l.bias.len() != fan_out {
                return Err(Error::config(format!("{name} shape does not match spec")));
            }
            Ok(())
        };
        for (i, b) in params.blocks.iter().enumerate() {
            check_linear(
                format!("block {i} linear"),
                &b.linear,
                widths[i],
                widths[i + 1],
            )?;
            let w = widths[i + 1];
            let n = &b.norm;
            if [
                n.gamma.len(),
                n.beta.len(),
                n.running_mean.len(),
                n.running_var.len(),
            ]
            .iter()
            .any(|&l| l != w)
            {
                return Err(Error::config(format!(
                    "block {i} norm width does not match spec"
                )));
            }
            if n.running_var.iter().any(|&v| v < T::zero()) {
                return Err(Error::config(format!(
                    "block {i} has negative running variance"
                )));
            }
        }
        let last = widths.len() - 1;
        check_linear("head".into(), &params.head, widths[last - 1], widths[last])?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelSpec, ModelParams<T>) {
        (self.spec, self.params)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// The same model with every parameter converted to another scalar type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: ModelParams {
                blocks: self
                    .params
                    .blocks
                    .iter()
                    .map(|b| DenseBlock {
                        linear: b.linear.cast(),
                        norm: b.norm.cast(),
                    })
                    .collect(),
                head: self.params.head.cast(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(4, vec![8], 2).validate().is_ok());
        assert!(ModelSpec::new(4, vec![8], 1).validate().is_err());
        assert!(ModelSpec::new(4, vec![8, 0], 3).validate().is_err());
        let mut s = ModelSpec::new(4, vec![], 3);
        s.norm_eps = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn parameter_counts() {
        let s = ModelSpec::new(32, vec![64, 64], 10);
        let linear = 32 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10;
        assert_eq!(s.affine_count(), 256);
        assert_eq!(s.parameter_count(), linear + 256);
        assert_eq!(s.stored_reals(), linear + 512);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::<f32>::init(ModelSpec::new(10, vec![6], 3), &mut rng).unwrap();
        let limit = (6.0f32 / 16.0).sqrt();
        assert!(m.params().blocks[0]
            .linear
            .weight
            .data()
            .iter()
            .all(|w| w.abs() <= limit));
        assert!(m.params().blocks[0].linear.bias.iter().all(|&b| b == 0.0));
        assert_eq!(m.params().blocks[0].norm.gamma, vec![1.0; 6]);
    }

    #[test]
    fn from_parts_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::<f32>::init(ModelSpec::new(10, vec![6], 3), &mut rng).unwrap();
        let (_, params) = m.into_parts();
        assert!(Model::from_parts(ModelSpec::new(10, vec![7], 3), params.clone()).is_err());
        assert!(Model::from_parts(ModelSpec::new(10, vec![6], 3), params).is_ok());
    }
}
