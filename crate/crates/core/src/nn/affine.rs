use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{Error, Result};

/// Scale and shift of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub index: u16,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// The normalization-affine parameters of a model, tagged with a version.
/// This is the only part of a model that ever crosses the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParamSet {
    pub version: u64,
    pub layers: Vec<AffineLayer>,
}

impl AffineParamSet {
    pub fn len_reals(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.gamma.len() + l.beta.len())
            .sum()
    }
}

impl Model<f32> {
    pub fn extract_affine(&self, version: u64) -> AffineParamSet {
        let layers = self
            .params()
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| AffineLayer {
                index: i as u16,
                gamma: b.norm.gamma.clone(),
                beta: b.norm.beta.clone(),
            })
            .collect();
        AffineParamSet { version, layers }
    }

    /// Replaces every γ and β with the values in `set`. Validates the whole
    /// set first, so on error the model is untouched.
    pub fn apply_affine(&mut self, set: &AffineParamSet) -> Result<()> {
        let blocks = &self.params().blocks;
        if set.layers.len() != blocks.len() {
            return Err(Error::Incompatible(format!(
                "update has {} layers, model has {}",
                set.layers.len(),
                blocks.len()
            )));
        }
        for (pos, layer) in set.layers.iter().enumerate() {
            let idx = layer.index as usize;
            if idx != pos {
                return Err(Error::Incompatible(format!(
                    "layer {pos} carries index {idx}"
                )));
            }
            let width = blocks[idx].norm.width();
            if layer.gamma.len() != width || layer.beta.len() != width {
                return Err(Error::Incompatible(format!(
                    "layer {idx}: update widths ({}, {}) vs model width {width}",
                    layer.gamma.len(),
                    layer.beta.len()
                )));
            }
            if layer
                .gamma
                .iter()
                .chain(&layer.beta)
                .any(|v| !v.is_finite())
            {
                return Err(Error::Incompatible(format!(
                    "layer {idx} carries non-finite values"
                )));
            }
        }
        for (block, layer) in self.params_mut().blocks.iter_mut().zip(&set.layers) {
            block.norm.gamma.copy_from_slice(&layer.gamma);
            block.norm.beta.copy_from_slice(&layer.beta);
        }
        Ok(())
    }
}
