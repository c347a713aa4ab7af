use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Tensor2;

/// One test sample. The label is held out from every model and is only
/// read by the metrics layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f32>,
    pub label: Option<u32>,
}

impl Sample {
    pub fn new(id: u64, features: Vec<f32>) -> Self {
        Self {
            id,
            features,
            label: None,
        }
    }

    pub fn labeled(id: u64, features: Vec<f32>, label: u32) -> Self {
        Self {
            id,
            features,
            label: Some(label),
        }
    }
}

/// Stacks sample features into a batch matrix.
pub fn features_tensor<'a, I>(samples: I) -> Result<Tensor2<f32>>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let rows: Vec<&[f32]> = samples.into_iter().map(|s| s.features.as_slice()).collect();
    Tensor2::from_rows(&rows)
}
