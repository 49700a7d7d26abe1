//! Convolutional autoencoders over sub-patch tensors.
//!
//! `Ae3d` convolves the `(7, 4, 4)` spatiotemporal volume with 3x3x3 kernels; `Ae2d` stacks
//! the timepoints into channels and convolves `(4, 4)` images with 3x3 kernels. Both use
//! unit stride and same padding, then a fully connected bottleneck, and a mirrored decoder
//! made of transposed convolutions with a linear output layer.

mod adam;
mod network;
mod train;

pub use adam::Adam;
pub use network::{Autoencoder, Geometry, Workspace};
pub use train::{
    encode_batch, load_checkpoint, prepare_input, save_checkpoint, train, LatentFeature,
    ModelMeta, TrainConfig, TrainHistory, TrainedModel,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{NUM_TIMEPOINTS, SUB_SIZE};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ae3d,
    Ae2d,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ae3d => "ae3d",
            ModelKind::Ae2d => "ae2d",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae3d" => Ok(ModelKind::Ae3d),
            "ae2d" => Ok(ModelKind::Ae2d),
            other => Err(Error::ConfigInvalid(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub kind: ModelKind,
    /// Variant channel count for `Ae3d`, `channels * 7` for `Ae2d`.
    pub in_channels: usize,
    pub timepoints: usize,
    pub height: usize,
    pub width: usize,
    pub conv_widths: Vec<usize>,
    pub latent_dim: usize,
}

impl AutoencoderSpec {
    /// Default architecture for a variant with `channels` channels.
    pub fn for_channels(kind: ModelKind, channels: usize) -> Self {
        AutoencoderSpec {
            kind,
            in_channels: match kind {
                ModelKind::Ae3d => channels,
                ModelKind::Ae2d => channels * NUM_TIMEPOINTS,
            },
            timepoints: NUM_TIMEPOINTS,
            height: SUB_SIZE,
            width: SUB_SIZE,
            conv_widths: vec![32, 64],
            latent_dim: 64,
        }
    }

    pub fn with_widths(mut self, conv_widths: Vec<usize>, latent_dim: usize) -> Self {
        self.conv_widths = conv_widths;
        self.latent_dim = latent_dim;
        self
    }

    /// Channels of the original sub-patch tensor.
    pub fn data_channels(&self) -> usize {
        match self.kind {
            ModelKind::Ae3d => self.in_channels,
            ModelKind::Ae2d => self.in_channels / self.timepoints,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.in_channels == 0 || self.latent_dim == 0 {
            return bad("in_channels and latent_dim must be positive");
        }
        if self.timepoints == 0 || self.height == 0 || self.width == 0 {
            return bad("input volume must be non-empty");
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return bad("conv_widths must be a non-empty list of positive widths");
        }
        if self.kind == ModelKind::Ae2d && !self.in_channels.is_multiple_of(self.timepoints) {
            return bad("ae2d in_channels must be a multiple of the timepoint count");
        }
        Ok(())
    }
}

/// Mean over `n` examples of the squared Euclidean reconstruction error.
///
/// `x` and `x_hat` hold the `n` examples back to back.
pub fn mse_loss<T: Scalar>(x: &[T], x_hat: &[T], n: usize) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} elements, reconstruction {}",
            x.len(),
            x_hat.len()
        )));
    }
    if n == 0 || !x.len().is_multiple_of(n) {
        return Err(Error::ShapeMismatch(format!(
            "{} elements do not split into {n} examples",
            x.len()
        )));
    }
    let sum: f64 = x
        .iter()
        .zip(x_hat)
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}
