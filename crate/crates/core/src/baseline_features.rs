//! Feature matrices: raw flattened tensors, per-channel histograms, and autoencoder latents.
//!
//! On disk a matrix is `<stem>.f32` (headerless float32-le, `rows x dims`) plus
//! `<stem>.index.json` with per-row provenance in the same order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LatentFeature;
use crate::preprocess::{StoreRecord, SubPatchStore, NUM_TIMEPOINTS, SUB_PIXELS};
use crate::rawio;

pub const DEFAULT_BINS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMethod {
    Raw,
    Histogram,
    Latent,
}

impl fmt::Display for FeatureMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMethod::Raw => "raw",
            FeatureMethod::Histogram => "histogram",
            FeatureMethod::Latent => "latent",
        })
    }
}

impl FromStr for FeatureMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(FeatureMethod::Raw),
            "histogram" => Ok(FeatureMethod::Histogram),
            "latent" => Ok(FeatureMethod::Latent),
            other => Err(Error::ConfigInvalid(format!("unknown feature method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub method: FeatureMethod,
    pub dims: usize,
    /// Row-major `rows x dims`.
    pub values: Vec<f64>,
    pub provenance: Vec<StoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureIndex {
    method: FeatureMethod,
    rows: usize,
    dims: usize,
    records: Vec<StoreRecord>,
}

impl FeatureMatrix {
    pub fn new(
        method: FeatureMethod,
        dims: usize,
        values: Vec<f64>,
        provenance: Vec<StoreRecord>,
    ) -> Result<Self> {
        if values.len() != dims * provenance.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} rows of {dims} dims",
                values.len(),
                provenance.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite feature value".into()));
        }
        Ok(FeatureMatrix {
            method,
            dims,
            values,
            provenance,
        })
    }

    pub fn rows(&self) -> usize {
        self.provenance.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn field_ids(&self) -> Vec<u32> {
        self.provenance.iter().map(|r| r.field_id).collect()
    }

    /// Rounds every value to float32, the precision of the on-disk format.
    pub fn to_storage_precision(mut self) -> Self {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        self
    }

    pub fn from_latents(latents: &[LatentFeature], store: &SubPatchStore) -> Result<Self> {
        if latents.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} latent vectors for {} store records",
                latents.len(),
                store.len()
            )));
        }
        let dims = latents.first().map_or(0, |l| l.z.len());
        let values = latents
            .iter()
            .flat_map(|l| l.z.iter().map(|&v| v as f64))
            .collect();
        Self::new(FeatureMethod::Latent, dims, values, store.records.clone())
    }
}

/// Flattened tensor in `[t][c][h][w]` order.
pub fn raw_features(tensor: &[f32]) -> Vec<f64> {
    tensor.iter().map(|&v| v as f64).collect()
}

/// Bin of `v` among `bins` equal bins over `[0, 1)`; out-of-range values clamp to the
/// first or last bin.
pub fn histogram_bin(v: f64, bins: usize) -> usize {
    if v <= 0.0 {
        0
    } else {
        ((v * bins as f64).floor() as usize).min(bins - 1)
    }
}

/// Per-channel normalised histograms pooled over all timepoints and pixels, concatenated
/// channel by channel.
pub fn histogram_features(tensor: &[f32], channels: usize, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::ConfigInvalid(format!("histogram bins {bins} < 2")));
    }
    let per_t = channels * SUB_PIXELS;
    if channels == 0 || tensor.len() != NUM_TIMEPOINTS * per_t {
        return Err(Error::ShapeMismatch(format!(
            "tensor of {} values is not (7, {channels}, 4, 4)",
            tensor.len()
        )));
    }
    let mut counts = vec![0usize; channels * bins];
    for t in 0..NUM_TIMEPOINTS {
        for c in 0..channels {
            let start = t * per_t + c * SUB_PIXELS;
            for &v in &tensor[start..start + SUB_PIXELS] {
                counts[c * bins + histogram_bin(v as f64, bins)] += 1;
            }
        }
    }
    let pooled = (NUM_TIMEPOINTS * SUB_PIXELS) as f64;
    Ok(counts.into_iter().map(|n| n as f64 / pooled).collect())
}

pub fn raw_feature_matrix(store: &SubPatchStore) -> Result<FeatureMatrix> {
    let values = (0..store.len()).flat_map(|i| raw_features(store.tensor(i))).collect();
    FeatureMatrix::new(
        FeatureMethod::Raw,
        store.record_len(),
        values,
        store.records.clone(),
    )
}

pub fn histogram_feature_matrix(store: &SubPatchStore, bins: usize) -> Result<FeatureMatrix> {
    let mut values = Vec::with_capacity(store.len() * store.channels * bins);
    for i in 0..store.len() {
        values.extend(histogram_features(store.tensor(i), store.channels, bins)?);
    }
    FeatureMatrix::new(
        FeatureMethod::Histogram,
        store.channels * bins,
        values,
        store.records.clone(),
    )
}

pub fn feature_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.f32")),
        dir.join(format!("{stem}.index.json")),
    )
}

pub fn save_features(features: &FeatureMatrix, dir: &Path, stem: &str) -> Result<()> {
    rawio::ensure_dir(dir)?;
    let (data, index) = feature_paths(dir, stem);
    let as_f32: Vec<f32> = features.values.iter().map(|&v| v as f32).collect();
    rawio::write_bytes(&data, &rawio::encode_f32(&as_f32))?;
    rawio::write_json(
        &index,
        &FeatureIndex {
            method: features.method,
            rows: features.rows(),
            dims: features.dims,
            records: features.provenance.clone(),
        },
    )
}

pub fn load_features(dir: &Path, stem: &str) -> Result<FeatureMatrix> {
    let (data, index) = feature_paths(dir, stem);
    for p in [&data, &index] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let idx: FeatureIndex = rawio::read_json(&index)?;
    if idx.rows != idx.records.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} rows but {} records",
            index.display(),
            idx.rows,
            idx.records.len()
        )));
    }
    let values = rawio::read_f32(&data, idx.rows * idx.dims)?
        .into_iter()
        .map(|v| v as f64)
        .collect();
    FeatureMatrix::new(idx.method, idx.dims, values, idx.records)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LEN: usize = NUM_TIMEPOINTS * 10 * SUB_PIXELS;

    #[test]
    fn raw_ordering() {
        let t: Vec<f32> = (0..LEN).map(|i| i as f32).collect();
        let f = raw_features(&t);
        assert_eq!(f.len(), 1120);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1119], 1119.0);
        assert!(raw_features(&vec![0.0; LEN]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_channel_is_one_hot() {
        let f = histogram_features(&vec![0.5; LEN], 10, 16).unwrap();
        assert_eq!(f.len(), 160);
        for c in 0..10 {
            for b in 0..16 {
                assert_eq!(f[c * 16 + b], if b == 8 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn clamping() {
        assert_eq!(histogram_bin(1.3, 16), 15);
        assert_eq!(histogram_bin(1.0, 16), 15);
        assert_eq!(histogram_bin(-0.2, 16), 0);
        assert_eq!(histogram_bin(0.999, 16), 15);
        assert!(histogram_features(&vec![0.5; LEN], 10, 1).is_err());
    }
}
