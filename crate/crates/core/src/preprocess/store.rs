//! Sub-patch store: `subpatches_<variant>.f32` holds headerless float32-le records of shape
//! `(7, C, 4, 4)`; `subpatches_<variant>.index.json` lists their provenance in the same order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{late_season_ndvi, to_variant, SubPatchTensor, Variant, VariantConfig, NUM_TIMEPOINTS, SUB_PIXELS};
use crate::error::{Error, Result};
use crate::rawio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub scene_id: String,
    pub field_id: u32,
    pub grid_row: u8,
    pub grid_col: u8,
    pub dates: [u16; NUM_TIMEPOINTS],
    /// Mean NDVI of the last two timepoints, from the full-band tensor.
    pub late_ndvi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub variant: Variant,
    pub channels: usize,
    pub records: Vec<StoreRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubPatchStore {
    pub variant: Variant,
    pub channels: usize,
    pub records: Vec<StoreRecord>,
    data: Vec<f32>,
}

impl SubPatchStore {
    /// Builds a store of `cfg.variant` from sorted full-band sub-patches.
    pub fn from_subpatches(subs: &[SubPatchTensor], cfg: &VariantConfig) -> Result<Self> {
        let ndvi_bands = match (cfg.band_index.get("B04"), cfg.band_index.get("B08")) {
            (Some(&r), Some(&n)) => Some((r, n)),
            _ => None,
        };
        let channels = cfg.variant.channels();
        let mut data = Vec::with_capacity(subs.len() * NUM_TIMEPOINTS * channels * SUB_PIXELS);
        let mut records = Vec::with_capacity(subs.len());
        for sub in subs {
            let converted = to_variant(sub, cfg)?;
            data.extend_from_slice(&converted.tensor);
            records.push(StoreRecord {
                scene_id: sub.scene_id.clone(),
                field_id: sub.field_id,
                grid_row: sub.grid_row,
                grid_col: sub.grid_col,
                dates: sub.dates,
                late_ndvi: ndvi_bands.map(|(r, n)| late_season_ndvi(sub, r, n)),
            });
        }
        Ok(SubPatchStore {
            variant: cfg.variant,
            channels,
            records,
            data,
        })
    }

    pub fn from_parts(index: StoreIndex, data: Vec<f32>) -> Result<Self> {
        let rec_len = NUM_TIMEPOINTS * index.channels * SUB_PIXELS;
        if index.channels != index.variant.channels() {
            return Err(Error::ShapeMismatch(format!(
                "variant {} has {} channels, index says {}",
                index.variant,
                index.variant.channels(),
                index.channels
            )));
        }
        if data.len() != rec_len * index.records.len() {
            return Err(Error::ShapeMismatch(format!(
                "store data has {} values, expected {} records x {rec_len}",
                data.len(),
                index.records.len()
            )));
        }
        Ok(SubPatchStore {
            variant: index.variant,
            channels: index.channels,
            records: index.records,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Elements per record: `7 * channels * 16`.
    pub fn record_len(&self) -> usize {
        NUM_TIMEPOINTS * self.channels * SUB_PIXELS
    }

    pub fn tensor(&self, i: usize) -> &[f32] {
        let n = self.record_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn index(&self) -> StoreIndex {
        StoreIndex {
            variant: self.variant,
            channels: self.channels,
            records: self.records.clone(),
        }
    }

    /// Keeps only the records whose positions are listed.
    pub fn subset(&self, positions: &[usize]) -> SubPatchStore {
        let mut data = Vec::with_capacity(positions.len() * self.record_len());
        for &i in positions {
            data.extend_from_slice(self.tensor(i));
        }
        SubPatchStore {
            variant: self.variant,
            channels: self.channels,
            records: positions.iter().map(|&i| self.records[i].clone()).collect(),
            data,
        }
    }
}

pub fn store_paths(dir: &Path, variant: Variant) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("subpatches_{variant}.f32")),
        dir.join(format!("subpatches_{variant}.index.json")),
    )
}

pub fn save_store(store: &SubPatchStore, dir: &Path) -> Result<()> {
    rawio::ensure_dir(dir)?;
    let (data_path, index_path) = store_paths(dir, store.variant);
    rawio::write_bytes(&data_path, &rawio::encode_f32(&store.data))?;
    rawio::write_json(&index_path, &store.index())
}

pub fn load_store(dir: &Path, variant: Variant) -> Result<SubPatchStore> {
    let (data_path, index_path) = store_paths(dir, variant);
    for p in [&data_path, &index_path] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let index: StoreIndex = rawio::read_json(&index_path)?;
    if index.variant != variant {
        return Err(Error::VariantMismatch(format!(
            "{} holds {}, expected {variant}",
            index_path.display(),
            index.variant
        )));
    }
    let bytes = rawio::read_bytes(&data_path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} is not a whole number of float32 values",
            data_path.display()
        )));
    }
    SubPatchStore::from_parts(index, rawio::decode_f32(&bytes))
}
