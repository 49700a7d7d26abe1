use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::indices::compute_indices;
use super::{SubPatchTensor, SUB_PIXELS};
use crate::error::{Error, Result};
use crate::scene_io::SceneManifest;

/// Channel composition of a model input tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// The ten retained Sentinel-2 bands.
    B10,
    /// NDVI, EVI, MSI.
    MVI,
    /// B02, B04, B08, B11.
    B4,
}

pub const B10_BANDS: [&str; 10] = [
    "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12",
];
pub const INDEX_BANDS: [&str; 4] = ["B02", "B04", "B08", "B11"];

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::B10, Variant::MVI, Variant::B4];

    pub fn channels(self) -> usize {
        match self {
            Variant::B10 => 10,
            Variant::MVI => 3,
            Variant::B4 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::B10 => "B10",
            Variant::MVI => "MVI",
            Variant::B4 => "B4",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B10" => Ok(Variant::B10),
            "MVI" => Ok(Variant::MVI),
            "B4" => Ok(Variant::B4),
            other => Err(Error::ConfigInvalid(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Band name to channel position in the scene data.
    pub band_index: BTreeMap<String, usize>,
}

impl VariantConfig {
    pub fn new(variant: Variant, band_names: &[String]) -> Result<Self> {
        let band_index = band_names
            .iter()
            .enumerate()
            .map(|(i, b)| (b.clone(), i))
            .collect();
        let cfg = VariantConfig {
            variant,
            band_index,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn for_manifest(variant: Variant, manifest: &SceneManifest) -> Result<Self> {
        Self::new(variant, &manifest.band_names)
    }

    fn band(&self, name: &str) -> Result<usize> {
        self.band_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingBand(name.to_string()))
    }

    fn check(&self) -> Result<()> {
        match self.variant {
            Variant::B10 => {
                if self.band_index.len() != 10 {
                    return Err(Error::MissingBand(format!(
                        "B10 needs 10 named bands, scene has {}",
                        self.band_index.len()
                    )));
                }
            }
            Variant::B4 | Variant::MVI => {
                for b in INDEX_BANDS {
                    self.band(b)?;
                }
            }
        }
        Ok(())
    }

    /// Channel positions of B02, B04, B08, B11.
    pub fn index_bands(&self) -> Result<[usize; 4]> {
        Ok([
            self.band("B02")?,
            self.band("B04")?,
            self.band("B08")?,
            self.band("B11")?,
        ])
    }
}

/// Converts a sub-patch holding all scene channels into the configured variant.
pub fn to_variant(sub: &SubPatchTensor, cfg: &VariantConfig) -> Result<SubPatchTensor> {
    if sub.variant != Variant::B10 || sub.channels != cfg.band_index.len() {
        return Err(Error::VariantMismatch(format!(
            "to_variant expects the full-band pre-form with {} channels, got {} ({} channels)",
            cfg.band_index.len(),
            sub.variant,
            sub.channels
        )));
    }
    cfg.check()?;
    let t_count = sub.dates.len();
    let tensor = match cfg.variant {
        Variant::B10 => sub.tensor.clone(),
        Variant::B4 => {
            let bands = cfg.index_bands()?;
            let mut out = Vec::with_capacity(t_count * 4 * SUB_PIXELS);
            for t in 0..t_count {
                for &b in &bands {
                    out.extend_from_slice(sub.plane(t, b));
                }
            }
            out
        }
        Variant::MVI => {
            let [b02, b04, b08, b11] = cfg.index_bands()?;
            let mut out = vec![0.0f32; t_count * 3 * SUB_PIXELS];
            for t in 0..t_count {
                let (p02, p04, p08, p11) = (
                    sub.plane(t, b02),
                    sub.plane(t, b04),
                    sub.plane(t, b08),
                    sub.plane(t, b11),
                );
                for p in 0..SUB_PIXELS {
                    let idx = compute_indices(
                        p02[p] as f64,
                        p04[p] as f64,
                        p08[p] as f64,
                        p11[p] as f64,
                    );
                    let base = t * 3 * SUB_PIXELS + p;
                    out[base] = idx.ndvi as f32;
                    out[base + SUB_PIXELS] = idx.evi as f32;
                    out[base + 2 * SUB_PIXELS] = idx.msi as f32;
                }
            }
            out
        }
    };
    Ok(SubPatchTensor {
        channels: cfg.variant.channels(),
        variant: cfg.variant,
        tensor,
        ..sub.clone()
    })
}
