//! On-disk scene format.
//!
//! A scene directory holds four files:
//!
//! - `manifest.json`: the [`SceneManifest`]
//! - `data.f32`: reflectance, `[timepoint][channel][row][col]`, float32 little-endian
//! - `cloud_mask.u8`: `[timepoint][row][col]`, 1 = cloudy
//! - `field_ids.u32`: `[row][col]`, 0 = background, little-endian
//!
//! Field labels live next to the scenes in a `field_id,label` CSV file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rawio;

pub const VALUE_DTYPE: &str = "float32-le";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.f32";
pub const CLOUD_MASK_FILE: &str = "cloud_mask.u8";
pub const FIELD_IDS_FILE: &str = "field_ids.u32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    pub num_channels: usize,
    pub num_timepoints: usize,
    pub band_names: Vec<String>,
    pub dates: Vec<u16>,
    pub value_dtype: String,
}

impl SceneManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidManifest(format!("{}: {msg}", self.scene_id)));
        if self.height == 0 || self.width == 0 || self.num_channels == 0 || self.num_timepoints == 0
        {
            return bad("all dimensions must be positive".into());
        }
        if self.band_names.len() != self.num_channels {
            return bad(format!(
                "{} band names for {} channels",
                self.band_names.len(),
                self.num_channels
            ));
        }
        if self.dates.len() != self.num_timepoints {
            return bad(format!(
                "{} dates for {} timepoints",
                self.dates.len(),
                self.num_timepoints
            ));
        }
        if let Some(d) = self.dates.iter().find(|d| !(1..=365).contains(*d)) {
            return bad(format!("date {d} outside [1, 365]"));
        }
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return bad("dates must be strictly increasing".into());
        }
        if self.value_dtype != VALUE_DTYPE {
            return bad(format!("unsupported value_dtype {:?}", self.value_dtype));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.band_names.iter().position(|b| b == name)
    }
}

/// A multi-band, multi-temporal raster with its auxiliary masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub manifest: SceneManifest,
    /// `[t][c][row][col]`
    pub data: Vec<f32>,
    /// `[t][row][col]`, 1 = cloudy
    pub cloud_mask: Vec<u8>,
    /// `[row][col]`
    pub field_ids: Vec<u32>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        let px = m.pixels();
        let expect = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!(
                    "{}: {what} has {got} elements, expected {want}",
                    m.scene_id
                )))
            }
        };
        expect("data", self.data.len(), m.num_timepoints * m.num_channels * px)?;
        expect("cloud_mask", self.cloud_mask.len(), m.num_timepoints * px)?;
        expect("field_ids", self.field_ids.len(), px)?;
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "{}: non-finite reflectance at flat index {i}",
                m.scene_id
            )));
        }
        if self.cloud_mask.iter().any(|&v| v > 1) {
            return Err(Error::InvariantViolation(format!(
                "{}: cloud mask values must be 0 or 1",
                m.scene_id
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn value(&self, t: usize, c: usize, row: usize, col: usize) -> f32 {
        let m = &self.manifest;
        self.data[((t * m.num_channels + c) * m.height + row) * m.width + col]
    }

    #[inline]
    pub fn is_cloudy(&self, t: usize, row: usize, col: usize) -> bool {
        let m = &self.manifest;
        self.cloud_mask[(t * m.height + row) * m.width + col] != 0
    }

    /// Distinct non-zero field ids, ascending.
    pub fn field_list(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.field_ids.iter().copied().filter(|&f| f != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

pub fn load_scene(scene_dir: &Path) -> Result<Scene> {
    let manifest: SceneManifest = rawio::read_json(&scene_dir.join(MANIFEST_FILE))?;
    manifest.validate()?;
    let px = manifest.pixels();
    let t = manifest.num_timepoints;
    let data = rawio::read_f32(&scene_dir.join(DATA_FILE), t * manifest.num_channels * px)?;
    let cloud_mask = rawio::read_u8(&scene_dir.join(CLOUD_MASK_FILE), t * px)?;
    let field_ids = rawio::read_u32(&scene_dir.join(FIELD_IDS_FILE), px)?;
    let scene = Scene {
        manifest,
        data,
        cloud_mask,
        field_ids,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, scene_dir: &Path) -> Result<()> {
    scene.validate()?;
    rawio::ensure_dir(scene_dir)?;
    rawio::write_json(&scene_dir.join(MANIFEST_FILE), &scene.manifest)?;
    rawio::write_bytes(&scene_dir.join(DATA_FILE), &rawio::encode_f32(&scene.data))?;
    rawio::write_bytes(&scene_dir.join(CLOUD_MASK_FILE), &scene.cloud_mask)?;
    rawio::write_bytes(
        &scene_dir.join(FIELD_IDS_FILE),
        &rawio::encode_u32(&scene.field_ids),
    )?;
    Ok(())
}

/// Loads every scene directory (one containing `manifest.json`) under `root`, sorted by name.
pub fn load_scene_dir(root: &Path) -> Result<Vec<Scene>> {
    if !root.is_dir() {
        return Err(Error::MissingArtifact(root.to_path_buf()));
    }
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_scene(d)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Stressed,
    Healthy,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Stressed => "stressed",
            Label::Healthy => "healthy",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stressed" => Ok(Label::Stressed),
            "healthy" => Ok(Label::Healthy),
            other => Err(Error::UnknownLabelToken(other.to_string())),
        }
    }
}

/// Ground-truth field labels keyed by field id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSet {
    pub entries: BTreeMap<u32, Label>,
}

impl LabelSet {
    pub fn get(&self, field_id: u32) -> Option<Label> {
        self.entries.get(&field_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.values().filter(|&&l| l == label).count()
    }
}

pub fn load_labels(path: &Path) -> Result<LabelSet> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?;
    if headers.len() != 2 || &headers[0] != "field_id" || &headers[1] != "label" {
        return Err(Error::InvariantViolation(format!(
            "{}: header must be `field_id,label`",
            path.display()
        )));
    }
    let mut entries = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let id: u32 = record[0].trim().parse().map_err(|_| {
            Error::InvariantViolation(format!("invalid field id {:?}", &record[0]))
        })?;
        if id == 0 {
            return Err(Error::InvariantViolation("field id 0 is background".into()));
        }
        let label: Label = record[1].trim().parse()?;
        if entries.insert(id, label).is_some() {
            return Err(Error::DuplicateField(id));
        }
    }
    Ok(LabelSet { entries })
}

pub fn save_labels(labels: &LabelSet, path: &Path) -> Result<()> {
    let mut text = String::from("field_id,label\n");
    for (id, label) in &labels.entries {
        text.push_str(&format!("{id},{label}\n"));
    }
    rawio::write_bytes(path, text.as_bytes())
}
