//! Declarative run configuration shared by the library pipeline and the CLI.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::baseline_features::DEFAULT_BINS;
use crate::cluster_agg::{check_alpha, MappingStrategy, DEFAULT_ALPHA, DEFAULT_RESTARTS};
use crate::error::{Error, Result};
use crate::models::{AutoencoderSpec, ModelKind, TrainConfig};
use crate::preprocess::Variant;
use crate::rawio;
use crate::synthgen::SynthConfig;
use crate::temporal_encoding::EncodingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Raw,
    Histogram,
    Ae2d,
    Ae3d,
}

impl Method {
    pub fn model_kind(self) -> Option<ModelKind> {
        match self {
            Method::Ae2d => Some(ModelKind::Ae2d),
            Method::Ae3d => Some(ModelKind::Ae3d),
            Method::Raw | Method::Histogram => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Histogram => "histogram",
            Method::Ae2d => "ae2d",
            Method::Ae3d => "ae3d",
        }
    }

    /// Row title in the comparison table.
    pub fn display_name(self, variant: Variant) -> String {
        match self {
            Method::Raw => "Raw data".into(),
            Method::Histogram => "Histogram features".into(),
            Method::Ae2d => format!("2D_AE_{variant}"),
            Method::Ae3d => format!("3D_AE_{variant}"),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Method::Raw),
            "histogram" => Ok(Method::Histogram),
            "ae2d" => Ok(Method::Ae2d),
            "ae3d" => Ok(Method::Ae3d),
            other => Err(Error::ConfigInvalid(format!("unknown method {other:?}"))),
        }
    }
}

/// One row of the `compare` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareEntry {
    pub method: Method,
    pub variant: Variant,
    pub temporal_encodings: bool,
}

/// The method/tensor/encoding rows of the standard comparison.
pub fn default_compare_entries() -> Vec<CompareEntry> {
    let e = |method, variant, temporal_encodings| CompareEntry {
        method,
        variant,
        temporal_encodings,
    };
    vec![
        e(Method::Raw, Variant::B10, false),
        e(Method::Histogram, Variant::B10, false),
        e(Method::Ae2d, Variant::B10, false),
        e(Method::Ae3d, Variant::B10, false),
        e(Method::Ae3d, Variant::B10, true),
        e(Method::Ae3d, Variant::MVI, true),
        e(Method::Ae3d, Variant::B4, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub method: Method,
    pub temporal_encodings: bool,
    pub encoding_mode: EncodingMode,
    pub alpha: f64,
    pub bins: usize,
    pub latent_dim: usize,
    pub conv_widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub seeds: Vec<u64>,
    pub mapping_strategy: MappingStrategy,
    pub kmeans_restarts: usize,
    pub scenes: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub compare: Vec<CompareEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::B10,
            method: Method::Ae3d,
            temporal_encodings: true,
            encoding_mode: EncodingMode::Split,
            alpha: DEFAULT_ALPHA,
            bins: DEFAULT_BINS,
            latent_dim: 64,
            conv_widths: vec![32, 64],
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            train_fraction: 0.8,
            seeds: vec![0, 1, 2],
            mapping_strategy: MappingStrategy::BestF1,
            kmeans_restarts: DEFAULT_RESTARTS,
            scenes: None,
            labels: None,
            workdir: None,
            synth: None,
            compare: default_compare_entries(),
        }
    }
}

/// The experiment-defining subset of a [`RunConfig`], recorded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub method: Method,
    pub variant: Variant,
    pub temporal_encodings: bool,
    pub encoding_mode: Option<EncodingMode>,
    pub mapping_strategy: MappingStrategy,
    pub alpha: f64,
    pub bins: Option<usize>,
    pub model: Option<AutoencoderSpec>,
    pub train: Option<TrainConfig>,
    pub seeds: Vec<u64>,
    pub kmeans_restarts: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ConfigInvalid(format!(
                "config file {} not found",
                path.display()
            )));
        }
        let cfg: RunConfig = rawio::read_json(path).map_err(|e| match e {
            Error::Json { source, .. } => Error::ConfigInvalid(format!("{}: {source}", path.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.method == Method::Ae2d && self.temporal_encodings {
            return bad("ae2d stacks timepoints as channels and takes no temporal encodings".into());
        }
        if self.temporal_encodings && matches!(self.method, Method::Raw | Method::Histogram) {
            warn!("temporal encodings have no effect on {} features", self.method);
        }
        check_alpha(self.alpha)?;
        if self.bins < 2 {
            return bad(format!("bins {} < 2", self.bins));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be positive".into());
        }
        if self.method.model_kind().is_some() {
            self.train_config(0).validate()?;
            if let Some(spec) = self.model_spec() {
                spec.validate()
                    .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
            }
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        for e in &self.compare {
            if e.method == Method::Ae2d && e.temporal_encodings {
                return bad("compare entry: ae2d takes no temporal encodings".into());
            }
        }
        Ok(())
    }

    /// Encoding actually applied: only autoencoder runs consume date encodings.
    pub fn encoding(&self) -> Option<EncodingMode> {
        match self.method {
            Method::Ae3d if self.temporal_encodings => Some(self.encoding_mode),
            _ => None,
        }
    }

    pub fn model_spec(&self) -> Option<AutoencoderSpec> {
        self.method.model_kind().map(|kind| {
            AutoencoderSpec::for_channels(kind, self.variant.channels())
                .with_widths(self.conv_widths.clone(), self.latent_dim)
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            train_fraction: self.train_fraction,
        }
    }

    /// Config for one `compare` row.
    pub fn with_entry(&self, entry: &CompareEntry) -> RunConfig {
        RunConfig {
            method: entry.method,
            variant: entry.variant,
            temporal_encodings: entry.temporal_encodings,
            ..self.clone()
        }
    }

    /// File-name tag identifying the method, tensor, and encoding choice.
    pub fn tag(&self) -> String {
        match self.method {
            Method::Raw | Method::Histogram => format!("{}_{}", self.method, self.variant),
            Method::Ae2d | Method::Ae3d => format!(
                "{}_{}_{}",
                self.method,
                self.variant,
                match self.encoding() {
                    Some(EncodingMode::Split) => "enc",
                    Some(EncodingMode::Sum) => "encsum",
                    None => "noenc",
                }
            ),
        }
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        let is_model = self.method.model_kind().is_some();
        ConfigSnapshot {
            method: self.method,
            variant: self.variant,
            temporal_encodings: self.encoding().is_some(),
            encoding_mode: self.encoding(),
            mapping_strategy: self.mapping_strategy,
            alpha: self.alpha,
            bins: (self.method == Method::Histogram).then_some(self.bins),
            model: self.model_spec(),
            train: is_model.then(|| TrainConfig {
                seed: 0,
                ..self.train_config(0)
            }),
            seeds: self.seeds.clone(),
            kmeans_restarts: self.kmeans_restarts,
        }
    }
}
