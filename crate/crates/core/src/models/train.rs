use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Adam, Autoencoder, AutoencoderSpec};
use crate::error::{Error, Result};
use crate::preprocess::{SubPatchStore, Variant};
use crate::rawio;
use crate::temporal_encoding::{add_encoding_in_place, EncodingMode};

/// Samples per gradient work unit. Fixed so the reduction order, and hence the result,
/// does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

pub const CHECKPOINT_FILE: &str = "model.bin";
pub const META_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::ConfigInvalid("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::ConfigInvalid("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_size: usize,
    pub test_size: usize,
    /// Losses of the freshly initialised model.
    pub initial_train_loss: f64,
    pub initial_test_loss: Option<f64>,
    pub epochs: Vec<EpochLoss>,
}

impl TrainHistory {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_loss, |e| e.train_loss)
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.epochs.last().map_or(self.initial_test_loss, |e| e.test_loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Autoencoder<f32>,
    pub variant: Variant,
    pub encoding: Option<EncodingMode>,
    pub config: TrainConfig,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFeature {
    pub field_id: u32,
    pub grid_row: u8,
    pub grid_col: u8,
    pub z: Vec<f32>,
}

/// Model input for one record: the raw tensor plus its date encoding when enabled.
pub fn prepare_input(
    tensor: &[f32],
    dates: &[u16],
    channels: usize,
    encoding: Option<EncodingMode>,
) -> Result<Vec<f32>> {
    let mut x = tensor.to_vec();
    if let Some(mode) = encoding {
        add_encoding_in_place(&mut x, channels, dates, mode)?;
    }
    Ok(x)
}

fn check_store(model: &Autoencoder<f32>, store: &SubPatchStore) -> Result<()> {
    if store.channels != model.spec.data_channels() {
        return Err(Error::VariantMismatch(format!(
            "model expects {} data channels, store {} has {}",
            model.spec.data_channels(),
            store.variant,
            store.channels
        )));
    }
    Ok(())
}

/// Sum of squared reconstruction errors over `positions`.
fn squared_error_sum(
    model: &Autoencoder<f32>,
    store: &SubPatchStore,
    positions: &[usize],
    encoding: Option<EncodingMode>,
) -> Result<f64> {
    let parts: Vec<Result<f64>> = positions
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut ws = model.workspace();
            let mut sum = 0.0;
            for &i in chunk {
                let x = store.tensor(i);
                let input = prepare_input(x, &store.records[i].dates, store.channels, encoding)?;
                model.forward(&input, &mut ws);
                sum += ws
                    .output()
                    .iter()
                    .zip(x)
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>();
            }
            Ok(sum)
        })
        .collect();
    parts.into_iter().sum()
}

fn mean_loss(
    model: &Autoencoder<f32>,
    store: &SubPatchStore,
    positions: &[usize],
    encoding: Option<EncodingMode>,
) -> Result<Option<f64>> {
    if positions.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        squared_error_sum(model, store, positions, encoding)? / positions.len() as f64,
    ))
}

/// Gradient of the batch loss, reduced over fixed-size chunks in order.
fn batch_gradient(
    model: &Autoencoder<f32>,
    store: &SubPatchStore,
    batch: &[usize],
    encoding: Option<EncodingMode>,
    grads: &mut [f32],
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f32;
    let parts: Vec<Result<(Vec<f32>, f64)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut ws = model.workspace();
            let mut g = vec![0.0f32; model.num_params()];
            let mut sq = 0.0f64;
            for &i in chunk {
                let x = store.tensor(i);
                let input = prepare_input(x, &store.records[i].dates, store.channels, encoding)?;
                model.forward(&input, &mut ws);
                sq += model.backward(x, scale, &mut ws, &mut g) as f64;
            }
            Ok((g, sq))
        })
        .collect();
    grads.fill(0.0);
    let mut sq = 0.0;
    for part in parts {
        let (g, s) = part?;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        sq += s;
    }
    Ok(sq)
}

/// Trains `model` to reconstruct the raw store tensors, using the squared-norm loss
/// averaged over examples. Date encodings, when enabled, are added to the input only.
pub fn train(
    mut model: Autoencoder<f32>,
    store: &SubPatchStore,
    cfg: &TrainConfig,
    encoding: Option<EncodingMode>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    check_store(&model, store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((store.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, store.len());
    let (train_idx, test_idx) = order.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    let test_idx = test_idx.to_vec();

    let initial_train_loss = mean_loss(&model, store, &train_idx, encoding)?.unwrap_or(0.0);
    let initial_test_loss = mean_loss(&model, store, &test_idx, encoding)?;
    let mut history = TrainHistory {
        train_size: train_idx.len(),
        test_size: test_idx.len(),
        initial_train_loss,
        initial_test_loss,
        epochs: Vec::with_capacity(cfg.epochs),
    };

    let mut opt = Adam::new(model.num_params(), cfg.learning_rate);
    let mut grads = vec![0.0f32; model.num_params()];
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let sq = batch_gradient(&model, store, batch, encoding, &mut grads)?;
            if !sq.is_finite() {
                return Err(Error::DivergedLoss { epoch, loss: sq });
            }
            sq_sum += sq;
            opt.step(&mut model.params, &grads);
        }
        let train_loss = sq_sum / train_idx.len() as f64;
        let test_loss = mean_loss(&model, store, &test_idx, encoding)?;
        if let Some(l) = test_loss.filter(|l| !l.is_finite()) {
            return Err(Error::DivergedLoss { epoch, loss: l });
        }
        info!(
            "epoch {epoch}/{}: train loss {train_loss:.6}, test loss {}",
            cfg.epochs,
            test_loss.map_or("n/a".to_string(), |l| format!("{l:.6}"))
        );
        history.epochs.push(EpochLoss {
            epoch,
            train_loss,
            test_loss,
        });
    }
    Ok(TrainedModel {
        model,
        variant: store.variant,
        encoding,
        config: cfg.clone(),
        history,
    })
}

/// Bottleneck vector of every store record, in store order.
pub fn encode_batch(
    trained: &TrainedModel,
    store: &SubPatchStore,
    encoding: Option<EncodingMode>,
) -> Result<Vec<LatentFeature>> {
    if trained.variant != store.variant {
        return Err(Error::VariantMismatch(format!(
            "model trained on {}, store is {}",
            trained.variant, store.variant
        )));
    }
    if trained.encoding != encoding {
        return Err(Error::VariantMismatch(format!(
            "model trained with encoding {:?}, requested {:?}",
            trained.encoding, encoding
        )));
    }
    check_store(&trained.model, store)?;
    let model = &trained.model;
    let positions: Vec<usize> = (0..store.len()).collect();
    let chunks: Vec<Result<Vec<LatentFeature>>> = positions
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut ws = model.workspace();
            chunk
                .iter()
                .map(|&i| {
                    let r = &store.records[i];
                    let input = prepare_input(store.tensor(i), &r.dates, store.channels, encoding)?;
                    model.encode_into(&input, &mut ws);
                    Ok(LatentFeature {
                        field_id: r.field_id,
                        grid_row: r.grid_row,
                        grid_col: r.grid_col,
                        z: ws.latent.clone(),
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(store.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub spec: AutoencoderSpec,
    pub train_config: TrainConfig,
    pub variant: Variant,
    pub temporal_encodings: bool,
    pub encoding_mode: Option<EncodingMode>,
    pub num_params: usize,
    pub final_train_loss: f64,
    pub final_test_loss: Option<f64>,
    pub history: TrainHistory,
}

pub fn save_checkpoint(trained: &TrainedModel, dir: &Path) -> Result<()> {
    rawio::ensure_dir(dir)?;
    rawio::write_bytes(
        &dir.join(CHECKPOINT_FILE),
        &rawio::encode_f32(&trained.model.params),
    )?;
    let meta = ModelMeta {
        spec: trained.model.spec.clone(),
        train_config: trained.config.clone(),
        variant: trained.variant,
        temporal_encodings: trained.encoding.is_some(),
        encoding_mode: trained.encoding,
        num_params: trained.model.num_params(),
        final_train_loss: trained.history.final_train_loss(),
        final_test_loss: trained.history.final_test_loss(),
        history: trained.history.clone(),
    };
    rawio::write_json(&dir.join(META_FILE), &meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainedModel> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path));
    }
    let meta: ModelMeta = rawio::read_json(&meta_path)?;
    let params = rawio::read_f32(&dir.join(CHECKPOINT_FILE), meta.num_params)?;
    Ok(TrainedModel {
        model: Autoencoder::from_params(&meta.spec, params)?,
        variant: meta.variant,
        encoding: meta.encoding_mode,
        config: meta.train_config,
        history: meta.history,
    })
}
