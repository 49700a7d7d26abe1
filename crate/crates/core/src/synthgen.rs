//! Synthetic labelled scenes with planted stress signatures.
//!
//! Each scene holds rectangular fields (some with one corner cut away) on a soil
//! background. Healthy fields follow a logistic green-up; stressed fields lose NIR and gain
//! SWIR reflectance after a random onset day. Clouds cover random half-planes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{B10_BANDS, JULY, JUNE, AUGUST, SEPTEMBER_START};
use crate::scene_io::{save_labels, save_scene, Label, LabelSet, Scene, SceneManifest, VALUE_DTYPE};

pub const SEPTEMBER_END: u16 = 273;
pub const MAX_DATE_JITTER: i32 = 3;
/// Empty pixels around each field inside its grid cell.
const CELL_MARGIN: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_scenes: usize,
    pub scene_size: usize,
    pub fields_per_scene: usize,
    pub stressed_fraction: f64,
    pub noise_sd: f64,
    pub cloud_probability: f64,
    pub instances_per_month: usize,
    pub seed: u64,
    pub min_field_size: usize,
    pub max_field_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scenes: 8,
            scene_size: 64,
            fields_per_scene: 6,
            stressed_fraction: 0.4,
            noise_sd: 0.02,
            cloud_probability: 0.0,
            instances_per_month: 2,
            seed: 0,
            min_field_size: 6,
            max_field_size: 12,
        }
    }
}

impl SynthConfig {
    fn cell_size(&self) -> usize {
        self.max_field_size + 2 * CELL_MARGIN
    }

    pub fn cells_per_scene(&self) -> usize {
        let per_side = self.scene_size / self.cell_size();
        per_side * per_side
    }

    pub fn total_fields(&self) -> usize {
        self.num_scenes * self.fields_per_scene
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(format!("synth: {m}")));
        for (name, p) in [
            ("stressed_fraction", self.stressed_fraction),
            ("cloud_probability", self.cloud_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad(format!("noise_sd = {} must be non-negative", self.noise_sd));
        }
        if self.scene_size < 32 {
            return bad(format!("scene_size = {} below 32", self.scene_size));
        }
        if !(2..=8).contains(&self.instances_per_month) {
            return bad(format!("instances_per_month = {} outside [2, 8]", self.instances_per_month));
        }
        if self.min_field_size < 6 || self.max_field_size < self.min_field_size {
            return bad(format!(
                "field sizes {}..{} must satisfy 6 <= min <= max",
                self.min_field_size, self.max_field_size
            ));
        }
        if self.max_field_size > 64 {
            return bad(format!("max_field_size = {} above 64", self.max_field_size));
        }
        if self.num_scenes == 0 || self.fields_per_scene == 0 {
            return bad("need at least one scene and one field per scene".into());
        }
        if self.fields_per_scene > self.cells_per_scene() {
            return bad(format!(
                "{} fields do not fit a {}px scene ({} cells of {}px)",
                self.fields_per_scene,
                self.scene_size,
                self.cells_per_scene(),
                self.cell_size()
            ));
        }
        if u32::try_from(self.total_fields()).is_err() {
            return bad("too many fields".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub scenes: usize,
    pub fields: usize,
    pub stressed: usize,
}

/// Logistic green-up normalised to 0 at the start of June and 1 from September onward.
pub fn growth(day: f64) -> f64 {
    let l = |d: f64| 1.0 / (1.0 + (-(d - 195.0) / 10.0).exp());
    let (lo, hi) = (l(JUNE.0 as f64), l(SEPTEMBER_START as f64));
    ((l(day) - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Noise-free reflectance of the four signature bands (B02, B04, B08, B11).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Signature {
    pub b02: f64,
    pub b04: f64,
    pub b08: f64,
    pub b11: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stress {
    pub onset: u16,
    pub nir_drop: f64,
}

pub fn signature(day: u16, stress: Option<Stress>) -> Signature {
    let g = growth(day as f64);
    let mut s = Signature {
        b02: 0.06 - 0.01 * g,
        b04: 0.15 - 0.07 * g,
        b08: 0.2 + 0.4 * g,
        b11: 0.25,
    };
    if let Some(st) = stress {
        if day >= st.onset {
            s.b08 -= st.nir_drop;
            s.b11 += 0.1;
        }
    }
    s
}

const SOIL: Signature = Signature {
    b02: 0.09,
    b04: 0.2,
    b08: 0.26,
    b11: 0.32,
};

/// All ten bands in [`B10_BANDS`] order; the six non-signature bands are scaled copies.
fn full_bands(s: &Signature) -> [f64; 10] {
    [
        s.b02,
        0.8 * s.b04 + 0.02,
        s.b04,
        1.1 * s.b04 + 0.03,
        0.6 * s.b08 + 0.05,
        0.85 * s.b08,
        s.b08,
        1.03 * s.b08,
        s.b11,
        0.7 * s.b04 + 0.1,
    ]
}

/// Acquisition days: evenly spaced per month June to September, jittered, strictly increasing.
pub fn acquisition_dates(per_month: usize, rng: &mut impl Rng) -> Vec<u16> {
    let months = [JUNE, JULY, AUGUST, (SEPTEMBER_START, SEPTEMBER_END)];
    let mut out = Vec::with_capacity(4 * per_month);
    for (lo, hi) in months {
        let span = (hi - lo + 1) as f64;
        let step = span / per_month as f64;
        let jitter = MAX_DATE_JITTER.min(((step - 1.0) / 2.0).floor() as i32).max(0);
        for i in 0..per_month {
            let centre = lo as f64 + step * (i as f64 + 0.5);
            let j = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
            let d = (centre.floor() as i32 + j).clamp(lo as i32, hi as i32) as u16;
            out.push(d);
        }
    }
    for i in 1..out.len() {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] + 1;
        }
    }
    out
}

#[derive(Debug, Clone)]
struct FieldPlan {
    id: u32,
    stress: Option<Stress>,
}

fn place_fields(cfg: &SynthConfig, rng: &mut ChaCha8Rng, ids: &[u32]) -> Vec<u32> {
    let n = cfg.scene_size;
    let cell = cfg.cell_size();
    let per_side = n / cell;
    let mut cells: Vec<usize> = (0..per_side * per_side).collect();
    cells.shuffle(rng);
    let mut map = vec![0u32; n * n];
    for (&id, &c) in ids.iter().zip(&cells) {
        let (cr, cc) = ((c / per_side) * cell, (c % per_side) * cell);
        let h = rng.random_range(cfg.min_field_size..=cfg.max_field_size);
        let w = rng.random_range(cfg.min_field_size..=cfg.max_field_size);
        let r0 = cr + CELL_MARGIN + rng.random_range(0..=cfg.max_field_size - h);
        let c0 = cc + CELL_MARGIN + rng.random_range(0..=cfg.max_field_size - w);
        // Optional corner notch, leaving at least a min_field_size square.
        let notch_h = rng.random_range(0..=h - cfg.min_field_size);
        let notch_w = rng.random_range(0..=w - cfg.min_field_size);
        let corner = rng.random_range(0..4u8);
        for r in 0..h {
            for col in 0..w {
                let in_rows = if corner & 1 == 0 { r < notch_h } else { r >= h - notch_h };
                let in_cols = if corner & 2 == 0 { col < notch_w } else { col >= w - notch_w };
                if in_rows && in_cols {
                    continue;
                }
                map[(r0 + r) * n + c0 + col] = id;
            }
        }
    }
    map
}

fn cloud_mask(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let centre = (n as f64 - 1.0) / 2.0;
    let reach = centre * std::f64::consts::SQRT_2;
    let offset = rng.random_range(-0.5 * reach..0.5 * reach);
    let mut mask = vec![0u8; n * n];
    for r in 0..n {
        for c in 0..n {
            let p = (c as f64 - centre) * dx + (r as f64 - centre) * dy;
            if p > offset {
                mask[r * n + c] = 1;
            }
        }
    }
    mask
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn build_scene(cfg: &SynthConfig, index: usize, plans: &[FieldPlan]) -> Scene {
    let mut rng = scene_rng(cfg.seed, 16 + index as u64);
    let n = cfg.scene_size;
    let dates = acquisition_dates(cfg.instances_per_month, &mut rng);
    let ids: Vec<u32> = plans.iter().map(|p| p.id).collect();
    let field_ids = place_fields(cfg, &mut rng, &ids);
    let by_id: BTreeMap<u32, Option<Stress>> = plans.iter().map(|p| (p.id, p.stress)).collect();

    let t_count = dates.len();
    let channels = B10_BANDS.len();
    let plane = n * n;
    let mut cloud = vec![0u8; t_count * plane];
    let mut cloudy_instance = vec![false; t_count];
    for (t, flag) in cloudy_instance.iter_mut().enumerate() {
        if rng.random::<f64>() < cfg.cloud_probability {
            *flag = true;
            cloud[t * plane..(t + 1) * plane].copy_from_slice(&cloud_mask(n, &mut rng));
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");
    let mut data = vec![0f32; t_count * channels * plane];
    for (t, &day) in dates.iter().enumerate() {
        let per_field: BTreeMap<u32, [f64; 10]> = by_id
            .iter()
            .map(|(&id, &st)| (id, full_bands(&signature(day, st))))
            .collect();
        let soil = full_bands(&SOIL);
        for p in 0..plane {
            let base = per_field.get(&field_ids[p]).unwrap_or(&soil);
            let under_cloud = cloud[t * plane + p] == 1;
            for c in 0..channels {
                let mut v = base[c];
                if cfg.noise_sd > 0.0 {
                    v += noise.sample(&mut rng);
                }
                if under_cloud {
                    v = 0.4 * v + 0.45;
                }
                data[(t * channels + c) * plane + p] = v.max(0.0) as f32;
            }
        }
    }

    Scene {
        manifest: SceneManifest {
            scene_id: scene_name(index),
            height: n,
            width: n,
            num_channels: channels,
            num_timepoints: t_count,
            band_names: B10_BANDS.iter().map(|b| b.to_string()).collect(),
            dates,
            value_dtype: VALUE_DTYPE.into(),
        },
        data,
        cloud_mask: cloud,
        field_ids,
    }
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:03}")
}

/// Generates the scenes of `cfg` and returns them with the ground-truth labels.
pub fn generate_in_memory(cfg: &SynthConfig) -> Result<(Vec<Scene>, LabelSet)> {
    cfg.validate()?;
    let total = cfg.total_fields();
    let n_stressed = (cfg.stressed_fraction * total as f64).round() as usize;
    let mut master = scene_rng(cfg.seed, 1);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut master);
    let mut stressed = vec![false; total];
    for &i in &order[..n_stressed] {
        stressed[i] = true;
    }
    let mut plans = Vec::with_capacity(total);
    let mut labels = LabelSet::default();
    for (i, &s) in stressed.iter().enumerate() {
        let id = (i + 1) as u32;
        let stress = s.then(|| Stress {
            onset: master.random_range(190..=230),
            nir_drop: master.random_range(0.15..=0.25),
        });
        plans.push(FieldPlan { id, stress });
        labels
            .entries
            .insert(id, if s { Label::Stressed } else { Label::Healthy });
    }
    let scenes: Vec<Scene> = (0..cfg.num_scenes)
        .into_par_iter()
        .map(|s| {
            let lo = s * cfg.fields_per_scene;
            build_scene(cfg, s, &plans[lo..lo + cfg.fields_per_scene])
        })
        .collect();
    Ok((scenes, labels))
}

pub fn generate(cfg: &SynthConfig, scenes_dir: &Path, labels_path: &Path) -> Result<SynthSummary> {
    let (scenes, labels) = generate_in_memory(cfg)?;
    scenes
        .par_iter()
        .try_for_each(|s| save_scene(s, &scenes_dir.join(&s.manifest.scene_id)))?;
    if let Some(p) = labels_path.parent() {
        crate::rawio::ensure_dir(p)?;
    }
    save_labels(&labels, labels_path)?;
    Ok(SynthSummary {
        scenes: scenes.len(),
        fields: labels.len(),
        stressed: labels.count(Label::Stressed),
    })
}
