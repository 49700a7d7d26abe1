//! Scene to sub-patch conversion.
//!
//! Per field: binarise the field-id mask and erode its border, keep instances whose eroded
//! field is cloud free, pick seven of them across June to September, crop and zero-pad to
//! 64x64, then cut into 4x4 sub-patches (empty ones dropped, partial ones mean-filled).

mod indices;
mod store;
mod variant;

pub use indices::{compute_indices, ndvi, Indices, DEGENERATE_DENOMINATOR};
pub use store::{load_store, save_store, store_paths, StoreIndex, StoreRecord, SubPatchStore};
pub use variant::{to_variant, Variant, VariantConfig, B10_BANDS, INDEX_BANDS};

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene_io::Scene;

pub const PATCH_SIZE: usize = 64;
pub const SUB_SIZE: usize = 4;
pub const SUB_PIXELS: usize = SUB_SIZE * SUB_SIZE;
pub const GRID_SIZE: usize = PATCH_SIZE / SUB_SIZE;
pub const NUM_SUBPATCHES: usize = GRID_SIZE * GRID_SIZE;
pub const NUM_TIMEPOINTS: usize = 7;

/// Inclusive day-of-year windows (non-leap year).
pub const JUNE: (u16, u16) = (152, 181);
pub const JULY: (u16, u16) = (182, 212);
pub const AUGUST: (u16, u16) = (213, 243);
pub const SEPTEMBER_START: u16 = 244;

/// One field cropped, masked and padded to 64x64 over its seven selected instances.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPatch {
    pub field_id: u32,
    pub channels: usize,
    /// `[t][c][row][col]`, shape `(7, channels, 64, 64)`.
    pub tensor: Vec<f32>,
    /// `[row][col]`, 1 where the eroded field is.
    pub field_mask: Vec<u8>,
    pub dates: [u16; NUM_TIMEPOINTS],
    pub source_scene: String,
}

impl FieldPatch {
    #[inline]
    pub fn value(&self, t: usize, c: usize, row: usize, col: usize) -> f32 {
        self.tensor[((t * self.channels + c) * PATCH_SIZE + row) * PATCH_SIZE + col]
    }
}

/// A 4x4 block of a field patch, the model's input unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SubPatchTensor {
    pub scene_id: String,
    pub field_id: u32,
    pub grid_row: u8,
    pub grid_col: u8,
    pub variant: Variant,
    pub channels: usize,
    /// `[t][c][row][col]`, shape `(7, channels, 4, 4)`.
    pub tensor: Vec<f32>,
    pub dates: [u16; NUM_TIMEPOINTS],
}

impl SubPatchTensor {
    pub fn plane(&self, t: usize, c: usize) -> &[f32] {
        let start = (t * self.channels + c) * SUB_PIXELS;
        &self.tensor[start..start + SUB_PIXELS]
    }

    pub fn sort_key(&self) -> (&str, u32, u8, u8) {
        (&self.scene_id, self.field_id, self.grid_row, self.grid_col)
    }
}

/// Mask of `field_id` eroded once by a 3x3 all-ones structuring element.
///
/// A pixel survives iff it and all eight neighbours belong to the field; pixels on the
/// image boundary never survive.
pub fn binarize_and_erode(
    field_ids: &[u32],
    height: usize,
    width: usize,
    field_id: u32,
) -> Result<Vec<u8>> {
    assert_eq!(field_ids.len(), height * width, "field-id mask shape");
    if field_id == 0 || !field_ids.contains(&field_id) {
        return Err(Error::FieldNotFound(field_id));
    }
    let mut out = vec![0u8; height * width];
    if height < 3 || width < 3 {
        return Ok(out);
    }
    for r in 1..height - 1 {
        for c in 1..width - 1 {
            let inside = (r - 1..=r + 1)
                .all(|rr| field_ids[rr * width + c - 1..=rr * width + c + 1].iter().all(|&f| f == field_id));
            out[r * width + c] = inside as u8;
        }
    }
    Ok(out)
}

/// `usable[t]` is true iff no cloudy pixel of instance `t` falls inside `mask`.
pub fn cloud_free_instances(scene: &Scene, mask: &[u8]) -> Vec<bool> {
    let px = scene.manifest.pixels();
    (0..scene.manifest.num_timepoints)
        .map(|t| {
            let cloud = &scene.cloud_mask[t * px..(t + 1) * px];
            !cloud.iter().zip(mask).any(|(&c, &m)| c != 0 && m != 0)
        })
        .collect()
}

/// Earliest and latest usable instance in each of June, July and August, plus the
/// earliest usable instance from September on.
pub fn select_temporal_instances(dates: &[u16], usable: &[bool]) -> Result<[usize; NUM_TIMEPOINTS]> {
    assert_eq!(dates.len(), usable.len(), "dates and usable flags differ in length");
    let candidates = |lo: u16, hi: u16| {
        (0..dates.len()).filter(move |&i| usable[i] && dates[i] >= lo && dates[i] <= hi)
    };
    let mut picked = [0usize; NUM_TIMEPOINTS];
    for (m, (name, (lo, hi))) in [("June", JUNE), ("July", JULY), ("August", AUGUST)]
        .into_iter()
        .enumerate()
    {
        let first = candidates(lo, hi).next();
        let last = candidates(lo, hi).next_back();
        match (first, last) {
            (Some(a), Some(b)) if a != b => {
                picked[2 * m] = a;
                picked[2 * m + 1] = b;
            }
            _ => {
                return Err(Error::InsufficientCloudFreeInstances(format!(
                    "{name} has {} usable instances, need 2",
                    candidates(lo, hi).count()
                )))
            }
        }
    }
    picked[6] = candidates(SEPTEMBER_START, 365).next().ok_or_else(|| {
        Error::InsufficientCloudFreeInstances("no usable instance from September on".into())
    })?;
    Ok(picked)
}

/// Row/column bounding box `(r0, r1, c0, c1)` (inclusive) of the non-zero mask pixels.
fn bounding_box(mask: &[u8], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m != 0) {
        let (r, c) = (i / width, i % width);
        bbox = Some(match bbox {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    bbox
}

/// Leading pad for a symmetric zero pad of `extent` up to the patch size; any odd
/// remainder goes to the trailing side.
pub fn leading_pad(extent: usize) -> usize {
    (PATCH_SIZE - extent) / 2
}

pub fn extract_field_patch(
    scene: &Scene,
    field_id: u32,
    selected: &[usize; NUM_TIMEPOINTS],
) -> Result<FieldPatch> {
    let m = &scene.manifest;
    let mask = binarize_and_erode(&scene.field_ids, m.height, m.width, field_id)?;
    extract_with_mask(scene, field_id, &mask, selected)
}

fn extract_with_mask(
    scene: &Scene,
    field_id: u32,
    mask: &[u8],
    selected: &[usize; NUM_TIMEPOINTS],
) -> Result<FieldPatch> {
    let m = &scene.manifest;
    let (r0, r1, c0, c1) = bounding_box(mask, m.width).ok_or(Error::EmptyAfterErosion(field_id))?;
    let (rows, cols) = (r1 - r0 + 1, c1 - c0 + 1);
    if rows > PATCH_SIZE || cols > PATCH_SIZE {
        return Err(Error::FieldTooLarge { rows, cols });
    }
    let (top, left) = (leading_pad(rows), leading_pad(cols));
    let channels = m.num_channels;
    let mut tensor = vec![0.0f32; NUM_TIMEPOINTS * channels * PATCH_SIZE * PATCH_SIZE];
    let mut field_mask = vec![0u8; PATCH_SIZE * PATCH_SIZE];
    for r in 0..rows {
        for c in 0..cols {
            if mask[(r0 + r) * m.width + c0 + c] == 0 {
                continue;
            }
            let (pr, pc) = (top + r, left + c);
            field_mask[pr * PATCH_SIZE + pc] = 1;
            for (ti, &t) in selected.iter().enumerate() {
                for ch in 0..channels {
                    tensor[((ti * channels + ch) * PATCH_SIZE + pr) * PATCH_SIZE + pc] =
                        scene.value(t, ch, r0 + r, c0 + c);
                }
            }
        }
    }
    let mut dates = [0u16; NUM_TIMEPOINTS];
    for (d, &t) in dates.iter_mut().zip(selected) {
        *d = m.dates[t];
    }
    if dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvariantViolation(format!(
            "selected dates {dates:?} are not strictly increasing"
        )));
    }
    Ok(FieldPatch {
        field_id,
        channels,
        tensor,
        field_mask,
        dates,
        source_scene: m.scene_id.clone(),
    })
}

/// Fills every position of a `[t][c][pixel]` block where `present` is false with the mean
/// of the present pixels of the same timepoint and channel.
pub fn fill_partial_block(block: &mut [f32], present: &[bool; SUB_PIXELS]) {
    let n = present.iter().filter(|&&p| p).count();
    if n == 0 || n == SUB_PIXELS {
        return;
    }
    for plane in block.chunks_exact_mut(SUB_PIXELS) {
        let sum: f64 = plane
            .iter()
            .zip(present)
            .filter(|(_, &p)| p)
            .map(|(&v, _)| v as f64)
            .sum();
        let mean = (sum / n as f64) as f32;
        for (v, &p) in plane.iter_mut().zip(present) {
            if !p {
                *v = mean;
            }
        }
    }
}

/// Cuts a field patch into its 16x16 grid of 4x4 blocks, dropping blocks without field
/// pixels. Kept blocks come out in row-major grid order.
pub fn subdivide(patch: &FieldPatch) -> Vec<SubPatchTensor> {
    let mut out = Vec::new();
    let channels = patch.channels;
    for gr in 0..GRID_SIZE {
        for gc in 0..GRID_SIZE {
            let mut present = [false; SUB_PIXELS];
            for (i, p) in present.iter_mut().enumerate() {
                let (r, c) = (gr * SUB_SIZE + i / SUB_SIZE, gc * SUB_SIZE + i % SUB_SIZE);
                *p = patch.field_mask[r * PATCH_SIZE + c] != 0;
            }
            if !present.iter().any(|&p| p) {
                continue;
            }
            let mut tensor = Vec::with_capacity(NUM_TIMEPOINTS * channels * SUB_PIXELS);
            for t in 0..NUM_TIMEPOINTS {
                for ch in 0..channels {
                    for i in 0..SUB_PIXELS {
                        let (r, c) = (gr * SUB_SIZE + i / SUB_SIZE, gc * SUB_SIZE + i % SUB_SIZE);
                        tensor.push(patch.value(t, ch, r, c));
                    }
                }
            }
            fill_partial_block(&mut tensor, &present);
            out.push(SubPatchTensor {
                scene_id: patch.source_scene.clone(),
                field_id: patch.field_id,
                grid_row: gr as u8,
                grid_col: gc as u8,
                variant: Variant::B10,
                channels,
                tensor,
                dates: patch.dates,
            });
        }
    }
    out
}

/// Full per-field chain: erosion, cloud screening, selection, patch extraction, sub-patching.
pub fn process_field(scene: &Scene, field_id: u32) -> Result<Vec<SubPatchTensor>> {
    let m = &scene.manifest;
    let mask = binarize_and_erode(&scene.field_ids, m.height, m.width, field_id)?;
    if !mask.iter().any(|&v| v != 0) {
        return Err(Error::EmptyAfterErosion(field_id));
    }
    let usable = cloud_free_instances(scene, &mask);
    let selected = select_temporal_instances(&m.dates, &usable)?;
    let patch = extract_with_mask(scene, field_id, &mask, &selected)?;
    Ok(subdivide(&patch))
}

#[derive(Debug, Default)]
pub struct PreprocessOutcome {
    /// Full-band sub-patches sorted by `(scene_id, field_id, grid_row, grid_col)`.
    pub subpatches: Vec<SubPatchTensor>,
    pub skipped: Vec<(String, u32, Error)>,
}

/// Runs every field of every scene; fields that cannot be processed are logged and skipped.
pub fn preprocess_scenes(scenes: &[Scene]) -> PreprocessOutcome {
    let jobs: Vec<(&Scene, u32)> = scenes
        .iter()
        .flat_map(|s| s.field_list().into_iter().map(move |f| (s, f)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(s, f)| (s.manifest.scene_id.clone(), f, process_field(s, f)))
        .collect();
    let mut outcome = PreprocessOutcome::default();
    for (scene_id, field_id, result) in results {
        match result {
            Ok(subs) => outcome.subpatches.extend(subs),
            Err(e) => {
                warn!("skipping field {field_id} of scene {scene_id}: {e}");
                outcome.skipped.push((scene_id, field_id, e));
            }
        }
    }
    outcome
        .subpatches
        .sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    outcome
}

/// Mean NDVI over all pixels of the last two timepoints of a full-band sub-patch.
pub fn late_season_ndvi(sub: &SubPatchTensor, b04: usize, b08: usize) -> f64 {
    let t_count = sub.dates.len();
    let mut sum = 0.0;
    for t in t_count - 2..t_count {
        for (&red, &nir) in sub.plane(t, b04).iter().zip(sub.plane(t, b08)) {
            sum += ndvi(red as f64, nir as f64);
        }
    }
    sum / (2 * SUB_PIXELS) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{SceneManifest, VALUE_DTYPE};

    fn ids_with_block(h: usize, w: usize, r0: usize, c0: usize, bh: usize, bw: usize) -> Vec<u32> {
        let mut ids = vec![0u32; h * w];
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                ids[r * w + c] = 5;
            }
        }
        ids
    }

    #[test]
    fn erosion_basics() {
        let ids = ids_with_block(9, 9, 4, 4, 1, 1);
        assert!(binarize_and_erode(&ids, 9, 9, 5).unwrap().iter().all(|&v| v == 0));

        let ids = ids_with_block(9, 9, 2, 3, 3, 3);
        let m = binarize_and_erode(&ids, 9, 9, 5).unwrap();
        assert_eq!(m.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(m[3 * 9 + 4], 1);

        let ids = ids_with_block(20, 20, 5, 5, 10, 10);
        let m = binarize_and_erode(&ids, 20, 20, 5).unwrap();
        assert_eq!(m.iter().map(|&v| v as usize).sum::<usize>(), 64);
        assert!((6..14).all(|r| (6..14).all(|c| m[r * 20 + c] == 1)));

        assert!(matches!(
            binarize_and_erode(&ids, 20, 20, 6),
            Err(Error::FieldNotFound(6))
        ));
    }

    #[test]
    fn image_boundary_never_survives() {
        let ids = vec![5u32; 6 * 6];
        let m = binarize_and_erode(&ids, 6, 6, 5).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let border = r == 0 || c == 0 || r == 5 || c == 5;
                assert_eq!(m[r * 6 + c] == 1, !border);
            }
        }
    }

    #[test]
    fn selection_rules() {
        let dates = [160, 175, 190, 200, 215, 230, 250];
        assert_eq!(
            select_temporal_instances(&dates, &[true; 7]).unwrap(),
            [0, 1, 2, 3, 4, 5, 6]
        );

        let dates = [155, 160, 181, 190, 200, 215, 230, 250, 260];
        let got = select_temporal_instances(&dates, &[true; 9]).unwrap();
        assert_eq!(&got[..2], &[0, 2]);
        assert_eq!(got[6], 7);

        let mut usable = [true; 9];
        usable[7] = false;
        usable[8] = false;
        assert!(matches!(
            select_temporal_instances(&dates, &usable),
            Err(Error::InsufficientCloudFreeInstances(_))
        ));

        let mut usable = [true; 9];
        usable[3] = false;
        assert!(matches!(
            select_temporal_instances(&dates, &usable),
            Err(Error::InsufficientCloudFreeInstances(_))
        ));
    }

    #[test]
    fn padding_arithmetic() {
        assert_eq!(leading_pad(8), 28);
        assert_eq!(64 - 8 - leading_pad(8), 28);
        assert_eq!(leading_pad(6), 29);
        assert_eq!(leading_pad(7), 28);
        assert_eq!(64 - 7 - leading_pad(7), 29);
    }

    fn scene_with(ids: Vec<u32>, h: usize, w: usize) -> Scene {
        let dates = vec![160, 175, 190, 200, 215, 230, 250];
        let (c, t) = (2, dates.len());
        Scene {
            manifest: SceneManifest {
                scene_id: "s".into(),
                height: h,
                width: w,
                num_channels: c,
                num_timepoints: t,
                band_names: vec!["B04".into(), "B08".into()],
                dates,
                value_dtype: VALUE_DTYPE.into(),
            },
            data: (0..t * c * h * w).map(|i| 0.001 * (i % 997) as f32 + 0.01).collect(),
            cloud_mask: vec![0; t * h * w],
            field_ids: ids,
        }
    }

    #[test]
    fn patch_extraction_translates_values() {
        // 10x8 block erodes to an 8x6 interior.
        let (h, w) = (30, 30);
        let scene = scene_with(ids_with_block(h, w, 3, 4, 10, 8), h, w);
        let patch = extract_field_patch(&scene, 5, &[0, 1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(patch.field_mask.iter().map(|&v| v as usize).sum::<usize>(), 48);
        // interior starts at scene (4, 5) and lands at (28, 29)
        assert_eq!(patch.field_mask[28 * 64 + 29], 1);
        assert_eq!(patch.field_mask[27 * 64 + 29], 0);
        assert_eq!(patch.field_mask[35 * 64 + 34], 1);
        assert_eq!(patch.field_mask[36 * 64 + 34], 0);
        assert_eq!(patch.value(3, 1, 28, 29), scene.value(3, 1, 4, 5));
        assert_eq!(patch.value(6, 0, 35, 34), scene.value(6, 0, 11, 10));
        assert_eq!(patch.dates, [160, 175, 190, 200, 215, 230, 250]);
    }

    #[test]
    fn oversized_and_empty_fields() {
        let (h, w) = (80, 20);
        let scene = scene_with(ids_with_block(h, w, 2, 2, 72, 12), h, w);
        assert!(matches!(
            extract_field_patch(&scene, 5, &[0, 1, 2, 3, 4, 5, 6]),
            Err(Error::FieldTooLarge { rows: 70, cols: 10 })
        ));
        let scene = scene_with(ids_with_block(10, 10, 2, 2, 2, 5), 10, 10);
        assert!(matches!(
            extract_field_patch(&scene, 5, &[0, 1, 2, 3, 4, 5, 6]),
            Err(Error::EmptyAfterErosion(5))
        ));
    }

    #[test]
    fn partial_block_mean_fill() {
        let mut block = vec![0.0f32; 2 * SUB_PIXELS];
        let mut present = [false; SUB_PIXELS];
        present[0] = true;
        present[5] = true;
        block[0] = 0.2;
        block[5] = 0.4;
        block[SUB_PIXELS] = 1.0;
        block[SUB_PIXELS + 5] = 3.0;
        fill_partial_block(&mut block, &present);
        for i in 0..SUB_PIXELS {
            if !present[i] {
                assert!((block[i] - 0.3).abs() < 1e-7);
                assert_eq!(block[SUB_PIXELS + i], 2.0);
            }
        }
        assert_eq!((block[0], block[5]), (0.2, 0.4));
    }

    #[test]
    fn aligned_block_yields_one_subpatch() {
        let mut patch = FieldPatch {
            field_id: 1,
            channels: 1,
            tensor: vec![0.0; NUM_TIMEPOINTS * PATCH_SIZE * PATCH_SIZE],
            field_mask: vec![0; PATCH_SIZE * PATCH_SIZE],
            dates: [160, 175, 190, 200, 215, 230, 250],
            source_scene: "s".into(),
        };
        for r in 8..12 {
            for c in 20..24 {
                patch.field_mask[r * PATCH_SIZE + c] = 1;
                for t in 0..NUM_TIMEPOINTS {
                    patch.tensor[(t * PATCH_SIZE + r) * PATCH_SIZE + c] = 0.5 + t as f32;
                }
            }
        }
        let subs = subdivide(&patch);
        assert_eq!(subs.len(), 1);
        assert_eq!((subs[0].grid_row, subs[0].grid_col), (2, 5));
        assert!(subs[0].plane(3, 0).iter().all(|&v| v == 3.5));
    }

    #[test]
    fn variants_shape_and_values() {
        let names: Vec<String> = B10_BANDS.iter().map(|s| s.to_string()).collect();
        let mut tensor = vec![0.0f32; NUM_TIMEPOINTS * 10 * SUB_PIXELS];
        let consts = [0.05, 0.07, 0.1, 0.2, 0.3, 0.4, 0.5, 0.52, 0.4, 0.3];
        for t in 0..NUM_TIMEPOINTS {
            for (c, &v) in consts.iter().enumerate() {
                for p in 0..SUB_PIXELS {
                    tensor[(t * 10 + c) * SUB_PIXELS + p] = v;
                }
            }
        }
        let sub = SubPatchTensor {
            scene_id: "s".into(),
            field_id: 1,
            grid_row: 0,
            grid_col: 0,
            variant: Variant::B10,
            channels: 10,
            tensor,
            dates: [160, 175, 190, 200, 215, 230, 250],
        };
        let b10 = to_variant(&sub, &VariantConfig::new(Variant::B10, &names).unwrap()).unwrap();
        assert_eq!(b10, sub);
        let b4 = to_variant(&sub, &VariantConfig::new(Variant::B4, &names).unwrap()).unwrap();
        assert_eq!(b4.channels, 4);
        assert_eq!(b4.plane(2, 3)[0], 0.4);
        assert_eq!(b4.plane(2, 2)[0], 0.5);
        let mvi = to_variant(&sub, &VariantConfig::new(Variant::MVI, &names).unwrap()).unwrap();
        assert_eq!(mvi.channels, 3);
        for t in 0..NUM_TIMEPOINTS {
            assert!((mvi.plane(t, 0)[7] as f64 - 0.666667).abs() < 1e-6);
            assert!((mvi.plane(t, 1)[7] as f64 - 0.579710).abs() < 1e-6);
            assert!((mvi.plane(t, 2)[7] as f64 - 0.8).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_band() {
        let names: Vec<String> = ["B02", "B04", "B08"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            VariantConfig::new(Variant::B4, &names),
            Err(Error::MissingBand(b)) if b == "B11"
        ));
        assert!(matches!(
            VariantConfig::new(Variant::B10, &names),
            Err(Error::MissingBand(_))
        ));
    }
}
