#![allow(dead_code)]

use beetsense::preprocess::{
    binarize_and_erode, extract_field_patch, fill_partial_block, select_temporal_instances,
    subdivide, GRID_SIZE, NUM_SUBPATCHES, NUM_TIMEPOINTS, PATCH_SIZE, SUB_PIXELS, SUB_SIZE,
};
use beetsense::scene_io::{Scene, SceneManifest, VALUE_DTYPE};
use rand::Rng;

/// Two instances per month, June to September.
pub const DATES: [u16; 8] = [160, 175, 190, 205, 220, 235, 250, 265];

pub const FIELD: u32 = 7;

/// Scene with one random rectilinear blob (union of rectangles) labelled [`FIELD`], a
/// distractor field, and random reflectance.
pub fn blob_scene(rng: &mut impl Rng, size: usize, channels: usize) -> Scene {
    let mut ids = vec![0u32; size * size];
    let rects = rng.random_range(1..=3);
    for _ in 0..rects {
        let h = rng.random_range(1..=size.min(40));
        let w = rng.random_range(1..=size.min(40));
        let r0 = rng.random_range(0..=size - h);
        let c0 = rng.random_range(0..=size - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                ids[r * size + c] = FIELD;
            }
        }
    }
    for _ in 0..rng.random_range(0..6) {
        let p = rng.random_range(0..size * size);
        ids[p] = if rng.random() { 3 } else { 0 };
    }
    if !ids.contains(&FIELD) {
        ids[size * size / 2] = FIELD;
    }
    let t = DATES.len();
    let data = (0..t * channels * size * size)
        .map(|_| rng.random_range(0.01f32..0.9))
        .collect();
    Scene {
        manifest: SceneManifest {
            scene_id: "blob".into(),
            height: size,
            width: size,
            num_channels: channels,
            num_timepoints: t,
            band_names: (0..channels).map(|c| format!("X{c}")).collect(),
            dates: DATES.to_vec(),
            value_dtype: VALUE_DTYPE.into(),
        },
        data,
        cloud_mask: vec![0; t * size * size],
        field_ids: ids,
    }
}

/// Direct 3x3 erosion: every offset in [-1, 1]^2 must land inside the image on the field.
pub fn erosion_oracle(ids: &[u32], h: usize, w: usize, field: u32) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let mut keep = true;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    let inside = rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64;
                    if !inside || ids[(rr as usize) * w + cc as usize] != field {
                        keep = false;
                    }
                }
            }
            out[(r as usize) * w + c as usize] = keep as u8;
        }
    }
    out
}

/// Checks erosion, mask purity, block conservation and fill idempotence for one field.
/// Returns whether the field produced a patch.
pub fn check_preprocess_invariants(scene: &Scene) -> Result<bool, String> {
    let m = &scene.manifest;
    let eroded = binarize_and_erode(&scene.field_ids, m.height, m.width, FIELD)
        .map_err(|e| e.to_string())?;
    if eroded != erosion_oracle(&scene.field_ids, m.height, m.width, FIELD) {
        return Err("erosion differs from the brute-force oracle".into());
    }
    if !eroded.contains(&1) {
        return Ok(false);
    }
    let selected = select_temporal_instances(&m.dates, &vec![true; m.num_timepoints])
        .map_err(|e| e.to_string())?;
    let patch = match extract_field_patch(scene, FIELD, &selected) {
        Ok(p) => p,
        Err(beetsense::Error::FieldTooLarge { .. }) => return Ok(false),
        Err(e) => return Err(e.to_string()),
    };
    let kept_pixels = patch.field_mask.iter().filter(|&&v| v == 1).count();
    if kept_pixels != eroded.iter().filter(|&&v| v == 1).count() {
        return Err("patch mask lost or gained pixels".into());
    }
    for t in 0..NUM_TIMEPOINTS {
        for c in 0..patch.channels {
            for p in 0..PATCH_SIZE * PATCH_SIZE {
                if patch.field_mask[p] == 0 && patch.value(t, c, p / PATCH_SIZE, p % PATCH_SIZE) != 0.0 {
                    return Err(format!("nonzero value outside the mask at t={t} c={c} p={p}"));
                }
            }
        }
    }
    let subs = subdivide(&patch);
    let mut discarded = 0;
    for gr in 0..GRID_SIZE {
        for gc in 0..GRID_SIZE {
            let any = (0..SUB_PIXELS).any(|i| {
                let (r, c) = (gr * SUB_SIZE + i / SUB_SIZE, gc * SUB_SIZE + i % SUB_SIZE);
                patch.field_mask[r * PATCH_SIZE + c] != 0
            });
            discarded += (!any) as usize;
        }
    }
    if subs.len() + discarded != NUM_SUBPATCHES {
        return Err(format!("{} kept + {discarded} discarded != 256", subs.len()));
    }
    for sub in &subs {
        let mut present = [false; SUB_PIXELS];
        for (i, p) in present.iter_mut().enumerate() {
            let (r, c) = (
                sub.grid_row as usize * SUB_SIZE + i / SUB_SIZE,
                sub.grid_col as usize * SUB_SIZE + i % SUB_SIZE,
            );
            *p = patch.field_mask[r * PATCH_SIZE + c] != 0;
        }
        let mut again = sub.tensor.clone();
        fill_partial_block(&mut again, &present);
        if again != sub.tensor {
            return Err("filling a filled block changed it".into());
        }
        for t in 0..NUM_TIMEPOINTS {
            for c in 0..sub.channels {
                for (i, &p) in present.iter().enumerate() {
                    let (r, col) = (
                        sub.grid_row as usize * SUB_SIZE + i / SUB_SIZE,
                        sub.grid_col as usize * SUB_SIZE + i % SUB_SIZE,
                    );
                    if p && sub.plane(t, c)[i] != patch.value(t, c, r, col) {
                        return Err("field pixel altered by the fill".into());
                    }
                }
            }
        }
    }
    Ok(true)
}

/// Minimum within-cluster sum of squares over every split of `xs` into two nonempty groups.
pub fn best_two_partition_inertia(xs: &[f64]) -> f64 {
    let n = xs.len();
    let sse = |g: &[f64]| {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << n) - 1 {
        let (a, b): (Vec<(usize, &f64)>, Vec<(usize, &f64)>) =
            xs.iter().enumerate().partition(|(i, _)| mask >> i & 1 == 1);
        let a: Vec<f64> = a.into_iter().map(|(_, &x)| x).collect();
        let b: Vec<f64> = b.into_iter().map(|(_, &x)| x).collect();
        best = best.min(sse(&a) + sse(&b));
    }
    best
}

pub fn mse_oracle(x: &[f64], y: &[f64], n: usize) -> f64 {
    let d = x.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..d {
            let e = x[i * d + j] - y[i * d + j];
            s += e * e;
        }
        total += s;
    }
    total / n as f64
}

/// Worst relative error between analytic and central-difference gradients of
/// `||f(x + enc) - x||^2` on a miniature AE3D (C=2, widths [3, 4], latent 5), over
/// `samples` randomly chosen parameters.
pub fn gradient_check(seed: u64, samples: usize, step: f64) -> f64 {
    use beetsense::models::{Autoencoder, AutoencoderSpec, ModelKind};
    use beetsense::temporal_encoding::{apply_encoding, EncodingMode};
    use rand::SeedableRng;

    let spec = AutoencoderSpec::for_channels(ModelKind::Ae3d, 2).with_widths(vec![3, 4], 5);
    let mut model = Autoencoder::<f64>::new(&spec, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let target: Vec<f64> = (0..model.input_len()).map(|_| rng.random_range(0.0..1.0)).collect();
    let dates = [160u16, 181, 190, 212, 220, 243, 250];
    let input = apply_encoding(&target, 2, &dates, EncodingMode::Split).unwrap();

    let loss = |m: &Autoencoder<f64>| {
        let mut ws = m.workspace();
        m.forward(&input, &mut ws);
        ws.output().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    let mut ws = model.workspace();
    model.forward(&input, &mut ws);
    let mut grads = vec![0.0; model.num_params()];
    model.backward(&target, 1.0, &mut ws, &mut grads);

    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let i = rng.random_range(0..model.num_params());
        let orig = model.params[i];
        model.params[i] = orig + step;
        let up = loss(&model);
        model.params[i] = orig - step;
        let down = loss(&model);
        model.params[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
