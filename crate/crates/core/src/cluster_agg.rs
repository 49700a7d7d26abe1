//! Two-cluster k-means over feature rows, cluster-to-class mapping, and aggregation of
//! sub-patch classes into field labels.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline_features::FeatureMatrix;
use crate::error::{Error, Result};
use crate::evaluation::{confusion, metrics};
use crate::rawio;
use crate::scene_io::{Label, LabelSet};

pub const MAX_ITERATIONS: usize = 300;
pub const SHIFT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub dims: usize,
    /// Row-major `k x dims`.
    pub centroids: Vec<f64>,
    pub seed: u64,
    pub restarts: usize,
    pub inertia: f64,
    /// Restart that produced the model.
    pub best_restart: usize,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dims..(j + 1) * self.dims]
    }
}

/// One seeded run of Lloyd's algorithm.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lower index.
fn nearest(point: &[f64], centroids: &[f64], dims: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dims).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[f64], dims: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dims;
    let row = |i: usize| &points[i * dims..(i + 1) * dims];
    let mut centroids = Vec::with_capacity(k * dims);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dims])).collect();
    while centroids.len() < k * dims {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &centroids[start..start + dims]));
        }
    }
    centroids
}

/// Lloyd iterations from a k-means++ start drawn with `seed`.
pub fn lloyd(points: &[f64], dims: usize, k: usize, seed: u64) -> LloydRun {
    let n = points.len() / dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, dims, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        for (i, a) in assignment.iter_mut().enumerate() {
            let (j, d) = nearest(&points[i * dims..(i + 1) * dims], &centroids, dims);
            *a = j;
            inertia += d;
        }
        trace.push(inertia);
        if iterations == MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        // Running means stay exact when all members of a cluster coincide.
        let mut means = vec![0.0; k * dims];
        let mut counts = vec![0usize; k];
        for (i, &j) in assignment.iter().enumerate() {
            counts[j] += 1;
            let inv = 1.0 / counts[j] as f64;
            for (m, &v) in means[j * dims..(j + 1) * dims]
                .iter_mut()
                .zip(&points[i * dims..(i + 1) * dims])
            {
                *m += (v - *m) * inv;
            }
        }
        let mut max_shift: f64 = 0.0;
        for j in 0..k {
            // An empty cluster keeps its previous centroid.
            if counts[j] == 0 {
                continue;
            }
            let new = &means[j * dims..(j + 1) * dims];
            max_shift = max_shift.max(sq_dist(new, &centroids[j * dims..(j + 1) * dims]).sqrt());
            centroids[j * dims..(j + 1) * dims].copy_from_slice(new);
        }
        if max_shift < SHIFT_TOLERANCE {
            // One last assignment against the updated centroids.
            let inertia = (0..n)
                .map(|i| nearest(&points[i * dims..(i + 1) * dims], &centroids, dims).1)
                .sum();
            trace.push(inertia);
            break;
        }
    }
    LloydRun {
        centroids,
        inertia: *trace.last().unwrap(),
        iterations,
        inertia_trace: trace,
    }
}

/// Best of `restarts` seeded runs (restart `r` uses seed `seed + r`), ranked by
/// `(inertia, restart index)`.
pub fn kmeans_fit_points(
    points: &[f64],
    dims: usize,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel> {
    let n = points.len().checked_div(dims).unwrap_or(0);
    if dims == 0 || n < k || k == 0 {
        return Err(Error::TooFewPoints { points: n, k });
    }
    let runs: Vec<LloydRun> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| lloyd(points, dims, k, seed.wrapping_add(r as u64)))
        .collect();
    let (best_restart, best) = runs
        .into_iter()
        .enumerate()
        .reduce(|a, b| if b.1.inertia < a.1.inertia { b } else { a })
        .unwrap();
    Ok(ClusterModel {
        k,
        dims,
        centroids: best.centroids,
        seed,
        restarts: restarts.max(1),
        inertia: best.inertia,
        best_restart,
        iterations: best.iterations,
    })
}

pub fn kmeans_fit(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel> {
    kmeans_fit_points(&features.values, features.dims, k, seed, restarts)
}

pub fn assign_points(model: &ClusterModel, points: &[f64], dims: usize) -> Result<Vec<usize>> {
    if dims != model.dims {
        return Err(Error::DimMismatch {
            expected: model.dims,
            got: dims,
        });
    }
    Ok(points
        .chunks_exact(dims)
        .map(|p| nearest(p, &model.centroids, dims).0)
        .collect())
}

pub fn assign(model: &ClusterModel, features: &FeatureMatrix) -> Result<Vec<usize>> {
    assign_points(model, &features.values, features.dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingStrategy {
    #[default]
    BestF1,
    LowNdvi,
}

impl fmt::Display for MappingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingStrategy::BestF1 => "best_f1",
            MappingStrategy::LowNdvi => "low_ndvi",
        })
    }
}

impl FromStr for MappingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best_f1" => Ok(MappingStrategy::BestF1),
            "low_ndvi" => Ok(MappingStrategy::LowNdvi),
            other => Err(Error::ConfigInvalid(format!("unknown mapping strategy {other:?}"))),
        }
    }
}

/// Class of each of the two clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMapping {
    pub stressed_cluster: usize,
}

impl ClusterMapping {
    pub fn class_of(&self, cluster: usize) -> Label {
        if cluster == self.stressed_cluster {
            Label::Stressed
        } else {
            Label::Healthy
        }
    }

    pub fn classes(&self, assignments: &[usize]) -> Vec<Label> {
        assignments.iter().map(|&c| self.class_of(c)).collect()
    }
}

/// Mean late-season NDVI of each cluster's members; `NaN` for an empty cluster.
pub fn cluster_ndvi_means(assignments: &[usize], late_ndvi: &[Option<f64>]) -> Result<[f64; 2]> {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (&a, v) in assignments.iter().zip(late_ndvi) {
        let v = v.ok_or(Error::MissingNdvi)?;
        sums[a] += v;
        counts[a] += 1;
    }
    Ok([0, 1].map(|j| {
        if counts[j] == 0 {
            f64::NAN
        } else {
            sums[j] / counts[j] as f64
        }
    }))
}

/// Chooses which cluster means "stressed".
///
/// `BestF1` scores both mappings through aggregation at `alpha` on the labeled fields and
/// keeps the higher F1, then the higher accuracy, then cluster 0. `LowNdvi` takes the
/// cluster with the lower mean late-season NDVI.
pub fn map_clusters(
    assignments: &[usize],
    field_ids: &[u32],
    labels: Option<&LabelSet>,
    strategy: MappingStrategy,
    ndvi_means: Option<[f64; 2]>,
    alpha: f64,
) -> Result<ClusterMapping> {
    match strategy {
        MappingStrategy::BestF1 => {
            let labels = labels.ok_or(Error::MissingLabels)?;
            if labels.is_empty() {
                return Err(Error::MissingLabels);
            }
            let mut best: Option<((f64, f64), ClusterMapping)> = None;
            for stressed_cluster in 0..2 {
                let mapping = ClusterMapping { stressed_cluster };
                let preds = aggregate(field_ids, &mapping.classes(assignments), alpha)?;
                let m = metrics(&confusion(&preds, labels)?)?;
                let score = (m.f1, m.accuracy);
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    best = Some((score, mapping));
                }
            }
            Ok(best.unwrap().1)
        }
        MappingStrategy::LowNdvi => {
            let [a, b] = ndvi_means.ok_or(Error::MissingNdvi)?;
            let stressed_cluster = match (a.is_nan(), b.is_nan()) {
                (false, true) => 0,
                (true, false) => 1,
                _ if b < a => 1,
                _ => 0,
            };
            Ok(ClusterMapping { stressed_cluster })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPrediction {
    pub field_id: u32,
    pub stressed_fraction: f64,
    pub label: Label,
    pub n_subpatches: usize,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::ConfigInvalid(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// Field labels from per-sub-patch classes: stressed iff the stressed fraction is
/// strictly greater than `alpha`. Output is sorted by field id.
pub fn aggregate(field_ids: &[u32], classes: &[Label], alpha: f64) -> Result<Vec<FieldPrediction>> {
    check_alpha(alpha)?;
    if field_ids.len() != classes.len() {
        return Err(Error::DimMismatch {
            expected: field_ids.len(),
            got: classes.len(),
        });
    }
    let mut per_field: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&f, &c) in field_ids.iter().zip(classes) {
        let e = per_field.entry(f).or_default();
        e.1 += 1;
        if c == Label::Stressed {
            e.0 += 1;
        }
    }
    Ok(per_field
        .into_iter()
        .map(|(field_id, (stressed, total))| {
            let stressed_fraction = stressed as f64 / total as f64;
            FieldPrediction {
                field_id,
                stressed_fraction,
                label: if stressed_fraction > alpha {
                    Label::Stressed
                } else {
                    Label::Healthy
                },
                n_subpatches: total,
            }
        })
        .collect())
}

/// Fails with `EmptyField` if any of `fields` received no sub-patch.
pub fn require_fields(preds: &[FieldPrediction], fields: &[u32]) -> Result<()> {
    for &f in fields {
        if !preds.iter().any(|p| p.field_id == f && p.n_subpatches > 0) {
            return Err(Error::EmptyField(f));
        }
    }
    Ok(())
}

pub fn write_predictions(preds: &[FieldPrediction], path: &Path) -> Result<()> {
    let mut text = String::from("field_id,label,stressed_fraction,n_subpatches\n");
    for p in preds {
        text.push_str(&format!(
            "{},{},{:.6},{}\n",
            p.field_id, p.label, p.stressed_fraction, p.n_subpatches
        ));
    }
    rawio::write_bytes(path, text.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<FieldPrediction>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| Error::csv(path, e))?;
        let bad = || Error::InvariantViolation(format!("{}: malformed row {r:?}", path.display()));
        if r.len() != 4 {
            return Err(bad());
        }
        out.push(FieldPrediction {
            field_id: r[0].parse().map_err(|_| bad())?,
            label: r[1].parse()?,
            stressed_fraction: r[2].parse().map_err(|_| bad())?,
            n_subpatches: r[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_example() {
        let m = kmeans_fit_points(&[0.0, 0.1, 0.9, 1.0], 1, 2, 0, 10).unwrap();
        let mut c = m.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12 && (c[1] - 0.95).abs() < 1e-12);
        assert!((m.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn identical_points() {
        let m = kmeans_fit_points(&[0.3, 0.7, 0.3, 0.7, 0.3, 0.7], 2, 2, 4, 10).unwrap();
        assert_eq!(m.centroid(0), &[0.3, 0.7]);
        assert_eq!(m.centroid(1), &[0.3, 0.7]);
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans_fit_points(&[1.0], 1, 2, 0, 10),
            Err(Error::TooFewPoints { points: 1, k: 2 })
        ));
    }

    #[test]
    fn assignment_ties_go_low() {
        let model = ClusterModel {
            k: 2,
            dims: 1,
            centroids: vec![0.0, 1.0],
            seed: 0,
            restarts: 1,
            inertia: 0.0,
            best_restart: 0,
            iterations: 0,
        };
        assert_eq!(assign_points(&model, &[1.0, 0.5, 0.1], 1).unwrap(), vec![1, 0, 0]);
        assert!(matches!(
            assign_points(&model, &[1.0, 0.5], 2),
            Err(Error::DimMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn aggregation_examples() {
        let classes = |s: usize, n: usize| {
            (0..n)
                .map(|i| if i < s { Label::Stressed } else { Label::Healthy })
                .collect::<Vec<_>>()
        };
        let p = aggregate(&[1; 10], &classes(6, 10), 0.5).unwrap();
        assert_eq!(p[0].label, Label::Stressed);
        assert!((p[0].stressed_fraction - 0.6).abs() < 1e-15);
        assert_eq!(aggregate(&[1; 10], &classes(5, 10), 0.5).unwrap()[0].label, Label::Healthy);
        assert_eq!(aggregate(&[1; 3], &classes(3, 3), 1.0).unwrap()[0].label, Label::Healthy);
        assert!(aggregate(&[1; 3], &classes(3, 3), 1.5).is_err());
        assert!(matches!(
            require_fields(&aggregate(&[1; 3], &classes(3, 3), 0.5).unwrap(), &[1, 2]),
            Err(Error::EmptyField(2))
        ));
    }

    fn labels(pairs: &[(u32, Label)]) -> LabelSet {
        LabelSet {
            entries: pairs.iter().copied().collect(),
        }
    }

    #[test]
    fn best_f1_mapping() {
        // field 1 stressed, fields 2-3 healthy; cluster 1 tracks stress.
        let fields = [1, 1, 2, 2, 3, 3];
        let assignments = [1, 1, 0, 0, 0, 1];
        let l = labels(&[(1, Label::Stressed), (2, Label::Healthy), (3, Label::Healthy)]);
        let m = map_clusters(&assignments, &fields, Some(&l), MappingStrategy::BestF1, None, 0.5)
            .unwrap();
        assert_eq!(m.stressed_cluster, 1);
        assert!(matches!(
            map_clusters(&assignments, &fields, None, MappingStrategy::BestF1, None, 0.5),
            Err(Error::MissingLabels)
        ));
    }

    #[test]
    fn best_f1_tie_prefers_accuracy_then_cluster_zero() {
        // Both mappings give one stressed and one healthy field prediction and equal scores.
        let fields = [1, 2];
        let assignments = [0, 1];
        let l = labels(&[(1, Label::Stressed), (2, Label::Stressed)]);
        let m = map_clusters(&assignments, &fields, Some(&l), MappingStrategy::BestF1, None, 0.5)
            .unwrap();
        assert_eq!(m.stressed_cluster, 0);
    }

    #[test]
    fn low_ndvi_mapping() {
        let m = map_clusters(&[], &[], None, MappingStrategy::LowNdvi, Some([0.7, 0.4]), 0.5).unwrap();
        assert_eq!(m.stressed_cluster, 1);
        let m = map_clusters(&[], &[], None, MappingStrategy::LowNdvi, Some([0.3, 0.4]), 0.5).unwrap();
        assert_eq!(m.stressed_cluster, 0);
        assert!(matches!(
            map_clusters(&[], &[], None, MappingStrategy::LowNdvi, None, 0.5),
            Err(Error::MissingNdvi)
        ));
        let means = cluster_ndvi_means(&[0, 1, 1], &[Some(0.2), Some(0.6), Some(0.8)]).unwrap();
        assert!((means[0] - 0.2).abs() < 1e-15 && (means[1] - 0.7).abs() < 1e-15);
        assert!(cluster_ndvi_means(&[0], &[None]).is_err());
    }

    #[test]
    fn predictions_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        let preds = aggregate(&[4, 4, 4, 9], &[Label::Stressed, Label::Healthy, Label::Stressed, Label::Healthy], 0.5).unwrap();
        write_predictions(&preds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "field_id,label,stressed_fraction,n_subpatches\n4,stressed,0.666667,3\n9,healthy,0.000000,1\n"
        );
        let back = read_predictions(&path).unwrap();
        assert_eq!(back[1], preds[1]);
    }
}
