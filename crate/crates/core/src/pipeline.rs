//! Pipeline stages, in memory and as file-backed steps under a work directory.
//!
//! Work directory layout:
//!
//! ```text
//! scenes/<scene_id>/...            synthetic or user-provided scenes
//! labels.csv
//! subpatches/subpatches_<V>.f32    sub-patch store per variant (+ .index.json)
//! models/<tag>/seed<k>/            model.bin + model.json
//! features/<stem>.f32              feature matrices (+ .index.json)
//! clusters/<tag>_seed<k>.json      k-means model and assignments
//! predictions/<tag>_seed<k>.csv    field predictions (+ .classes.json)
//! reports/<tag>/                   report.json, curves.csv, curves.svg
//! reports/compare.{csv,json}
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::baseline_features::{
    histogram_feature_matrix, load_features, raw_feature_matrix, save_features, FeatureMatrix,
};
use crate::cluster_agg::{
    aggregate, assign, cluster_ndvi_means, kmeans_fit, map_clusters, read_predictions,
    write_predictions, ClusterMapping, ClusterModel, FieldPrediction, MappingStrategy,
};
use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    confusion, default_alphas, mean_curve, render_curves_svg, run_protocol, seed_result,
    sweep_alpha, write_curves_csv, EvalReport,
};
use crate::models::{
    encode_batch, load_checkpoint, save_checkpoint, train, Autoencoder, TrainHistory,
    TrainedModel,
};
use crate::preprocess::{
    load_store, preprocess_scenes, save_store, store_paths, StoreIndex, SubPatchStore,
    VariantConfig,
};
use crate::rawio;
use crate::scene_io::{load_labels, load_scene_dir, Label, LabelSet};
use crate::synthgen;

pub const CLUSTER_K: usize = 2;

/// Everything one seed of one configuration produces.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub features: FeatureMatrix,
    pub history: Option<TrainHistory>,
    pub cluster: ClusterModel,
    pub assignments: Vec<usize>,
    pub mapping: ClusterMapping,
    pub classes: Vec<Label>,
    pub predictions: Vec<FieldPrediction>,
}

fn check_variant(cfg: &RunConfig, store: &SubPatchStore) -> Result<()> {
    if cfg.variant != store.variant {
        return Err(Error::VariantMismatch(format!(
            "config asks for {}, store holds {}",
            cfg.variant, store.variant
        )));
    }
    Ok(())
}

/// Labels restricted to `fields`, the fields that survived preprocessing. Fields dropped
/// there (clouds, erosion) have no sub-patches and cannot be scored.
pub fn evaluable_labels(labels: &LabelSet, fields: &BTreeSet<u32>) -> LabelSet {
    let kept = LabelSet {
        entries: labels
            .entries
            .iter()
            .filter(|(f, _)| fields.contains(f))
            .map(|(&f, &l)| (f, l))
            .collect(),
    };
    let dropped = labels.len() - kept.len();
    if dropped > 0 {
        warn!(
            "{dropped} labelled fields have no sub-patches and are left out of scoring ({} remain)",
            kept.len()
        );
    }
    kept
}

pub fn store_fields(store: &SubPatchStore) -> BTreeSet<u32> {
    store.records.iter().map(|r| r.field_id).collect()
}

pub fn train_model(cfg: &RunConfig, store: &SubPatchStore, seed: u64) -> Result<TrainedModel> {
    check_variant(cfg, store)?;
    let spec = cfg.model_spec().ok_or_else(|| {
        Error::ConfigInvalid(format!("method {} has no model to train", cfg.method))
    })?;
    let model = Autoencoder::<f32>::new(&spec, seed)?;
    train(model, store, &cfg.train_config(seed), cfg.encoding())
}

/// Features for the baseline methods; `None` for autoencoder methods.
pub fn baseline_features(cfg: &RunConfig, store: &SubPatchStore) -> Result<Option<FeatureMatrix>> {
    check_variant(cfg, store)?;
    Ok(match cfg.method {
        Method::Raw => Some(raw_feature_matrix(store)?),
        Method::Histogram => Some(histogram_feature_matrix(store, cfg.bins)?),
        Method::Ae2d | Method::Ae3d => None,
    })
}

pub fn latent_features(
    cfg: &RunConfig,
    trained: &TrainedModel,
    store: &SubPatchStore,
) -> Result<FeatureMatrix> {
    let latents = encode_batch(trained, store, cfg.encoding())?;
    FeatureMatrix::from_latents(&latents, store)
}

pub struct Classification {
    pub cluster: ClusterModel,
    pub assignments: Vec<usize>,
    pub mapping: ClusterMapping,
    pub classes: Vec<Label>,
    pub predictions: Vec<FieldPrediction>,
}

pub fn fit_clusters(cfg: &RunConfig, features: &FeatureMatrix, seed: u64) -> Result<(ClusterModel, Vec<usize>)> {
    let cluster = kmeans_fit(features, CLUSTER_K, seed, cfg.kmeans_restarts)?;
    let assignments = assign(&cluster, features)?;
    Ok((cluster, assignments))
}

pub fn label_clusters(
    cfg: &RunConfig,
    features: &FeatureMatrix,
    assignments: &[usize],
    labels: Option<&LabelSet>,
) -> Result<(ClusterMapping, Vec<Label>, Vec<FieldPrediction>)> {
    let field_ids = features.field_ids();
    let ndvi = match cfg.mapping_strategy {
        MappingStrategy::LowNdvi => {
            let late: Vec<Option<f64>> = features.provenance.iter().map(|r| r.late_ndvi).collect();
            Some(cluster_ndvi_means(assignments, &late)?)
        }
        MappingStrategy::BestF1 => None,
    };
    let mapping = map_clusters(
        assignments,
        &field_ids,
        labels,
        cfg.mapping_strategy,
        ndvi,
        cfg.alpha,
    )?;
    let classes = mapping.classes(assignments);
    let predictions = aggregate(&field_ids, &classes, cfg.alpha)?;
    Ok((mapping, classes, predictions))
}

pub fn classify(
    cfg: &RunConfig,
    features: &FeatureMatrix,
    labels: Option<&LabelSet>,
    seed: u64,
) -> Result<Classification> {
    let (cluster, assignments) = fit_clusters(cfg, features, seed)?;
    let (mapping, classes, predictions) = label_clusters(cfg, features, &assignments, labels)?;
    Ok(Classification {
        cluster,
        assignments,
        mapping,
        classes,
        predictions,
    })
}

/// Features, clustering, mapping and aggregation for one seed, all in memory.
///
/// Features are rounded to float32 so results match the file-backed steps.
pub fn run_seed(
    cfg: &RunConfig,
    store: &SubPatchStore,
    labels: Option<&LabelSet>,
    seed: u64,
) -> Result<SeedOutcome> {
    let (features, history) = match baseline_features(cfg, store)? {
        Some(f) => (f, None),
        None => {
            let trained = train_model(cfg, store, seed)?;
            (latent_features(cfg, &trained, store)?, Some(trained.history))
        }
    };
    let features = features.to_storage_precision();
    let labels = labels.map(|l| evaluable_labels(l, &store_fields(store)));
    let c = classify(cfg, &features, labels.as_ref(), seed)?;
    Ok(SeedOutcome {
        seed,
        features,
        history,
        cluster: c.cluster,
        assignments: c.assignments,
        mapping: c.mapping,
        classes: c.classes,
        predictions: c.predictions,
    })
}

/// Resolved artifact paths for one configuration.
#[derive(Debug, Clone)]
pub struct WorkDir {
    pub root: PathBuf,
    scenes: Option<PathBuf>,
    labels: Option<PathBuf>,
}

impl WorkDir {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let root = cfg
            .workdir
            .clone()
            .ok_or_else(|| Error::ConfigInvalid("no work directory configured".into()))?;
        Ok(WorkDir {
            root,
            scenes: cfg.scenes.clone(),
            labels: cfg.labels.clone(),
        })
    }

    pub fn scenes(&self) -> PathBuf {
        self.scenes.clone().unwrap_or_else(|| self.root.join("scenes"))
    }

    pub fn labels(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.root.join("labels.csv"))
    }

    pub fn subpatches(&self) -> PathBuf {
        self.root.join("subpatches")
    }

    pub fn model_dir(&self, tag: &str, seed: u64) -> PathBuf {
        self.root.join("models").join(tag).join(format!("seed{seed}"))
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn cluster_path(&self, tag: &str, seed: u64) -> PathBuf {
        self.root.join("clusters").join(format!("{tag}_seed{seed}.json"))
    }

    pub fn predictions_path(&self, tag: &str, seed: u64) -> PathBuf {
        self.root.join("predictions").join(format!("{tag}_seed{seed}.csv"))
    }

    pub fn classes_path(&self, tag: &str, seed: u64) -> PathBuf {
        self.root
            .join("predictions")
            .join(format!("{tag}_seed{seed}.classes.json"))
    }

    pub fn report_dir(&self, tag: &str) -> PathBuf {
        self.root.join("reports").join(tag)
    }
}

fn feature_stem(cfg: &RunConfig, seed: u64) -> String {
    match cfg.method {
        Method::Raw | Method::Histogram => cfg.tag(),
        Method::Ae2d | Method::Ae3d => format!("{}_seed{seed}", cfg.tag()),
    }
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) => rawio::ensure_dir(p),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClusterFile {
    model: ClusterModel,
    assignments: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassesFile {
    strategy: MappingStrategy,
    alpha: f64,
    mapping: ClusterMapping,
    field_ids: Vec<u32>,
    classes: Vec<Label>,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let wd = WorkDir::new(cfg)?;
    let synth = cfg.synth.clone().unwrap_or_default();
    let summary = synthgen::generate(&synth, &wd.scenes(), &wd.labels())?;
    Ok(format!(
        "generated {} scenes with {} fields ({} stressed) in {}",
        summary.scenes,
        summary.fields,
        summary.stressed,
        wd.scenes().display()
    ))
}

/// Builds the sub-patch store of `cfg.variant` from the scene directory.
pub fn build_store(cfg: &RunConfig, scenes_dir: &Path) -> Result<(SubPatchStore, usize)> {
    let scenes = load_scene_dir(scenes_dir)?;
    let first = scenes.first().ok_or_else(|| Error::MissingArtifact(scenes_dir.to_path_buf()))?;
    let vcfg = VariantConfig::for_manifest(cfg.variant, &first.manifest)?;
    if scenes.iter().any(|s| s.manifest.band_names != first.manifest.band_names) {
        return Err(Error::InvariantViolation(
            "all scenes of a dataset must share one band order".into(),
        ));
    }
    let outcome = preprocess_scenes(&scenes);
    let store = SubPatchStore::from_subpatches(&outcome.subpatches, &vcfg)?;
    Ok((store, outcome.skipped.len()))
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<String> {
    let wd = WorkDir::new(cfg)?;
    let (store, skipped) = build_store(cfg, &wd.scenes())?;
    save_store(&store, &wd.subpatches())?;
    let fields: std::collections::BTreeSet<u32> = store.records.iter().map(|r| r.field_id).collect();
    Ok(format!(
        "wrote {} {} sub-patches from {} fields ({} fields skipped) to {}",
        store.len(),
        store.variant,
        fields.len(),
        skipped,
        store_paths(&wd.subpatches(), store.variant).0.display()
    ))
}

/// Field ids in the store index of `cfg.variant`, without loading tensor data.
fn stored_fields(cfg: &RunConfig, wd: &WorkDir) -> Result<BTreeSet<u32>> {
    let path = store_paths(&wd.subpatches(), cfg.variant).1;
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let index: StoreIndex = rawio::read_json(&path)?;
    Ok(index.records.iter().map(|r| r.field_id).collect())
}

fn load_cfg_store(cfg: &RunConfig, wd: &WorkDir) -> Result<SubPatchStore> {
    load_store(&wd.subpatches(), cfg.variant)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let wd = WorkDir::new(cfg)?;
    if cfg.method.model_kind().is_none() {
        return Ok(format!("method {} has no model; nothing to train", cfg.method));
    }
    let store = load_cfg_store(cfg, &wd)?;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        info!("training {} seed {seed} on {} records", cfg.tag(), store.len());
        let trained = train_model(cfg, &store, seed)?;
        let dir = wd.model_dir(&cfg.tag(), seed);
        save_checkpoint(&trained, &dir)?;
        lines.push(format!(
            "seed {seed}: final train loss {:.6}, test loss {} -> {}",
            trained.history.final_train_loss(),
            trained
                .history
                .final_test_loss()
                .map_or("n/a".into(), |l| format!("{l:.6}")),
            dir.display()
        ));
    }
    Ok(lines.join("\n"))
}

pub fn cmd_features(cfg: &RunConfig) -> Result<String> {
    let wd = WorkDir::new(cfg)?;
    let store = load_cfg_store(cfg, &wd)?;
    if let Some(f) = baseline_features(cfg, &store)? {
        let stem = feature_stem(cfg, 0);
        save_features(&f, &wd.features_dir(), &stem)?;
        return Ok(format!("wrote {} x {} {} features ({stem})", f.rows(), f.dims, f.method));
    }
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let dir = wd.model_dir(&cfg.tag(), seed);
        let trained = load_checkpoint(&dir)?;
        let f = latent_features(cfg, &trained, &store)?;
        let stem = feature_stem(cfg, seed);
        save_features(&f, &wd.features_dir(), &stem)?;
        lines.push(format!("seed {seed}: wrote {} x {} latent features ({stem})", f.rows(), f.dims));
    }
    Ok(lines.join("\n"))
}

pub fn cmd_cluster(cfg: &RunConfig) -> Result<String> {
    let wd = WorkDir::new(cfg)?;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let features = load_features(&wd.features_dir(), &feature_stem(cfg, seed))?;
        let (model, assignments) = fit_clusters(cfg, &features, seed)?;
        let path = wd.cluster_path(&cfg.tag(), seed);
        parent_dir(&path)?;
        let sizes = [0, 1].map(|j| assignments.iter().filter(|&&a| a == j).count());
        rawio::write_json(&path, &ClusterFile { model, assignments })?;
        lines.push(format!(
            "seed {seed}: cluster sizes {} / {} -> {}",
            sizes[0],
            sizes[1],
            path.display()
        ));
    }
    Ok(lines.join("\n"))
}

fn optional_labels(cfg: &RunConfig, wd: &WorkDir) -> Result<Option<LabelSet>> {
    let path = wd.labels();
    match cfg.mapping_strategy {
        MappingStrategy::BestF1 => Ok(Some(load_labels(&path)?)),
        MappingStrategy::LowNdvi if path.exists() => Ok(Some(load_labels(&path)?)),
        MappingStrategy::LowNdvi => Ok(None),
    }
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<String> {
    let wd = WorkDir::new(cfg)?;
    let labels = optional_labels(cfg, &wd)?;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let features = load_features(&wd.features_dir(), &feature_stem(cfg, seed))?;
        let fields: BTreeSet<u32> = features.field_ids().into_iter().collect();
        let labels = labels.as_ref().map(|l| evaluable_labels(l, &fields));
        let cpath = wd.cluster_path(&cfg.tag(), seed);
        if !cpath.exists() {
            return Err(Error::MissingArtifact(cpath));
        }
        let clusters: ClusterFile = rawio::read_json(&cpath)?;
        if clusters.assignments.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} assignments for {} feature rows",
                clusters.assignments.len(),
                features.rows()
            )));
        }
        let (mapping, classes, preds) =
            label_clusters(cfg, &features, &clusters.assignments, labels.as_ref())?;
        let path = wd.predictions_path(&cfg.tag(), seed);
        parent_dir(&path)?;
        write_predictions(&preds, &path)?;
        rawio::write_json(
            &wd.classes_path(&cfg.tag(), seed),
            &ClassesFile {
                strategy: cfg.mapping_strategy,
                alpha: cfg.alpha,
                mapping,
                field_ids: features.field_ids(),
                classes,
            },
        )?;
        let stressed = preds.iter().filter(|p| p.label == Label::Stressed).count();
        lines.push(format!(
            "seed {seed}: {stressed} of {} fields stressed (cluster {} = stressed) -> {}",
            preds.len(),
            mapping.stressed_cluster,
            path.display()
        ));
    }
    Ok(lines.join("\n"))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    let wd = WorkDir::new(cfg)?;
    let mut per_seed = Vec::new();
    let mut labels: Option<LabelSet> = None;
    for &seed in &cfg.seeds {
        let preds = read_predictions(&wd.predictions_path(&cfg.tag(), seed))?;
        if labels.is_none() {
            let fields = stored_fields(cfg, &wd)?;
            labels = Some(evaluable_labels(&load_labels(&wd.labels())?, &fields));
        }
        let c = confusion(&preds, labels.as_ref().unwrap())?;
        per_seed.push(seed_result(seed, cfg.alpha, c)?);
    }
    let report = EvalReport::from_seeds(cfg.snapshot(), per_seed);
    let dir = wd.report_dir(&cfg.tag());
    rawio::ensure_dir(&dir)?;
    rawio::write_json(&dir.join("report.json"), &report)?;
    Ok(format!(
        "{}: accuracy {:.4} +/- {:.4}, F1 {:.4} +/- {:.4} over {} seeds -> {}",
        cfg.tag(),
        report.mean.accuracy,
        report.std.accuracy,
        report.mean.f1,
        report.std.f1,
        report.per_seed.len(),
        dir.join("report.json").display()
    ))
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<String> {
    let wd = WorkDir::new(cfg)?;
    let labels = evaluable_labels(&load_labels(&wd.labels())?, &stored_fields(cfg, &wd)?);
    let mut curves = Vec::new();
    for &seed in &cfg.seeds {
        let path = wd.classes_path(&cfg.tag(), seed);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let classes: ClassesFile = rawio::read_json(&path)?;
        curves.push(sweep_alpha(
            &classes.field_ids,
            &classes.classes,
            &labels,
            &default_alphas(),
        )?);
    }
    let rows = mean_curve(&curves);
    let dir = wd.report_dir(&cfg.tag());
    rawio::ensure_dir(&dir)?;
    write_curves_csv(&rows, &dir.join("curves.csv"))?;
    let title = format!(
        "{} ({}): precision / recall / F1 vs alpha",
        cfg.method.display_name(cfg.variant),
        if cfg.encoding().is_some() { "with encodings" } else { "no encodings" }
    );
    rawio::write_bytes(&dir.join("curves.svg"), render_curves_svg(&rows, &title).as_bytes())?;
    let mut out = String::from("alpha  precision  recall  f1\n");
    for r in &rows {
        let _ = writeln!(out, "{:.1}    {:.4}     {:.4}  {:.4}", r.alpha, r.precision, r.recall, r.f1);
    }
    let _ = write!(out, "-> {}", dir.join("curves.csv").display());
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub tensor: String,
    pub temporal_encodings: bool,
    pub alpha: f64,
    pub accuracy_pct: f64,
    pub f1_pct: f64,
    pub report: EvalReport,
}

/// Runs the full protocol for every configured comparison row.
pub fn compare(cfg: &RunConfig, scenes_dir: &Path, store_dir: Option<&Path>, labels: &LabelSet) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for entry in &cfg.compare {
        let run = cfg.with_entry(entry);
        run.validate()?;
        let store = match store_dir.map(|d| load_store(d, run.variant)) {
            Some(Ok(s)) => s,
            Some(Err(Error::MissingArtifact(_))) | None => {
                let (s, _) = build_store(&run, scenes_dir)?;
                if let Some(d) = store_dir {
                    save_store(&s, d)?;
                }
                s
            }
            Some(Err(e)) => return Err(e),
        };
        info!("compare: running {}", run.tag());
        let report = run_protocol(&run, &store, labels)?;
        rows.push(CompareRow {
            method: run.method.display_name(run.variant),
            tensor: run.variant.to_string(),
            temporal_encodings: report.config.temporal_encodings,
            alpha: run.alpha,
            accuracy_pct: 100.0 * report.mean.accuracy,
            f1_pct: 100.0 * report.mean.f1,
            report,
        });
    }
    Ok(rows)
}

pub fn format_compare_table(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "{:<20} {:<6} {:<9} {:<6} {:>12} {:>10}\n",
        "Method", "Tensor", "Encodings", "alpha", "Accuracy (%)", "F1 (%)"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<20} {:<6} {:<9} {:<6.2} {:>12.2} {:>10.2}",
            r.method,
            r.tensor,
            if r.temporal_encodings { "yes" } else { "no" },
            r.alpha,
            r.accuracy_pct,
            r.f1_pct
        );
    }
    s
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<String> {
    let wd = WorkDir::new(cfg)?;
    let labels = load_labels(&wd.labels())?;
    let rows = compare(cfg, &wd.scenes(), Some(&wd.subpatches()), &labels)?;
    let dir = wd.root.join("reports");
    rawio::ensure_dir(&dir)?;
    let mut csv = String::from("method,tensor,temporal_encodings,alpha,accuracy_pct,f1_pct\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{:.2},{:.2},{:.2}",
            r.method, r.tensor, r.temporal_encodings, r.alpha, r.accuracy_pct, r.f1_pct
        );
    }
    rawio::write_bytes(&dir.join("compare.csv"), csv.as_bytes())?;
    rawio::write_json(&dir.join("compare.json"), &rows)?;
    Ok(format_compare_table(&rows))
}
