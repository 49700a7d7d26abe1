//! Field-level metrics, multi-seed reports, and the alpha sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster_agg::{aggregate, FieldPrediction};
use crate::config::{ConfigSnapshot, RunConfig};
use crate::error::{Error, Result};
use crate::pipeline;
use crate::preprocess::SubPatchStore;
use crate::rawio;
use crate::scene_io::{Label, LabelSet};

/// Confusion counts with stressed as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Counts over the labeled fields; predictions for unlabeled fields are ignored.
pub fn confusion(preds: &[FieldPrediction], labels: &LabelSet) -> Result<ConfusionCounts> {
    let by_field: BTreeMap<u32, Label> = preds.iter().map(|p| (p.field_id, p.label)).collect();
    let mut c = ConfusionCounts::default();
    for (&field, &truth) in &labels.entries {
        let pred = *by_field.get(&field).ok_or(Error::MissingPrediction(field))?;
        match (pred, truth) {
            (Label::Stressed, Label::Stressed) => c.tp += 1,
            (Label::Stressed, Label::Healthy) => c.fp += 1,
            (Label::Healthy, Label::Stressed) => c.fn_ += 1,
            (Label::Healthy, Label::Healthy) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Precision and recall are 0 on a zero denominator; F1 is 1 when there are no
/// positives, predicted or actual.
pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyConfusion);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let f1_den = 2 * c.tp + c.fp + c.fn_;
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, total),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        f1: if f1_den == 0 {
            1.0
        } else {
            ratio(2 * c.tp, f1_den)
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub alpha: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub predicted_stressed: usize,
}

/// `0.1, 0.2, ..., 1.0`
pub fn default_alphas() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn sweep_alpha(
    field_ids: &[u32],
    classes: &[Label],
    labels: &LabelSet,
    alphas: &[f64],
) -> Result<Vec<CurveRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            let preds = aggregate(field_ids, classes, alpha)?;
            let m = metrics(&confusion(&preds, labels)?)?;
            Ok(CurveRow {
                alpha,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                accuracy: m.accuracy,
                predicted_stressed: preds.iter().filter(|p| p.label == Label::Stressed).count(),
            })
        })
        .collect()
}

/// Element-wise mean of several sweeps over the same alphas.
pub fn mean_curve(curves: &[Vec<CurveRow>]) -> Vec<CurveRow> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    let n = curves.len() as f64;
    (0..first.len())
        .map(|i| {
            let avg = |f: fn(&CurveRow) -> f64| curves.iter().map(|c| f(&c[i])).sum::<f64>() / n;
            CurveRow {
                alpha: first[i].alpha,
                precision: avg(|r| r.precision),
                recall: avg(|r| r.recall),
                f1: avg(|r| r.f1),
                accuracy: avg(|r| r.accuracy),
                predicted_stressed: (curves.iter().map(|c| c[i].predicted_stressed).sum::<usize>()
                    as f64
                    / n)
                    .round() as usize,
            }
        })
        .collect()
}

pub fn write_curves_csv(rows: &[CurveRow], path: &Path) -> Result<()> {
    let mut text = String::from("alpha,precision,recall,f1\n");
    for r in rows {
        let _ = writeln!(text, "{:.1},{:.6},{:.6},{:.6}", r.alpha, r.precision, r.recall, r.f1);
    }
    rawio::write_bytes(path, text.as_bytes())
}

/// Precision, recall and F1 against alpha as a standalone SVG line chart.
pub fn render_curves_svg(rows: &[CurveRow], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 60.0;
    const R: f64 = 130.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let x = |a: f64| L + a * (W - L - R);
    let y = |v: f64| H - B - v * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (L + W - R) / 2.0,
        xml_escape(title)
    );
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#e0e0e0"/>"##,
            x(0.0),
            y(v),
            x(1.0),
            y(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            x(0.0) - 6.0,
            y(v) + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#,
            x(v),
            y(0.0) + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">alpha</text>"#,
        x(0.5),
        H - 12.0
    );
    let series: [(&str, &str, fn(&CurveRow) -> f64); 3] = [
        ("precision", "#1f77b4", |r| r.precision),
        ("recall", "#ff7f0e", |r| r.recall),
        ("F1", "#2ca02c", |r| r.f1),
    ];
    for (k, (name, color, get)) in series.iter().enumerate() {
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.1},{:.1}", x(r.alpha), y(get(r))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for p in &points {
            let (px, py) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = T + 20.0 + k as f64 * 20.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            W - R + 15.0,
            W - R + 40.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{name}</text>"#,
            W - R + 46.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub alpha: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ConfigSnapshot,
    pub per_seed: Vec<SeedResult>,
    pub mean: Metrics,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: Metrics,
}

impl EvalReport {
    pub fn from_seeds(config: ConfigSnapshot, per_seed: Vec<SeedResult>) -> Self {
        let n = per_seed.len() as f64;
        let stat = |f: fn(&SeedResult) -> f64| {
            let mean = per_seed.iter().map(f).sum::<f64>() / n;
            let var = if per_seed.len() > 1 {
                per_seed.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        let (acc, acc_sd) = stat(|r| r.accuracy);
        let (prec, prec_sd) = stat(|r| r.precision);
        let (rec, rec_sd) = stat(|r| r.recall);
        let (f1, f1_sd) = stat(|r| r.f1);
        EvalReport {
            config,
            per_seed,
            mean: Metrics {
                accuracy: acc,
                precision: prec,
                recall: rec,
                f1,
            },
            std: Metrics {
                accuracy: acc_sd,
                precision: prec_sd,
                recall: rec_sd,
                f1: f1_sd,
            },
        }
    }
}

pub fn seed_result(seed: u64, alpha: f64, c: ConfusionCounts) -> Result<SeedResult> {
    let m = metrics(&c)?;
    Ok(SeedResult {
        seed,
        alpha,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        confusion: c,
    })
}

/// Runs features, clustering, mapping, aggregation and scoring once per configured seed,
/// retraining the autoencoder for every seed.
pub fn run_protocol(cfg: &RunConfig, store: &SubPatchStore, labels: &LabelSet) -> Result<EvalReport> {
    Ok(run_protocol_detailed(cfg, store, labels)?.0)
}

/// [`run_protocol`] that also hands back every seed's intermediate results.
pub fn run_protocol_detailed(
    cfg: &RunConfig,
    store: &SubPatchStore,
    labels: &LabelSet,
) -> Result<(EvalReport, Vec<pipeline::SeedOutcome>)> {
    cfg.validate()?;
    let labels = &pipeline::evaluable_labels(labels, &pipeline::store_fields(store));
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcome = pipeline::run_seed(cfg, store, Some(labels), seed)?;
        per_seed.push(seed_result(seed, cfg.alpha, confusion(&outcome.predictions, labels)?)?);
        outcomes.push(outcome);
    }
    Ok((EvalReport::from_seeds(cfg.snapshot(), per_seed), outcomes))
}
