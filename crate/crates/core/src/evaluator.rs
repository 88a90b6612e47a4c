//! Detection metrics and test-condition sweeps.
//!
//! Miss rate against false positives per image is swept over every unique
//! detection score; the log-average miss rate samples it at nine FPPI
//! references spaced evenly in log space over `[1e-2, 1]`. AP50 uses COCO's
//! 101-point interpolation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment_losses::{assign, head_geometry};
use crate::degrade::{apply_condition, TestCondition};
use crate::detector::{decode, detection_order, forward_graph, head_output, DecodeConfig, Detection, DetectorError, DetectorParams};
use crate::diffengine::Graph;
use crate::synthdata::{normalize_for_net, Annotation, ModalityPair, SceneTag};

pub const IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MR_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("condition sets differ; only in A: [{}], only in B: [{}]", only_a.join(", "), only_b.join(", "))]
    ConditionMismatch { only_a: Vec<String>, only_b: Vec<String> },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Greedy one-to-one matching of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection in the given order: true positive?
    pub tp: Vec<bool>,
    /// Per annotation: matched?
    pub matched: Vec<bool>,
}

/// Each detection, in order, takes the unmatched same-class annotation of
/// highest IoU (first index on ties) if that IoU is at least `iou_thresh`.
/// `dets` must already be sorted by [`detection_order`].
pub fn match_image(dets: &[Detection], anns: &[Annotation], iou_thresh: f64) -> MatchResult {
    let mut matched = vec![false; anns.len()];
    let tp = dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (i, a) in anns.iter().enumerate() {
                if matched[i] || a.class_id != d.class_id {
                    continue;
                }
                let iou = d.bbox.iou(&a.bbox);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            match best {
                Some((i, _)) => {
                    matched[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    MatchResult { tp, matched }
}

/// Detections and ground truth of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub annotations: Vec<Annotation>,
    pub tag: SceneTag,
}

impl ImageResult {
    pub fn new(mut detections: Vec<Detection>, annotations: Vec<Annotation>, tag: SceneTag) -> Self {
        detections.sort_by(detection_order);
        ImageResult {
            detections,
            annotations,
            tag,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

/// Points ordered by falling threshold, starting with the empty operating
/// point `(0, 1)` above every score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrFppiCurve {
    pub points: Vec<CurvePoint>,
}

/// MR-FPPI curve over `images`, one point per unique detection score.
pub fn mr_fppi_curve(images: &[&ImageResult]) -> MrFppiCurve {
    let n_gt: usize = images.iter().map(|im| im.annotations.len()).sum();
    let n_img = images.len().max(1) as f64;
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for im in images {
        let m = match_image(&im.detections, &im.annotations, IOU_THRESHOLD);
        scored.extend(im.detections.iter().zip(m.tp).map(|(d, tp)| (d.score, tp)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mr = |tp: usize| if n_gt == 0 { 0.0 } else { 1.0 - tp as f64 / n_gt as f64 };
    let mut points = vec![CurvePoint {
        threshold: f64::INFINITY,
        fppi: 0.0,
        miss_rate: if n_gt == 0 { 0.0 } else { 1.0 },
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold: s,
            fppi: fp as f64 / n_img,
            miss_rate: mr(tp),
        });
    }
    MrFppiCurve { points }
}

pub fn lamr_references() -> [f64; 9] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + 2.0 * k as f64 / 8.0))
}

/// Log-average miss rate in percent. At each reference the curve is read at
/// the lowest threshold whose FPPI does not exceed it; with no such point
/// the highest miss rate on the curve is used.
pub fn lamr(curve: &MrFppiCurve, floor: f64) -> f64 {
    let worst = curve.points.iter().map(|p| p.miss_rate).fold(0.0, f64::max);
    let refs = lamr_references();
    let logs: f64 = refs
        .iter()
        .map(|&r| {
            let mr = curve
                .points
                .iter()
                .rev()
                .find(|p| p.fppi <= r)
                .map_or(worst, |p| p.miss_rate);
            mr.max(floor).ln()
        })
        .sum();
    (logs / refs.len() as f64).exp() * 100.0
}

/// COCO 101-point interpolated AP50 for `class`, in percent; `None` when the
/// class has no ground truth.
pub fn ap50(images: &[&ImageResult], class: usize) -> Option<f64> {
    let n_gt: usize = images
        .iter()
        .map(|im| im.annotations.iter().filter(|a| a.class_id == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut scored: Vec<(Detection, bool)> = Vec::new();
    for im in images {
        let dets: Vec<Detection> = im.detections.iter().copied().filter(|d| d.class_id == class).collect();
        let m = match_image(&dets, &im.annotations, IOU_THRESHOLD);
        scored.extend(dets.into_iter().zip(m.tp));
    }
    scored.sort_by(|a, b| detection_order(&a.0, &b.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for (_, is_tp) in &scored {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0 * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub lamr_all: Option<f64>,
    pub lamr_day: Option<f64>,
    pub lamr_night: Option<f64>,
    pub ap50: BTreeMap<String, Option<f64>>,
    pub ap50_mean: Option<f64>,
    pub images: usize,
    pub annotations: usize,
    pub detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub metrics: ConditionMetrics,
    #[serde(skip)]
    pub curve: Option<MrFppiCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_sha256: String,
    pub config_echo: String,
    pub conditions: Vec<ConditionReport>,
}

fn subset_lamr(images: &[ImageResult], keep: impl Fn(&ImageResult) -> bool, floor: f64) -> Option<f64> {
    let sub: Vec<&ImageResult> = images.iter().filter(|im| keep(im)).collect();
    if sub.iter().all(|im| im.annotations.is_empty()) {
        return None;
    }
    Some(lamr(&mr_fppi_curve(&sub), floor))
}

/// Metrics of one condition. "All" pools every image into one curve.
pub fn condition_metrics(images: &[ImageResult], class_names: &[String], floor: f64) -> (ConditionMetrics, MrFppiCurve) {
    let all: Vec<&ImageResult> = images.iter().collect();
    let curve = mr_fppi_curve(&all);
    let ap: BTreeMap<String, Option<f64>> = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| (name.clone(), ap50(&all, c)))
        .collect();
    let present: Vec<f64> = ap.values().flatten().copied().collect();
    let metrics = ConditionMetrics {
        lamr_all: subset_lamr(images, |_| true, floor),
        lamr_day: subset_lamr(images, |im| im.tag == SceneTag::Day, floor),
        lamr_night: subset_lamr(images, |im| im.tag == SceneTag::Night, floor),
        ap50_mean: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
        ap50: ap,
        images: images.len(),
        annotations: images.iter().map(|im| im.annotations.len()).sum(),
        detections: images.iter().map(|im| im.detections.len()).sum(),
    };
    (metrics, curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub mr_floor: f64,
    pub batch_size: usize,
    /// Seed of the per-sample noise streams of corrupted conditions.
    pub seed: u64,
    pub conditions: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            decode: DecodeConfig::default(),
            mr_floor: DEFAULT_MR_FLOOR,
            batch_size: 16,
            seed: 0,
            conditions: ["balanced", "drop:rgb", "drop:tir", "noise:tir:20"].map(String::from).to_vec(),
        }
    }
}

/// Corrupts `pairs` under `cond`; sample `i` draws noise from stream `i` of
/// `seed`.
pub fn corrupt(pairs: &[ModalityPair], cond: &TestCondition, seed: u64) -> Vec<ModalityPair> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            apply_condition(p, cond, &mut rng)
        })
        .collect()
}

/// Runs the detector over `pairs` and decodes every image.
pub fn detect(params: &DetectorParams, pairs: &[ModalityPair], cfg: &EvalConfig) -> Result<Vec<ImageResult>, EvalError> {
    let chunks: Vec<Vec<ImageResult>> = pairs
        .par_chunks(cfg.batch_size.max(1))
        .map(|chunk| -> Result<Vec<ImageResult>, EvalError> {
            let refs: Vec<&ModalityPair> = chunk.iter().collect();
            let (r, t) = normalize_for_net(&refs);
            let (head, _) = crate::detector::forward(params, &r, &t)?;
            Ok(decode(&head, &cfg.decode)
                .into_iter()
                .zip(chunk)
                .map(|(d, p)| ImageResult::new(d, p.annotations.clone(), p.tag))
                .collect())
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Evaluates every condition on `pairs`.
pub fn sweep(
    params: &DetectorParams,
    pairs: &[ModalityPair],
    conditions: &[TestCondition],
    class_names: &[String],
    cfg: &EvalConfig,
) -> Result<Vec<ConditionReport>, EvalError> {
    conditions
        .iter()
        .map(|cond| {
            let corrupted = corrupt(pairs, cond, cfg.seed);
            let images = detect(params, &corrupted, cfg)?;
            let (metrics, curve) = condition_metrics(&images, class_names, cfg.mr_floor);
            Ok(ConditionReport {
                name: cond.name.clone(),
                metrics,
                curve: Some(curve),
            })
        })
        .collect()
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

pub const REPORT_FILE: &str = "report.json";

pub fn curve_file_name(condition: &str) -> String {
    format!("curve_{}.csv", sanitize(condition))
}

pub fn curve_csv(curve: &MrFppiCurve) -> String {
    let mut s = String::from("fppi,miss_rate\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{}", p.fppi, p.miss_rate);
    }
    s
}

/// Writes `report.json` and one `fppi,miss_rate` file per condition.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    for c in &report.conditions {
        if let Some(curve) = &c.curve {
            let p = dir.join(curve_file_name(&c.name));
            fs::write(&p, curve_csv(curve)).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Console table: one row per condition.
pub fn format_table(conditions: &[ConditionReport]) -> String {
    let names: Vec<&String> = conditions
        .first()
        .map(|c| c.metrics.ap50.keys().collect())
        .unwrap_or_default();
    let width = conditions.iter().map(|c| c.name.len()).max().unwrap_or(9).max(9);
    let mut s = format!("{:<width$}  {:>8} {:>8} {:>8}", "condition", "LAMR", "day", "night");
    for n in &names {
        let _ = write!(s, " {:>12}", format!("AP50:{n}"));
    }
    s.push_str(&format!(" {:>9}\n", "AP50"));
    for c in conditions {
        let m = &c.metrics;
        let _ = write!(s, "{:<width$}  {:>8} {:>8} {:>8}", c.name, opt(m.lamr_all), opt(m.lamr_day), opt(m.lamr_night));
        for n in &names {
            let _ = write!(s, " {:>12}", opt(m.ap50.get(*n).copied().flatten()));
        }
        let _ = writeln!(s, " {:>9}", opt(m.ap50_mean));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionDelta {
    pub name: String,
    pub lamr_a: Option<f64>,
    pub lamr_b: Option<f64>,
    pub ap50_a: Option<f64>,
    pub ap50_b: Option<f64>,
}

impl ConditionDelta {
    /// `B - A`; negative means B misses less.
    pub fn lamr_delta(&self) -> Option<f64> {
        Some(self.lamr_b? - self.lamr_a?)
    }

    pub fn ap50_delta(&self) -> Option<f64> {
        Some(self.ap50_b? - self.ap50_a?)
    }
}

/// Formats a delta with its relative change, e.g. `-39.37 (-55.7%)`.
pub fn format_delta(a: f64, b: f64) -> String {
    let d = b - a;
    if a == 0.0 {
        format!("{d:+.2}")
    } else {
        format!("{d:+.2} ({:+.1}%)", d / a * 100.0)
    }
}

pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Vec<ConditionDelta>, EvalError> {
    let na: Vec<&str> = a.conditions.iter().map(|c| c.name.as_str()).collect();
    let nb: Vec<&str> = b.conditions.iter().map(|c| c.name.as_str()).collect();
    let only_a: Vec<String> = na.iter().filter(|n| !nb.contains(n)).map(|s| s.to_string()).collect();
    let only_b: Vec<String> = nb.iter().filter(|n| !na.contains(n)).map(|s| s.to_string()).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(EvalError::ConditionMismatch { only_a, only_b });
    }
    Ok(a.conditions
        .iter()
        .map(|ca| {
            let cb = b.conditions.iter().find(|c| c.name == ca.name).expect("checked above");
            ConditionDelta {
                name: ca.name.clone(),
                lamr_a: ca.metrics.lamr_all,
                lamr_b: cb.metrics.lamr_all,
                ap50_a: ca.metrics.ap50_mean,
                ap50_b: cb.metrics.ap50_mean,
            }
        })
        .collect())
}

pub fn format_compare(deltas: &[ConditionDelta]) -> String {
    let width = deltas.iter().map(|d| d.name.len()).max().unwrap_or(9).max(9);
    let mut s = format!("{:<width$}  {:>8} {:>8} {:>18}  {:>8} {:>8} {:>18}\n", "condition", "LAMR A", "LAMR B", "dLAMR", "AP50 A", "AP50 B", "dAP50");
    for d in deltas {
        let dl = match (d.lamr_a, d.lamr_b) {
            (Some(a), Some(b)) => format_delta(a, b),
            _ => "-".into(),
        };
        let da = match (d.ap50_a, d.ap50_b) {
            (Some(a), Some(b)) => format_delta(a, b),
            _ => "-".into(),
        };
        let _ = writeln!(
            s,
            "{:<width$}  {:>8} {:>8} {:>18}  {:>8} {:>8} {:>18}",
            d.name,
            opt(d.lamr_a),
            opt(d.lamr_b),
            dl,
            opt(d.ap50_a),
            opt(d.ap50_b),
            da
        );
    }
    s
}

/// Which neck levels [`export_features`] dumps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelSelector {
    All,
    Level(usize),
}

/// One CSV row per positive assigned location:
/// `sample_id,level,row,col,class,f0..f{C-1}` with the neck feature vector.
pub fn export_features(params: &DetectorParams, pairs: &[ModalityPair], selector: LevelSelector) -> Result<String, EvalError> {
    let c = params.arch.neck_width;
    let mut s = String::from("sample_id,level,row,col,class");
    for k in 0..c {
        let _ = write!(s, ",f{k}");
    }
    s.push('\n');
    for p in pairs {
        let (r, t) = normalize_for_net(&[p]);
        let mut g = Graph::no_grad();
        let (rv, tv) = (g.input(r), g.input(t));
        let fv = forward_graph(params, &mut g, rv, tv)?;
        let geometry = head_geometry(&head_output(&g, &fv));
        let targets = assign(&[&p.annotations], &geometry, params.arch.num_classes);
        for (li, (lt, lv)) in targets.levels.iter().zip(&fv.levels).enumerate() {
            if matches!(selector, LevelSelector::Level(k) if k != li) {
                continue;
            }
            let feat = g.value(lv.feature);
            for pos in &lt.positives {
                let _ = write!(s, "{},{},{},{},{}", p.id, li, pos.row, pos.col, pos.class_id);
                for k in 0..c {
                    let _ = write!(s, ",{}", feat.at(0, k, pos.row, pos.col));
                }
                s.push('\n');
            }
        }
    }
    Ok(s)
}
