#![allow(dead_code)]

//! Shared fixtures and brute-force metric oracles for integration tests.

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbt::detector::{detection_order, Detection};
use rgbt::evaluator::ImageResult;
use rgbt::geometry::Bbox;
use rgbt::synthdata::{Annotation, SceneTag, Visibility};

pub const VIS: Visibility = Visibility { rgb: true, tir: true };

pub fn ann(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Annotation {
    Annotation {
        bbox: Bbox::new(x1, y1, x2, y2),
        class_id,
        visibility: VIS,
    }
}

pub fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: usize) -> Detection {
    Detection {
        bbox: Bbox::new(x1, y1, x2, y2),
        score,
        class_id,
    }
}

fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// True-positive count of `dets` (any order) against `anns`, recomputed from
/// scratch.
fn count_tp(dets: &[Detection], anns: &[Annotation]) -> usize {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut used = vec![false; anns.len()];
    let mut tp = 0;
    for d in &sorted {
        let mut best = None;
        let mut best_iou = 0.5;
        for (i, a) in anns.iter().enumerate() {
            if !used[i] && a.class_id == d.class_id {
                let v = iou(&d.bbox, &a.bbox);
                if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best = Some(i);
                    best_iou = v;
                }
            }
        }
        if let Some(i) = best {
            used[i] = true;
            tp += 1;
        }
    }
    tp
}

/// Every operating point `(fppi, miss_rate)` obtained by thresholding at each
/// candidate score, plus the empty point.
pub fn brute_curve(images: &[ImageResult]) -> Vec<(f64, f64)> {
    let n_gt: usize = images.iter().map(|im| im.annotations.len()).sum();
    let mut thresholds: Vec<f64> = images.iter().flat_map(|im| im.detections.iter().map(|d| d.score)).collect();
    thresholds.push(f64::INFINITY);
    let mut pts = Vec::new();
    for &t in &thresholds {
        let (mut tp, mut fp) = (0, 0);
        for im in images {
            let kept: Vec<Detection> = im.detections.iter().copied().filter(|d| d.score >= t).collect();
            let k = count_tp(&kept, &im.annotations);
            tp += k;
            fp += kept.len() - k;
        }
        pts.push((fp as f64 / images.len() as f64, 1.0 - tp as f64 / n_gt as f64));
    }
    pts
}

pub fn brute_lamr(images: &[ImageResult], floor: f64) -> f64 {
    let pts = brute_curve(images);
    let worst = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let mut acc = 0.0;
    for k in 0..9 {
        let r = 10f64.powf(-2.0 + 2.0 * k as f64 / 8.0);
        let below: Vec<&(f64, f64)> = pts.iter().filter(|p| p.0 <= r).collect();
        let mr = if below.is_empty() {
            worst
        } else {
            let f = below.iter().map(|p| p.0).fold(f64::MIN, f64::max);
            below.iter().filter(|p| p.0 == f).map(|p| p.1).fold(f64::MAX, f64::min)
        };
        acc += mr.max(floor).ln();
    }
    (acc / 9.0).exp() * 100.0
}

/// Interpolated precision at recall `r` is the best precision of any cut
/// reaching recall `r`; each cut is re-matched from scratch.
pub fn brute_ap50(images: &[ImageResult], class: usize) -> Option<f64> {
    let n_gt: usize = images.iter().map(|im| im.annotations.iter().filter(|a| a.class_id == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut all: Vec<(usize, Detection)> = Vec::new();
    for (i, im) in images.iter().enumerate() {
        all.extend(im.detections.iter().filter(|d| d.class_id == class).map(|d| (i, *d)));
    }
    all.sort_by(|a, b| detection_order(&a.1, &b.1));
    let mut cuts = Vec::new();
    for k in 1..=all.len() {
        let mut tp = 0;
        for (i, im) in images.iter().enumerate() {
            let dets: Vec<Detection> = all[..k].iter().filter(|(j, _)| *j == i).map(|(_, d)| *d).collect();
            tp += count_tp(&dets, &im.annotations);
        }
        cuts.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        sum += cuts.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max);
    }
    Some(sum / 101.0 * 100.0)
}

/// Random scenario: jittered copies of ground truth boxes, wrong-class hits
/// and background false positives, with deliberately repeated scores.
pub fn random_scenario(seed: u64, n_images: usize) -> Vec<ImageResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images)
        .map(|_| {
            let n_gt = rng.random_range(0..4);
            let anns: Vec<Annotation> = (0..n_gt)
                .map(|_| {
                    let x = rng.random_range(0.0..60.0);
                    let y = rng.random_range(0.0..40.0);
                    ann(x, y, x + rng.random_range(4.0..20.0), y + rng.random_range(8.0..24.0), rng.random_range(0..2))
                })
                .collect();
            let mut dets = Vec::new();
            for a in &anns {
                for _ in 0..rng.random_range(0..3) {
                    let j = rng.random_range(-3.0..3.0);
                    let cls = if rng.random_bool(0.85) { a.class_id } else { 1 - a.class_id };
                    let score = (rng.random_range(1..20) as f64) / 20.0;
                    dets.push(det(a.bbox.x1 + j, a.bbox.y1 + j, a.bbox.x2 + j, a.bbox.y2, score, cls));
                }
            }
            for _ in 0..rng.random_range(0..3) {
                let x = rng.random_range(0.0..70.0);
                let y = rng.random_range(0.0..50.0);
                dets.push(det(x, y, x + 6.0, y + 10.0, (rng.random_range(1..20) as f64) / 20.0, rng.random_range(0..2)));
            }
            let tag = if rng.random_bool(0.5) { SceneTag::Day } else { SceneTag::Night };
            ImageResult::new(dets, anns, tag)
        })
        .collect()
}

pub fn all_miss() -> Vec<ImageResult> {
    vec![
        ImageResult::new(vec![], vec![ann(0.0, 0.0, 10.0, 20.0, 0)], SceneTag::Day),
        ImageResult::new(vec![det(40.0, 40.0, 50.0, 50.0, 0.9, 0)], vec![ann(10.0, 10.0, 20.0, 30.0, 0)], SceneTag::Night),
    ]
}

pub fn perfect() -> Vec<ImageResult> {
    let a = vec![ann(0.0, 0.0, 10.0, 20.0, 0), ann(30.0, 5.0, 50.0, 20.0, 1)];
    let d = a.iter().map(|x| det(x.bbox.x1, x.bbox.y1, x.bbox.x2, x.bbox.y2, 0.8, x.class_id)).collect();
    vec![ImageResult::new(d, a, SceneTag::Day)]
}

/// Three images whose detections fall into three score levels.
pub fn three_thresholds() -> Vec<ImageResult> {
    vec![
        ImageResult::new(
            vec![det(0.0, 0.0, 10.0, 20.0, 0.9, 0), det(50.0, 0.0, 60.0, 20.0, 0.5, 0)],
            vec![ann(0.0, 0.0, 10.0, 20.0, 0), ann(20.0, 0.0, 30.0, 20.0, 0)],
            SceneTag::Day,
        ),
        ImageResult::new(
            vec![det(1.0, 1.0, 11.0, 21.0, 0.5, 0), det(40.0, 30.0, 50.0, 50.0, 0.2, 0)],
            vec![ann(0.0, 0.0, 10.0, 20.0, 0)],
            SceneTag::Night,
        ),
        ImageResult::new(
            vec![det(20.0, 0.0, 30.0, 20.0, 0.2, 0), det(60.0, 30.0, 70.0, 40.0, 0.9, 0)],
            vec![ann(20.0, 0.0, 30.0, 20.0, 0), ann(0.0, 30.0, 8.0, 50.0, 0)],
            SceneTag::Night,
        ),
    ]
}

/// Duplicates, tied scores, wrong classes and a ground-truth-free image.
pub fn duplicates_and_ties() -> Vec<ImageResult> {
    vec![
        ImageResult::new(
            vec![
                det(0.0, 0.0, 10.0, 20.0, 0.7, 0),
                det(0.5, 0.0, 10.5, 20.0, 0.7, 0),
                det(0.0, 0.0, 10.0, 20.0, 0.7, 1),
                det(30.0, 0.0, 40.0, 20.0, 0.3, 1),
            ],
            vec![ann(0.0, 0.0, 10.0, 20.0, 0), ann(30.0, 0.0, 40.0, 20.0, 1)],
            SceneTag::Day,
        ),
        ImageResult::new(vec![det(5.0, 5.0, 15.0, 15.0, 0.7, 0), det(5.0, 5.0, 15.0, 15.0, 0.3, 1)], vec![], SceneTag::Night),
    ]
}

/// Five detections on three objects in one image: TP, FP, TP, FP, TP.
pub fn five_dets_three_gts() -> Vec<ImageResult> {
    vec![ImageResult::new(
        vec![
            det(0.0, 0.0, 10.0, 20.0, 0.9, 0),
            det(60.0, 0.0, 70.0, 20.0, 0.8, 0),
            det(20.0, 0.0, 30.0, 20.0, 0.7, 0),
            det(60.0, 30.0, 70.0, 50.0, 0.6, 0),
            det(40.0, 0.0, 50.0, 20.0, 0.5, 0),
        ],
        vec![ann(0.0, 0.0, 10.0, 20.0, 0), ann(20.0, 0.0, 30.0, 20.0, 0), ann(40.0, 0.0, 50.0, 20.0, 0)],
        SceneTag::Day,
    )]
}
