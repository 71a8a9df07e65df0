//! Toy detection metrics: COCO-style AP, duplicate rate and query clustering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::decoder::Prediction;
use crate::synthdata::Scene;
use crate::tensor::{cosine, softmax_slice, Scalar, Tensor};

/// Confidence above which a detection counts towards the duplicate rate.
pub const DUPLICATE_CONF: f64 = 0.3;
/// Pairwise IoU above which two same-class detections are duplicates.
pub const DUPLICATE_IOU: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub scene: usize,
    pub query: usize,
    /// Foreground class in `1..=c`.
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

/// One detection per query: the most probable foreground class and its
/// softmax probability.
pub fn detections<T: Scalar>(scene: usize, pred: &Prediction<T>) -> Vec<Detection> {
    let cols = pred.class_logits.cols();
    let mut probs = vec![T::zero(); cols];
    (0..pred.class_logits.rows())
        .map(|q| {
            softmax_slice(pred.class_logits.row(q), &mut probs);
            let (class, score) =
                probs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .fold((1, f64::NEG_INFINITY), |best, (c, &p)| {
                        if p.as_f64() > best.1 {
                            (c, p.as_f64())
                        } else {
                            best
                        }
                    });
            Detection {
                scene,
                query: q,
                class,
                score,
                bbox: std::array::from_fn(|i| pred.boxes.at(q, i).as_f64()),
            }
        })
        .collect()
}

/// Ranked detections of one class with their true/false-positive flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCurve {
    pub class: usize,
    pub num_gt: usize,
    /// `(score, is_true_positive)` in ranking order.
    pub ranked: Vec<(f64, bool)>,
}

impl ClassCurve {
    /// `(recall, precision)` after each ranked detection.
    pub fn pr_points(&self) -> Vec<(f64, f64)> {
        let mut tp = 0usize;
        self.ranked
            .iter()
            .enumerate()
            .map(|(i, &(_, hit))| {
                tp += hit as usize;
                (
                    tp as f64 / self.num_gt.max(1) as f64,
                    tp as f64 / (i + 1) as f64,
                )
            })
            .collect()
    }

    /// All-point interpolated area under the precision-recall curve.
    pub fn ap(&self) -> f64 {
        if self.num_gt == 0 {
            return 0.0;
        }
        let pts = self.pr_points();
        let mut envelope: Vec<f64> = pts.iter().map(|p| p.1).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut prev_recall = 0.0;
        let mut area = 0.0;
        for (&(r, _), &p) in pts.iter().zip(&envelope) {
            area += (r - prev_recall) * p;
            prev_recall = r;
        }
        area
    }
}

/// Ranks detections of `class` by score (ties by scene, then query) and
/// greedily matches each to the best-overlapping unmatched object.
pub fn class_curve(
    dets: &[Detection],
    scenes: &[Scene],
    class: usize,
    iou_thresh: f64,
) -> ClassCurve {
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.scene.cmp(&b.scene))
            .then(a.query.cmp(&b.query))
    });
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.len()]).collect();
    let num_gt = scenes
        .iter()
        .map(|s| s.classes.iter().filter(|&&c| c == class).count())
        .sum();
    let ranked = ranked
        .into_iter()
        .map(|d| {
            let scene = &scenes[d.scene];
            let mut best: Option<(usize, f64)> = None;
            for (j, (b, &c)) in scene.boxes.iter().zip(&scene.classes).enumerate() {
                if c != class || taken[d.scene][j] {
                    continue;
                }
                let v = iou(d.bbox, *b);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[d.scene][j] = true;
            }
            (d.score, best.is_some())
        })
        .collect();
    ClassCurve {
        class,
        num_gt,
        ranked,
    }
}

/// AP at one IoU threshold, averaged over classes that have ground truth.
/// Returns `None` when the scenes contain no objects at all.
pub fn average_precision(
    dets: &[Detection],
    scenes: &[Scene],
    classes: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let aps: Vec<f64> = (1..=classes)
        .map(|c| class_curve(dets, scenes, c, iou_thresh))
        .filter(|cc| cc.num_gt > 0)
        .map(|cc| cc.ap())
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Fraction of detections scoring at least `conf_thresh` that overlap another
/// such detection of the same class in the same scene with IoU above `iou_thresh`.
pub fn duplicate_rate(dets: &[Detection], conf_thresh: f64, iou_thresh: f64) -> f64 {
    let confident: Vec<&Detection> = dets.iter().filter(|d| d.score >= conf_thresh).collect();
    if confident.is_empty() {
        return 0.0;
    }
    let dup = confident
        .iter()
        .enumerate()
        .filter(|(i, a)| {
            confident.iter().enumerate().any(|(j, b)| {
                j != *i
                    && a.scene == b.scene
                    && a.class == b.class
                    && iou(a.bbox, b.bbox) > iou_thresh
            })
        })
        .count();
    dup as f64 / confident.len() as f64
}

/// Mean cosine similarity over all ordered pairs `i ≠ j` of rows.
pub fn mean_pairwise_cosine<T: Scalar>(queries: &Tensor<T>) -> f64 {
    let n = queries.rows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 2.0 * cosine(queries.row(i), queries.row(j), T::zero()).as_f64();
        }
    }
    total / (n * (n - 1)) as f64
}

/// Per-layer mean pairwise query cosine.
pub fn query_cluster_stats<T: Scalar>(layers: &[Tensor<T>]) -> Vec<f64> {
    layers.iter().map(mean_pairwise_cosine).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean over IoU thresholds 0.50, 0.55, ..., 0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over thresholds, per foreground class; `None` for absent classes.
    pub per_class_ap: Vec<Option<f64>>,
    /// False when no ground-truth object exists; every AP is then 0.
    pub ap_defined: bool,
    pub duplicate_rate: f64,
    /// Last decoder layer.
    pub mean_pairwise_query_cos: f64,
    pub per_layer_query_cos: Vec<f64>,
    pub num_scenes: usize,
    pub num_objects: usize,
}

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Report over last-layer predictions and per-scene, per-layer query embeddings.
pub fn report<T: Scalar>(
    preds: &[Prediction<T>],
    queries: &[Vec<Tensor<T>>],
    scenes: &[Scene],
    classes: usize,
) -> MetricsReport {
    let dets: Vec<Detection> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, p)| detections(s, p))
        .collect();
    let thresholds = iou_thresholds();
    let mut per_class_ap = Vec::with_capacity(classes);
    for c in 1..=classes {
        let curves: Vec<ClassCurve> = thresholds
            .iter()
            .map(|&t| class_curve(&dets, scenes, c, t))
            .collect();
        per_class_ap.push(
            (curves[0].num_gt > 0)
                .then(|| curves.iter().map(ClassCurve::ap).sum::<f64>() / curves.len() as f64),
        );
    }
    let ap_at = |t: f64| average_precision(&dets, scenes, classes, t);
    let ap_defined = ap_at(0.5).is_some();
    let ap = thresholds
        .iter()
        .map(|&t| ap_at(t).unwrap_or(0.0))
        .sum::<f64>()
        / thresholds.len() as f64;

    let depth = queries.first().map_or(0, Vec::len);
    let mut per_layer = vec![0.0; depth];
    for scene_q in queries {
        for (acc, v) in per_layer.iter_mut().zip(query_cluster_stats(scene_q)) {
            *acc += v / queries.len() as f64;
        }
    }
    MetricsReport {
        ap,
        ap50: ap_at(0.5).unwrap_or(0.0),
        ap75: ap_at(0.75).unwrap_or(0.0),
        per_class_ap,
        ap_defined,
        duplicate_rate: duplicate_rate(&dets, DUPLICATE_CONF, DUPLICATE_IOU),
        mean_pairwise_query_cos: per_layer.last().copied().unwrap_or(0.0),
        per_layer_query_cos: per_layer,
        num_scenes: scenes.len(),
        num_objects: scenes.iter().map(Scene::len).sum(),
    }
}

/// CSV with header `class,iou_thresh,rank,score,recall,precision`.
pub fn pr_curve_csv<T: Scalar>(
    preds: &[Prediction<T>],
    scenes: &[Scene],
    classes: usize,
    iou_thresh: f64,
) -> String {
    let dets: Vec<Detection> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, p)| detections(s, p))
        .collect();
    let mut out = String::from("class,iou_thresh,rank,score,recall,precision\n");
    for c in 1..=classes {
        let curve = class_curve(&dets, scenes, c, iou_thresh);
        for (rank, ((score, _), (r, p))) in curve.ranked.iter().zip(curve.pr_points()).enumerate() {
            let _ = writeln!(out, "{c},{iou_thresh},{rank},{score},{r},{p}");
        }
    }
    out
}
