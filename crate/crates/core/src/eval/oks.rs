//! Object keypoint similarity and COCO-style keypoint average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{SkeletonSchema, COCO17};
use crate::types::Pose;

/// Per-keypoint standard deviations of the reference human keypoints.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089,
    0.089,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    /// Falloff constant `k_i` per keypoint.
    pub k: Vec<f64>,
    /// OKS thresholds at which AP is computed.
    pub thresholds: Vec<f64>,
}

pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

impl OksParams {
    pub fn coco17() -> Self {
        OksParams {
            k: COCO_SIGMAS.iter().map(|s| 2.0 * s).collect(),
            thresholds: default_thresholds(),
        }
    }

    /// Constants for any schema: reference constants through the schema's
    /// alignment, the median reference constant for unmapped keypoints.
    pub fn for_schema(schema: &SkeletonSchema) -> Self {
        let coco = Self::coco17();
        if schema.name == COCO17 {
            return coco;
        }
        let mut sorted = coco.k.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let median = sorted[sorted.len() / 2];
        let k = match schema.alignment.as_ref().filter(|a| a.target == COCO17) {
            Some(al) => al.map.iter().map(|m| m.map_or(median, |j| coco.k[j])).collect(),
            None => vec![median; schema.d()],
        };
        OksParams {
            k,
            thresholds: coco.thresholds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::Config("OKS constants must be positive".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("OKS thresholds must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `mean_i exp(-d_i^2 / (2 s^2 k_i^2))` over keypoints annotated in `gt`,
/// with `s^2 = area`.
pub fn oks(pred: &Pose, gt: &Pose, area: f64, params: &OksParams) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != params.k.len() {
        return Err(Error::Shape(format!(
            "OKS over {} predicted, {} ground-truth keypoints with {} constants",
            pred.len(),
            gt.len(),
            params.k.len()
        )));
    }
    let s2 = area.max(f64::EPSILON);
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), k) in pred.keypoints.iter().zip(&gt.keypoints).zip(&params.k) {
        if !g.is_annotated() {
            continue;
        }
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        sum += (-d2 / (2.0 * s2 * k * k)).exp();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Undefined("ground truth has no annotated keypoints".into()));
    }
    Ok(sum / n as f64)
}

/// A scored detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPose {
    pub pose: Pose,
    pub score: f64,
}

/// A ground-truth pose with the area that sets its OKS scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pose: Pose,
    pub area: f64,
}

impl GroundTruth {
    /// Uses `bbox` when given, else the tight box around annotated keypoints.
    pub fn new(pose: Pose, bbox: Option<[f64; 4]>) -> Self {
        let b = bbox.or_else(|| pose.bbox()).unwrap_or([0.0; 4]);
        GroundTruth { pose, area: b[2] * b[3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    /// `(threshold, AP)` pairs in threshold order.
    pub per_threshold: Vec<(f64, f64)>,
}

/// Recall points of the 101-point interpolation.
pub fn recall_points() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Greedy matching for one image at one threshold. Returns, per prediction
/// in the given order, whether it matched.
///
/// Predictions are visited in descending score (stable); each takes the
/// unmatched ground truth of highest OKS, at least `threshold`, later ground
/// truths winning ties.
pub fn greedy_match(oks_table: &[Vec<f64>], scores: &[f64], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let n_gt = oks_table.first().map_or(0, Vec::len);
    let mut gt_used = vec![false; n_gt];
    let mut tp = vec![false; scores.len()];
    let cap = threshold.min(1.0 - 1e-10);
    for &d in &order {
        let mut best = cap;
        let mut m = None;
        for g in 0..n_gt {
            if gt_used[g] || oks_table[d][g] < best {
                continue;
            }
            best = oks_table[d][g];
            m = Some(g);
        }
        if let Some(g) = m {
            gt_used[g] = true;
            tp[d] = true;
        }
    }
    tp
}

/// AP from `(score, matched)` pairs and the number of ground truths, with
/// 101-point interpolation. Pairs are sorted by descending score, stably.
pub fn average_precision(mut detections: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    detections.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut rc = Vec::with_capacity(detections.len());
    let mut pr = Vec::with_capacity(detections.len());
    for (_, m) in &detections {
        if *m {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rc.push(tp / n_gt as f64);
        pr.push(tp / (tp + fp));
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let pts = recall_points();
    let mut sum = 0.0;
    for r in &pts {
        let idx = rc.partition_point(|&x| x < *r);
        if idx < pr.len() {
            sum += pr[idx];
        }
    }
    sum / pts.len() as f64
}

/// Mean AP over OKS thresholds. Images are parallel slices of predictions
/// and ground truths; ground truths without annotated keypoints are skipped.
pub fn map_score(preds: &[Vec<ScoredPose>], gts: &[Vec<GroundTruth>], params: &OksParams) -> Result<MapResult> {
    params.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} prediction images vs {} ground-truth images", preds.len(), gts.len())));
    }
    let mut tables = Vec::with_capacity(gts.len());
    let mut n_gt = 0;
    for (p, g) in preds.iter().zip(gts) {
        let valid: Vec<&GroundTruth> = g.iter().filter(|g| g.pose.annotated_count() > 0).collect();
        n_gt += valid.len();
        let mut t = Vec::with_capacity(p.len());
        for d in p {
            let row = valid
                .iter()
                .map(|g| oks(&d.pose, &g.pose, g.area, params))
                .collect::<Result<Vec<f64>>>()?;
            t.push(row);
        }
        tables.push(t);
    }
    if n_gt == 0 {
        return Err(Error::Undefined("no ground truth with annotated keypoints".into()));
    }
    let mut per_threshold = Vec::with_capacity(params.thresholds.len());
    for &thr in &params.thresholds {
        let mut dets = Vec::new();
        for (p, t) in preds.iter().zip(&tables) {
            let scores: Vec<f64> = p.iter().map(|d| d.score).collect();
            let tp = greedy_match(t, &scores, thr);
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
            dets.extend(order.into_iter().map(|i| (scores[i], tp[i])));
        }
        per_threshold.push((thr, average_precision(dets, n_gt)));
    }
    let map = per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapResult { map, per_threshold })
}
