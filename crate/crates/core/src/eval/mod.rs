//! Evaluation: OKS-based mAP, PCK, and run comparison reports.

use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::datasets::AnnotationSet;
use crate::error::{Error, Result};
use crate::heatmap::decode_heatmaps;
use crate::network::Model;
use crate::types::{Image, Pose};

pub mod oks;
pub mod report;

pub use oks::{map_score, oks, GroundTruth, MapResult, OksParams, ScoredPose};
pub use report::{report, Report, RunRecord};

/// PCK hits and annotated-keypoint count for one instance.
///
/// A keypoint is a hit when its error is at most `fraction` times the longer
/// side of `bbox`.
pub fn pck_counts(pred: &Pose, gt: &Pose, bbox: [f64; 4], fraction: f64) -> (usize, usize) {
    let bound = fraction * bbox[2].max(bbox[3]);
    let mut hits = 0;
    let mut total = 0;
    for (p, g) in pred.keypoints.iter().zip(&gt.keypoints) {
        if g.is_annotated() {
            total += 1;
            if p.distance(g) <= bound {
                hits += 1;
            }
        }
    }
    (hits, total)
}

/// Share of annotated keypoints within `fraction` of the object size, pooled
/// over instances. Boxes default to the tight box around the ground truth.
pub fn pck(preds: &[Pose], gts: &[Pose], bboxes: &[Option<[f64; 4]>], fraction: f64) -> Result<f64> {
    if !(fraction > 0.0) {
        return Err(Error::InvalidArgument(format!("PCK fraction must be positive, got {fraction}")));
    }
    if preds.len() != gts.len() || bboxes.len() != gts.len() {
        return Err(Error::Shape("PCK inputs differ in length".into()));
    }
    let (mut hits, mut total) = (0, 0);
    for ((p, g), b) in preds.iter().zip(gts).zip(bboxes) {
        let Some(b) = b.or_else(|| g.bbox()) else { continue };
        let (h, t) = pck_counts(p, g, b, fraction);
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::Undefined("no annotated keypoints to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Decoded pose and confidence for every instance of `set`.
pub fn predict(model: &Model, set: &AnnotationSet) -> Result<Vec<(Pose, f64)>> {
    let schema = set.schema.name.clone();
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.instances.chunks(32) {
        let images: Vec<&Image> = chunk.iter().map(|i| i.image()).collect::<Result<_>>()?;
        for o in model.forward(&images)? {
            out.push(decode_heatmaps(&o.heatmaps, model.config.stride, &schema));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    /// `None` when mAP is undefined on this set.
    pub map: Option<f64>,
    pub per_threshold: Vec<(f64, f64)>,
    pub pck: f64,
    pub pck_fraction: f64,
    pub instances: usize,
    /// Hash of the evaluation set's ids and ground truth.
    pub eval_set: String,
    pub model_checksum: String,
    #[serde(default)]
    pub config_hash: Option<String>,
}

pub fn eval_set_hash(set: &AnnotationSet) -> String {
    let items: Vec<(&str, Option<&Pose>)> = set.instances.iter().map(|i| (i.id.as_str(), i.pose.as_ref())).collect();
    config_hash(&items)
}

/// Scores `model` against the ground truth in `truth`, one instance per image.
pub fn evaluate(model: &Model, truth: &AnnotationSet, pck_fraction: f64) -> Result<EvalResults> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if truth.schema.d() != model.config.keypoints {
        return Err(Error::Config(format!(
            "model predicts {} keypoints, evaluation schema {} has {}",
            model.config.keypoints,
            truth.schema.name,
            truth.schema.d()
        )));
    }
    let preds = predict(model, truth)?;
    let mut gts = Vec::with_capacity(truth.len());
    let mut boxes = Vec::with_capacity(truth.len());
    for inst in &truth.instances {
        let pose = inst
            .pose
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("evaluation instance {} has no ground truth", inst.id)))?;
        boxes.push(inst.bbox);
        gts.push(pose);
    }
    let poses: Vec<Pose> = preds.iter().map(|(p, _)| p.clone()).collect();
    let pck_value = pck(&poses, &gts, &boxes, pck_fraction)?;
    let params = OksParams::for_schema(&truth.schema);
    let scored: Vec<Vec<ScoredPose>> = preds
        .into_iter()
        .map(|(pose, score)| vec![ScoredPose { pose, score }])
        .collect();
    let gt_sets: Vec<Vec<GroundTruth>> = gts
        .into_iter()
        .zip(&boxes)
        .map(|(p, b)| vec![GroundTruth::new(p, *b)])
        .collect();
    let (map, per_threshold) = match map_score(&scored, &gt_sets, &params) {
        Ok(r) => (Some(r.map), r.per_threshold),
        Err(Error::Undefined(_)) => (None, Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(EvalResults {
        map,
        per_threshold,
        pck: pck_value,
        pck_fraction,
        instances: truth.len(),
        eval_set: eval_set_hash(truth),
        model_checksum: model.checksum(),
        config_hash: None,
    })
}
