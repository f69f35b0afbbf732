//! Per-class relative bone-length profiles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnnotationSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBones {
    /// Mean relative length of each bone, renormalised to sum to one.
    pub proportions: Vec<f64>,
    /// Instances that contributed at least one bone.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneReport {
    pub bones: Vec<(usize, usize)>,
    pub classes: BTreeMap<String, ClassBones>,
    /// Classes with no instance covering every bone.
    pub absent: Vec<String>,
}

impl BoneReport {
    /// L1 distance between a class profile and a reference vector.
    pub fn l1(&self, class: &str, reference: &[f64]) -> Option<f64> {
        let c = self.classes.get(class)?;
        Some(c.proportions.iter().zip(reference).map(|(a, b)| (a - b).abs()).sum())
    }
}

/// Averages per-instance relative bone lengths per class.
///
/// A bone contributes on an instance only when both endpoints are annotated;
/// the instance's total is taken over its contributing bones. Each bone's
/// ratios are averaged over the instances it contributed on, and the mean
/// vector is renormalised to sum to one.
pub fn compute_bone_proportions(set: &AnnotationSet, bones: &[(usize, usize)]) -> Result<BoneReport> {
    if bones.is_empty() {
        return Err(Error::InvalidArgument("no bones given".into()));
    }
    let d = set.schema.d();
    if let Some(&(a, b)) = bones.iter().find(|&&(a, b)| a >= d || b >= d) {
        return Err(Error::Schema(format!("bone ({a}, {b}) out of range for {} keypoints", d)));
    }
    if set.is_empty() {
        return Err(Error::InvalidArgument("annotation set is empty".into()));
    }
    struct Acc {
        sums: Vec<f64>,
        hits: Vec<usize>,
        count: usize,
        seen: bool,
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    for inst in &set.instances {
        let class = AnnotationSet::class_of(inst);
        let a = acc.entry(class).or_insert_with(|| Acc {
            sums: vec![0.0; bones.len()],
            hits: vec![0; bones.len()],
            count: 0,
            seen: false,
        });
        a.seen = true;
        let Some(pose) = &inst.pose else { continue };
        let lens: Vec<Option<f64>> = bones
            .iter()
            .map(|&(i, j)| {
                let (p, q) = (&pose.keypoints[i], &pose.keypoints[j]);
                (p.is_annotated() && q.is_annotated()).then(|| p.distance(q))
            })
            .collect();
        let total: f64 = lens.iter().flatten().sum();
        if !(total > 0.0) {
            continue;
        }
        a.count += 1;
        for (k, l) in lens.iter().enumerate() {
            if let Some(l) = l {
                a.sums[k] += l / total;
                a.hits[k] += 1;
            }
        }
    }
    let mut classes = BTreeMap::new();
    let mut absent = Vec::new();
    for (name, a) in acc {
        if !a.seen || a.hits.contains(&0) {
            absent.push(name);
            continue;
        }
        let means: Vec<f64> = a.sums.iter().zip(&a.hits).map(|(s, &h)| s / h as f64).collect();
        let z: f64 = means.iter().sum();
        classes.insert(
            name,
            ClassBones {
                proportions: means.iter().map(|m| m / z).collect(),
                count: a.count,
            },
        );
    }
    Ok(BoneReport {
        bones: bones.to_vec(),
        classes,
        absent,
    })
}
