//! Skeleton schemas, bone lists and cross-schema alignment.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Keypoint, Pose};

pub const COCO17: &str = "coco17";
pub const ANIMAL20: &str = "animal20";
pub const FIGURE19: &str = "figure19";

/// Default animal-to-COCO correspondence, as a name-to-name table.
pub const ANIMAL_TO_COCO_TABLE: &str = include_str!("../data/animal20_to_coco17.json");
/// Correspondence from the synthetic figure schema to COCO.
pub const FIGURE_TO_COCO_TABLE: &str = include_str!("../data/figure19_to_coco17.json");

/// Partial injective map from this schema's indices into `target`'s indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub target: String,
    pub map: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSchema {
    pub name: String,
    pub keypoint_names: Vec<String>,
    pub bones: Vec<(usize, usize)>,
    #[serde(default)]
    pub alignment: Option<Alignment>,
}

impl SkeletonSchema {
    pub fn new(name: impl Into<String>, keypoint_names: Vec<String>, bones: Vec<(usize, usize)>) -> Result<Self> {
        let s = SkeletonSchema {
            name: name.into(),
            keypoint_names,
            bones,
            alignment: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn d(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoint_names.iter().position(|n| n == name)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 {
            return Err(Error::Schema(format!("schema {} has no keypoints", self.name)));
        }
        let mut seen = HashSet::new();
        for n in &self.keypoint_names {
            if !seen.insert(n) {
                return Err(Error::Schema(format!("schema {} repeats keypoint {n}", self.name)));
            }
        }
        for &(a, b) in &self.bones {
            if a >= d || b >= d || a == b {
                return Err(Error::Schema(format!("schema {} has invalid bone ({a}, {b})", self.name)));
            }
        }
        if let Some(al) = &self.alignment {
            if al.map.len() != d {
                return Err(Error::Schema(format!(
                    "alignment of {} covers {} keypoints, schema has {d}",
                    self.name,
                    al.map.len()
                )));
            }
            let mut used = HashSet::new();
            for t in al.map.iter().flatten() {
                if !used.insert(*t) {
                    return Err(Error::Schema(format!(
                        "alignment of {} maps two keypoints onto target index {t}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Attaches an alignment built from a name-to-name table.
    ///
    /// Names missing from the table stay unmapped. Unknown names on either
    /// side are rejected.
    pub fn with_alignment(mut self, target: &SkeletonSchema, table: &BTreeMap<String, String>) -> Result<Self> {
        let mut map = vec![None; self.d()];
        for (from, to) in table {
            let i = self
                .index_of(from)
                .ok_or_else(|| Error::Schema(format!("alignment names unknown keypoint {from} in {}", self.name)))?;
            let j = target
                .index_of(to)
                .ok_or_else(|| Error::Schema(format!("alignment names unknown keypoint {to} in {}", target.name)))?;
            map[i] = Some(j);
        }
        self.alignment = Some(Alignment {
            target: target.name.clone(),
            map,
        });
        self.validate()?;
        Ok(self)
    }

    pub fn with_alignment_json(self, target: &SkeletonSchema, json: &str) -> Result<Self> {
        let table: BTreeMap<String, String> = serde_json::from_str(json)?;
        self.with_alignment(target, &table)
    }

    /// The reference human schema (17 keypoints) with 18 bones: the standard
    /// 19 limb links less the eye-to-eye link.
    pub fn coco17() -> Self {
        let names = [
            "nose",
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
            "left_knee",
            "right_knee",
            "left_ankle",
            "right_ankle",
        ];
        let one_based = [
            (16, 14),
            (14, 12),
            (17, 15),
            (15, 13),
            (12, 13),
            (6, 12),
            (7, 13),
            (6, 7),
            (6, 8),
            (7, 9),
            (8, 10),
            (9, 11),
            (1, 2),
            (1, 3),
            (2, 4),
            (3, 5),
            (4, 6),
            (5, 7),
        ];
        SkeletonSchema {
            name: COCO17.into(),
            keypoint_names: names.iter().map(|s| s.to_string()).collect(),
            bones: one_based.iter().map(|&(a, b)| (a - 1, b - 1)).collect(),
            alignment: None,
        }
    }

    /// The 20-keypoint quadruped schema, aligned to [`SkeletonSchema::coco17`]
    /// through the default table.
    pub fn animal20() -> Self {
        let names = [
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "nose",
            "throat",
            "tailbase",
            "withers",
            "left_front_elbow",
            "right_front_elbow",
            "left_back_elbow",
            "right_back_elbow",
            "left_front_knee",
            "right_front_knee",
            "left_back_knee",
            "right_back_knee",
            "left_front_paw",
            "right_front_paw",
            "left_back_paw",
            "right_back_paw",
        ];
        let bones = vec![
            (0, 4),
            (1, 4),
            (0, 2),
            (1, 3),
            (4, 5),
            (5, 7),
            (7, 6),
            (7, 8),
            (7, 9),
            (6, 10),
            (6, 11),
            (8, 12),
            (9, 13),
            (10, 14),
            (11, 15),
            (12, 16),
            (13, 17),
            (14, 18),
            (15, 19),
        ];
        let s = SkeletonSchema {
            name: ANIMAL20.into(),
            keypoint_names: names.iter().map(|s| s.to_string()).collect(),
            bones,
            alignment: None,
        };
        s.with_alignment_json(&Self::coco17(), ANIMAL_TO_COCO_TABLE)
            .expect("built-in alignment table is valid")
    }

    /// The synthetic articulated figure: a 19-keypoint tree with exactly 18
    /// bones, shared by every synthetic domain (humans and animals alike).
    pub fn figure19() -> Self {
        let names = [
            "nose",
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "withers",
            "tailbase",
            "left_front_elbow",
            "right_front_elbow",
            "left_back_elbow",
            "right_back_elbow",
            "left_front_knee",
            "right_front_knee",
            "left_back_knee",
            "right_back_knee",
            "left_front_paw",
            "right_front_paw",
            "left_back_paw",
            "right_back_paw",
        ];
        let s = SkeletonSchema {
            name: FIGURE19.into(),
            keypoint_names: names.iter().map(|s| s.to_string()).collect(),
            bones: FIGURE_BONES.to_vec(),
            alignment: None,
        };
        s.with_alignment_json(&Self::coco17(), FIGURE_TO_COCO_TABLE)
            .expect("built-in alignment table is valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            COCO17 => Some(Self::coco17()),
            ANIMAL20 => Some(Self::animal20()),
            FIGURE19 => Some(Self::figure19()),
            _ => None,
        }
    }

    /// Indices of keypoints on the left side of the body (by name prefix).
    pub fn left_side(&self) -> Vec<bool> {
        self.keypoint_names.iter().map(|n| n.starts_with("left_")).collect()
    }

    pub fn right_side(&self) -> Vec<bool> {
        self.keypoint_names.iter().map(|n| n.starts_with("right_")).collect()
    }
}

/// Bones of the synthetic figure, parent first. The order is the order of
/// the 18-entry proportion vectors used by the generator and the bone report.
pub const FIGURE_BONES: [(usize, usize); 18] = [
    (0, 1),   // nose - left eye
    (0, 2),   // nose - right eye
    (1, 3),   // left eye - left ear
    (2, 4),   // right eye - right ear
    (5, 0),   // withers - nose (neck)
    (5, 6),   // withers - tailbase (spine)
    (5, 7),   // withers - left front elbow
    (5, 8),   // withers - right front elbow
    (6, 9),   // tailbase - left back elbow
    (6, 10),  // tailbase - right back elbow
    (7, 11),  // elbow - knee
    (8, 12),
    (9, 13),
    (10, 14),
    (11, 15), // knee - paw
    (12, 16),
    (13, 17),
    (14, 18),
];

/// Re-expresses `pose` in schema `to` through `from`'s alignment map.
///
/// Mapped keypoints copy coordinates and visibility; unmapped target slots
/// are unannotated; source keypoints outside the map are dropped.
pub fn align_skeleton(pose: &Pose, from: &SkeletonSchema, to: &SkeletonSchema) -> Result<Pose> {
    if pose.len() != from.d() {
        return Err(Error::Schema(format!(
            "pose has {} keypoints, schema {} expects {}",
            pose.len(),
            from.name,
            from.d()
        )));
    }
    if from.name == to.name && from.keypoint_names == to.keypoint_names {
        return Ok(Pose::new(to.name.clone(), pose.keypoints.clone()));
    }
    let al = from
        .alignment
        .as_ref()
        .filter(|a| a.target == to.name)
        .ok_or_else(|| Error::Config(format!("schema {} has no alignment into {}", from.name, to.name)))?;
    let mut out = vec![Keypoint::missing(); to.d()];
    for (i, t) in al.map.iter().enumerate() {
        if let Some(j) = *t {
            if j >= to.d() {
                return Err(Error::Schema(format!("alignment target index {j} out of range for {}", to.name)));
            }
            out[j] = pose.keypoints[i];
        }
    }
    Ok(Pose::new(to.name.clone(), out))
}
