//! COCO-style keypoint annotation files.
//!
//! The reader accepts the standard `images` / `annotations` / `categories`
//! layout plus three optional per-annotation extensions: `domain`
//! (`human`, `animal_labeled`, `animal_target`), `split` (`train`, `test`)
//! and `instance` (a stable string id). Target instances are written with an
//! empty `keypoints` array.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_png, save_png, AnnotationSet, Split};
use crate::error::{Error, Result};
use crate::schema::SkeletonSchema;
use crate::types::{Domain, Instance, Keypoint, Pose};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    #[serde(default)]
    keypoints: Vec<f64>,
    #[serde(default)]
    num_keypoints: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<Domain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    species: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instance: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    keypoints: Vec<String>,
    #[serde(default)]
    skeleton: Vec<[usize; 2]>,
}

/// Reads an annotation file. Pixels are loaded when `load_images` is set,
/// resolving `file_name` against the file's directory.
pub fn parse_annotations(path: &Path, load_images: bool) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut set = parse_with_path(&text, path)?;
    if load_images {
        let base = path.parent().unwrap_or(Path::new("."));
        for inst in &mut set.instances {
            if let Some(f) = &inst.file_name {
                inst.image = Some(load_png(&base.join(f))?);
            }
        }
    }
    Ok(set)
}

/// Parses annotation JSON held in memory.
pub fn parse_annotations_str(text: &str) -> Result<AnnotationSet> {
    parse_with_path(text, Path::new("<memory>"))
}

fn parse_with_path(text: &str, path: &Path) -> Result<AnnotationSet> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let first = file
        .categories
        .first()
        .ok_or_else(|| Error::Schema(format!("{}: no categories", path.display())))?;
    for c in &file.categories {
        if c.keypoints != first.keypoints {
            return Err(Error::Schema(format!(
                "category {} lists different keypoints from category {}",
                c.name, first.name
            )));
        }
    }
    let schema = schema_for(first)?;
    let d = schema.d();
    let images: HashMap<u64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    let categories: HashMap<u64, &CocoCategory> = file.categories.iter().map(|c| (c.id, c)).collect();

    let mut instances = Vec::with_capacity(file.annotations.len());
    let mut splits = Vec::with_capacity(file.annotations.len());
    for a in &file.annotations {
        let cat = categories
            .get(&a.category_id)
            .ok_or_else(|| Error::Schema(format!("annotation {} names unknown category {}", a.id, a.category_id)))?;
        let pose = if a.keypoints.is_empty() {
            None
        } else {
            if a.keypoints.len() != 3 * d {
                return Err(Error::Schema(format!(
                    "annotation {} has {} keypoint values, schema {} expects {}",
                    a.id,
                    a.keypoints.len(),
                    schema.name,
                    3 * d
                )));
            }
            let mut kps = Vec::with_capacity(d);
            for c in a.keypoints.chunks(3) {
                let v = c[2];
                if !(v == 0.0 || v == 1.0 || v == 2.0) {
                    return Err(Error::Schema(format!("annotation {} has visibility flag {v}", a.id)));
                }
                if v > 0.0 && !(c[0].is_finite() && c[1].is_finite()) {
                    return Err(Error::Schema(format!("annotation {} has non-finite coordinates", a.id)));
                }
                kps.push(Keypoint::new(c[0], c[1], v as u8));
            }
            Some(Pose::new(schema.name.clone(), kps))
        };
        let domain = match a.domain {
            Some(d) => d,
            None if pose.is_none() => Domain::AnimalTarget,
            None if cat.name == "person" => Domain::Human,
            None => Domain::AnimalLabeled,
        };
        let image = images.get(&a.image_id);
        let inst = Instance {
            id: a.instance.clone().unwrap_or_else(|| a.id.to_string()),
            image: None,
            file_name: image.map(|i| i.file_name.clone()).filter(|f| !f.is_empty()),
            bbox: a.bbox.or_else(|| pose.as_ref().and_then(|p| p.bbox())),
            pose,
            domain,
            species: a.species.clone().or_else(|| (cat.name != "person").then(|| cat.name.clone())),
        };
        inst.validate().map_err(|e| Error::Schema(format!("annotation {}: {e}", a.id)))?;
        instances.push(inst);
        splits.push(a.split.unwrap_or_default());
    }
    AnnotationSet::with_splits(schema, instances, splits)
}

// Prefer the built-in schema of the same shape so its alignment comes along.
fn schema_for(cat: &CocoCategory) -> Result<SkeletonSchema> {
    for name in [crate::schema::COCO17, crate::schema::ANIMAL20, crate::schema::FIGURE19] {
        let s = SkeletonSchema::builtin(name).expect("builtin");
        if s.keypoint_names == cat.keypoints {
            return Ok(s);
        }
    }
    let bones = cat
        .skeleton
        .iter()
        .map(|&[a, b]| {
            if a == 0 || b == 0 {
                Err(Error::Schema(format!("category {} skeleton is not 1-based", cat.name)))
            } else {
                Ok((a - 1, b - 1))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    SkeletonSchema::new(cat.name.clone(), cat.keypoints.clone(), bones)
}

/// Writes `set` as an annotation file at `path`. Loaded pixels are stored as
/// PNG files under `images/` next to it.
pub fn write_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cats: Vec<CocoCategory> = Vec::new();
    let mut images = Vec::with_capacity(set.len());
    let mut annotations = Vec::with_capacity(set.len());
    let skeleton: Vec<[usize; 2]> = set.schema.bones.iter().map(|&(a, b)| [a + 1, b + 1]).collect();
    for (i, (inst, split)) in set.instances.iter().zip(&set.splits).enumerate() {
        let cat_name = match inst.domain {
            Domain::Human => "person".to_string(),
            _ => inst.species.clone().unwrap_or_else(|| "animal".into()),
        };
        let cat_id = match cats.iter().position(|c| c.name == cat_name) {
            Some(p) => cats[p].id,
            None => {
                let id = cats.len() as u64 + 1;
                cats.push(CocoCategory {
                    id,
                    name: cat_name,
                    keypoints: set.schema.keypoint_names.clone(),
                    skeleton: skeleton.clone(),
                });
                id
            }
        };
        let id = i as u64 + 1;
        let (file_name, width, height) = match &inst.image {
            Some(img) => {
                let f = format!("images/{}.png", sanitize(&inst.id));
                save_png(img, &base.join(&f))?;
                (f, img.width, img.height)
            }
            None => (inst.file_name.clone().unwrap_or_default(), 0, 0),
        };
        images.push(CocoImage { id, file_name, width, height });
        let keypoints = inst
            .pose
            .as_ref()
            .map(|p| p.keypoints.iter().flat_map(|k| [k.x, k.y, k.v as f64]).collect())
            .unwrap_or_default();
        annotations.push(CocoAnnotation {
            id,
            image_id: id,
            category_id: cat_id,
            num_keypoints: inst.pose.as_ref().map_or(0, |p| p.annotated_count()),
            keypoints,
            bbox: inst.bbox,
            domain: Some(inst.domain),
            split: Some(*split),
            species: inst.species.clone(),
            instance: Some(inst.id.clone()),
        });
    }
    if cats.is_empty() {
        cats.push(CocoCategory {
            id: 1,
            name: set.schema.name.clone(),
            keypoints: set.schema.keypoint_names.clone(),
            skeleton,
        });
    }
    let file = CocoFile {
        images,
        annotations,
        categories: cats,
    };
    std::fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
