//! Annotation sets and everything that produces or inspects them: COCO-style
//! file I/O, bone-proportion analysis, the synthetic two-domain generator and
//! seeded splits.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{align_skeleton, SkeletonSchema};
use crate::types::{Image, Instance};

pub mod bones;
pub mod coco;
pub mod split;
pub mod synth;
pub mod transform;

pub use bones::{compute_bone_proportions, BoneReport, ClassBones};
pub use coco::{parse_annotations, parse_annotations_str, write_annotations};
pub use split::split;
pub use synth::{generate_domain, generate_synthetic, SynthDomainSpec, SyntheticData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Instances that share one skeleton schema, each tagged with a split.
#[derive(Debug, Clone)]
pub struct AnnotationSet {
    pub schema: SkeletonSchema,
    pub instances: Vec<Instance>,
    pub splits: Vec<Split>,
}

impl AnnotationSet {
    /// Builds a set with every instance in the train split.
    pub fn new(schema: SkeletonSchema, instances: Vec<Instance>) -> Result<Self> {
        let splits = vec![Split::Train; instances.len()];
        Self::with_splits(schema, instances, splits)
    }

    pub fn with_splits(schema: SkeletonSchema, instances: Vec<Instance>, splits: Vec<Split>) -> Result<Self> {
        let set = AnnotationSet { schema, instances, splits };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(schema: SkeletonSchema) -> Self {
        AnnotationSet {
            schema,
            instances: Vec::new(),
            splits: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.instances.len() {
            return Err(Error::Shape(format!(
                "{} split tags for {} instances",
                self.splits.len(),
                self.instances.len()
            )));
        }
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::Schema(format!("duplicate instance id {}", inst.id)));
            }
            if let Some(p) = &inst.pose {
                if p.len() != self.schema.d() {
                    return Err(Error::Schema(format!(
                        "instance {} has {} keypoints, schema {} expects {}",
                        inst.id,
                        p.len(),
                        self.schema.name,
                        self.schema.d()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Class label used for stratification and reports: species, else domain.
    pub fn class_of(inst: &Instance) -> String {
        inst.species.clone().unwrap_or_else(|| inst.domain.name().to_string())
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for inst in &self.instances {
            *m.entry(Self::class_of(inst)).or_insert(0) += 1;
        }
        m
    }

    pub fn subset(&self, indices: &[usize]) -> AnnotationSet {
        AnnotationSet {
            schema: self.schema.clone(),
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn filter_split(&self, split: Split) -> AnnotationSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        self.subset(&idx)
    }

    /// Concatenates two sets over the same schema.
    pub fn merged(&self, other: &AnnotationSet) -> Result<AnnotationSet> {
        if self.schema.name != other.schema.name {
            return Err(Error::Schema(format!(
                "cannot merge {} with {}",
                self.schema.name, other.schema.name
            )));
        }
        let mut out = self.clone();
        out.instances.extend(other.instances.iter().cloned());
        out.splits.extend(other.splits.iter().copied());
        out.validate()?;
        Ok(out)
    }

    /// Re-expresses every pose in `to` through the schema's alignment.
    pub fn aligned_to(&self, to: &SkeletonSchema) -> Result<AnnotationSet> {
        let mut out = self.clone();
        for inst in &mut out.instances {
            if let Some(p) = &inst.pose {
                inst.pose = Some(align_skeleton(p, &self.schema, to)?);
            }
        }
        out.schema = to.clone();
        Ok(out)
    }

    pub fn find(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }
}

/// Reads an 8-bit PNG as an RGB image with values in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Writes an RGB (or grey, replicated) image as an 8-bit PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    if img.channels != 3 && img.channels != 1 {
        return Err(Error::Shape(format!("cannot store {} channels as PNG", img.channels)));
    }
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let ch = if img.channels == 1 { 0 } else { c };
                *p = (img.get(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
