//! Domain types shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Visibility flag following the COCO keypoint convention.
pub const NOT_ANNOTATED: u8 = 0;
pub const OCCLUDED: u8 = 1;
pub const VISIBLE: u8 = 2;

/// One keypoint in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// 0 = not annotated, 1 = annotated but occluded, 2 = annotated and visible.
    pub v: u8,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Keypoint { x, y, v }
    }

    pub fn missing() -> Self {
        Keypoint {
            x: 0.0,
            y: 0.0,
            v: NOT_ANNOTATED,
        }
    }

    pub fn is_annotated(&self) -> bool {
        self.v > NOT_ANNOTATED
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// An ordered set of keypoints in the order of a named skeleton schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
    pub schema: String,
}

impl Pose {
    pub fn new(schema: impl Into<String>, keypoints: Vec<Keypoint>) -> Self {
        Pose {
            keypoints,
            schema: schema.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn annotated_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_annotated()).count()
    }

    /// Tight box `[x, y, w, h]` around annotated keypoints.
    pub fn bbox(&self) -> Option<[f64; 4]> {
        let mut it = self.keypoints.iter().filter(|k| k.is_annotated());
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for k in it {
            x0 = x0.min(k.x);
            y0 = y0.min(k.y);
            x1 = x1.max(k.x);
            y1 = y1.max(k.y);
        }
        Some([x0, y0, x1 - x0, y1 - y0])
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Pose {
        let keypoints = self
            .keypoints
            .iter()
            .map(|k| Keypoint { x: k.x + dx, y: k.y + dy, v: k.v })
            .collect();
        Pose::new(self.schema.clone(), keypoints)
    }
}

/// Planar `C x H x W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_planar(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }
}

/// Which data source an instance comes from.
///
/// Encodes the `(y, z)` flags of the domain discrimination loss: `y = 1` for
/// animals, `z = 1` for pose-unlabeled target samples. Targets are always
/// animals, so the fourth combination is unrepresentable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Human,
    AnimalLabeled,
    AnimalTarget,
}

impl Domain {
    /// Animal flag `y`.
    pub fn y(self) -> u8 {
        match self {
            Domain::Human => 0,
            _ => 1,
        }
    }

    /// Target flag `z`.
    pub fn z(self) -> u8 {
        match self {
            Domain::AnimalTarget => 1,
            _ => 0,
        }
    }

    pub fn from_flags(y: u8, z: u8) -> Result<Self> {
        match (y, z) {
            (0, 0) => Ok(Domain::Human),
            (1, 0) => Ok(Domain::AnimalLabeled),
            (1, 1) => Ok(Domain::AnimalTarget),
            _ => Err(Error::InvalidArgument(format!(
                "domain flags y={y}, z={z}: targets must be animals"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Human => "human",
            Domain::AnimalLabeled => "animal",
            Domain::AnimalTarget => "target",
        }
    }
}

/// One cropped instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: String,
    pub image: Option<Image>,
    pub file_name: Option<String>,
    pub pose: Option<Pose>,
    /// `[x, y, w, h]` in image pixels.
    pub bbox: Option<[f64; 4]>,
    pub domain: Domain,
    pub species: Option<String>,
}

impl Instance {
    pub fn y(&self) -> u8 {
        self.domain.y()
    }

    pub fn z(&self) -> u8 {
        self.domain.z()
    }

    /// Checks the ingest-time invariants: targets carry no pose, sources do.
    pub fn validate(&self) -> Result<()> {
        match (self.domain, &self.pose) {
            (Domain::AnimalTarget, Some(_)) => Err(Error::Contract(format!(
                "target instance {} carries a pose at ingest time",
                self.id
            ))),
            (Domain::Human | Domain::AnimalLabeled, None) => Err(Error::Contract(format!(
                "source instance {} has no pose",
                self.id
            ))),
            _ => Ok(()),
        }
    }

    pub fn image(&self) -> Result<&Image> {
        self.image
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("instance {} has no pixels loaded", self.id)))
    }
}
