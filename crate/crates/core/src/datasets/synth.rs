//! Procedural two-domain data: articulated stick figures in the `figure19`
//! schema, rendered with per-domain bone proportions, posture and colours.
//!
//! Every figure is the same 19-joint tree. Domains differ in the relative
//! length of its 18 bones, in posture (upright vs. on four legs) and in
//! texture, which reproduces skeleton-level and appearance-level shift at a
//! size that trains in seconds.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::AnnotationSet;
use crate::error::{Error, Result};
use crate::schema::{SkeletonSchema, FIGURE_BONES};
use crate::types::{Domain, Image, Instance, Keypoint, Pose, VISIBLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    /// Spine vertical, head up, limbs hanging: a person.
    Upright,
    /// Spine horizontal, head to the right, four legs down.
    Quadruped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Texture {
    pub figure_min: [f64; 3],
    pub figure_max: [f64; 3],
    pub background_min: [f64; 3],
    pub background_max: [f64; 3],
    /// Std of additive per-pixel Gaussian noise.
    pub noise: f64,
    /// Brightness factor applied to left-side limbs.
    pub left_shade: f64,
}

impl Default for Texture {
    fn default() -> Self {
        Texture {
            figure_min: [0.7, 0.6, 0.3],
            figure_max: [1.0, 0.9, 0.5],
            background_min: [0.0, 0.0, 0.1],
            background_max: [0.3, 0.3, 0.4],
            noise: 0.03,
            left_shade: 0.6,
        }
    }
}

/// Angle ranges in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosePrior {
    pub posture: Posture,
    /// Rotation of the whole spine around its rest direction.
    pub body_angle: [f64; 2],
    /// Elevation of the neck above the spine's forward direction (quadruped),
    /// or tilt from vertical (upright).
    pub neck_angle: [f64; 2],
    /// Spread of each limb's first segment away from straight down.
    pub limb_spread: [f64; 2],
    /// Bend of every further limb segment relative to the previous one.
    pub limb_bend: [f64; 2],
    /// Longer side of the figure as a fraction of the image side.
    pub fill: [f64; 2],
}

impl Default for PosePrior {
    fn default() -> Self {
        PosePrior {
            posture: Posture::Quadruped,
            body_angle: [-10.0, 10.0],
            neck_angle: [20.0, 50.0],
            limb_spread: [5.0, 25.0],
            limb_bend: [-20.0, 20.0],
            fill: [0.7, 0.85],
        }
    }
}

/// Declarative description of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDomainSpec {
    pub species: String,
    pub domain: Domain,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Relative length of each figure bone, in the order of
    /// [`FIGURE_BONES`]; sums to one.
    pub proportions: Vec<f64>,
    /// Relative std of the per-instance, per-bone length jitter.
    #[serde(default = "default_bone_jitter")]
    pub bone_jitter: f64,
    #[serde(default)]
    pub texture: Texture,
    #[serde(default)]
    pub pose: PosePrior,
}

fn default_image_size() -> usize {
    32
}

fn default_bone_jitter() -> f64 {
    0.03
}

fn normalised(raw: [f64; 18]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

impl SynthDomainSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthDomainSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config(format!("domain {} asks for zero instances", self.species)));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image size {} is below 8", self.image_size)));
        }
        if self.proportions.len() != FIGURE_BONES.len() {
            return Err(Error::Config(format!(
                "expected {} bone proportions, got {}",
                FIGURE_BONES.len(),
                self.proportions.len()
            )));
        }
        if self.proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("bone proportions must be finite and non-negative".into()));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("bone proportions sum to {sum}, not 1")));
        }
        if !(0.0..0.5).contains(&self.bone_jitter) {
            return Err(Error::Config(format!("bone jitter {} outside [0, 0.5)", self.bone_jitter)));
        }
        let f = self.pose.fill;
        if !(f[0] > 0.0 && f[0] <= f[1] && f[1] <= 1.0) {
            return Err(Error::Config(format!("fill range {f:?} must lie in (0, 1]")));
        }
        Ok(())
    }

    /// Sum of bone proportions along each root-to-leaf chain.
    fn chains(&self) -> Vec<(&'static str, f64)> {
        let p = &self.proportions;
        let limb = |name, a: usize| (name, p[6 + a] + p[10 + a] + p[14 + a]);
        vec![
            ("neck and head", p[4] + p[0] + p[2]),
            ("spine", p[5]),
            limb("left front limb", 0),
            limb("right front limb", 1),
            limb("left back limb", 2),
            limb("right back limb", 3),
        ]
    }

    pub fn human(count: usize, seed: u64) -> Self {
        SynthDomainSpec {
            species: "human".into(),
            domain: Domain::Human,
            count,
            seed,
            image_size: 32,
            proportions: normalised([
                0.5, 0.5, 0.6, 0.6, 1.5, 4.0, 2.4, 2.4, 3.4, 3.4, 2.2, 2.2, 3.2, 3.2, 0.8, 0.8, 1.0, 1.0,
            ]),
            bone_jitter: 0.03,
            texture: Texture {
                figure_min: [0.75, 0.45, 0.25],
                figure_max: [1.0, 0.7, 0.5],
                background_min: [0.0, 0.05, 0.15],
                background_max: [0.25, 0.3, 0.45],
                ..Texture::default()
            },
            pose: PosePrior {
                posture: Posture::Upright,
                body_angle: [-8.0, 8.0],
                neck_angle: [-10.0, 10.0],
                limb_spread: [10.0, 50.0],
                limb_bend: [-25.0, 25.0],
                fill: [0.7, 0.85],
            },
        }
    }

    /// A quadruped species by name: `dog`, `horse`, `sheep` or `cow`.
    pub fn animal(species: &str, domain: Domain, count: usize, seed: u64) -> Result<Self> {
        let raw = match species {
            "dog" => [0.4, 0.4, 0.5, 0.5, 2.0, 4.0, 1.6, 1.6, 1.8, 1.8, 1.6, 1.6, 1.8, 1.8, 0.8, 0.8, 0.9, 0.9],
            "horse" => [0.5, 0.5, 0.5, 0.5, 3.0, 4.5, 2.2, 2.2, 2.4, 2.4, 2.4, 2.4, 2.6, 2.6, 1.2, 1.2, 1.2, 1.2],
            "sheep" => [0.4, 0.4, 0.6, 0.6, 1.4, 4.2, 1.4, 1.4, 1.5, 1.5, 1.3, 1.3, 1.4, 1.4, 0.6, 0.6, 0.6, 0.6],
            "cow" => [0.5, 0.5, 0.7, 0.7, 1.8, 5.5, 1.5, 1.5, 1.6, 1.6, 1.3, 1.3, 1.4, 1.4, 0.6, 0.6, 0.6, 0.6],
            _ => return Err(Error::Config(format!("no built-in synthetic species {species}"))),
        };
        let texture = if domain == Domain::AnimalTarget {
            Texture {
                figure_min: [0.3, 0.65, 0.6],
                figure_max: [0.6, 1.0, 0.95],
                background_min: [0.15, 0.1, 0.0],
                background_max: [0.4, 0.35, 0.2],
                noise: 0.05,
                ..Texture::default()
            }
        } else {
            Texture::default()
        };
        Ok(SynthDomainSpec {
            species: species.into(),
            domain,
            count,
            seed,
            image_size: 32,
            proportions: normalised(raw),
            bone_jitter: 0.03,
            texture,
            pose: PosePrior::default(),
        })
    }
}

/// Rendered synthetic data; `target_truth` holds the target poses, tagged as
/// labeled animals, and must only reach the evaluator.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub source: AnnotationSet,
    pub target: AnnotationSet,
    pub target_truth: AnnotationSet,
}

/// Renders a labeled source domain and an unlabeled target domain.
///
/// The target spec is rendered as pose-unlabeled target data whatever its
/// `domain` field says.
pub fn generate_synthetic(source: &SynthDomainSpec, target: &SynthDomainSpec) -> Result<SyntheticData> {
    if source.domain == Domain::AnimalTarget {
        return Err(Error::Config("the source spec describes a target domain".into()));
    }
    let (source_set, _) = generate_domain(source)?;
    let mut t = target.clone();
    t.domain = Domain::AnimalTarget;
    let (target_set, truth) = generate_domain(&t)?;
    Ok(SyntheticData {
        source: source_set,
        target: target_set,
        target_truth: truth.expect("target domains carry hidden truth"),
    })
}

/// Renders one domain. Target domains come back without poses, with the
/// ground truth as a separate set.
pub fn generate_domain(spec: &SynthDomainSpec) -> Result<(AnnotationSet, Option<AnnotationSet>)> {
    spec.validate()?;
    if let Some((name, _)) = spec.chains().into_iter().find(|(_, l)| *l <= 0.0) {
        return Err(Error::Generation(format!("{} has a zero-length {name}", spec.species)));
    }
    let schema = SkeletonSchema::figure19();
    let mut visible = Vec::with_capacity(spec.count);
    let mut truth = Vec::new();
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let (image, pose) = render_instance(spec, &schema, &mut rng)?;
        let inst = Instance {
            id: format!("{}-{}-{:05}", spec.species, spec.seed, i),
            image: Some(image),
            file_name: None,
            bbox: pose.bbox(),
            pose: Some(pose),
            domain: spec.domain,
            species: Some(spec.species.clone()),
        };
        if spec.domain == Domain::AnimalTarget {
            // the truth copy is pose-labeled, so it is tagged as such
            truth.push(Instance {
                domain: Domain::AnimalLabeled,
                ..inst.clone()
            });
            visible.push(Instance {
                pose: None,
                bbox: None,
                ..inst
            });
        } else {
            visible.push(inst);
        }
    }
    let truth = if spec.domain == Domain::AnimalTarget {
        Some(AnnotationSet::new(schema.clone(), truth)?)
    } else {
        None
    };
    Ok((AnnotationSet::new(schema, visible)?, truth))
}

fn deg(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    let v = if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] };
    v * PI / 180.0
}

fn dir(a: f64) -> (f64, f64) {
    (a.cos(), a.sin())
}

// Joint positions in an unscaled body frame (image axes, y down).
fn skeleton(spec: &SynthDomainSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let jitter = Normal::new(1.0, spec.bone_jitter.max(1e-12)).map_err(|e| Error::Generation(e.to_string()))?;
    let len: Vec<f64> = spec
        .proportions
        .iter()
        .map(|p| p * jitter.sample(rng).max(0.5))
        .collect();
    let prior = &spec.pose;
    let mut pts = vec![(0.0, 0.0); 19];
    let at = |pts: &Vec<(f64, f64)>, from: usize, l: f64, a: f64| {
        let (dx, dy) = dir(a);
        (pts[from].0 + l * dx, pts[from].1 + l * dy)
    };
    let body = deg(rng, prior.body_angle);
    let down = PI / 2.0;
    let (spine, neck) = match prior.posture {
        Posture::Quadruped => (PI + body, body - deg(rng, prior.neck_angle)),
        Posture::Upright => (down + body, -down + body + deg(rng, prior.neck_angle)),
    };
    // withers (5) is the root
    pts[6] = at(&pts, 5, len[5], spine);
    pts[0] = at(&pts, 5, len[4], neck);
    // eyes and ears fan out behind the nose
    let back = neck + PI;
    let spread = 50.0 * PI / 180.0;
    pts[1] = at(&pts, 0, len[0], back - spread);
    pts[2] = at(&pts, 0, len[1], back + spread);
    pts[3] = at(&pts, 1, len[2], back - spread * 0.6);
    pts[4] = at(&pts, 2, len[3], back + spread * 0.6);
    // limbs: (root, elbow, knee, paw, side) with side -1 = left
    let limbs = [(5, 7, 11, 15, -1.0), (5, 8, 12, 16, 1.0), (6, 9, 13, 17, -1.0), (6, 10, 14, 18, 1.0)];
    for (li, &(root, e, k, p, side)) in limbs.iter().enumerate() {
        let spread = deg(rng, prior.limb_spread);
        let mut a = match prior.posture {
            Posture::Quadruped => down + side * spread * 0.5,
            Posture::Upright => down - side * spread,
        };
        pts[e] = at(&pts, root, len[6 + li], a);
        a += deg(rng, prior.limb_bend);
        pts[k] = at(&pts, e, len[10 + li], a);
        a += deg(rng, prior.limb_bend);
        pts[p] = at(&pts, k, len[14 + li], a);
    }
    Ok(pts)
}

fn uniform3(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for i in 0..3 {
        c[i] = if hi[i] > lo[i] { rng.random_range(lo[i]..hi[i]) } else { lo[i] };
    }
    c
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let l2 = vx * vx + vy * vy;
    let t = if l2 > 0.0 { (((px - a.0) * vx + (py - a.1) * vy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (px - a.0 - t * vx).hypot(py - a.1 - t * vy)
}

fn render_instance(spec: &SynthDomainSpec, schema: &SkeletonSchema, rng: &mut ChaCha8Rng) -> Result<(Image, Pose)> {
    let raw = skeleton(spec, rng)?;
    let size = spec.image_size as f64;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &raw {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let extent = (x1 - x0).max(y1 - y0);
    if !(extent > 0.0) {
        return Err(Error::Generation(format!("{} produced a degenerate figure", spec.species)));
    }
    let fill = if spec.pose.fill[1] > spec.pose.fill[0] {
        rng.random_range(spec.pose.fill[0]..spec.pose.fill[1])
    } else {
        spec.pose.fill[0]
    };
    let scale = fill * (size - 2.0) / extent;
    let (w, h) = ((x1 - x0) * scale, (y1 - y0) * scale);
    let ox = 1.0 + rng.random_range(0.0..=(size - 2.0 - w).max(0.0)) - x0 * scale - 0.5;
    let oy = 1.0 + rng.random_range(0.0..=(size - 2.0 - h).max(0.0)) - y0 * scale - 0.5;
    let pts: Vec<(f64, f64)> = raw.iter().map(|&(x, y)| (x * scale + ox, y * scale + oy)).collect();

    let fg = uniform3(rng, spec.texture.figure_min, spec.texture.figure_max);
    let bg = uniform3(rng, spec.texture.background_min, spec.texture.background_max);
    let left = schema.left_side();
    let half_width = 0.5 + size / 64.0;
    let head_radius = 1.0 + size / 32.0;
    let n = spec.image_size;
    let mut img = Image::zeros(3, n, n);
    let noise = Normal::new(0.0, spec.texture.noise.max(1e-12)).map_err(|e| Error::Generation(e.to_string()))?;
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64, y as f64);
            let mut colour = bg;
            // bones drawn in order, later ones on top
            for &(a, b) in FIGURE_BONES.iter() {
                let d = segment_distance(px, py, pts[a], pts[b]);
                let cover = (half_width + 0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let shade = if left[b] { spec.texture.left_shade } else { 1.0 };
                    for c in 0..3 {
                        colour[c] = colour[c] * (1.0 - cover) + fg[c] * shade * cover;
                    }
                }
            }
            let d = (px - pts[0].0).hypot(py - pts[0].1);
            let cover = (head_radius + 0.5 - d).clamp(0.0, 1.0);
            for c in 0..3 {
                colour[c] = colour[c] * (1.0 - cover) + fg[c] * cover;
                let v = (colour[c] + noise.sample(rng)).clamp(0.0, 1.0);
                img.set(c, y, x, (v * 255.0).round() / 255.0);
            }
        }
    }
    let kps = pts.iter().map(|&(x, y)| Keypoint::new(x, y, VISIBLE)).collect();
    Ok((img, Pose::new(schema.name.clone(), kps)))
}
