//! Heatmap codec: what a "pose prediction with confidence" means.
//!
//! Grid coordinates relate to pixel coordinates through the output stride
//! `s`: grid cell `g` is centred on pixel `g * s + (s - 1) / 2`, so a stride of
//! one maps pixels to cells one-to-one.

use crate::error::{Error, Result};
use crate::types::{Keypoint, Pose, NOT_ANNOTATED, VISIBLE};

/// Default Gaussian spread in output-grid cells.
pub const DEFAULT_SIGMA: f64 = 2.0;
/// Default output stride in input pixels per grid cell.
pub const DEFAULT_STRIDE: usize = 4;

/// Per-keypoint activation grids with their extracted peaks.
///
/// `maps` is planar `d x H' x W'` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub maps: Vec<f64>,
    /// `(x, y)` grid cell of each channel's maximum.
    pub peak_coords: Vec<(usize, usize)>,
    pub peak_values: Vec<f64>,
}

impl HeatmapStack {
    /// Wraps maps that are already in `[0, 1]`.
    pub fn from_probabilities(channels: usize, height: usize, width: usize, maps: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("heatmap dimensions must be positive".into()));
        }
        if maps.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "heatmap buffer has {} values, expected {channels}x{height}x{width}",
                maps.len()
            )));
        }
        let plane = height * width;
        let mut peak_coords = Vec::with_capacity(channels);
        let mut peak_values = Vec::with_capacity(channels);
        for k in 0..channels {
            let m = &maps[k * plane..(k + 1) * plane];
            let (idx, val) = argmax(m);
            peak_coords.push((idx % width, idx / width));
            peak_values.push(val.clamp(0.0, 1.0));
        }
        Ok(HeatmapStack {
            channels,
            height,
            width,
            maps,
            peak_coords,
            peak_values,
        })
    }

    /// Squashes raw network outputs through a sigmoid, then extracts peaks.
    pub fn from_logits(channels: usize, height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        let maps = logits.iter().map(|&l| sigmoid(l)).collect();
        Self::from_probabilities(channels, height, width, maps)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::from_probabilities(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.maps[k * p..(k + 1) * p]
    }

    /// Mean of per-channel peak values.
    pub fn confidence(&self) -> f64 {
        self.peak_values.iter().sum::<f64>() / self.channels as f64
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// First maximum in scan order, so ties resolve deterministically.
fn argmax(m: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut val = m[0];
    for (i, &v) in m.iter().enumerate().skip(1) {
        if v > val {
            best = i;
            val = v;
        }
    }
    (best, val)
}

#[inline]
pub fn pixel_to_grid(p: f64, stride: usize) -> f64 {
    let s = stride as f64;
    (p - (s - 1.0) / 2.0) / s
}

#[inline]
pub fn grid_to_pixel(g: f64, stride: usize) -> f64 {
    let s = stride as f64;
    g * s + (s - 1.0) / 2.0
}

/// Renders one unnormalised Gaussian bump (peak 1) per annotated keypoint.
///
/// `sigma` is measured in output-grid cells. Unannotated keypoints yield
/// all-zero channels.
pub fn encode_heatmaps(pose: &Pose, height: usize, width: usize, sigma: f64, stride: usize) -> Result<HeatmapStack> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid {height}x{width} with stride {stride} is degenerate"
        )));
    }
    let d = pose.len();
    if d == 0 {
        return Err(Error::InvalidArgument("pose has no keypoints".into()));
    }
    let plane = height * width;
    let mut maps = vec![0.0; d * plane];
    let denom = 2.0 * sigma * sigma;
    // Beyond this radius the bump is below 1e-12; skip the tails.
    let radius = (sigma * (2.0 * 12.0 * std::f64::consts::LN_10).sqrt()).ceil() as isize;
    for (k, kp) in pose.keypoints.iter().enumerate() {
        if !kp.is_annotated() {
            continue;
        }
        if !kp.x.is_finite() || !kp.y.is_finite() {
            return Err(Error::InvalidArgument(format!("keypoint {k} has non-finite coordinates")));
        }
        let gx = pixel_to_grid(kp.x, stride);
        let gy = pixel_to_grid(kp.y, stride);
        let cx = gx.round() as isize;
        let cy = gy.round() as isize;
        let y0 = (cy - radius).max(0);
        let y1 = (cy + radius).min(height as isize - 1);
        let x0 = (cx - radius).max(0);
        let x1 = (cx + radius).min(width as isize - 1);
        let base = k * plane;
        for y in y0..=y1 {
            let dy = y as f64 - gy;
            for x in x0..=x1 {
                let dx = x as f64 - gx;
                maps[base + y as usize * width + x as usize] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    HeatmapStack::from_probabilities(d, height, width, maps)
}

/// Recovers a pose and its confidence from a heatmap stack.
///
/// Coordinates are the per-channel argmax refined by a quarter cell toward the
/// higher neighbour on each axis, mapped back to pixels by `stride`. The
/// confidence is the mean of the per-channel peak values. Channels whose peak
/// is zero decode as unannotated.
pub fn decode_heatmaps(stack: &HeatmapStack, stride: usize, schema: &str) -> (Pose, f64) {
    let mut keypoints = Vec::with_capacity(stack.channels);
    for k in 0..stack.channels {
        let m = stack.plane(k);
        let (px, py) = stack.peak_coords[k];
        let w = stack.width;
        let mut gx = px as f64;
        let mut gy = py as f64;
        if px > 0 && px + 1 < w {
            gx += 0.25 * sign(m[py * w + px + 1] - m[py * w + px - 1]);
        }
        if py > 0 && py + 1 < stack.height {
            gy += 0.25 * sign(m[(py + 1) * w + px] - m[(py - 1) * w + px]);
        }
        let v = if stack.peak_values[k] > 0.0 { VISIBLE } else { NOT_ANNOTATED };
        keypoints.push(Keypoint::new(grid_to_pixel(gx, stride), grid_to_pixel(gy, stride), v));
    }
    (Pose::new(schema, keypoints), stack.confidence())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
