//! Geometric image helpers that keep keypoints consistent with pixels.

use crate::types::{Image, Keypoint, Pose};

/// Axis-aligned crop box mapped onto an `out_h x out_w` grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropMap {
    pub x0: f64,
    pub y0: f64,
    pub sx: f64,
    pub sy: f64,
}

impl CropMap {
    pub fn new(bbox: [f64; 4], out_h: usize, out_w: usize) -> Self {
        CropMap {
            x0: bbox[0],
            y0: bbox[1],
            sx: out_w as f64 / bbox[2].max(1e-9),
            sy: out_h as f64 / bbox[3].max(1e-9),
        }
    }

    /// Source pixel coordinates to crop coordinates.
    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0 + 0.5) * self.sx - 0.5, (y - self.y0 + 0.5) * self.sy - 0.5)
    }

    pub fn inverse(&self, u: f64, v: f64) -> (f64, f64) {
        ((u + 0.5) / self.sx + self.x0 - 0.5, (v + 0.5) / self.sy + self.y0 - 0.5)
    }

    pub fn map_pose(&self, pose: &Pose) -> Pose {
        let kps = pose
            .keypoints
            .iter()
            .map(|k| {
                let (x, y) = self.forward(k.x, k.y);
                Keypoint::new(x, y, k.v)
            })
            .collect();
        Pose::new(pose.schema.clone(), kps)
    }
}

fn sample_bilinear(img: &Image, c: usize, x: f64, y: f64) -> f64 {
    let xf = x.clamp(0.0, (img.width - 1) as f64);
    let yf = y.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (xf.floor() as usize, yf.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (ax, ay) = (xf - x0 as f64, yf - y0 as f64);
    let top = img.get(c, y0, x0) * (1.0 - ax) + img.get(c, y0, x1) * ax;
    let bot = img.get(c, y1, x0) * (1.0 - ax) + img.get(c, y1, x1) * ax;
    top * (1.0 - ay) + bot * ay
}

/// Crops `bbox` out of `img` and resamples it to `out_h x out_w`, clamping at
/// the image border.
pub fn crop_resize(img: &Image, bbox: [f64; 4], out_h: usize, out_w: usize) -> (Image, CropMap) {
    let map = CropMap::new(bbox, out_h, out_w);
    let mut out = Image::zeros(img.channels, out_h, out_w);
    for c in 0..img.channels {
        for v in 0..out_h {
            for u in 0..out_w {
                let (x, y) = map.inverse(u as f64, v as f64);
                out.set(c, v, u, sample_bilinear(img, c, x, y));
            }
        }
    }
    (out, map)
}

/// Square box around `bbox` enlarged by `pad` (fraction of the longer side).
pub fn padded_square(bbox: [f64; 4], pad: f64) -> [f64; 4] {
    let side = bbox[2].max(bbox[3]).max(1.0) * (1.0 + pad);
    let cx = bbox[0] + bbox[2] / 2.0;
    let cy = bbox[1] + bbox[3] / 2.0;
    [cx - side / 2.0, cy - side / 2.0, side, side]
}

/// Translates the image content by whole pixels, replicating edge pixels.
pub fn shift_image(img: &Image, dx: i64, dy: i64) -> Image {
    let mut out = Image::zeros(img.channels, img.height, img.width);
    let (h, w) = (img.height as i64, img.width as i64);
    for c in 0..img.channels {
        for y in 0..h {
            let sy = (y - dy).clamp(0, h - 1) as usize;
            for x in 0..w {
                let sx = (x - dx).clamp(0, w - 1) as usize;
                out.set(c, y as usize, x as usize, img.get(c, sy, sx));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_map_round_trip() {
        let m = CropMap::new([3.0, 5.0, 20.0, 10.0], 32, 32);
        let (u, v) = m.forward(7.25, 9.5);
        let (x, y) = m.inverse(u, v);
        assert!((x - 7.25).abs() < 1e-12 && (y - 9.5).abs() < 1e-12);
    }

    #[test]
    fn identity_crop_keeps_pixels() {
        let mut img = Image::zeros(1, 4, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let (out, _) = crop_resize(&img, [0.0, 0.0, 4.0, 4.0], 4, 4);
        assert_eq!(out, img);
    }

    #[test]
    fn shift_moves_content() {
        let mut img = Image::zeros(1, 5, 5);
        img.set(0, 2, 2, 1.0);
        let s = shift_image(&img, 1, -1);
        assert_eq!(s.get(0, 1, 3), 1.0);
        assert_eq!(s.data.iter().sum::<f64>(), 1.0);
    }
}
