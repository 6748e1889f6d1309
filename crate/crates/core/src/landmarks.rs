//! Landmark seeding in a band along the transparency-mask boundary.

use serde::{Deserialize, Serialize};

use crate::frame::MaskFrame;
use crate::geometry::Pixel;

pub const DEFAULT_BAND_WIDTH: u32 = 10;
pub const DEFAULT_STRIDE: u32 = 4;

/// A keyframe pixel selected for tracking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSeed {
    pub pixel: Pixel,
    pub keyframe_id: usize,
}

/// Mask pixels whose Euclidean distance to the nearest non-mask pixel is at
/// most `width_px`. Everything outside the image counts as non-mask.
pub fn boundary_band(mask: &MaskFrame, width_px: u32) -> MaskFrame {
    assert!(width_px >= 1, "band width must be at least one pixel");
    let dist2 = squared_distance_to_background(mask);
    let limit = width_px as f64 * width_px as f64;
    let data = mask
        .data
        .iter()
        .zip(&dist2)
        .map(|(&m, &d)| m && d <= limit)
        .collect();
    MaskFrame {
        width: mask.width,
        height: mask.height,
        data,
    }
}

/// Band pixels on the `stride` grid, in row-major order.
pub fn sample_landmarks(band: &MaskFrame, stride: u32, keyframe_id: usize) -> Vec<LandmarkSeed> {
    assert!(stride >= 1, "stride must be at least one pixel");
    let mut seeds = Vec::new();
    for v in (0..band.height).step_by(stride as usize) {
        for u in (0..band.width).step_by(stride as usize) {
            if band.get(u, v) {
                seeds.push(LandmarkSeed {
                    pixel: Pixel::new(u as f64, v as f64),
                    keyframe_id,
                });
            }
        }
    }
    seeds
}

/// Exact squared Euclidean distance from every pixel to the nearest `false`
/// pixel, with a one-pixel `false` frame surrounding the image.
///
/// Two-pass lower-envelope transform (Felzenszwalb & Huttenlocher).
pub fn squared_distance_to_background(mask: &MaskFrame) -> Vec<f64> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let (pw, ph) = (w + 2, h + 2);
    let mut grid = vec![0.0f64; pw * ph];
    for v in 0..h {
        for u in 0..w {
            if mask.data[v * w + u] {
                grid[(v + 1) * pw + u + 1] = f64::INFINITY;
            }
        }
    }

    let mut f = vec![0.0; pw.max(ph)];
    let mut out = vec![0.0; pw.max(ph)];
    let mut scratch = Envelope::with_capacity(pw.max(ph));

    for c in 0..pw {
        for r in 0..ph {
            f[r] = grid[r * pw + c];
        }
        scratch.transform(&f[..ph], &mut out[..ph]);
        for r in 0..ph {
            grid[r * pw + c] = out[r];
        }
    }
    for r in 0..ph {
        let row = &mut grid[r * pw..(r + 1) * pw];
        f[..pw].copy_from_slice(row);
        scratch.transform(&f[..pw], &mut out[..pw]);
        row.copy_from_slice(&out[..pw]);
    }

    let mut result = Vec::with_capacity(w * h);
    for v in 0..h {
        result.extend_from_slice(&grid[(v + 1) * pw + 1..(v + 1) * pw + 1 + w]);
    }
    result
}

struct Envelope {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            vertices: vec![0; n],
            bounds: vec![0.0; n + 1],
        }
    }

    /// 1-D squared distance transform of the sampled function `f`.
    fn transform(&mut self, f: &[f64], d: &mut [f64]) {
        let n = f.len();
        let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
        if finite.is_empty() {
            d.iter_mut().for_each(|x| *x = f64::INFINITY);
            return;
        }
        let z = &mut self.bounds;
        let vtx = &mut self.vertices;
        let mut k = 0usize;
        vtx[0] = finite[0];
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for &q in &finite[1..] {
            let mut s;
            loop {
                let p = vtx[k];
                s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * (q as f64 - p as f64));
                if s > z[k] {
                    break;
                }
                k -= 1;
            }
            k += 1;
            vtx[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        let mut k = 0usize;
        for (q, out) in d.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = vtx[k];
            let dq = q as f64 - p as f64;
            *out = dq * dq + f[p];
        }
    }
}
