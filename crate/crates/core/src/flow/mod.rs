//! Dense optical flow: estimation, geometric ground truth and noise models.

mod farneback;

pub use farneback::{estimate_flow, FlowParams};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{DepthFrame, FrameError};
use crate::geometry::{backproject, project, transform, CameraIntrinsics, CameraPose, Pixel};

/// Reprojected depth may exceed the target depth by this much before the
/// pixel is considered occluded.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("sample position ({0}, {1}) outside the flow field")]
    OutOfBounds(f64, f64),
    #[error("flow support around ({0}, {1}) contains invalid vectors")]
    InvalidSupport(f64, f64),
    #[error("invalid flow parameters: {0}")]
    Params(String),
}

/// Per-pixel 2-D motion from one image toward another.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: u32,
    pub height: u32,
    pub vectors: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            vectors: vec![Vector2::zeros(); n],
            valid: vec![true; n],
        }
    }

    pub fn new(
        width: u32,
        height: u32,
        mut vectors: Vec<Vector2<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self, FlowError> {
        let n = width as usize * height as usize;
        if vectors.len() != n || valid.len() != n {
            return Err(FrameError::LengthMismatch {
                width,
                height,
                len: vectors.len().min(valid.len()),
            }
            .into());
        }
        for (vec, ok) in vectors.iter_mut().zip(&valid) {
            if !*ok {
                *vec = Vector2::zeros();
            }
        }
        Ok(Self {
            width,
            height,
            vectors,
            valid,
        })
    }

    #[inline]
    pub fn index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Bilinear interpolation of the flow at a continuous position.
///
/// Every pixel that carries nonzero interpolation weight must be valid.
pub fn sample_flow(f: &FlowField, p: Pixel) -> Result<Vector2<f64>, FlowError> {
    let max_u = (f.width - 1) as f64;
    let max_v = (f.height - 1) as f64;
    if !(p.u >= 0.0 && p.v >= 0.0 && p.u <= max_u && p.v <= max_v) {
        return Err(FlowError::OutOfBounds(p.u, p.v));
    }
    let u0 = p.u.floor() as u32;
    let v0 = p.v.floor() as u32;
    let fu = p.u - u0 as f64;
    let fv = p.v - v0 as f64;
    let u1 = (u0 + 1).min(f.width - 1);
    let v1 = (v0 + 1).min(f.height - 1);

    let taps = [
        (u0, v0, (1.0 - fu) * (1.0 - fv)),
        (u1, v0, fu * (1.0 - fv)),
        (u0, v1, (1.0 - fu) * fv),
        (u1, v1, fu * fv),
    ];
    let mut acc = Vector2::zeros();
    for (u, v, w) in taps {
        if w == 0.0 {
            continue;
        }
        let i = f.index(u, v);
        if !f.valid[i] {
            return Err(FlowError::InvalidSupport(p.u, p.v));
        }
        acc += f.vectors[i] * w;
    }
    Ok(acc)
}

/// Ground-truth flow from frame `a` to frame `b` induced by depth and the
/// relative pose `rel` (camera-a coordinates into camera-b coordinates).
///
/// Pixels are invalid when `a` has no depth, the reprojection leaves `b`,
/// or the reprojected point lies behind the surface visible in `b` by more
/// than [`OCCLUSION_TOLERANCE`].
pub fn oracle_flow(
    depth_a: &DepthFrame,
    rel: &CameraPose,
    k: &CameraIntrinsics,
    depth_b: &DepthFrame,
) -> FlowField {
    let (w, h) = (depth_a.width, depth_a.height);
    let mut field = FlowField {
        width: w,
        height: h,
        vectors: vec![Vector2::zeros(); w as usize * h as usize],
        valid: vec![false; w as usize * h as usize],
    };
    for v in 0..h {
        for u in 0..w {
            let i = depth_a.index(u, v);
            if !depth_a.valid[i] {
                continue;
            }
            let p = Pixel::new(u as f64, v as f64);
            if let Some(target) = oracle_target(p, depth_a.depth[i], rel, k, depth_b) {
                field.vectors[i] = target.to_vector() - p.to_vector();
                field.valid[i] = true;
            }
        }
    }
    field
}

/// The pixel in frame `b` observing the surface point seen at `p` with
/// depth `depth` in frame `a`, if it is visible there.
pub fn oracle_target(
    p: Pixel,
    depth: f64,
    rel: &CameraPose,
    k: &CameraIntrinsics,
    depth_b: &DepthFrame,
) -> Option<Pixel> {
    let x_a = backproject(k, p, depth).ok()?;
    let x_b = transform(rel, &x_a);
    let q = project(k, &x_b).ok()?;
    if !(q.u >= 0.0 && q.v >= 0.0 && q.u <= (depth_b.width - 1) as f64 && q.v <= (depth_b.height - 1) as f64) {
        return None;
    }
    // Occluded when the visible surface at the target is nearer than the point.
    let visible = depth_b.get_nearest(q.u, q.v)?;
    if x_b.z > visible + OCCLUSION_TOLERANCE {
        return None;
    }
    Some(q)
}

/// Noise applied to a flow field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowNoise {
    /// Isotropic Gaussian std, pixels.
    pub sigma: f64,
    pub outlier_rate: f64,
    /// Magnitude of the error vector for outliers, pixels.
    pub outlier_px: f64,
    pub seed: u64,
}

impl Default for FlowNoise {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            outlier_rate: 0.0,
            outlier_px: 20.0,
            seed: 0,
        }
    }
}

/// Adds Gaussian noise to every valid vector and replaces a random fraction
/// with a fixed-magnitude error in a uniform direction.
pub fn perturb_flow(f: &FlowField, noise: &FlowNoise) -> Result<FlowField, FlowError> {
    if !(noise.sigma >= 0.0) || !(0.0..=1.0).contains(&noise.outlier_rate) {
        return Err(FlowError::Params(format!(
            "sigma {} / outlier rate {} out of range",
            noise.sigma, noise.outlier_rate
        )));
    }
    let mut out = f.clone();
    if noise.sigma == 0.0 && noise.outlier_rate == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, noise.sigma.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    for (vec, ok) in out.vectors.iter_mut().zip(&out.valid) {
        if !*ok {
            continue;
        }
        let nx: f64 = normal.sample(&mut rng);
        let ny: f64 = normal.sample(&mut rng);
        let coin: f64 = rng.random();
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        if coin < noise.outlier_rate {
            *vec += Vector2::new(angle.cos(), angle.sin()) * noise.outlier_px;
        } else if noise.sigma > 0.0 {
            *vec += Vector2::new(nx, ny);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use nalgebra::Vector3;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn constant_depth(w: u32, h: u32, d: f64) -> DepthFrame {
        DepthFrame::from_depths(w, h, vec![d; (w * h) as usize]).unwrap()
    }

    #[test]
    fn oracle_identity_is_zero() {
        let d = constant_depth(640, 480, 1.3);
        let f = oracle_flow(&d, &CameraPose::identity(), &k(), &d);
        assert_eq!(f.valid_count(), 640 * 480);
        assert!(f.vectors.iter().all(|v| v.norm() < 1e-9));
    }

    #[test]
    fn oracle_principal_point_translation() {
        let depth_a = constant_depth(640, 480, 1.0);
        // A fronto-parallel plane seen by b is still at z = 1.
        let rel = CameraPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let f = oracle_flow(&depth_a, &rel, &k(), &depth_a);
        let v = f.vectors[f.index(320, 240)];
        assert!((v - Vector2::new(50.0, 0.0)).norm() < 1e-9);
        // Pixels pushed past the right edge are invalid.
        assert!(!f.valid[f.index(600, 240)]);
    }

    #[test]
    fn oracle_marks_occluded_pixels() {
        let depth_a = constant_depth(640, 480, 1.0);
        let mut depth_b = constant_depth(640, 480, 1.0);
        // A nearer surface covers the target of the principal pixel.
        for v in 230..250 {
            for u in 360..380 {
                let i = depth_b.index(u, v);
                depth_b.depth[i] = 0.5;
            }
        }
        let rel = CameraPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let f = oracle_flow(&depth_a, &rel, &k(), &depth_b);
        assert!(!f.valid[f.index(320, 240)]);
        assert!(f.valid[f.index(320, 100)]);
    }

    #[test]
    fn oracle_matches_projection_chain() {
        let k = k();
        let depth: Vec<f64> = (0..640 * 480).map(|i| 0.8 + (i % 97) as f64 * 0.003).collect();
        let depth_a = DepthFrame::from_depths(640, 480, depth).unwrap();
        let depth_b = constant_depth(640, 480, 100.0);
        let rel = CameraPose {
            rotation: nalgebra::Rotation3::from_euler_angles(0.01, -0.02, 0.005),
            translation: Vector3::new(0.03, -0.01, 0.02),
        };
        let f = oracle_flow(&depth_a, &rel, &k, &depth_b);
        for &(u, v) in &[(80u32, 80u32), (320, 240), (500, 400), (100, 300)] {
            let i = f.index(u, v);
            assert!(f.valid[i]);
            let p = Pixel::new(u as f64, v as f64);
            let x: Point3 = backproject(&k, p, depth_a.depth[i]).unwrap();
            let q = project(&k, &transform(&rel, &x)).unwrap();
            assert!((p.offset(f.vectors[i]).to_vector() - q.to_vector()).norm() < 1e-9);
        }
    }

    #[test]
    fn sample_flow_interpolates() {
        let mut f = FlowField::zeros(4, 3);
        let i = f.index(1, 1);
        f.vectors[i] = Vector2::new(2.0, 0.0);
        assert_eq!(sample_flow(&f, Pixel::new(1.0, 1.0)).unwrap(), Vector2::new(2.0, 0.0));
        assert_eq!(sample_flow(&f, Pixel::new(0.5, 1.0)).unwrap(), Vector2::new(1.0, 0.0));
        assert!(matches!(
            sample_flow(&f, Pixel::new(3.5, 1.0)),
            Err(FlowError::OutOfBounds(..))
        ));
        assert!(sample_flow(&f, Pixel::new(3.0, 2.0)).is_ok());

        let i = f.index(2, 1);
        f.valid[i] = false;
        assert!(matches!(
            sample_flow(&f, Pixel::new(1.5, 1.0)),
            Err(FlowError::InvalidSupport(..))
        ));
        // Zero-weight neighbors do not matter.
        assert!(sample_flow(&f, Pixel::new(1.0, 1.0)).is_ok());
    }

    #[test]
    fn perturb_zero_is_identity() {
        let f = FlowField::zeros(32, 16);
        let noise = FlowNoise {
            sigma: 0.0,
            outlier_rate: 0.0,
            outlier_px: 5.0,
            seed: 3,
        };
        assert_eq!(perturb_flow(&f, &noise).unwrap(), f);
    }

    #[test]
    fn perturb_noise_statistics() {
        let f = FlowField::zeros(400, 250);
        let noise = FlowNoise {
            sigma: 2.0,
            outlier_rate: 0.0,
            outlier_px: 0.0,
            seed: 42,
        };
        let g = perturb_flow(&f, &noise).unwrap();
        let n = (g.vectors.len() * 2) as f64;
        let mean = g.vectors.iter().map(|v| v.x + v.y).sum::<f64>() / n;
        let var = g
            .vectors
            .iter()
            .map(|v| (v.x - mean).powi(2) + (v.y - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        assert!((var.sqrt() - 2.0).abs() < 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn perturb_outliers_have_fixed_magnitude() {
        let mut f = FlowField::zeros(50, 40);
        f.vectors.iter_mut().for_each(|v| *v = Vector2::new(3.0, -1.0));
        f.valid[7] = false;
        f.vectors[7] = Vector2::zeros();
        let noise = FlowNoise {
            sigma: 1.0,
            outlier_rate: 1.0,
            outlier_px: 20.0,
            seed: 9,
        };
        let g = perturb_flow(&f, &noise).unwrap();
        for i in 0..g.vectors.len() {
            if g.valid[i] {
                let err = (g.vectors[i] - f.vectors[i]).norm();
                assert!((err - 20.0).abs() < 1e-9);
            } else {
                assert_eq!(g.vectors[i], Vector2::zeros());
            }
        }
    }

    #[test]
    fn perturb_is_reproducible() {
        let f = FlowField::zeros(64, 48);
        let noise = FlowNoise {
            sigma: 1.5,
            outlier_rate: 0.1,
            outlier_px: 10.0,
            seed: 1234,
        };
        assert_eq!(perturb_flow(&f, &noise).unwrap(), perturb_flow(&f, &noise).unwrap());
        let other = FlowNoise { seed: 1235, ..noise };
        assert_ne!(perturb_flow(&f, &noise).unwrap(), perturb_flow(&f, &other).unwrap());
    }
}
