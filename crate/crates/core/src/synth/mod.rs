//! Synthetic scenes: analytic primitives, orbit trajectories, ray-cast
//! rendering and controlled depth corruption.

mod noise;
mod shapes;

pub use noise::{corrupt_depth, NoiseConfig};
pub use shapes::Shape;

use std::collections::BTreeSet;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::dataset::{Dataset, Frame};
use crate::frame::{DepthFrame, GrayImage, MaskFrame};
use crate::geometry::{backproject, transform, CameraIntrinsics, CameraPose, GeometryError, Pixel, Point3};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("primitive {object_id} ({kind}) has non-positive or inconsistent dimensions")]
    InvalidDimensions { object_id: u32, kind: &'static str },
    #[error("object_id {0} used more than once")]
    DuplicateObjectId(u32),
    #[error("orbit needs radius > 0 and at least 2 frames (radius {radius}, frames {n_frames})")]
    InvalidOrbit { radius: f64, n_frames: usize },
    #[error("no transparent pixels in any view")]
    NoTransparentPixels,
    #[error("invalid noise config: {0}")]
    InvalidNoise(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Rigid placement of a primitive: local frame to world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub position: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    #[serde(default = "identity_quat")]
    pub rotation: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl Placement {
    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: [x, y, z],
            rotation: identity_quat(),
        }
    }

    pub fn pose(&self) -> CameraPose {
        let [w, x, y, z] = self.rotation;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        CameraPose::from_quaternion(q, Vector3::from(self.position))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub shape: Shape,
    pub placement: Placement,
    pub transparent: bool,
    pub object_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
    /// Seed of the procedural surface texture.
    #[serde(default)]
    pub texture_seed: u64,
}

impl Scene {
    pub fn new(primitives: Vec<ScenePrimitive>) -> Result<Self, SynthError> {
        let scene = Self {
            primitives,
            texture_seed: 0,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let mut ids = BTreeSet::new();
        for p in &self.primitives {
            if !p.shape.dimensions_valid() {
                return Err(SynthError::InvalidDimensions {
                    object_id: p.object_id,
                    kind: p.shape.kind(),
                });
            }
            if !ids.insert(p.object_id) {
                return Err(SynthError::DuplicateObjectId(p.object_id));
            }
        }
        Ok(())
    }

    /// Nearest hit along the world ray `o + s·d`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for (index, prim) in self.primitives.iter().enumerate() {
            let pose = prim.placement.pose();
            let rt = pose.rotation.inverse();
            let lo = rt * (o - pose.translation);
            let ld = rt * d;
            if let Some(s) = prim.shape.intersect(&lo, &ld) {
                if best.is_none_or(|b| s < b.s) {
                    best = Some(RayHit {
                        s,
                        primitive: index,
                        local: lo + ld * s,
                    });
                }
            }
        }
        best
    }

    /// Distance from a world point to the nearest transparent surface.
    pub fn transparent_surface_distance(&self, x: &Point3) -> f64 {
        self.primitives
            .iter()
            .filter(|p| p.transparent)
            .map(|p| {
                let pose = p.placement.pose();
                p.shape.surface_distance(&(pose.rotation.inverse() * (x.coords - pose.translation)))
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Tabletop with textured opaque clutter and four transparent objects.
    pub fn tabletop() -> Self {
        let prim = |shape, placement, transparent, object_id| ScenePrimitive {
            shape,
            placement,
            transparent,
            object_id,
        };
        Self {
            primitives: vec![
                prim(Shape::Plane { half_x: 4.0, half_y: 4.0 }, Placement::at(0.0, 0.0, 0.0), false, 0),
                prim(
                    Shape::Box {
                        half_x: 0.06,
                        half_y: 0.04,
                        half_z: 0.05,
                    },
                    Placement::at(-0.22, 0.12, 0.0),
                    false,
                    1,
                ),
                prim(
                    Shape::Box {
                        half_x: 0.05,
                        half_y: 0.08,
                        half_z: 0.03,
                    },
                    Placement::at(0.2, -0.18, 0.0),
                    false,
                    2,
                ),
                prim(
                    Shape::Cylinder {
                        radius: 0.035,
                        height: 0.12,
                    },
                    Placement::at(0.05, 0.07, 0.0),
                    true,
                    10,
                ),
                prim(
                    Shape::TruncatedCone {
                        bottom_radius: 0.03,
                        top_radius: 0.045,
                        height: 0.1,
                    },
                    Placement::at(-0.08, -0.04, 0.0),
                    true,
                    11,
                ),
                prim(
                    Shape::SphereCap {
                        radius: 0.06,
                        height: 0.045,
                    },
                    Placement::at(0.1, -0.08, 0.0),
                    true,
                    12,
                ),
                prim(
                    Shape::Box {
                        half_x: 0.025,
                        half_y: 0.025,
                        half_z: 0.045,
                    },
                    Placement {
                        position: [-0.06, 0.12, 0.0],
                        rotation: [0.9659258262890683, 0.0, 0.0, 0.25881904510252074],
                    },
                    true,
                    13,
                ),
            ],
            texture_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Ray parameter; equals camera z-depth for rays built from `K⁻¹[u v 1]`.
    pub s: f64,
    pub primitive: usize,
    /// Hit point in the primitive's local frame.
    pub local: Vector3<f64>,
}

/// Camera orbit around a point, world `z` up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitConfig {
    pub center: [f64; 3],
    pub radius: f64,
    /// Radians above the horizontal plane through `center`.
    pub elevation: f64,
    pub n_frames: usize,
    /// Total azimuth span, radians; frames are `arc / n_frames` apart.
    pub arc: f64,
    #[serde(default)]
    pub start_azimuth: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 0.05],
            radius: 0.65,
            elevation: 35f64.to_radians(),
            n_frames: 60,
            arc: 45f64.to_radians(),
            start_azimuth: 0.0,
        }
    }
}

/// Look-at poses on a circle at fixed elevation, evenly spaced in azimuth.
pub fn camera_orbit(
    center: Point3,
    radius: f64,
    elevation: f64,
    n_frames: usize,
    arc: f64,
    start_azimuth: f64,
) -> Result<Vec<CameraPose>, SynthError> {
    if !(radius > 0.0) || n_frames < 2 {
        return Err(SynthError::InvalidOrbit { radius, n_frames });
    }
    let step = arc / n_frames as f64;
    (0..n_frames)
        .map(|i| {
            let az = start_azimuth + step * i as f64;
            let offset = Vector3::new(
                elevation.cos() * az.cos(),
                elevation.cos() * az.sin(),
                elevation.sin(),
            ) * radius;
            look_at(&(center + offset), &center)
        })
        .collect()
}

pub fn orbit_poses(cfg: &OrbitConfig) -> Result<Vec<CameraPose>, SynthError> {
    camera_orbit(
        Point3::from(cfg.center),
        cfg.radius,
        cfg.elevation,
        cfg.n_frames,
        cfg.arc,
        cfg.start_azimuth,
    )
}

/// Camera at `eye` with its optical axis through `target`, image `y` pointing
/// down relative to world `z`.
pub fn look_at(eye: &Point3, target: &Point3) -> Result<CameraPose, SynthError> {
    let forward = (target - eye).normalize();
    let mut up = Vector3::z();
    if forward.cross(&up).norm() < 1e-9 {
        up = Vector3::y();
    }
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right, down, forward]);
    Ok(CameraPose::from_matrix(r, eye.coords)?)
}

/// Ground-truth depth, transparent mask and shaded image for one view.
pub fn render_view(scene: &Scene, pose: &CameraPose, k: &CameraIntrinsics) -> (DepthFrame, MaskFrame, GrayImage) {
    let (w, h) = (k.width, k.height);
    let origin = pose.translation;
    let rows: Vec<Vec<(f64, bool, bool, f32)>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let d = pose.rotation * k.ray(Pixel::new(u as f64, v as f64));
                    match scene.cast(&origin, &d) {
                        Some(hit) => {
                            let prim = &scene.primitives[hit.primitive];
                            let shade = shade(scene.texture_seed, prim, &hit.local);
                            (hit.s, true, prim.transparent, shade)
                        }
                        None => (0.0, false, false, 0.0),
                    }
                })
                .collect()
        })
        .collect();
    let n = (w * h) as usize;
    let (mut depth, mut valid, mut mask, mut img) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (d, ok, m, s) in rows.into_iter().flatten() {
        depth.push(d);
        valid.push(ok);
        mask.push(m);
        img.push(s);
    }
    (
        DepthFrame::new(w, h, depth, valid).expect("sizes match"),
        MaskFrame::new(w, h, mask).expect("sizes match"),
        GrayImage::new(w, h, img).expect("intensity in range"),
    )
}

/// Opaque surfaces get two octaves of value noise at full contrast;
/// transparent ones a faint version on a bright base.
fn shade(seed: u64, prim: &ScenePrimitive, local: &Vector3<f64>) -> f32 {
    let s = seed ^ (prim.object_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let n = 0.65 * value_noise(s, &(local * 45.0)) + 0.35 * value_noise(s ^ 1, &(local * 110.0));
    let v = if prim.transparent { 0.62 + 0.08 * (n - 0.5) } else { 0.1 + 0.8 * n };
    v.clamp(0.0, 1.0) as f32
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ (z as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth trilinear value noise in [0, 1].
fn value_noise(seed: u64, p: &Vector3<f64>) -> f64 {
    let fl = p.map(f64::floor);
    let f = p - fl;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (x0, y0, z0) = (fl.x as i64, fl.y as i64, fl.z as i64);
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - s.x), (1, s.x)] {
        for (dy, wy) in [(0, 1.0 - s.y), (1, s.y)] {
            for (dz, wz) in [(0, 1.0 - s.z), (1, s.z)] {
                acc += wx * wy * wz * lattice(seed, x0 + dx, y0 + dy, z0 + dz);
            }
        }
    }
    acc
}

/// Masked ground-truth depth of every view, backprojected into the world
/// frame and voxel-downsampled.
pub fn gt_cloud_from_frames(
    frames: &[(&CameraPose, &DepthFrame, &MaskFrame)],
    k: &CameraIntrinsics,
    voxel: f64,
) -> Result<PointCloud, SynthError> {
    let mut points = Vec::new();
    for (pose, depth, mask) in frames {
        for v in 0..depth.height {
            for u in 0..depth.width {
                let i = depth.index(u, v);
                if mask.data[i] && depth.valid[i] {
                    let x = backproject(k, Pixel::new(u as f64, v as f64), depth.depth[i])?;
                    points.push(transform(pose, &x));
                }
            }
        }
    }
    if points.is_empty() {
        return Err(SynthError::NoTransparentPixels);
    }
    Ok(PointCloud::new(points).voxel_downsample(voxel))
}

/// Renders each view and builds the ground-truth cloud of transparent surfaces.
pub fn gt_cloud(scene: &Scene, views: &[CameraPose], k: &CameraIntrinsics, voxel: f64) -> Result<PointCloud, SynthError> {
    let rendered: Vec<_> = views.iter().map(|p| render_view(scene, p, k)).collect();
    let frames: Vec<_> = views
        .iter()
        .zip(&rendered)
        .map(|(p, (d, m, _))| (p, d, m))
        .collect();
    gt_cloud_from_frames(&frames, k, voxel)
}

/// Everything needed to generate a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub intrinsics: CameraIntrinsics,
    pub scene: Scene,
    pub orbit: OrbitConfig,
    /// Per-frame noise seeds are derived from `noise.seed` and the frame index.
    pub noise: NoiseConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).expect("valid"),
            scene: Scene::tabletop(),
            orbit: OrbitConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

/// Renders the orbit and corrupts each ground-truth depth map inside the mask.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset, SynthError> {
    cfg.intrinsics.validate()?;
    cfg.scene.validate()?;
    cfg.noise.validate()?;
    let poses = orbit_poses(&cfg.orbit)?;
    let frames = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let (gt, mask, image) = render_view(&cfg.scene, pose, &cfg.intrinsics);
            let noise = NoiseConfig {
                seed: crate::derive_seed(cfg.noise.seed, i as u64),
                ..cfg.noise
            };
            let depth_pred = corrupt_depth(&gt, &mask, &noise)?;
            Ok(Frame {
                image,
                depth_gt: Some(gt),
                depth_pred,
                mask,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(Dataset {
        intrinsics: cfg.intrinsics,
        poses,
        frames,
    })
}
