//! Pinhole projection and rigid-transform algebra.
//!
//! Pixel coordinates are continuous with `(0, 0)` at the center of the
//! top-left pixel. Poses are stored camera-to-world; use [`relative_pose`]
//! to obtain the transform that carries one camera's coordinates into
//! another's.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid depth {0} (must be positive)")]
    InvalidDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with unit determinant")]
    InvalidRotation,
}

/// A continuous pixel position.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn from_vector(v: Vector2<f64>) -> Self {
        Self { u: v.x, v: v.y }
    }

    pub fn offset(self, d: Vector2<f64>) -> Self {
        Self::new(self.u + d.x, self.v + d.y)
    }

    pub fn distance(self, other: Pixel) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.cx < 0.0
            || self.cx >= self.width as f64
            || self.cy < 0.0
            || self.cy >= self.height as f64
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Camera-frame ray direction `K⁻¹ [u v 1]ᵀ` (unit z component).
    pub fn ray(&self, p: Pixel) -> Vector3<f64> {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    /// True when `p` lies inside `[0, width-1] x [0, height-1]`.
    pub fn contains(&self, p: Pixel) -> bool {
        p.u >= 0.0
            && p.v >= 0.0
            && p.u <= (self.width - 1) as f64
            && p.v <= (self.height - 1) as f64
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: t,
        }
    }

    /// Builds a pose from a raw matrix, rejecting anything that is not a
    /// proper rotation.
    pub fn from_matrix(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(r),
            translation: t,
        })
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix(),
            translation: t,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Point3 {
        Point3::from(self.translation)
    }
}

/// `depth · K⁻¹ [p 1]ᵀ` in camera coordinates.
pub fn backproject(k: &CameraIntrinsics, p: Pixel, depth: f64) -> Result<Point3, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(Point3::from(k.ray(p) * depth))
}

/// Perspective projection of a camera-frame point. The result may fall
/// outside the image.
pub fn project(k: &CameraIntrinsics, x: &Point3) -> Result<Pixel, GeometryError> {
    if !(x.z > 0.0) {
        return Err(GeometryError::BehindCamera(x.z));
    }
    let s = 1.0 / x.z;
    Ok(Pixel::new(k.fx * x.x * s + k.cx, k.fy * x.y * s + k.cy))
}

/// `R x + t`.
pub fn transform(pose: &CameraPose, x: &Point3) -> Point3 {
    pose.rotation * x + pose.translation
}

/// Transform carrying camera-`a` coordinates into camera-`b` coordinates,
/// given both camera-to-world poses.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> CameraPose {
    b.inverse().compose(a)
}

/// World point expressed in the frame of a camera with camera-to-world `pose`.
pub fn world_to_camera(pose: &CameraPose, x: &Point3) -> Point3 {
    let r_inv = pose.rotation.inverse();
    r_inv * (x - pose.translation)
}
