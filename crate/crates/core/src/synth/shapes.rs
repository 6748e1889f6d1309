//! Analytic primitives in their local frame.
//!
//! Solids stand on the local `z = 0` plane with `+z` up. Rays are
//! `o + s·d` with `d` not necessarily unit length; intersections report the
//! parameter `s`.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Hits closer than this ray parameter are ignored.
const MIN_T: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Rectangle in the local `z = 0` plane.
    Plane { half_x: f64, half_y: f64 },
    /// Closed cylinder around the `z` axis from `z = 0` to `height`.
    Cylinder { radius: f64, height: f64 },
    /// Cone frustum with a closed bottom and an open top, like a cup.
    TruncatedCone {
        bottom_radius: f64,
        top_radius: f64,
        height: f64,
    },
    /// Sphere of `radius` resting on `z = 0`, kept up to `height`. An open
    /// bowl for `height < 2·radius`, a full sphere at `2·radius`.
    SphereCap { radius: f64, height: f64 },
    /// Axis-aligned box resting on `z = 0`.
    Box { half_x: f64, half_y: f64, half_z: f64 },
}

impl Shape {
    pub fn dimensions_valid(&self) -> bool {
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        match *self {
            Shape::Plane { half_x, half_y } => positive(&[half_x, half_y]),
            Shape::Cylinder { radius, height } => positive(&[radius, height]),
            Shape::TruncatedCone {
                bottom_radius,
                top_radius,
                height,
            } => positive(&[bottom_radius, top_radius, height]),
            Shape::SphereCap { radius, height } => positive(&[radius, height]) && height <= 2.0 * radius,
            Shape::Box {
                half_x,
                half_y,
                half_z,
            } => positive(&[half_x, half_y, half_z]),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Plane { .. } => "plane",
            Shape::Cylinder { .. } => "cylinder",
            Shape::TruncatedCone { .. } => "truncated_cone",
            Shape::SphereCap { .. } => "sphere_cap",
            Shape::Box { .. } => "box",
        }
    }

    /// Smallest ray parameter `s > 0` at which the ray meets the surface.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let mut best = Hit(None);
        match *self {
            Shape::Plane { half_x, half_y } => {
                if d.z != 0.0 {
                    let s = -o.z / d.z;
                    let p = o + d * s;
                    if p.x.abs() <= half_x && p.y.abs() <= half_y {
                        best.offer(s);
                    }
                }
            }
            Shape::Cylinder { radius, height } => {
                let a = d.x * d.x + d.y * d.y;
                let b = 2.0 * (o.x * d.x + o.y * d.y);
                let c = o.x * o.x + o.y * o.y - radius * radius;
                for s in quadratic_roots(a, b, c) {
                    let z = o.z + s * d.z;
                    if (0.0..=height).contains(&z) {
                        best.offer(s);
                    }
                }
                best.offer_opt(disk(o, d, 0.0, radius));
                best.offer_opt(disk(o, d, height, radius));
            }
            Shape::TruncatedCone {
                bottom_radius,
                top_radius,
                height,
            } => {
                let slope = (top_radius - bottom_radius) / height;
                let m = bottom_radius + slope * o.z;
                let a = d.x * d.x + d.y * d.y - slope * slope * d.z * d.z;
                let b = 2.0 * (o.x * d.x + o.y * d.y - slope * m * d.z);
                let c = o.x * o.x + o.y * o.y - m * m;
                for s in quadratic_roots(a, b, c) {
                    let z = o.z + s * d.z;
                    // Reject the mirrored nappe where the radius goes negative.
                    if (0.0..=height).contains(&z) && bottom_radius + slope * z >= 0.0 {
                        best.offer(s);
                    }
                }
                best.offer_opt(disk(o, d, 0.0, bottom_radius));
            }
            Shape::SphereCap { radius, height } => {
                let oc = o - Vector3::new(0.0, 0.0, radius);
                let a = d.norm_squared();
                let b = 2.0 * d.dot(&oc);
                let c = oc.norm_squared() - radius * radius;
                for s in quadratic_roots(a, b, c) {
                    if o.z + s * d.z <= height {
                        best.offer(s);
                    }
                }
            }
            Shape::Box {
                half_x,
                half_y,
                half_z,
            } => {
                let lo = Vector3::new(-half_x, -half_y, 0.0);
                let hi = Vector3::new(half_x, half_y, 2.0 * half_z);
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for i in 0..3 {
                    if d[i] == 0.0 {
                        if o[i] < lo[i] || o[i] > hi[i] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((lo[i] - o[i]) / d[i], (hi[i] - o[i]) / d[i]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    t0 = t0.max(a);
                    t1 = t1.min(b);
                }
                if t0 <= t1 {
                    best.offer(t0);
                    best.offer(t1);
                }
            }
        }
        best.0
    }

    /// Euclidean distance from a local point to the surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let rho = (p.x * p.x + p.y * p.y).sqrt();
        let q = Vector2::new(rho, p.z);
        let seg = |a: (f64, f64), b: (f64, f64)| segment_distance(&q, &Vector2::new(a.0, a.1), &Vector2::new(b.0, b.1));
        match *self {
            Shape::Plane { half_x, half_y } => {
                let dx = (p.x.abs() - half_x).max(0.0);
                let dy = (p.y.abs() - half_y).max(0.0);
                (dx * dx + dy * dy + p.z * p.z).sqrt()
            }
            Shape::Cylinder { radius, height } => seg((radius, 0.0), (radius, height))
                .min(seg((0.0, 0.0), (radius, 0.0)))
                .min(seg((0.0, height), (radius, height))),
            Shape::TruncatedCone {
                bottom_radius,
                top_radius,
                height,
            } => seg((bottom_radius, 0.0), (top_radius, height)).min(seg((0.0, 0.0), (bottom_radius, 0.0))),
            Shape::SphereCap { radius, height } => {
                let c = Vector2::new(0.0, radius);
                let rel = q - c;
                let r = rel.norm();
                let on_sphere = if r > 0.0 { c + rel * (radius / r) } else { Vector2::new(0.0, 0.0) };
                if on_sphere.y <= height {
                    (r - radius).abs()
                } else {
                    let rim_rho = (radius * radius - (height - radius).powi(2)).max(0.0).sqrt();
                    (q - Vector2::new(rim_rho, height)).norm()
                }
            }
            Shape::Box {
                half_x,
                half_y,
                half_z,
            } => {
                let c = Vector3::new(p.x, p.y, p.z - half_z);
                let h = Vector3::new(half_x, half_y, half_z);
                let outside = Vector3::new(
                    (c.x.abs() - h.x).max(0.0),
                    (c.y.abs() - h.y).max(0.0),
                    (c.z.abs() - h.z).max(0.0),
                );
                let inside = (c.x.abs() - h.x).max(c.y.abs() - h.y).max(c.z.abs() - h.z).min(0.0);
                (outside.norm() + inside).abs()
            }
        }
    }
}

struct Hit(Option<f64>);

impl Hit {
    fn offer(&mut self, s: f64) {
        if s > MIN_T && s.is_finite() && self.0.is_none_or(|b| s < b) {
            self.0 = Some(s);
        }
    }

    fn offer_opt(&mut self, s: Option<f64>) {
        if let Some(s) = s {
            self.offer(s);
        }
    }
}

/// Intersection with the disk of `radius` at height `z` around the axis.
fn disk(o: &Vector3<f64>, d: &Vector3<f64>, z: f64, radius: f64) -> Option<f64> {
    if d.z == 0.0 {
        return None;
    }
    let s = (z - o.z) / d.z;
    let p = o + d * s;
    (p.x * p.x + p.y * p.y <= radius * radius).then_some(s)
}

/// Real roots of `a s² + b s + c`, numerically stable form.
fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a.abs() < 1e-300 {
        if b == 0.0 {
            return vec![];
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return vec![];
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    if q == 0.0 {
        return vec![0.0];
    }
    vec![q / a, c / q]
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}
