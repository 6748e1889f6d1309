//! Structure-only bundle adjustment.
//!
//! Camera poses are fixed, so every landmark is an independent 3-parameter
//! robust least-squares problem solved with a small Levenberg–Marquardt loop.
//! Residuals are taken against the keyframe pixel and every refined
//! neighbor observation.

use nalgebra::{Matrix2x3, Matrix3, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{project, world_to_camera, CameraIntrinsics, CameraPose, GeometryError, Pixel, Point3};

pub const DEFAULT_MAX_ITERATIONS: usize = 30;
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;
const INITIAL_DAMPING: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e12;
/// Updates shorter than this (meters) end the optimization.
const MIN_STEP: f64 = 1e-10;
/// Smallest/largest eigenvalue ratio of the normal matrix below which the
/// point is unconstrained along some direction.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("all observations are behind their cameras")]
    AllBehindCamera,
    #[error("landmark is unconstrained along its viewing ray ({0} observation(s))")]
    Unconstrained(usize),
    #[error("pose missing for frame {0}")]
    MissingPose(usize),
    #[error("invalid solver configuration: {0}")]
    Config(String),
}

/// A keyframe landmark and the neighbor pixels it was matched to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTrack {
    pub keyframe_id: usize,
    pub keyframe_pixel: Pixel,
    /// Depth-prior lift of the keyframe pixel, world frame.
    pub x_init: Point3,
    pub observations: Vec<(usize, Pixel)>,
}

impl LandmarkTrack {
    /// Keyframe observation followed by the neighbor observations.
    pub fn all_observations(&self) -> impl Iterator<Item = (usize, Pixel)> + '_ {
        std::iter::once((self.keyframe_id, self.keyframe_pixel)).chain(self.observations.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustLossConfig {
    /// Huber threshold on the residual norm, pixels.
    pub huber_delta: f64,
    pub max_iterations: usize,
}

impl Default for RobustLossConfig {
    fn default() -> Self {
        Self {
            huber_delta: DEFAULT_HUBER_DELTA,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

impl RobustLossConfig {
    fn validate(&self) -> Result<(), BaError> {
        if !(self.huber_delta > 0.0) || self.max_iterations == 0 {
            return Err(BaError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaSolution {
    pub x_opt: Point3,
    pub initial_cost: f64,
    /// Robust cost at `x_opt`, pixels².
    pub final_cost: f64,
    pub iterations_run: usize,
    pub converged: bool,
}

/// Huber penalty: `½r²` inside `delta`, `delta(|r| − ½delta)` outside.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// IRLS weight `ρ'(r) / r` of the Huber penalty.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Residual `observed − π(x)` for a camera with camera-to-world `pose`,
/// together with its Jacobian with respect to the world point.
pub fn reprojection_residual(
    x: &Point3,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    observed: Pixel,
) -> Result<(Vector2<f64>, Matrix2x3<f64>), GeometryError> {
    let xc = world_to_camera(pose, x);
    let p = project(k, &xc)?;
    let e = observed.to_vector() - p.to_vector();
    let iz = 1.0 / xc.z;
    let d_proj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    let r_wc: Matrix3<f64> = pose.rotation.inverse().into_inner();
    Ok((e, -(d_proj * r_wc)))
}

fn pose_of(poses: &[CameraPose], frame: usize) -> Result<&CameraPose, BaError> {
    poses.get(frame).ok_or(BaError::MissingPose(frame))
}

struct Linearization {
    cost: f64,
    hessian: Matrix3<f64>,
    gradient: Vector3<f64>,
    used: usize,
}

fn robust_cost(
    x: &Point3,
    obs: &[(&CameraPose, Pixel)],
    k: &CameraIntrinsics,
    delta: f64,
) -> Option<f64> {
    let mut cost = 0.0;
    let mut used = 0;
    for (pose, p) in obs {
        if let Ok((e, _)) = reprojection_residual(x, pose, k, *p) {
            cost += huber(e.norm(), delta);
            used += 1;
        }
    }
    (used > 0).then_some(cost)
}

fn linearize(x: &Point3, obs: &[(&CameraPose, Pixel)], k: &CameraIntrinsics, delta: f64) -> Option<Linearization> {
    let mut lin = Linearization {
        cost: 0.0,
        hessian: Matrix3::zeros(),
        gradient: Vector3::zeros(),
        used: 0,
    };
    for (pose, p) in obs {
        // Observations behind the camera sit out this iteration only.
        let Ok((e, j)) = reprojection_residual(x, pose, k, *p) else {
            continue;
        };
        let r = e.norm();
        let w = huber_weight(r, delta);
        lin.cost += huber(r, delta);
        lin.hessian += j.transpose() * j * w;
        lin.gradient += j.transpose() * e * w;
        lin.used += 1;
    }
    (lin.used > 0).then_some(lin)
}

fn is_rank_deficient(h: &Matrix3<f64>) -> bool {
    let eig = SymmetricEigen::new(*h).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    !(max > 0.0) || min <= RANK_TOL * max
}

/// Minimizes the Huber reprojection cost of one landmark starting from its
/// depth-prior lift.
pub fn optimize_landmark(
    track: &LandmarkTrack,
    poses: &[CameraPose],
    k: &CameraIntrinsics,
    cfg: &RobustLossConfig,
) -> Result<BaSolution, BaError> {
    solve(track, poses, k, cfg, &mut |_| {})
}

/// Like [`optimize_landmark`], also returning the starting point followed by
/// every accepted iterate.
pub fn optimize_landmark_traced(
    track: &LandmarkTrack,
    poses: &[CameraPose],
    k: &CameraIntrinsics,
    cfg: &RobustLossConfig,
) -> Result<(BaSolution, Vec<Point3>), BaError> {
    let mut iterates = vec![track.x_init];
    let sol = solve(track, poses, k, cfg, &mut |x| iterates.push(x))?;
    Ok((sol, iterates))
}

fn solve(
    track: &LandmarkTrack,
    poses: &[CameraPose],
    k: &CameraIntrinsics,
    cfg: &RobustLossConfig,
    on_accept: &mut dyn FnMut(Point3),
) -> Result<BaSolution, BaError> {
    cfg.validate()?;
    let obs: Vec<(&CameraPose, Pixel)> = track
        .all_observations()
        .map(|(f, p)| pose_of(poses, f).map(|pose| (pose, p)))
        .collect::<Result<_, _>>()?;
    let delta = cfg.huber_delta;

    let mut x = track.x_init;
    let mut lin = linearize(&x, &obs, k, delta).ok_or(BaError::AllBehindCamera)?;
    if is_rank_deficient(&lin.hessian) {
        return Err(BaError::Unconstrained(lin.used));
    }
    let initial_cost = lin.cost;
    let mut cost = lin.cost;
    let mut lambda = INITIAL_DAMPING;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut damped = lin.hessian;
        for i in 0..3 {
            damped[(i, i)] += lambda * lin.hessian[(i, i)];
        }
        // J is the Jacobian of e, so the Gauss-Newton step solves H dx = -Jᵀe.
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-lin.gradient))) else {
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                converged = true;
                break;
            }
            continue;
        };
        if step.norm() < MIN_STEP {
            converged = true;
            break;
        }
        let candidate = x + step;
        match robust_cost(&candidate, &obs, k, delta) {
            Some(c) if c < cost => {
                x = candidate;
                cost = c;
                on_accept(x);
                lambda = (lambda / 10.0).max(1e-12);
                match linearize(&x, &obs, k, delta) {
                    Some(l) => lin = l,
                    None => return Err(BaError::AllBehindCamera),
                }
            }
            _ => {
                lambda *= 10.0;
                if lambda > MAX_DAMPING {
                    // No descent direction left at this point.
                    converged = true;
                    break;
                }
            }
        }
    }

    Ok(BaSolution {
        x_opt: x,
        initial_cost,
        final_cost: cost,
        iterations_run: iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrackOutcome {
    Solved(BaSolution),
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CloudStats {
    pub tracks: usize,
    pub converged: usize,
    pub not_converged: usize,
    pub failed: usize,
}

/// Optimizes every track independently and keeps the converged points in
/// track order.
pub fn optimize_cloud(
    tracks: &[LandmarkTrack],
    poses: &[CameraPose],
    k: &CameraIntrinsics,
    cfg: &RobustLossConfig,
) -> (PointCloud, Vec<TrackOutcome>, CloudStats) {
    let outcomes: Vec<TrackOutcome> = tracks
        .par_iter()
        .map(|t| match optimize_landmark(t, poses, k, cfg) {
            Ok(s) => TrackOutcome::Solved(s),
            Err(e) => TrackOutcome::Failed(e.to_string()),
        })
        .collect();
    let mut stats = CloudStats {
        tracks: tracks.len(),
        ..Default::default()
    };
    let mut points = Vec::new();
    for o in &outcomes {
        match o {
            TrackOutcome::Solved(s) if s.converged => {
                stats.converged += 1;
                points.push(s.x_opt);
            }
            TrackOutcome::Solved(_) => stats.not_converged += 1,
            TrackOutcome::Failed(_) => stats.failed += 1,
        }
    }
    (PointCloud::new(points), outcomes, stats)
}
