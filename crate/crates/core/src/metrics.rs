//! Point-cloud comparison: Chamfer accuracy/completeness and inlier-ratio
//! precision/recall.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;

/// Evaluation radius, meters.
pub const DEFAULT_RADIUS: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{0} point cloud is empty")]
    EmptyCloud(&'static str),
    #[error("radius must be positive, got {0}")]
    InvalidRadius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean distance from predicted points to ground truth, meters.
    pub accuracy: f64,
    /// Mean distance from ground-truth points to the prediction, meters.
    pub completeness: f64,
    pub precision: f64,
    pub recall: f64,
    pub radius: f64,
    pub pred_points: usize,
    pub gt_points: usize,
}

fn non_empty(c: &PointCloud, which: &'static str) -> Result<(), MetricsError> {
    if c.is_empty() {
        return Err(MetricsError::EmptyCloud(which));
    }
    Ok(())
}

/// Nearest-neighbor distance in `to` for every point of `from`.
pub fn nearest_distances(from: &PointCloud, to: &PointCloud) -> Result<Vec<f64>, MetricsError> {
    non_empty(from, "source")?;
    non_empty(to, "target")?;
    let tree = to.kdtree();
    Ok(from
        .points
        .iter()
        .map(|p| tree.nearest(p).expect("non-empty tree").1)
        .collect())
}

/// Mean nearest-neighbor distance from `s1` to `s2` (asymmetric).
pub fn chamfer_distance(s1: &PointCloud, s2: &PointCloud) -> Result<f64, MetricsError> {
    let d = nearest_distances(s1, s2)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Fraction of `s1` whose nearest neighbor in `s2` is strictly closer than `d`.
pub fn inlier_ratio(s1: &PointCloud, s2: &PointCloud, d: f64) -> Result<f64, MetricsError> {
    if !(d > 0.0) {
        return Err(MetricsError::InvalidRadius(d));
    }
    let dist = nearest_distances(s1, s2)?;
    Ok(dist.iter().filter(|&&x| x < d).count() as f64 / dist.len() as f64)
}

pub fn evaluate_reconstruction(pred: &PointCloud, gt: &PointCloud, d: f64) -> Result<EvalReport, MetricsError> {
    if !(d > 0.0) {
        return Err(MetricsError::InvalidRadius(d));
    }
    non_empty(pred, "predicted")?;
    non_empty(gt, "ground-truth")?;
    let forward = nearest_distances(pred, gt)?;
    let backward = nearest_distances(gt, pred)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = |v: &[f64]| v.iter().filter(|&&x| x < d).count() as f64 / v.len() as f64;
    Ok(EvalReport {
        accuracy: mean(&forward),
        completeness: mean(&backward),
        precision: ratio(&forward),
        recall: ratio(&backward),
        radius: d,
        pred_points: pred.len(),
        gt_points: gt.len(),
    })
}
