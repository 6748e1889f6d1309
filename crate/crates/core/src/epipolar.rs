//! Epipolar-segment constraints from a depth prior and flow-guided
//! correspondence refinement.
//!
//! A keyframe pixel with predicted depth `D` and uncertainty `δ` spans the
//! 3-D interval `(D ± δ) K⁻¹ [p 1]ᵀ` on its viewing ray. Projecting both
//! ends into a neighbor frame gives a segment from `p⁻` (near end) to `p⁺`
//! (far end) on which the true correspondence must lie. A flow prediction
//! `p_O` is orthogonally projected onto that segment's line and discarded
//! when the foot point falls outside the segment.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::LandmarkTrack;
use crate::flow::{sample_flow, FlowField};
use crate::frame::DepthFrame;
use crate::geometry::{
    backproject, project, relative_pose, transform, CameraIntrinsics, CameraPose, GeometryError, Pixel,
};
use crate::landmarks::LandmarkSeed;

/// Segments shorter than this (pixels) carry no usable depth information.
pub const MIN_SEGMENT_LENGTH: f64 = 0.5;
pub const DEFAULT_DELTA_D: f64 = 0.06;
pub const DEFAULT_MIN_OBS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpipolarError {
    #[error("near end of the depth interval is not in front of the keyframe (depth {0})")]
    InvalidDepth(f64),
    #[error("segment endpoint behind the neighbor camera (z = {0})")]
    BehindCamera(f64),
    #[error("degenerate epipolar segment of length {0} px")]
    DegenerateSegment(f64),
    #[error("missing data for frame {frame}: {what}")]
    MissingFrame { frame: usize, what: &'static str },
}

/// Half-width of the depth interval trusted around each prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPriorConfig {
    pub delta_d: f64,
}

impl Default for DepthPriorConfig {
    fn default() -> Self {
        Self {
            delta_d: DEFAULT_DELTA_D,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarSegment {
    pub p_minus: Pixel,
    pub p_plus: Pixel,
    /// `p_plus − p_minus`.
    pub n: Vector2<f64>,
}

impl EpipolarSegment {
    /// Builds a segment, rejecting lengths under [`MIN_SEGMENT_LENGTH`].
    pub fn new(p_minus: Pixel, p_plus: Pixel) -> Result<Self, EpipolarError> {
        let n = p_plus.to_vector() - p_minus.to_vector();
        let len = n.norm();
        if !(len >= MIN_SEGMENT_LENGTH) {
            return Err(EpipolarError::DegenerateSegment(len));
        }
        Ok(Self { p_minus, p_plus, n })
    }

    pub fn length(&self) -> f64 {
        self.n.norm()
    }

    pub fn point_at(&self, lambda: f64) -> Pixel {
        self.p_minus.offset(self.n * lambda)
    }

    /// Same segment traversed from the far end.
    pub fn reversed(&self) -> Self {
        Self {
            p_minus: self.p_plus,
            p_plus: self.p_minus,
            n: -self.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub keyframe_pixel: Pixel,
    pub neighbor_frame_id: usize,
    pub p_eo: Pixel,
    /// Position of `p_eo` along the segment, in `[0, 1]`.
    pub lambda: f64,
}

/// Outcome of projecting a flow prediction onto a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Refinement {
    Accepted { p_eo: Pixel, lambda: f64 },
    /// The foot point fell outside the segment; `lambda` is where it landed.
    Rejected { lambda: f64 },
}

impl Refinement {
    pub fn accepted(&self) -> Option<(Pixel, f64)> {
        match *self {
            Refinement::Accepted { p_eo, lambda } => Some((p_eo, lambda)),
            Refinement::Rejected { .. } => None,
        }
    }
}

fn geometry_err(e: GeometryError) -> EpipolarError {
    match e {
        GeometryError::InvalidDepth(d) => EpipolarError::InvalidDepth(d),
        GeometryError::BehindCamera(z) => EpipolarError::BehindCamera(z),
        other => unreachable!("projection cannot fail with {other:?}"),
    }
}

/// Projects the depth interval `depth_pred ± delta_d` along the ray of `p`
/// into the neighbor frame. `rel` maps keyframe coordinates to neighbor
/// coordinates.
pub fn epipolar_segment(
    p: Pixel,
    depth_pred: f64,
    cfg: &DepthPriorConfig,
    k: &CameraIntrinsics,
    rel: &CameraPose,
) -> Result<EpipolarSegment, EpipolarError> {
    let near = depth_pred - cfg.delta_d;
    if !(near > 0.0) {
        return Err(EpipolarError::InvalidDepth(near));
    }
    let far = depth_pred + cfg.delta_d;
    let x_minus = backproject(k, p, near).map_err(geometry_err)?;
    let x_plus = backproject(k, p, far).map_err(geometry_err)?;
    let p_minus = project(k, &transform(rel, &x_minus)).map_err(geometry_err)?;
    let p_plus = project(k, &transform(rel, &x_plus)).map_err(geometry_err)?;
    EpipolarSegment::new(p_minus, p_plus)
}

/// Orthogonal projection of `p_o` onto the segment's line.
pub fn refine_correspondence(seg: &EpipolarSegment, p_o: Pixel) -> Refinement {
    let lambda = (p_o.to_vector() - seg.p_minus.to_vector()).dot(&seg.n) / seg.n.norm_squared();
    if (0.0..=1.0).contains(&lambda) {
        Refinement::Accepted {
            p_eo: seg.point_at(lambda),
            lambda,
        }
    } else {
        Refinement::Rejected { lambda }
    }
}

/// Per-view inputs for track building.
pub struct TrackFrame<'a> {
    pub frame_id: usize,
    pub pose: &'a CameraPose,
    pub depth_prior: &'a DepthFrame,
}

/// One keyframe→neighbor pair with the flow between them.
pub struct NeighborFlow<'a> {
    pub frame_id: usize,
    pub flow: &'a FlowField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrackStats {
    pub seeds: usize,
    /// Seeds without a valid depth prior.
    pub seeds_without_prior: usize,
    pub attempted: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub rejected_invalid_flow: usize,
    pub rejected_degenerate: usize,
    pub rejected_behind_camera: usize,
    pub rejected_outside_segment: usize,
    pub segments: usize,
    pub tracks: usize,
    pub dropped_tracks: usize,
}

impl TrackStats {
    pub fn merge(&mut self, o: &TrackStats) {
        self.seeds += o.seeds;
        self.seeds_without_prior += o.seeds_without_prior;
        self.attempted += o.attempted;
        self.accepted += o.accepted;
        self.rejected += o.rejected;
        self.rejected_invalid_flow += o.rejected_invalid_flow;
        self.rejected_degenerate += o.rejected_degenerate;
        self.rejected_behind_camera += o.rejected_behind_camera;
        self.rejected_outside_segment += o.rejected_outside_segment;
        self.segments += o.segments;
        self.tracks += o.tracks;
        self.dropped_tracks += o.dropped_tracks;
    }
}

/// Parameters shared by every landmark of a keyframe.
#[derive(Debug, Clone, Copy)]
pub struct TrackParams<'a> {
    pub k: &'a CameraIntrinsics,
    pub prior: DepthPriorConfig,
    pub min_obs: usize,
}

/// Builds landmark tracks for the seeds of one keyframe.
///
/// Each seed is lifted to world coordinates with its depth prior; each
/// neighbor contributes at most one refined correspondence. Tracks with
/// fewer than `min_obs` accepted correspondences are dropped. Output order
/// follows seed order.
pub fn build_tracks(
    seeds: &[LandmarkSeed],
    keyframe: &TrackFrame<'_>,
    neighbors: &[(TrackFrame<'_>, NeighborFlow<'_>)],
    params: &TrackParams<'_>,
) -> Result<(Vec<LandmarkTrack>, TrackStats), EpipolarError> {
    for seed in seeds {
        if seed.keyframe_id != keyframe.frame_id {
            return Err(EpipolarError::MissingFrame {
                frame: seed.keyframe_id,
                what: "seed refers to a different keyframe",
            });
        }
    }
    for (frame, flow) in neighbors {
        if frame.frame_id != flow.frame_id {
            return Err(EpipolarError::MissingFrame {
                frame: frame.frame_id,
                what: "flow field",
            });
        }
        if flow.flow.width != keyframe.depth_prior.width || flow.flow.height != keyframe.depth_prior.height {
            return Err(EpipolarError::MissingFrame {
                frame: frame.frame_id,
                what: "flow field with matching dimensions",
            });
        }
    }
    let rels: Vec<CameraPose> = neighbors
        .iter()
        .map(|(f, _)| relative_pose(keyframe.pose, f.pose))
        .collect();

    let per_seed: Vec<(Option<LandmarkTrack>, TrackStats)> = seeds
        .par_iter()
        .map(|seed| track_one(seed, keyframe, neighbors, &rels, params))
        .collect();

    let mut stats = TrackStats::default();
    let mut tracks = Vec::new();
    for (track, s) in per_seed {
        stats.merge(&s);
        tracks.extend(track);
    }
    Ok((tracks, stats))
}

fn track_one(
    seed: &LandmarkSeed,
    keyframe: &TrackFrame<'_>,
    neighbors: &[(TrackFrame<'_>, NeighborFlow<'_>)],
    rels: &[CameraPose],
    params: &TrackParams<'_>,
) -> (Option<LandmarkTrack>, TrackStats) {
    let mut stats = TrackStats {
        seeds: 1,
        ..Default::default()
    };
    let p = seed.pixel;
    let Some(depth) = keyframe.depth_prior.get_nearest(p.u, p.v) else {
        stats.seeds_without_prior = 1;
        return (None, stats);
    };
    let x_cam = match backproject(params.k, p, depth) {
        Ok(x) => x,
        Err(_) => {
            stats.seeds_without_prior = 1;
            return (None, stats);
        }
    };

    let mut observations = Vec::new();
    for ((frame, flow), rel) in neighbors.iter().zip(rels) {
        stats.attempted += 1;
        let v0 = match sample_flow(flow.flow, p) {
            Ok(v) => v,
            Err(_) => {
                stats.rejected += 1;
                stats.rejected_invalid_flow += 1;
                continue;
            }
        };
        let seg = match epipolar_segment(p, depth, &params.prior, params.k, rel) {
            Ok(s) => s,
            Err(EpipolarError::DegenerateSegment(_)) => {
                stats.rejected += 1;
                stats.rejected_degenerate += 1;
                continue;
            }
            Err(_) => {
                stats.rejected += 1;
                stats.rejected_behind_camera += 1;
                continue;
            }
        };
        stats.segments += 1;
        match refine_correspondence(&seg, p.offset(v0)) {
            Refinement::Accepted { p_eo, .. } => {
                stats.accepted += 1;
                observations.push((frame.frame_id, p_eo));
            }
            Refinement::Rejected { .. } => {
                stats.rejected += 1;
                stats.rejected_outside_segment += 1;
            }
        }
    }

    if observations.len() < params.min_obs.max(1) {
        if stats.accepted > 0 {
            stats.dropped_tracks = 1;
        }
        return (None, stats);
    }
    stats.tracks = 1;
    let track = LandmarkTrack {
        keyframe_id: keyframe.frame_id,
        keyframe_pixel: p,
        x_init: transform(keyframe.pose, &x_cam),
        observations,
    };
    (Some(track), stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn fixture_segment() -> EpipolarSegment {
        let rel = CameraPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        epipolar_segment(
            Pixel::new(320.0, 240.0),
            1.0,
            &DepthPriorConfig { delta_d: 0.1 },
            &k(),
            &rel,
        )
        .unwrap()
    }

    #[test]
    fn segment_fixture() {
        let seg = fixture_segment();
        // (0.1, 0, 0.9) and (0.1, 0, 1.1) projected by hand.
        assert!((seg.p_minus.u - (320.0 + 50.0 / 0.9)).abs() < 1e-9);
        assert!((seg.p_plus.u - (320.0 + 50.0 / 1.1)).abs() < 1e-9);
        assert!((seg.p_minus.u - 375.5556).abs() < 1e-4);
        assert!((seg.p_plus.u - 365.4545).abs() < 1e-4);
        assert_eq!(seg.p_minus.v, 240.0);
        assert_eq!(seg.p_plus.v, 240.0);
    }

    #[test]
    fn degenerate_segments() {
        let cfg = DepthPriorConfig { delta_d: 0.1 };
        let p = Pixel::new(320.0, 240.0);
        assert!(matches!(
            epipolar_segment(p, 1.0, &cfg, &k(), &CameraPose::identity()),
            Err(EpipolarError::DegenerateSegment(_))
        ));
        let axial = CameraPose::from_translation(Vector3::new(0.0, 0.0, 0.1));
        assert!(matches!(
            epipolar_segment(p, 1.0, &cfg, &k(), &axial),
            Err(EpipolarError::DegenerateSegment(_))
        ));
    }

    #[test]
    fn near_end_must_be_in_front() {
        let rel = CameraPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let r = epipolar_segment(
            Pixel::new(320.0, 240.0),
            0.05,
            &DepthPriorConfig { delta_d: 0.06 },
            &k(),
            &rel,
        );
        assert!(matches!(r, Err(EpipolarError::InvalidDepth(_))));
    }

    #[test]
    fn endpoint_behind_neighbor() {
        let rel = CameraPose::from_translation(Vector3::new(0.3, 0.0, -1.0));
        let r = epipolar_segment(
            Pixel::new(320.0, 240.0),
            1.0,
            &DepthPriorConfig { delta_d: 0.1 },
            &k(),
            &rel,
        );
        assert!(matches!(r, Err(EpipolarError::BehindCamera(_))));
    }

    #[test]
    fn refine_fixture() {
        let seg = fixture_segment();
        let (p_eo, lambda) = refine_correspondence(&seg, Pixel::new(370.0, 242.0))
            .accepted()
            .unwrap();
        // ((-5.5556, 2)·(-10.1010, 0)) / 102.03
        let n = 50.0 / 1.1 - 50.0 / 0.9;
        let expected = ((370.0 - (320.0 + 50.0 / 0.9)) * n) / (n * n);
        assert!((lambda - expected).abs() < 1e-12);
        assert!((lambda - 0.55).abs() < 1e-4);
        assert!((p_eo.u - 370.0).abs() < 1e-9 && (p_eo.v - 240.0).abs() < 1e-12);

        match refine_correspondence(&seg, Pixel::new(380.0, 240.0)) {
            Refinement::Rejected { lambda } => assert!((lambda + 0.44).abs() < 1e-2),
            other => panic!("expected rejection, got {other:?}"),
        }

        let on = seg.point_at(0.3);
        let (p_eo, _) = refine_correspondence(&seg, on).accepted().unwrap();
        assert!((p_eo.to_vector() - on.to_vector()).norm() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn projection_properties(
            ax in -500.0f64..500.0, ay in -500.0f64..500.0,
            bx in -500.0f64..500.0, by in -500.0f64..500.0,
            t in 0.0f64..=1.0,
            px in -50.0f64..50.0, py in -50.0f64..50.0,
        ) {
            let a = Pixel::new(ax, ay);
            let b = Pixel::new(bx, by);
            let Ok(seg) = EpipolarSegment::new(a, b) else { return Ok(()); };
            let q = seg.point_at(t);
            let p_o = Pixel::new(q.u + px, q.v + py);
            let fwd = refine_correspondence(&seg, p_o);
            let back = refine_correspondence(&seg.reversed(), p_o);
            match (fwd, back) {
                (Refinement::Accepted { p_eo, lambda }, Refinement::Accepted { p_eo: p2, lambda: l2 }) => {
                    proptest::prop_assert!((lambda - (1.0 - l2)).abs() < 1e-9);
                    proptest::prop_assert!((p_eo.to_vector() - p2.to_vector()).norm() < 1e-7);
                    // Foot point lies on the line.
                    let resid = (p_eo.to_vector() - a.to_vector()) - seg.n * lambda;
                    proptest::prop_assert!(resid.norm() < 1e-9);
                    // Orthogonal projection never moves away from points on the line.
                    proptest::prop_assert!(p_eo.distance(q) <= p_o.distance(q) + 1e-9);
                }
                (Refinement::Rejected { lambda }, Refinement::Rejected { lambda: l2 }) => {
                    proptest::prop_assert!((lambda - (1.0 - l2)).abs() < 1e-9);
                }
                // Only floating-point ties at the segment ends may disagree.
                (Refinement::Accepted { lambda, .. }, Refinement::Rejected { .. })
                | (Refinement::Rejected { lambda }, Refinement::Accepted { .. }) => {
                    proptest::prop_assert!(lambda.abs() < 1e-9 || (lambda - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
