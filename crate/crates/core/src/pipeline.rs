//! End-to-end reconstruction and the 2D correspondence benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::{optimize_cloud, CloudStats, RobustLossConfig, DEFAULT_HUBER_DELTA, DEFAULT_MAX_ITERATIONS};
use crate::cloud::PointCloud;
use crate::dataset::Dataset;
use crate::epipolar::{
    build_tracks, epipolar_segment, refine_correspondence, DepthPriorConfig, EpipolarError, NeighborFlow, TrackFrame,
    TrackParams, TrackStats, DEFAULT_DELTA_D, DEFAULT_MIN_OBS,
};
use crate::flow::{
    estimate_flow, oracle_flow, oracle_target, perturb_flow, sample_flow, FlowError, FlowField, FlowNoise, FlowParams,
};
use crate::geometry::{backproject, relative_pose, transform, Pixel};
use crate::landmarks::{boundary_band, sample_landmarks, DEFAULT_BAND_WIDTH, DEFAULT_STRIDE};
use crate::metrics::{evaluate_reconstruction, EvalReport, MetricsError, DEFAULT_RADIUS};
use crate::synth::{gt_cloud_from_frames, SynthError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("ground-truth depth required: {0}")]
    MissingGroundTruth(&'static str),
    #[error("interval {interval} exceeds the sequence ({frames} frames)")]
    IntervalTooLong { interval: usize, frames: usize },
    #[error("no landmark survived ({})", serde_json::to_string(.0).unwrap_or_default())]
    EmptyResult(Box<StageCounts>),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Epipolar(#[from] EpipolarError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSource {
    /// Dense flow estimated from the images.
    #[default]
    Estimated,
    /// Exact flow from ground-truth depth and poses.
    Oracle,
    /// Exact flow corrupted by `flow_noise`.
    OracleNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub keyframe_stride: usize,
    /// Forward offsets from each keyframe to its neighbor frames.
    pub neighbor_intervals: Vec<usize>,
    pub band_width: u32,
    pub landmark_stride: u32,
    pub delta_d: f64,
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub min_obs: usize,
    /// Inlier radius for evaluation, meters.
    pub eval_radius: f64,
    /// Voxel size of the ground-truth and baseline clouds, meters.
    pub gt_voxel: f64,
    pub flow_source: FlowSource,
    /// Used by `FlowSource::OracleNoise`; per-pair seeds derive from its seed.
    pub flow_noise: FlowNoise,
    pub flow_params: FlowParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            keyframe_stride: 5,
            neighbor_intervals: vec![2, 4, 6],
            band_width: DEFAULT_BAND_WIDTH,
            landmark_stride: DEFAULT_STRIDE,
            delta_d: DEFAULT_DELTA_D,
            huber_delta: DEFAULT_HUBER_DELTA,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            min_obs: DEFAULT_MIN_OBS,
            eval_radius: DEFAULT_RADIUS,
            gt_voxel: 0.005,
            flow_source: FlowSource::default(),
            flow_noise: FlowNoise::default(),
            flow_params: FlowParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.keyframe_stride == 0 {
            return bad("keyframe_stride must be at least 1");
        }
        if self.neighbor_intervals.is_empty() || self.neighbor_intervals.contains(&0) {
            return bad("neighbor_intervals must be nonempty and nonzero");
        }
        if self.landmark_stride == 0 {
            return bad("landmark_stride must be at least 1");
        }
        if !(self.delta_d > 0.0) {
            return bad("delta_d must be positive");
        }
        if !(self.huber_delta > 0.0) || self.max_iterations == 0 {
            return bad("huber_delta must be positive and max_iterations nonzero");
        }
        if !(self.eval_radius > 0.0) || !(self.gt_voxel > 0.0) {
            return bad("eval_radius and gt_voxel must be positive");
        }
        Ok(())
    }

    fn needs_ground_truth(&self) -> bool {
        self.flow_source != FlowSource::Estimated
    }
}

/// Counts of every stage, consistent by construction:
/// `accepted + rejected = attempted` and `converged ≤ tracks ≤ seeds`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub frames: usize,
    pub keyframes: usize,
    pub neighbor_pairs: usize,
    /// Keyframe/interval combinations past the end of the sequence.
    pub skipped_pairs: usize,
    pub tracking: TrackStats,
    pub optimization: CloudStats,
}

/// Wall-clock seconds per stage. Kept out of the serialized report so
/// reports are reproducible byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Timings {
    pub flow: f64,
    pub tracking: f64,
    pub optimization: f64,
    pub evaluation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub counts: StageCounts,
    pub output_points: usize,
    pub baseline_points: usize,
    /// Reconstruction vs ground truth, when ground truth is present.
    pub eval: Option<EvalReport>,
    /// Direct concatenation of masked depth priors vs ground truth.
    pub baseline_eval: Option<EvalReport>,
    #[serde(skip)]
    pub timings: Timings,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

/// Result of [`run_reconstruction`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub cloud: PointCloud,
    pub baseline: PointCloud,
    pub ground_truth: Option<PointCloud>,
    pub report: RunReport,
}

fn keyframes(n: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..n).step_by(stride)
}

fn pair_flow(ds: &Dataset, cfg: &PipelineConfig, a: usize, b: usize) -> Result<FlowField, PipelineError> {
    let (fa, fb) = (&ds.frames[a], &ds.frames[b]);
    let oracle = || -> Result<FlowField, PipelineError> {
        let (ga, gb) = match (&fa.depth_gt, &fb.depth_gt) {
            (Some(ga), Some(gb)) => (ga, gb),
            _ => return Err(PipelineError::MissingGroundTruth("oracle flow")),
        };
        let rel = relative_pose(&ds.poses[a], &ds.poses[b]);
        Ok(oracle_flow(ga, &rel, &ds.intrinsics, gb))
    };
    Ok(match cfg.flow_source {
        FlowSource::Estimated => estimate_flow(&fa.image, &fb.image, &cfg.flow_params)?,
        FlowSource::Oracle => oracle()?,
        FlowSource::OracleNoise => {
            let noise = FlowNoise {
                seed: crate::derive_seed(cfg.flow_noise.seed, ((a as u64) << 32) | b as u64),
                ..cfg.flow_noise
            };
            perturb_flow(&oracle()?, &noise)?
        }
    })
}

/// Masked depth priors of every frame backprojected into the world frame.
pub fn direct_concatenation(ds: &Dataset) -> PointCloud {
    let mut points = Vec::new();
    for (pose, f) in ds.poses.iter().zip(&ds.frames) {
        let d = &f.depth_pred;
        for v in 0..d.height {
            for u in 0..d.width {
                let i = d.index(u, v);
                if f.mask.data[i] && d.valid[i] {
                    let x = backproject(&ds.intrinsics, Pixel::new(u as f64, v as f64), d.depth[i]).expect("valid depth");
                    points.push(transform(pose, &x));
                }
            }
        }
    }
    PointCloud::new(points)
}

/// Ground-truth cloud of the transparent surfaces, if the dataset has it.
pub fn ground_truth_cloud(ds: &Dataset, voxel: f64) -> Result<Option<PointCloud>, PipelineError> {
    if !ds.has_ground_truth() {
        return Ok(None);
    }
    let frames: Vec<_> = ds
        .poses
        .iter()
        .zip(&ds.frames)
        .map(|(p, f)| (p, f.depth_gt.as_ref().expect("checked"), &f.mask))
        .collect();
    Ok(Some(gt_cloud_from_frames(&frames, &ds.intrinsics, voxel)?))
}

/// Seeds landmarks on every keyframe, tracks them into forward neighbors
/// and triangulates them. Also builds the direct-concatenation baseline and,
/// with ground truth, evaluates both.
pub fn run_reconstruction(ds: &Dataset, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    if cfg.needs_ground_truth() && !ds.has_ground_truth() {
        return Err(PipelineError::MissingGroundTruth("oracle flow"));
    }
    let n = ds.len();
    let k = &ds.intrinsics;
    let mut counts = StageCounts {
        frames: n,
        ..Default::default()
    };
    let mut timings = Timings::default();
    let params = TrackParams {
        k,
        prior: DepthPriorConfig { delta_d: cfg.delta_d },
        min_obs: cfg.min_obs,
    };

    let mut tracks = Vec::new();
    for kf in keyframes(n, cfg.keyframe_stride) {
        counts.keyframes += 1;
        let frame = &ds.frames[kf];
        let band = boundary_band(&frame.mask, cfg.band_width);
        let seeds = sample_landmarks(&band, cfg.landmark_stride, kf);

        let t = Instant::now();
        let mut flows = Vec::new();
        for &interval in &cfg.neighbor_intervals {
            let j = kf + interval;
            if j >= n {
                counts.skipped_pairs += 1;
                continue;
            }
            flows.push((j, pair_flow(ds, cfg, kf, j)?));
        }
        timings.flow += t.elapsed().as_secs_f64();
        counts.neighbor_pairs += flows.len();

        let t = Instant::now();
        let key = TrackFrame {
            frame_id: kf,
            pose: &ds.poses[kf],
            depth_prior: &frame.depth_pred,
        };
        let neighbors: Vec<_> = flows
            .iter()
            .map(|(j, f)| {
                (
                    TrackFrame {
                        frame_id: *j,
                        pose: &ds.poses[*j],
                        depth_prior: &ds.frames[*j].depth_pred,
                    },
                    NeighborFlow { frame_id: *j, flow: f },
                )
            })
            .collect();
        let (kf_tracks, stats) = build_tracks(&seeds, &key, &neighbors, &params)?;
        counts.tracking.merge(&stats);
        tracks.extend(kf_tracks);
        timings.tracking += t.elapsed().as_secs_f64();
    }

    let t = Instant::now();
    let loss = RobustLossConfig {
        huber_delta: cfg.huber_delta,
        max_iterations: cfg.max_iterations,
    };
    let (cloud, _, opt_stats) = optimize_cloud(&tracks, &ds.poses, k, &loss);
    counts.optimization = opt_stats;
    timings.optimization = t.elapsed().as_secs_f64();
    if cloud.is_empty() {
        return Err(PipelineError::EmptyResult(Box::new(counts)));
    }

    let t = Instant::now();
    let baseline = direct_concatenation(ds).voxel_downsample(cfg.gt_voxel);
    let ground_truth = ground_truth_cloud(ds, cfg.gt_voxel)?;
    let (eval, baseline_eval) = match &ground_truth {
        Some(gt) => (
            Some(evaluate_reconstruction(&cloud, gt, cfg.eval_radius)?),
            if baseline.is_empty() {
                None
            } else {
                Some(evaluate_reconstruction(&baseline, gt, cfg.eval_radius)?)
            },
        ),
        None => (None, None),
    };
    timings.evaluation = t.elapsed().as_secs_f64();

    let report = RunReport {
        config: cfg.clone(),
        counts,
        output_points: cloud.len(),
        baseline_points: baseline.len(),
        eval,
        baseline_eval,
        timings,
    };
    Ok(RunOutput {
        cloud,
        baseline,
        ground_truth,
        report,
    })
}

/// Mean 2D errors at one frame interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corr2dRow {
    pub interval: usize,
    pub pairs: usize,
    /// Landmarks with a visible ground-truth correspondence and valid flow.
    pub landmarks: usize,
    /// Mean `|p_O − q|` over all landmarks, pixels.
    pub flow_only_mean_px: f64,
    /// Correspondences kept by the epipolar refinement.
    pub eof_accepted: usize,
    /// Mean `|p_EO − q|` over accepted correspondences, pixels.
    pub eof_mean_px: f64,
    /// Mean `|p_O − q|` over the same accepted correspondences, pixels.
    pub flow_only_mean_px_on_accepted: f64,
}

impl Corr2dRow {
    pub const CSV_HEADER: &'static str =
        "interval,pairs,landmarks,flow_only_mean_px,eof_accepted,eof_mean_px,flow_only_mean_px_on_accepted";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.interval,
            self.pairs,
            self.landmarks,
            self.flow_only_mean_px,
            self.eof_accepted,
            self.eof_mean_px,
            self.flow_only_mean_px_on_accepted
        )
    }
}

pub fn corr2d_csv(rows: &[Corr2dRow]) -> String {
    let mut s = String::from(Corr2dRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Flow-only versus epipolar-refined correspondence error at each interval.
///
/// Landmarks come from the boundary band of every keyframe. The reference
/// correspondence of a landmark is its ground-truth depth projected into
/// the neighbor; landmarks occluded or leaving the neighbor are skipped.
pub fn run_corr2d_benchmark(ds: &Dataset, intervals: &[usize], cfg: &PipelineConfig) -> Result<Vec<Corr2dRow>, PipelineError> {
    cfg.validate()?;
    if !ds.has_ground_truth() {
        return Err(PipelineError::MissingGroundTruth("2D correspondence benchmark"));
    }
    let n = ds.len();
    if let Some(&bad) = intervals.iter().find(|&&i| i == 0 || i >= n) {
        return Err(PipelineError::IntervalTooLong { interval: bad, frames: n });
    }
    let k = &ds.intrinsics;
    let prior = DepthPriorConfig { delta_d: cfg.delta_d };

    let seeds: Vec<_> = keyframes(n, cfg.keyframe_stride)
        .map(|kf| sample_landmarks(&boundary_band(&ds.frames[kf].mask, cfg.band_width), cfg.landmark_stride, kf))
        .collect();

    intervals
        .iter()
        .map(|&interval| {
            let mut row = Corr2dRow {
                interval,
                pairs: 0,
                landmarks: 0,
                flow_only_mean_px: 0.0,
                eof_accepted: 0,
                eof_mean_px: 0.0,
                flow_only_mean_px_on_accepted: 0.0,
            };
            let (mut flow_sum, mut eof_sum, mut flow_acc_sum) = (0.0, 0.0, 0.0);
            for (kf, kf_seeds) in keyframes(n, cfg.keyframe_stride).zip(&seeds) {
                let j = kf + interval;
                if j >= n {
                    continue;
                }
                row.pairs += 1;
                let flow = pair_flow(ds, cfg, kf, j)?;
                let rel = relative_pose(&ds.poses[kf], &ds.poses[j]);
                let gt_a = ds.frames[kf].depth_gt.as_ref().expect("checked");
                let gt_b = ds.frames[j].depth_gt.as_ref().expect("checked");
                for seed in kf_seeds {
                    let p = seed.pixel;
                    let Some(d_gt) = gt_a.get_nearest(p.u, p.v) else { continue };
                    let Some(q) = oracle_target(p, d_gt, &rel, k, gt_b) else { continue };
                    let Ok(v) = sample_flow(&flow, p) else { continue };
                    let p_o = p.offset(v);
                    let e_flow = p_o.distance(q);
                    row.landmarks += 1;
                    flow_sum += e_flow;

                    let Some(d_pred) = ds.frames[kf].depth_pred.get_nearest(p.u, p.v) else { continue };
                    let Ok(seg) = epipolar_segment(p, d_pred, &prior, k, &rel) else { continue };
                    if let Some((p_eo, _)) = refine_correspondence(&seg, p_o).accepted() {
                        row.eof_accepted += 1;
                        eof_sum += p_eo.distance(q);
                        flow_acc_sum += e_flow;
                    }
                }
            }
            let mean = |s: f64, c: usize| if c == 0 { f64::NAN } else { s / c as f64 };
            row.flow_only_mean_px = mean(flow_sum, row.landmarks);
            row.eof_mean_px = mean(eof_sum, row.eof_accepted);
            row.flow_only_mean_px_on_accepted = mean(flow_acc_sum, row.eof_accepted);
            Ok(row)
        })
        .collect()
}
