//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glassfuse::ba::{optimize_landmark, optimize_landmark_traced, reprojection_residual, LandmarkTrack, RobustLossConfig};
use glassfuse::cloud::PointCloud;
use glassfuse::dataset::write_dataset;
use glassfuse::epipolar::{epipolar_segment, refine_correspondence, DepthPriorConfig, EpipolarSegment, Refinement};
use glassfuse::geometry::{
    backproject, project, transform, world_to_camera, CameraIntrinsics, CameraPose, Pixel, Point3,
};
use glassfuse::metrics::{chamfer_distance, evaluate_reconstruction, inlier_ratio};
use glassfuse::pipeline::{run_corr2d_benchmark, run_reconstruction, FlowSource, PipelineConfig};
use glassfuse::ply::{encode_ply, PlyFormat};
use glassfuse::synth::{generate_dataset, NoiseConfig, OrbitConfig, SynthConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, max_t: f64) -> CameraPose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let q = UnitQuaternion::from_scaled_axis(axis.normalize() * rng.random_range(0.0..max_angle));
    let t = Vector3::new(
        rng.random_range(-max_t..max_t),
        rng.random_range(-max_t..max_t),
        rng.random_range(-max_t..max_t),
    );
    CameraPose::from_quaternion(q, t)
}

fn vga() -> CameraIntrinsics {
    CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).unwrap()
}

fn c1_fixtures() -> Outcome {
    let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
    let rel = CameraPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
    let seg = epipolar_segment(Pixel::new(320.0, 240.0), 1.0, &DepthPriorConfig { delta_d: 0.1 }, &k, &rel)
        .map_err(|e| e.to_string())?;
    let close = |p: Pixel, u: f64, v: f64| (p.u - u).abs() < 1e-4 && (p.v - v).abs() < 1e-4;
    check(close(seg.p_minus, 375.5556, 240.0), format!("p- = {:?}", seg.p_minus))?;
    check(close(seg.p_plus, 365.4545, 240.0), format!("p+ = {:?}", seg.p_plus))?;
    let (p_eo, lambda) = refine_correspondence(&seg, Pixel::new(370.0, 242.0))
        .accepted()
        .ok_or("fixture correspondence rejected")?;
    check(close(p_eo, 370.0, 240.0), format!("p_EO = {p_eo:?}"))?;
    check((lambda - 0.55).abs() < 1e-4, format!("lambda = {lambda}"))?;
    Ok(format!("p-=({:.4},{:.0}) p+=({:.4},{:.0}) p_EO=({:.4},{:.4}) lambda={lambda:.4}",
        seg.p_minus.u, seg.p_minus.v, seg.p_plus.u, seg.p_plus.v, p_eo.u, p_eo.v))
}

fn c2_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = vga();
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let p = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let d = rng.random_range(0.05..20.0);
        let pose = random_pose(&mut rng, std::f64::consts::PI, 5.0);
        let world = transform(&pose, &backproject(&k, p, d).map_err(|e| e.to_string())?);
        let back = project(&k, &world_to_camera(&pose, &world)).map_err(|e| e.to_string())?;
        worst = worst.max(back.distance(p));
    }
    check(worst < 1e-9, format!("max error {worst:e} px"))?;
    Ok(format!("10^5 pairs through random poses, max error {worst:.2e} px"))
}

/// A random non-degenerate segment from real camera geometry.
fn random_segment(rng: &mut ChaCha8Rng, k: &CameraIntrinsics) -> EpipolarSegment {
    loop {
        let p = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let rel = random_pose(rng, 0.2, 0.3);
        let cfg = DepthPriorConfig {
            delta_d: rng.random_range(0.01..0.2),
        };
        if let Ok(s) = epipolar_segment(p, rng.random_range(0.3..3.0), &cfg, k, &rel) {
            return s;
        }
    }
}

fn c3_non_expansive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = vga();
    let (mut violations, mut accepted, mut worst_perp) = (0usize, 0usize, 0.0f64);
    for _ in 0..100_000 {
        let seg = random_segment(&mut rng, &k);
        let q = seg.point_at(rng.random_range(0.0..=1.0));
        let noise = Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let p_o = q.offset(noise);
        // Rejected correspondences are still checked at their on-line projection.
        let p_eo = match refine_correspondence(&seg, p_o) {
            Refinement::Accepted { p_eo, .. } => {
                accepted += 1;
                p_eo
            }
            Refinement::Rejected { lambda } => seg.point_at(lambda),
        };
        // Allow for rounding when the noise is almost parallel to the segment.
        if p_eo.distance(q) > p_o.distance(q) + 1e-9 {
            violations += 1;
        }

        let perp = Vector2::new(-seg.n.y, seg.n.x).normalize() * rng.random_range(-10.0..10.0);
        match refine_correspondence(&seg, q.offset(perp)) {
            Refinement::Accepted { p_eo, .. } => worst_perp = worst_perp.max(p_eo.distance(q)),
            Refinement::Rejected { lambda } => return Err(format!("perpendicular noise rejected (lambda {lambda})")),
        }
    }
    check(violations == 0, format!("{violations} expansions"))?;
    check(worst_perp < 1e-9, format!("perpendicular-noise error {worst_perp:e} px"))?;
    Ok(format!(
        "10^5 segments: 0 expansions ({accepted} accepted), perpendicular-noise max error {worst_perp:.2e} px"
    ))
}

/// Independent Huber reprojection cost.
fn oracle_cost(x: &Point3, track: &LandmarkTrack, poses: &[CameraPose], k: &CameraIntrinsics, delta: f64) -> f64 {
    track
        .all_observations()
        .filter_map(|(f, obs)| {
            let pose = &poses[f];
            let c = pose.rotation.inverse() * (x.coords - pose.translation);
            if c.z <= 0.0 {
                return None;
            }
            let u = k.fx * c.x / c.z + k.cx;
            let v = k.fy * c.y / c.z + k.cy;
            let r = ((obs.u - u).powi(2) + (obs.v - v).powi(2)).sqrt();
            Some(if r <= delta { 0.5 * r * r } else { delta * (r - 0.5 * delta) })
        })
        .sum()
}

fn orbit_cameras(target: Point3, n: usize, rng: &mut ChaCha8Rng) -> Vec<CameraPose> {
    let radius = rng.random_range(0.5..2.0);
    let elevation = rng.random_range(0.2..1.0);
    let arc = rng.random_range(0.2..1.5);
    glassfuse::synth::camera_orbit(target, radius, elevation, n, arc, rng.random_range(0.0..std::f64::consts::TAU)).unwrap()
}

fn c4_bundle_adjustment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = vga();
    let cfg = RobustLossConfig::default();

    let mut worst_recovery: f64 = 0.0;
    for _ in 0..200 {
        let x = Point3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.0..0.2));
        let poses = orbit_cameras(x, 4, &mut rng);
        let obs: Vec<Pixel> = poses.iter().map(|p| project(&k, &world_to_camera(p, &x)).unwrap()).collect();
        let track = LandmarkTrack {
            keyframe_id: 0,
            keyframe_pixel: obs[0],
            x_init: x + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            observations: (1..4).map(|i| (i, obs[i])).collect(),
        };
        let sol = optimize_landmark(&track, &poses, &k, &cfg).map_err(|e| e.to_string())?;
        worst_recovery = worst_recovery.max((sol.x_opt - x).norm());
    }
    check(worst_recovery < 1e-6, format!("zero-noise recovery error {worst_recovery:e} m"))?;

    let mut worst_jac: f64 = 0.0;
    for _ in 0..1000 {
        let pose = random_pose(&mut rng, 0.5, 0.5);
        let x = transform(&pose, &Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.5..3.0)));
        let obs = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let (_, j) = reprojection_residual(&x, &pose, &k, obs).map_err(|e| e.to_string())?;
        let h = 1e-6;
        for c in 0..3 {
            let mut dx = Vector3::zeros();
            dx[c] = h;
            let (ep, _) = reprojection_residual(&(x + dx), &pose, &k, obs).unwrap();
            let (em, _) = reprojection_residual(&(x - dx), &pose, &k, obs).unwrap();
            let fd = (ep - em) / (2.0 * h);
            let rel = (fd - j.column(c)).norm() / j.column(c).norm().max(1.0);
            worst_jac = worst_jac.max(rel);
        }
    }
    check(worst_jac < 1e-5, format!("Jacobian mismatch {worst_jac:e}"))?;

    let (mut steps, mut increases) = (0usize, 0usize);
    for _ in 0..1000 {
        let x = Point3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.0..0.2));
        let n = rng.random_range(2..6);
        let poses = orbit_cameras(x, n, &mut rng);
        let obs: Vec<Pixel> = poses
            .iter()
            .map(|p| {
                let q = project(&k, &world_to_camera(p, &x)).unwrap();
                // Mix of inliers and gross outliers so both Huber regimes are exercised.
                let s = if rng.random_bool(0.2) { 15.0 } else { 1.0 };
                q.offset(Vector2::new(rng.random_range(-s..s), rng.random_range(-s..s)))
            })
            .collect();
        let track = LandmarkTrack {
            keyframe_id: 0,
            keyframe_pixel: obs[0],
            x_init: x + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            observations: (1..n).map(|i| (i, obs[i])).collect(),
        };
        let Ok((_, iterates)) = optimize_landmark_traced(&track, &poses, &k, &cfg) else {
            continue;
        };
        for w in iterates.windows(2) {
            steps += 1;
            let (before, after) = (
                oracle_cost(&w[0], &track, &poses, &k, cfg.huber_delta),
                oracle_cost(&w[1], &track, &poses, &k, cfg.huber_delta),
            );
            if after > before * (1.0 + 1e-12) {
                increases += 1;
            }
        }
    }
    check(increases == 0, format!("{increases} of {steps} accepted steps increased the cost"))?;
    Ok(format!(
        "recovery {worst_recovery:.1e} m, Jacobian rel. error {worst_jac:.1e}, {steps} accepted steps over 10^3 tracks never increased cost"
    ))
}

fn brute_nearest(from: &[Point3], to: &[Point3]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .collect()
}

fn c5_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let mut cloud = |n| {
            PointCloud::new(
                (0..n)
                    .map(|_| Point3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
                    .collect(),
            )
        };
        let (a, b) = (cloud(200), cloud(200));
        let d = brute_nearest(&a.points, &b.points);
        let chamfer = d.iter().sum::<f64>() / d.len() as f64;
        let radius = 0.02;
        let ratio = d.iter().filter(|&&x| x < radius).count() as f64 / d.len() as f64;
        check(chamfer_distance(&a, &b).unwrap() == chamfer, format!("trial {trial}: chamfer differs"))?;
        check(inlier_ratio(&a, &b, radius).unwrap() == ratio, format!("trial {trial}: inlier ratio differs"))?;
    }
    let gt = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)]);
    let pred = PointCloud::new(vec![Point3::origin()]);
    let r = evaluate_reconstruction(&pred, &gt, 0.02).map_err(|e| e.to_string())?;
    check(
        (r.accuracy, r.completeness, r.precision, r.recall) == (1.0, 2.0, 0.0, 0.0),
        format!("hand fixture gave {r:?}"),
    )?;
    Ok("20 random 200-point pairs equal brute force exactly; fixture 1/2/0/0".into())
}

fn c6_corr2d_ordering() -> Outcome {
    let t = Instant::now();
    let noise = NoiseConfig {
        bias: 0.01,
        sigma: 0.0561,
        smooth_radius: 8.0,
        dropout_rate: 0.0,
        seed: 6,
    };
    let ds = generate_dataset(&SynthConfig {
        noise,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    check(ds.len() == 60 && ds.intrinsics.width == 640, "expected a 60-frame VGA orbit")?;
    let (mut sq, mut n) = (0.0, 0usize);
    for f in &ds.frames {
        let gt = f.depth_gt.as_ref().unwrap();
        for i in 0..gt.depth.len() {
            if f.mask.data[i] && f.depth_pred.valid[i] {
                sq += (f.depth_pred.depth[i] - gt.depth[i]).powi(2);
                n += 1;
            }
        }
    }
    let rmse = (sq / n as f64).sqrt();
    check((rmse - 0.057).abs() < 0.005, format!("depth-prior RMSE {rmse:.4} m"))?;

    let cfg = PipelineConfig {
        flow_source: FlowSource::OracleNoise,
        ..Default::default()
    };
    check(cfg.flow_noise.sigma == 2.0, "flow noise must be 2 px")?;
    let rows = run_corr2d_benchmark(&ds, &[2, 4, 6, 8, 10, 12], &cfg).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let mut table = String::new();
    for r in &rows {
        table.push_str(&format!(
            " [{}: flow {:.3} / EOF {:.3} px]",
            r.interval, r.flow_only_mean_px, r.eof_mean_px
        ));
        check(
            r.eof_mean_px <= r.flow_only_mean_px && r.eof_mean_px <= r.flow_only_mean_px_on_accepted,
            format!("interval {}: EOF {} vs flow-only {}", r.interval, r.eof_mean_px, r.flow_only_mean_px),
        )?;
    }
    let r2 = &rows[0];
    let ratio = r2.flow_only_mean_px / r2.eof_mean_px;
    let paired = r2.flow_only_mean_px_on_accepted / r2.eof_mean_px;
    check(ratio >= 2.0 && paired >= 2.0, format!("interval-2 ratio {ratio:.2} (paired {paired:.2})"))?;
    check(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "prior RMSE {rmse:.4} m; interval-2 ratio {ratio:.2} (paired {paired:.2});{table}; {secs:.1} s"
    ))
}

fn c7_recon_direction() -> Outcome {
    let t = Instant::now();
    let ds = generate_dataset(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let gen = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let cfg = PipelineConfig {
        flow_source: FlowSource::Estimated,
        ..Default::default()
    };
    let out = run_reconstruction(&ds, &cfg).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let (eof, base) = (out.report.eval.unwrap(), out.report.baseline_eval.unwrap());
    let seeds = out.report.counts.tracking.seeds;
    let summary = format!(
        "EOF+BA accuracy {:.2} cm precision {:.3} vs direct concatenation {:.2} cm / {:.3}; {} landmarks seeded, {} points; run {secs:.1} s (+{gen:.1} s rendering)",
        eof.accuracy * 100.0,
        eof.precision,
        base.accuracy * 100.0,
        base.precision,
        seeds,
        out.report.output_points
    );
    check(eof.accuracy < base.accuracy && eof.precision > base.precision, summary.clone())?;
    check(secs < 60.0, summary.clone())?;
    Ok(summary)
}

fn c8_determinism() -> Outcome {
    let synth = SynthConfig {
        intrinsics: CameraIntrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240).unwrap(),
        orbit: OrbitConfig {
            n_frames: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let ds = generate_dataset(&synth).map_err(|e| e.to_string())?;
        let root = dir.path().join(format!("run{run}"));
        write_dataset(&root, &ds).map_err(|e| e.to_string())?;
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for sub in ["rgb", "depth_gt", "depth_pred", "mask"] {
            for i in 0..ds.len() {
                let rel = format!("{sub}/{i:06}.png");
                files.push((rel.clone(), std::fs::read(root.join(&rel)).map_err(|e| e.to_string())?));
            }
        }
        for source in [FlowSource::Estimated, FlowSource::OracleNoise] {
            let cfg = PipelineConfig {
                flow_source: source,
                ..Default::default()
            };
            let out = run_reconstruction(&ds, &cfg).map_err(|e| e.to_string())?;
            files.push((format!("{source:?}.ply"), encode_ply(&out.cloud, PlyFormat::BinaryLittleEndian)));
            files.push((format!("{source:?}.json"), out.report.to_json().into_bytes()));
        }
        outputs.push(files);
    }
    for (a, b) in outputs[0].iter().zip(&outputs[1]) {
        check(a.1 == b.1, format!("{} differs between runs", a.0))?;
    }
    Ok(format!("{} dataset, PLY and report files byte-identical across two runs", outputs[0].len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 segment/refinement fixtures", c1_fixtures),
        ("2 projection roundtrip", c2_roundtrip),
        ("3 non-expansiveness", c3_non_expansive),
        ("4 bundle adjustment", c4_bundle_adjustment),
        ("5 metrics oracle", c5_metrics),
        ("6 correspondence ordering", c6_corr2d_ordering),
        ("7 reconstruction vs direct concatenation", c7_recon_direction),
        ("8 determinism", c8_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let result = f();
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {name} ({secs:.2} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.2} s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
