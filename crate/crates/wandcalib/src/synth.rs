//! Synthetic wand captures and calibration error metrics.
//!
//! Reproduces the simulation protocol the pipelines are evaluated against: a
//! camera rig with known ground truth, a wand moved freely inside a box
//! (uniform position, uniform direction on the sphere), per-frame visibility
//! rejection, and i.i.d. Gaussian pixel noise. Everything is deterministic
//! per seed.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{project_with_margin, CameraIntrinsics, CameraMeta, ModelHint};
use crate::epipolar::Pose;
use crate::error::{Error, Result};
use crate::so3::{log_so3, rotation_from_euler_deg};
use crate::wand::{
    FrameObservations, Marker, MarkerPixels, ObservationSet, WandGeometry, WandPose,
};

/// Which cameras must see the whole wand for a frame to be kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisibilityPolicy {
    /// Every camera sees all three markers (two-camera protocol).
    AllCameras,
    /// At least this many cameras see all three markers (multi-camera).
    MinCameras(usize),
}

/// A simulated rig plus capture settings.
#[derive(Debug, Clone)]
pub struct SimScenario {
    pub metas: Vec<CameraMeta>,
    pub truth_intrinsics: Vec<CameraIntrinsics>,
    /// Pose of camera i relative to camera 0 (entry 0 is the identity).
    pub truth_poses: Vec<Pose>,
    pub wand: WandGeometry,
    /// Axis-aligned motion volume (mm) for marker A.
    pub volume_min: Vector3<f64>,
    pub volume_max: Vector3<f64>,
    pub frames: usize,
    /// Gaussian pixel noise sigma per coordinate.
    pub noise_px: f64,
    pub seed: u64,
    pub visibility: VisibilityPolicy,
}

/// Everything the generator knows that a calibration must recover.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub intrinsics: Vec<CameraIntrinsics>,
    pub poses: Vec<Pose>,
    pub wand_poses: Vec<WandPose>,
}

/// The simulated fisheye camera used throughout: 640x480, 5.6 um pixels,
/// 185 degree FOV; true focal 2 mm with the principal point at (310, 250),
/// nominal focal 1.8 mm so seeding starts off-truth.
pub fn paper_camera_meta(id: usize) -> CameraMeta {
    CameraMeta {
        id,
        width: 640,
        height: 480,
        pixel_size: [0.0056, 0.0056],
        nominal_focal: 1.8,
        fov: 185.0_f64.to_radians(),
        model_hint: ModelHint::Auto,
    }
}

/// Ground-truth intrinsics matching [`paper_camera_meta`].
pub fn paper_truth_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        k: [2.0, 0.0, 0.0, 0.0, 0.0],
        mu: 1.0 / 0.0056,
        mv: 1.0 / 0.0056,
        u0: 310.0,
        v0: 250.0,
        theta_max: 185.0_f64.to_radians() / 2.0,
    }
}

fn paper_pose(euler_deg: [f64; 3], t: [f64; 3]) -> Pose {
    let rot: Matrix3<f64> = rotation_from_euler_deg(&Vector3::from(euler_deg));
    Pose::new(log_so3(&rot), Vector3::from(t))
}

/// The reference simulation rig: 2 or 3 fisheye cameras, wand motions inside
/// [-350, 350] x [-350, 350] x [700, 1000] mm, wand 400/200/600 mm.
pub fn paper_rig(cameras: usize, frames: usize, noise_px: f64, seed: u64) -> SimScenario {
    assert!(cameras == 2 || cameras == 3, "rig supports 2 or 3 cameras");
    let mut truth_poses = vec![
        Pose::identity(),
        paper_pose([28.65, 28.65, 28.65], [-700.0, 100.0, 200.0]),
    ];
    if cameras == 3 {
        truth_poses.push(paper_pose([57.3, 57.3, 57.3], [-1200.0, -200.0, 700.0]));
    }
    SimScenario {
        metas: (0..cameras).map(paper_camera_meta).collect(),
        truth_intrinsics: vec![paper_truth_intrinsics(); cameras],
        truth_poses,
        wand: WandGeometry {
            l1: 400.0,
            l2: 200.0,
            l: 600.0,
        },
        volume_min: Vector3::new(-350.0, -350.0, 700.0),
        volume_max: Vector3::new(350.0, 350.0, 1000.0),
        frames,
        noise_px,
        seed,
        visibility: if cameras == 2 {
            VisibilityPolicy::AllCameras
        } else {
            VisibilityPolicy::MinCameras(2)
        },
    }
}

fn in_bounds(px: &Vector2<f64>, meta: &CameraMeta) -> bool {
    px.x >= 0.0 && px.x <= meta.width as f64 && px.y >= 0.0 && px.y <= meta.height as f64
}

/// Simulates a capture. Frames are resampled until the visibility policy is
/// met; markers outside a camera's FOV or image bounds are simply absent
/// from that camera. Noise is added after visibility is decided.
pub fn generate(scenario: &SimScenario) -> Result<(ObservationSet, GroundTruth)> {
    let n = scenario.metas.len();
    if n < 2 || scenario.truth_intrinsics.len() != n || scenario.truth_poses.len() != n {
        return Err(Error::InvalidInput(
            "scenario needs matching metas, intrinsics and poses for >= 2 cameras".into(),
        ));
    }
    if scenario.frames == 0 {
        return Err(Error::InvalidInput("frame count must be >= 1".into()));
    }
    let span = scenario.volume_max - scenario.volume_min;
    if span.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidInput("degenerate motion volume".into()));
    }
    scenario.wand.validate()?;
    let required = match scenario.visibility {
        VisibilityPolicy::AllCameras => n,
        VisibilityPolicy::MinCameras(k) => k.min(n),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = Normal::new(0.0, scenario.noise_px.max(0.0))
        .map_err(|e| Error::InvalidInput(format!("bad noise sigma: {e}")))?;

    let mut frames = Vec::with_capacity(scenario.frames);
    let mut wand_poses = Vec::with_capacity(scenario.frames);
    let mut attempts = 0usize;
    let max_attempts = 1000 + 100 * scenario.frames;

    while frames.len() < scenario.frames {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InfeasibleScenario {
                accepted: frames.len(),
                attempted: attempts,
            });
        }

        let a = Vector3::new(
            rng.random_range(scenario.volume_min.x..scenario.volume_max.x),
            rng.random_range(scenario.volume_min.y..scenario.volume_max.y),
            rng.random_range(scenario.volume_min.z..scenario.volume_max.z),
        );
        // Uniform direction on the sphere.
        let z: f64 = rng.random_range(-1.0..1.0);
        let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let wp = WandPose {
            a,
            phi: z.acos(),
            theta: az,
        };

        let mut detections = vec![MarkerPixels::default(); n];
        let mut full_views = 0usize;
        for cam in 0..n {
            let mut px = [None; 3];
            for (mi, marker) in Marker::ALL.into_iter().enumerate() {
                let x_cam = scenario.truth_poses[cam].transform(&wp.marker(marker, &scenario.wand));
                if let Ok(p) = project_with_margin(&scenario.truth_intrinsics[cam], &x_cam, 0.0) {
                    if in_bounds(&p, &scenario.metas[cam]) {
                        px[mi] = Some(p);
                    }
                }
            }
            if px.iter().all(Option::is_some) {
                full_views += 1;
            }
            detections[cam] = MarkerPixels {
                a: px[0],
                b: px[1],
                c: px[2],
            };
        }
        if full_views < required {
            continue;
        }

        if scenario.noise_px > 0.0 {
            for det in &mut detections {
                for slot in [&mut det.a, &mut det.b, &mut det.c] {
                    if let Some(p) = slot {
                        p.x += noise.sample(&mut rng);
                        p.y += noise.sample(&mut rng);
                    }
                }
            }
        }

        frames.push(FrameObservations {
            frame: frames.len(),
            detections,
        });
        wand_poses.push(wp);
    }

    Ok((
        ObservationSet {
            camera_count: n,
            frames,
        },
        GroundTruth {
            intrinsics: scenario.truth_intrinsics.clone(),
            poses: scenario.truth_poses.clone(),
            wand_poses,
        },
    ))
}

/// Rotation error in degrees: the largest angle between corresponding
/// columns of the two rotation matrices.
pub fn rotation_error(r_true: &Matrix3<f64>, r_est: &Matrix3<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let dot = r_true.column(k).dot(&r_est.column(k)).clamp(-1.0, 1.0);
        worst = worst.max(dot.acos());
    }
    worst.to_degrees()
}

/// Relative translation error `||T_true - T_est|| / ||T_true||`.
pub fn translation_error(t_true: &Vector3<f64>, t_est: &Vector3<f64>) -> Result<f64> {
    let denom = t_true.norm();
    if denom <= 0.0 {
        return Err(Error::InvalidInput(
            "translation error undefined for a zero true translation".into(),
        ));
    }
    Ok((t_true - t_est).norm() / denom)
}

/// RMS reprojection error (px) of reference-frame points through a camera.
pub fn rms_reprojection(
    intr: &CameraIntrinsics,
    pose: &Pose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
) -> Result<f64> {
    if points.is_empty() || points.len() != pixels.len() {
        return Err(Error::InvalidInput(
            "reprojection error needs matched, non-empty point/pixel lists".into(),
        ));
    }
    let mut sum = 0.0;
    for (p, px) in points.iter().zip(pixels) {
        let proj =
            project_with_margin(intr, &pose.transform(p), crate::camera::DEFAULT_FOV_MARGIN)?;
        sum += (px - proj).norm_squared();
    }
    Ok((sum / points.len() as f64).sqrt())
}

/// RMS error (mm) between the known wand length and reconstructed lengths.
pub fn d_rms(wand: &WandGeometry, reconstructions: &[(Vector3<f64>, Vector3<f64>)]) -> f64 {
    if reconstructions.is_empty() {
        return 0.0;
    }
    let sum: f64 = reconstructions
        .iter()
        .map(|(a, c)| {
            let e = wand.l - (a - c).norm();
            e * e
        })
        .sum();
    (sum / reconstructions.len() as f64).sqrt()
}

/// Per-camera calibration errors against ground truth. Reference-camera
/// entries are zero by construction (its pose is pinned).
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// Rotation error per camera (deg).
    pub e_r: Vec<f64>,
    /// Relative translation error per camera.
    pub e_t: Vec<f64>,
    /// RMS reprojection error per camera (px), when supplied by the caller.
    pub e_rms: Vec<f64>,
    /// Wand-length RMS error (mm), when reconstructions were evaluated.
    pub d_rms: Option<f64>,
    /// |k1_est - k1_true| per camera (mm); the focal-length error for lenses
    /// whose design curve is linear in theta.
    pub focal_err: Vec<f64>,
    pub u0_err: Vec<f64>,
    pub v0_err: Vec<f64>,
}

/// Compares estimated intrinsics/poses against ground truth.
pub fn evaluate(
    truth_intrinsics: &[CameraIntrinsics],
    truth_poses: &[Pose],
    est_intrinsics: &[CameraIntrinsics],
    est_poses: &[Pose],
    e_rms: Vec<f64>,
    d_rms: Option<f64>,
) -> Result<MetricsReport> {
    let n = truth_intrinsics.len();
    if est_intrinsics.len() != n || truth_poses.len() != n || est_poses.len() != n {
        return Err(Error::InvalidInput(
            "metric evaluation needs matching camera lists".into(),
        ));
    }
    let mut report = MetricsReport {
        e_r: vec![0.0; n],
        e_t: vec![0.0; n],
        e_rms,
        d_rms,
        focal_err: vec![0.0; n],
        u0_err: vec![0.0; n],
        v0_err: vec![0.0; n],
    };
    for c in 0..n {
        report.focal_err[c] = (est_intrinsics[c].k[0] - truth_intrinsics[c].k[0]).abs();
        report.u0_err[c] = (est_intrinsics[c].u0 - truth_intrinsics[c].u0).abs();
        report.v0_err[c] = (est_intrinsics[c].v0 - truth_intrinsics[c].v0).abs();
        if truth_poses[c].t.norm() > 0.0 {
            report.e_r[c] = rotation_error(&truth_poses[c].rotation(), &est_poses[c].rotation());
            report.e_t[c] = translation_error(&truth_poses[c].t, &est_poses[c].t)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::exp_so3;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn noiseless_generation_reprojects_exactly() {
        let scenario = paper_rig(2, 40, 0.0, 9);
        let (obs, truth) = generate(&scenario).unwrap();
        assert_eq!(obs.frames.len(), 40);
        for (frame, wp) in obs.frames.iter().zip(&truth.wand_poses) {
            for cam in 0..2 {
                for marker in Marker::ALL {
                    let px = frame.detections[cam].get(marker).unwrap();
                    let x_cam = truth.poses[cam].transform(&wp.marker(marker, &scenario.wand));
                    let reproj = project_with_margin(&truth.intrinsics[cam], &x_cam, 0.0).unwrap();
                    assert_abs_diff_eq!(px, reproj, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn paper_rig_three_cameras_generates() {
        let scenario = paper_rig(3, 300, 0.0, 1);
        let (obs, _) = generate(&scenario).unwrap();
        assert_eq!(obs.frames.len(), 300);
        // The multi protocol needs pairwise overlap along some tree.
        let graph = crate::multi::build_vision_graph(&obs).unwrap();
        assert!(crate::multi::shortest_paths(&graph, 0).is_ok());
    }

    #[test]
    fn marker_spacings_are_exact_in_every_frame() {
        let scenario = paper_rig(2, 25, 0.0, 4);
        let (_, truth) = generate(&scenario).unwrap();
        for wp in &truth.wand_poses {
            let a = wp.marker(Marker::A, &scenario.wand);
            let b = wp.marker(Marker::B, &scenario.wand);
            let c = wp.marker(Marker::C, &scenario.wand);
            assert_abs_diff_eq!((a - b).norm(), 400.0, epsilon = 1e-9);
            assert_abs_diff_eq!((b - c).norm(), 200.0, epsilon = 1e-9);
            assert_abs_diff_eq!((a - c).norm(), 600.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let scenario = paper_rig(2, 30, 1.0, 77);
        let (a, _) = generate(&scenario).unwrap();
        let (b, _) = generate(&scenario).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate(&paper_rig(2, 30, 1.0, 78)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn injected_noise_has_the_requested_spread() {
        let sigma = 1.5;
        // >= 1e5 noise samples: 9000 frames x 12 coordinates. The clean
        // pixel is the ground-truth reprojection, so each recorded pixel
        // yields its noise sample directly.
        let scenario = paper_rig(2, 9000, sigma, 13);
        let (obs, truth) = generate(&scenario).unwrap();
        let mut diffs = Vec::new();
        for (frame, wp) in obs.frames.iter().zip(&truth.wand_poses) {
            for cam in 0..2 {
                for marker in Marker::ALL {
                    let Some(pn) = frame.detections[cam].get(marker) else {
                        continue;
                    };
                    let x_cam = truth.poses[cam].transform(&wp.marker(marker, &scenario.wand));
                    let clean = project_with_margin(&truth.intrinsics[cam], &x_cam, 0.0).unwrap();
                    diffs.push(pn.x - clean.x);
                    diffs.push(pn.y - clean.y);
                }
            }
        }
        assert!(diffs.len() >= 100_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var =
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64;
        assert!(
            (var.sqrt() - sigma).abs() < 0.05 * sigma,
            "sd {}",
            var.sqrt()
        );
    }

    #[test]
    fn infeasible_volume_is_reported() {
        let mut scenario = paper_rig(2, 10, 0.0, 3);
        // Far behind every camera.
        scenario.volume_min = Vector3::new(-100.0, -100.0, -50_000.0);
        scenario.volume_max = Vector3::new(100.0, 100.0, -49_000.0);
        assert!(matches!(
            generate(&scenario),
            Err(Error::InfeasibleScenario { .. })
        ));
    }

    #[test]
    fn rotation_error_cases() {
        let id = Matrix3::identity();
        assert_abs_diff_eq!(rotation_error(&id, &id), 0.0, epsilon = 1e-12);

        let one_deg = exp_so3(&Vector3::new(0.0, 0.0, 1.0_f64.to_radians()));
        assert_abs_diff_eq!(rotation_error(&id, &one_deg), 1.0, epsilon = 1e-9);

        let half_turn = exp_so3(&Vector3::new(0.0, 0.0, std::f64::consts::PI));
        assert_abs_diff_eq!(rotation_error(&id, &half_turn), 180.0, epsilon = 1e-9);
    }

    #[test]
    fn rotation_error_symmetry_and_left_invariance() {
        let mut rng = rand::rng();
        for _ in 0..50 {
            let rand_rot = |rng: &mut rand::rngs::ThreadRng| {
                exp_so3(&Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ))
            };
            let ra = rand_rot(&mut rng);
            let rb = rand_rot(&mut rng);
            let g = rand_rot(&mut rng);
            let e1 = rotation_error(&ra, &rb);
            assert_abs_diff_eq!(e1, rotation_error(&rb, &ra), epsilon = 1e-9);
            assert_abs_diff_eq!(e1, rotation_error(&(g * ra), &(g * rb)), epsilon = 1e-9);
        }
    }

    #[test]
    fn translation_error_cases() {
        let t = Vector3::new(-700.0, 100.0, 200.0);
        assert_abs_diff_eq!(translation_error(&t, &t).unwrap(), 0.0, epsilon = 1e-15);

        let t_est = Vector3::new(-707.0, 101.0, 202.0);
        let expected = Vector3::new(-7.0, 1.0, 2.0).norm() / t.norm();
        assert_abs_diff_eq!(
            translation_error(&t, &t_est).unwrap(),
            expected,
            epsilon = 1e-12
        );
        // sqrt(54) / sqrt(540000) is exactly 0.01.
        assert_abs_diff_eq!(expected, 0.01, epsilon = 1e-12);

        let unit = Vector3::new(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(
            translation_error(&unit, &(unit * 2.0)).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert!(translation_error(&Vector3::zeros(), &unit).is_err());
    }

    #[test]
    fn rms_reprojection_cases() {
        let intr = paper_truth_intrinsics();
        let pose = Pose::identity();
        let points = vec![
            Vector3::new(50.0, -20.0, 900.0),
            Vector3::new(-10.0, 5.0, 700.0),
        ];
        let pixels: Vec<Vector2<f64>> = points
            .iter()
            .map(|p| project_with_margin(&intr, p, 0.0).unwrap())
            .collect();
        assert!(rms_reprojection(&intr, &pose, &points, &pixels).unwrap() < 1e-8);

        let single = vec![points[0]];
        let off = vec![pixels[0] + Vector2::new(3.0, 4.0)];
        assert_abs_diff_eq!(
            rms_reprojection(&intr, &pose, &single, &off).unwrap(),
            5.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn d_rms_cases() {
        let wand = WandGeometry {
            l1: 400.0,
            l2: 200.0,
            l: 600.0,
        };
        let seg = |len: f64| (Vector3::zeros(), Vector3::new(len, 0.0, 0.0));
        assert_abs_diff_eq!(d_rms(&wand, &vec![seg(600.0); 20]), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d_rms(&wand, &vec![seg(594.0); 20]), 6.0, epsilon = 1e-12);
        let alternating: Vec<_> = (0..20)
            .map(|i| seg(if i % 2 == 0 { 595.0 } else { 605.0 }))
            .collect();
        assert_abs_diff_eq!(d_rms(&wand, &alternating), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_vanish_at_ground_truth() {
        let scenario = paper_rig(3, 5, 0.0, 2);
        let report = evaluate(
            &scenario.truth_intrinsics,
            &scenario.truth_poses,
            &scenario.truth_intrinsics,
            &scenario.truth_poses,
            vec![0.0; 3],
            Some(0.0),
        )
        .unwrap();
        // acos of clamped unit dot products leaves float dust behind.
        assert!(report.e_r.iter().all(|&v| v < 1e-5));
        assert!(report.e_t.iter().all(|&v| v == 0.0));
        assert!(report.focal_err.iter().all(|&v| v == 0.0));
    }
}
