//! End-to-end behavior of the calibration pipelines on simulated captures.

use nalgebra::{Vector2, Vector3};
use wandcalib::ba::{init_wand_poses, BundleProblem};
use wandcalib::camera::unproject;
use wandcalib::epipolar::{
    decompose_essential, estimate_essential_ransac, Correspondence, RansacConfig,
};
use wandcalib::optim::BipartiteProblem;
use wandcalib::pair::{
    bundle_adjust_pair, calibrate_pair, init_extrinsics, optimize_distances, pack_distance_state,
    reject_outliers, unpack_distance_state,
};
use wandcalib::synth::{self, generate, paper_rig, rotation_error, translation_error};
use wandcalib::triangulate::{triangulate, ObservationRay};
use wandcalib::wand::{FrameObservations, Marker, MarkerPixels, ObservationSet, WandPose};
use wandcalib::{
    calibrate_multi, CameraIntrinsics, Error, LmConfig, MultiConfig, PairConfig, PixelPitchMode,
    Pose, WandGeometry,
};

fn paper_truth() -> (Vec<CameraIntrinsics>, Vec<Pose>, WandGeometry) {
    let sc = paper_rig(2, 1, 0.0, 0);
    (sc.truth_intrinsics, sc.truth_poses, sc.wand)
}

/// Bearing correspondences of both cameras, unprojected with the truth.
fn truth_correspondences(
    obs: &ObservationSet,
    intr: &[CameraIntrinsics],
) -> Vec<Correspondence> {
    let mut corrs = Vec::new();
    for f in &obs.frames {
        for marker in Marker::ALL {
            let (Some(p0), Some(p1)) = (f.detections[0].get(marker), f.detections[1].get(marker))
            else {
                continue;
            };
            let (Ok(m0), Ok(m1)) = (unproject(&intr[0], &p0), unproject(&intr[1], &p1)) else {
                continue;
            };
            corrs.push(Correspondence {
                m0,
                m1,
                frame: f.frame,
                marker,
            });
        }
    }
    corrs
}

#[test]
fn ransac_survives_gross_outliers() {
    // 300 frames, 1 px noise, 10% of correspondences corrupted.
    let scenario = paper_rig(2, 300, 1.0, 5);
    let (obs, truth) = generate(&scenario).unwrap();
    let mut corrs = truth_correspondences(&obs, &truth.intrinsics);

    let n = corrs.len();
    let outliers: Vec<usize> = (0..n).step_by(10).collect();
    for &i in &outliers {
        // Push the second bearing far off its epipolar plane.
        let junk = Vector3::new(0.3, -0.8, 0.52).normalize();
        corrs[i].m1 = wandcalib::Bearing::new(corrs[i].m1.vector() + junk * 0.2).unwrap();
    }

    let cfg = RansacConfig {
        threshold: 0.5_f64.to_radians(),
        seed: 3,
        ..RansacConfig::default()
    };
    let (essential, mask) = estimate_essential_ransac(&corrs, &cfg).unwrap();

    let true_inliers: Vec<usize> = (0..n).filter(|i| i % 10 != 0).collect();
    let recovered = true_inliers.iter().filter(|&&i| mask[i]).count();
    assert!(
        recovered as f64 >= 0.85 * true_inliers.len() as f64,
        "only {recovered}/{} true inliers kept",
        true_inliers.len()
    );

    let inliers: Vec<Correspondence> = corrs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect();
    let pose = decompose_essential(&essential, &inliers).unwrap();
    let e_r = rotation_error(&truth.poses[1].rotation(), &pose.rotation());
    assert!(e_r < 1.0, "decomposed rotation off by {e_r} deg");
}

#[test]
fn init_extrinsics_with_corrupted_frames() {
    let scenario = paper_rig(2, 300, 0.0, 8);
    let (mut obs, truth) = generate(&scenario).unwrap();
    // Corrupt every tenth frame's camera-1 detections by tens of pixels.
    for f in obs.frames.iter_mut().step_by(10) {
        let det = &mut f.detections[1];
        for slot in [&mut det.a, &mut det.b, &mut det.c] {
            if let Some(p) = slot {
                p.x += 37.0;
                p.y -= 24.0;
            }
        }
    }
    let pose = init_extrinsics(
        &truth.intrinsics[0],
        &truth.intrinsics[1],
        &obs,
        &scenario.wand,
        &RansacConfig::default(),
    )
    .unwrap();
    let e_r = rotation_error(&truth.poses[1].rotation(), &pose.rotation());
    let e_t = translation_error(&truth.poses[1].t, &pose.t).unwrap();
    assert!(e_r < 1.0, "rotation {e_r} deg");
    assert!(e_t < 0.02, "translation {e_t}");
}

#[test]
fn pair_pipeline_monotone_improvement_and_scale() {
    let scenario = paper_rig(2, 300, 1.0, 21);
    let (obs, _) = generate(&scenario).unwrap();
    let metas = [scenario.metas[0].clone(), scenario.metas[1].clone()];
    let calib = calibrate_pair(&obs, &scenario.wand, &metas, &PairConfig::default()).unwrap();

    // Stage three never worsens its own objective.
    assert!(calib.distance_report.final_cost <= calib.distance_report.initial_cost);
    // Bundle adjustment never worsens the reprojection cost.
    assert!(calib.bundle_report.final_cost <= calib.bundle_report.initial_cost);
    // Reprojection residuals track the injected 1 px noise.
    for rms in calib.e_rms {
        assert!((0.6..=1.2).contains(&rms), "E_RMS {rms}");
    }

    // Reconstructed wand lengths average to the true length within 1%.
    let mut lengths = Vec::new();
    for f in obs.frames.iter().filter(|f| calib.frames_used.contains(&f.frame)) {
        let tri = |marker: Marker| {
            let rays = [
                ObservationRay {
                    camera: 0,
                    bearing: unproject(&calib.intrinsics[0], &f.detections[0].get(marker).unwrap())
                        .unwrap(),
                    pose: Pose::identity(),
                },
                ObservationRay {
                    camera: 1,
                    bearing: unproject(&calib.intrinsics[1], &f.detections[1].get(marker).unwrap())
                        .unwrap(),
                    pose: calib.pose,
                },
            ];
            triangulate(&rays).unwrap().point
        };
        lengths.push((tri(Marker::A) - tri(Marker::C)).norm());
    }
    let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    assert!(
        (mean - scenario.wand.l).abs() / scenario.wand.l < 0.01,
        "mean reconstructed length {mean}"
    );
}

#[test]
fn bundle_adjustment_reprojection_errors() {
    // Noiseless: essentially zero. 1 px: close to the noise floor, and
    // never worse than its initialization.
    let (intr_truth, poses_truth, wand) = paper_truth();
    for (sigma, lo, hi) in [(0.0, 0.0, 1e-8), (1.0, 0.6, 1.2)] {
        let scenario = paper_rig(2, 200, sigma, 31);
        let (obs, _) = generate(&scenario).unwrap();
        let intr = [intr_truth[0], intr_truth[1]];
        let (survivors, _) = reject_outliers(&intr, &poses_truth[1], &obs, &wand, 0.01).unwrap();

        // RMS at the initialization, for the monotonicity check.
        let poses = vec![Pose::identity(), poses_truth[1]];
        let intr_vec = vec![intr[0], intr[1]];
        let wand_poses = init_wand_poses(&intr_vec, &poses, &survivors).unwrap();
        let problem =
            BundleProblem::new(&intr_vec, &poses, 0, wand, &survivors, PixelPitchMode::FixMu)
                .unwrap();
        let x0 = problem.initial_state(&wand_poses).unwrap();
        let rms_init = problem.rms_per_camera(&x0).unwrap();

        let (_, _, e_rms, _) = bundle_adjust_pair(
            &intr,
            &poses_truth[1],
            &survivors,
            &wand,
            PixelPitchMode::FixMu,
            &LmConfig::default(),
        )
        .unwrap();
        for (cam, rms) in e_rms.iter().enumerate() {
            assert!(
                (lo..=hi).contains(rms),
                "sigma {sigma}: camera {cam} E_RMS {rms}"
            );
            assert!(*rms <= rms_init[cam] + 1e-12);
        }
    }
}

#[test]
fn distance_stage_cost_scales_with_noise() {
    // At 1 px the optimum cost is a few mm^2 per frame; it must be far
    // below the cost at the stage-two initialization.
    let scenario = paper_rig(2, 120, 1.0, 17);
    let (obs, truth) = generate(&scenario).unwrap();
    let intr = [truth.intrinsics[0], truth.intrinsics[1]];
    let x0 = pack_distance_state(&intr, &truth.poses[1]);
    let theta_max = [intr[0].theta_max, intr[1].theta_max];
    let (x, report) = optimize_distances(
        &x0,
        &obs,
        &scenario.wand,
        theta_max,
        PixelPitchMode::FixMu,
        &LmConfig::default(),
    )
    .unwrap();
    // 1 px of pixel noise is ~3 mrad of bearing noise on this lens, which
    // triangulates to several mm of marker scatter.
    let per_frame = report.final_cost / obs.frames.len() as f64;
    assert!(
        per_frame > 0.1 && per_frame < 500.0,
        "per-frame cost {per_frame} mm^2"
    );
    assert!(report.final_cost < report.initial_cost);
    let (intr_out, _) = unpack_distance_state(&x, theta_max);
    assert!((intr_out[0].k[0] - 2.0).abs() < 0.02);
}

#[test]
fn pair_output_is_invariant_to_wand_placement_frame() {
    // The same wand motion expressed in a rotated/translated world produces
    // different pixels but identical camera-relative calibration.
    let (intr_truth, poses_truth, wand) = paper_truth();
    let transform = Pose::new(Vector3::new(0.4, -0.2, 0.3), Vector3::new(250.0, -120.0, 400.0));

    let base_poses: Vec<WandPose> = {
        let scenario = paper_rig(2, 150, 0.0, 3);
        generate(&scenario).unwrap().1.wand_poses
    };

    let render = |wps: &[WandPose], cam_poses: &[Pose]| -> ObservationSet {
        let frames = wps
            .iter()
            .enumerate()
            .map(|(id, wp)| FrameObservations {
                frame: id,
                detections: (0..2)
                    .map(|c| {
                        let px = |m: Marker| {
                            wandcalib::camera::project(
                                &intr_truth[c],
                                &cam_poses[c].transform(&wp.marker(m, &wand)),
                            )
                            .ok()
                        };
                        MarkerPixels {
                            a: px(Marker::A),
                            b: px(Marker::B),
                            c: px(Marker::C),
                        }
                    })
                    .collect(),
            })
            .filter(|f| f.detections.iter().all(|d| d.all_present()))
            .collect();
        ObservationSet {
            camera_count: 2,
            frames,
        }
    };

    // World moved by `transform`: wand poses move with it, cameras follow
    // (their pose relative to the new world frame composes with G^-1).
    let moved_wand: Vec<WandPose> = base_poses
        .iter()
        .map(|wp| {
            let a = transform.transform(&wp.a);
            let c = transform.transform(&wp.marker(Marker::C, &wand));
            wandcalib::ba::wand_pose_from_markers(&a, &c).unwrap()
        })
        .collect();
    let g_inv = transform.inverse();
    let moved_cams: Vec<Pose> = poses_truth
        .iter()
        .map(|p| {
            let rot = p.rotation() * g_inv.rotation();
            Pose::from_matrix(&rot, p.rotation() * g_inv.t + p.t)
        })
        .collect();

    let obs_a = render(&base_poses, &poses_truth);
    let obs_b = render(&moved_wand, &moved_cams);
    assert_eq!(obs_a.frames.len(), obs_b.frames.len());

    let metas = [
        synth::paper_camera_meta(0),
        synth::paper_camera_meta(1),
    ];
    let cfg = PairConfig::default();
    let cal_a = calibrate_pair(&obs_a, &wand, &metas, &cfg).unwrap();
    let cal_b = calibrate_pair(&obs_b, &wand, &metas, &cfg).unwrap();

    // Identical physical setup, noiseless: both recover the same relative
    // calibration to solver precision.
    assert!((cal_a.pose.t - cal_b.pose.t).norm() < 1e-6);
    assert!((cal_a.pose.r - cal_b.pose.r).norm() < 1e-9);
    for c in 0..2 {
        assert!((cal_a.intrinsics[c].k[0] - cal_b.intrinsics[c].k[0]).abs() < 1e-9);
        assert!((cal_a.intrinsics[c].u0 - cal_b.intrinsics[c].u0).abs() < 1e-7);
    }
}

#[test]
fn multi_three_cameras_with_noise() {
    let scenario = paper_rig(3, 300, 1.0, 0);
    let (obs, truth) = generate(&scenario).unwrap();
    let calib = calibrate_multi(&obs, &scenario.wand, &scenario.metas, &MultiConfig::default())
        .unwrap();
    assert_eq!(calib.camera_param_dim, 39);
    for c in 1..3 {
        let e_r = rotation_error(&truth.poses[c].rotation(), &calib.poses[c].rotation());
        let e_t = translation_error(&truth.poses[c].t, &calib.poses[c].t).unwrap();
        assert!(e_r < 0.5, "camera {c} rotation error {e_r} deg");
        assert!(e_t < 0.01, "camera {c} translation error {e_t}");
    }
}

#[test]
fn multi_rerooting_agrees_with_direct_calibration() {
    let scenario = paper_rig(3, 300, 0.0, 12);
    let (obs, _) = generate(&scenario).unwrap();
    let from_zero =
        calibrate_multi(&obs, &scenario.wand, &scenario.metas, &MultiConfig::default()).unwrap();
    let cfg1 = MultiConfig {
        reference: 1,
        ..MultiConfig::default()
    };
    let from_one = calibrate_multi(&obs, &scenario.wand, &scenario.metas, &cfg1).unwrap();

    let rebased = wandcalib::multi::rebase(&from_zero, 1);
    for c in 0..3 {
        let e_r = rotation_error(&rebased[c].rotation(), &from_one.poses[c].rotation());
        let dt = (rebased[c].t - from_one.poses[c].t).norm();
        let scale = from_one.poses[c].t.norm().max(1.0);
        assert!(e_r < 1e-3, "camera {c} rotation gap {e_r} deg");
        assert!(dt / scale < 1e-3, "camera {c} translation gap {dt} mm");
    }
}

#[test]
fn unreachable_camera_fails_cleanly() {
    // Third camera sees nothing: the vision graph cannot connect it.
    let scenario = paper_rig(2, 60, 0.0, 9);
    let (obs, _) = generate(&scenario).unwrap();
    let padded = ObservationSet {
        camera_count: 3,
        frames: obs
            .frames
            .iter()
            .map(|f| FrameObservations {
                frame: f.frame,
                detections: vec![f.detections[0], f.detections[1], MarkerPixels::default()],
            })
            .collect(),
    };
    let metas = vec![
        synth::paper_camera_meta(0),
        synth::paper_camera_meta(1),
        synth::paper_camera_meta(2),
    ];
    let wand = WandGeometry {
        l1: 400.0,
        l2: 200.0,
        l: 600.0,
    };
    let err = calibrate_multi(&padded, &wand, &metas, &MultiConfig::default());
    assert!(matches!(err, Err(Error::UnreachableCamera { .. })));
}

#[test]
fn sparse_ba_per_iteration_time_is_linear_in_frames() {
    use wandcalib::optim::{sparse_lm_minimize, LmConfig};

    let (intr_truth, poses_truth, wand) = paper_truth();
    let mut timing = Vec::new();
    for frames in [300usize, 1200] {
        let scenario = paper_rig(2, frames, 0.5, 19);
        let (obs, _) = generate(&scenario).unwrap();
        let intr_vec = vec![intr_truth[0], intr_truth[1]];
        let poses = vec![Pose::identity(), poses_truth[1]];
        let wand_poses = init_wand_poses(&intr_vec, &poses, &obs).unwrap();
        let problem =
            BundleProblem::new(&intr_vec, &poses, 0, wand, &obs, PixelPitchMode::FixMu).unwrap();
        let x0 = problem.initial_state(&wand_poses).unwrap();
        let budget = LmConfig {
            max_iterations: 5,
            cost_tol_rel: 0.0,
            cost_tol_abs: 0.0,
            grad_tol: 0.0,
            ..LmConfig::default()
        };
        // Best of three runs, to keep scheduler noise out of the ratio.
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let t = std::time::Instant::now();
            let (_, report) = sparse_lm_minimize(&problem, &x0, &budget).unwrap();
            let iters = report.iterations.max(1);
            best = best.min(t.elapsed().as_secs_f64() / iters as f64);
        }
        timing.push(best);
    }
    let ratio = timing[1] / timing[0];
    assert!(
        ratio < 5.0,
        "4x frames took {ratio:.2}x per-iteration time ({timing:?})"
    );
}

#[test]
fn bundle_problem_dimension_matches_camera_count() {
    for cams in [2usize, 3] {
        let scenario = paper_rig(cams, 40, 0.0, 6);
        let (obs, truth) = generate(&scenario).unwrap();
        let keep: Vec<FrameObservations> = obs
            .frames
            .iter()
            .filter(|f| f.fully_visible_cameras().len() == cams)
            .cloned()
            .collect();
        let obs = ObservationSet {
            camera_count: cams,
            frames: keep,
        };
        let problem = BundleProblem::new(
            &truth.intrinsics,
            &truth.poses,
            0,
            scenario.wand,
            &obs,
            PixelPitchMode::FixMu,
        )
        .unwrap();
        let m = cams - 1;
        assert_eq!(problem.camera_dim(), 15 * m + 9);
        // With the pinned pixel pitches, one parameter per camera is frozen.
        assert_eq!(problem.global_dim(), 15 * m + 9 - cams);
    }
}
