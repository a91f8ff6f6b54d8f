use nalgebra::{Matrix3, Vector3};
use wandcalib::camera::{unproject, CameraIntrinsics, CameraMeta, ModelHint};
use wandcalib::so3::log_so3;
use wandcalib::synth::{d_rms, generate, SimScenario, VisibilityPolicy};
use wandcalib::triangulate::{triangulate, ObservationRay};
use wandcalib::wand::{Marker, WandGeometry};
use wandcalib::*;

fn meta(id: usize) -> CameraMeta {
    CameraMeta { id, width: 640, height: 480, pixel_size: [0.0056, 0.0056],
        nominal_focal: 4.2, fov: 86.77_f64.to_radians(), model_hint: ModelHint::Auto }
}
fn intr() -> CameraIntrinsics {
    CameraIntrinsics { k: [4.2, 0.0, 0.0, 0.0, 0.0], mu: 1.0/0.0056, mv: 1.0/0.0056,
        u0: 310.0, v0: 250.0, theta_max: 86.77_f64.to_radians()/2.0 }
}
fn look(center: Vector3<f64>, zdir: Vector3<f64>, updir: Vector3<f64>) -> Pose {
    // camera at `center` (cam0 coords) with optical axis `zdir`
    let z = zdir.normalize();
    let x = updir.cross(&z).normalize();
    let y = z.cross(&x);
    let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::new(log_so3(&rot), -rot * center)
}

fn main() {
    let wand = WandGeometry { l1: 400.0, l2: 200.0, l: 600.0 };
    // cube center at (0,0,1800) in cam0 coords
    let center = Vector3::new(0.0, 0.0, 1800.0);
    let pose1 = look(Vector3::new(2800.0, 0.0, 1800.0), center - Vector3::new(2800.0, 0.0, 1800.0), Vector3::y());
    let pose2 = look(Vector3::new(-2800.0, 0.0, 1800.0), center - Vector3::new(-2800.0, 0.0, 1800.0), Vector3::y());

    let rig = SimScenario {
        metas: (0..3).map(meta).collect(),
        truth_intrinsics: vec![intr(); 3],
        truth_poses: vec![Pose::identity(), pose1, pose2],
        wand,
        volume_min: Vector3::new(-1500.0, -1500.0, 300.0),
        volume_max: Vector3::new(1500.0, 1500.0, 3300.0),
        frames: 20,
        noise_px: 1.0,
        seed: 1,
        visibility: VisibilityPolicy::MinCameras(2),
    };

    let mut floor = vec![];
    for seed in 0..10 {
        let mut sc = rig.clone();
        sc.seed = 100 + seed;
        let (obs, _) = generate(&sc).unwrap();
        let mut recons = vec![];
        for f in &obs.frames {
            let tri = |m: Marker| -> Option<Vector3<f64>> {
                let mut rays = vec![];
                for cam in 0..3 {
                    let Some(px) = f.detections[cam].get(m) else { continue };
                    let Ok(b) = unproject(&sc.truth_intrinsics[cam], &px) else { continue };
                    rays.push(ObservationRay { camera: cam, bearing: b, pose: sc.truth_poses[cam] });
                }
                if rays.len() < 2 { return None; }
                Some(triangulate(&rays).ok()?.point)
            };
            if let (Some(a), Some(c)) = (tri(Marker::A), tri(Marker::C)) { recons.push((a, c)); }
        }
        floor.push(d_rms(&wand, &recons) / 600.0);
    }
    floor.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("3cam surround truth-params D_RMS/L: median {:.4} max {:.4}", (floor[4]+floor[5])/2.0, floor[9]);

    // calibration capture: central overlap volume
    let calib_sc = SimScenario {
        volume_min: Vector3::new(-900.0, -700.0, 1000.0),
        volume_max: Vector3::new(900.0, 700.0, 2600.0),
        frames: 300, noise_px: 1.0, seed: 7,
        visibility: VisibilityPolicy::MinCameras(2),
        ..rig.clone()
    };
    match generate(&calib_sc) {
        Ok((obs, truth)) => {
            match calibrate_multi(&obs, &wand, &calib_sc.metas, &MultiConfig::default()) {
                Ok(calib) => {
                    for c in 1..3 {
                        let e_r = synth::rotation_error(&truth.poses[c].rotation(), &calib.poses[c].rotation());
                        let e_t = synth::translation_error(&truth.poses[c].t, &calib.poses[c].t).unwrap();
                        print!("cam{c}: E_r={:.3} E_t={:.4} ", e_r, e_t);
                    }
                    println!("e_rms={:.3?}", calib.e_rms);
                    let mut ratios = vec![];
                    for seed in 0..10 {
                        let mut sc = rig.clone();
                        sc.seed = 100 + seed;
                        let (obs, _) = generate(&sc).unwrap();
                        let mut recons = vec![];
                        for f in &obs.frames {
                            let tri = |m: Marker| -> Option<Vector3<f64>> {
                                let mut rays = vec![];
                                for cam in 0..3 {
                                    let Some(px) = f.detections[cam].get(m) else { continue };
                                    let Ok(b) = unproject(&calib.intrinsics[cam], &px) else { continue };
                                    rays.push(ObservationRay { camera: cam, bearing: b, pose: calib.poses[cam] });
                                }
                                if rays.len() < 2 { return None; }
                                Some(triangulate(&rays).ok()?.point)
                            };
                            if let (Some(a), Some(c)) = (tri(Marker::A), tri(Marker::C)) { recons.push((a, c)); }
                        }
                        ratios.push(d_rms(&wand, &recons) / 600.0);
                    }
                    ratios.sort_by(|a,b| a.partial_cmp(b).unwrap());
                    println!("calibrated D_RMS/L: median {:.4} max {:.4}", (ratios[4]+ratios[5])/2.0, ratios[9]);
                }
                Err(e) => println!("multi calibration failed: {e}"),
            }
        }
        Err(e) => println!("capture infeasible: {e}"),
    }
}
