//! Two-camera calibration pipeline.
//!
//! Four stages: datasheet-seeded intrinsics, essential-matrix extrinsics with
//! wand-length scale recovery, nonlinear refinement of the twelve leading
//! intrinsics plus the relative pose against the known marker spacings, and a
//! final bundle adjustment that adds the higher-order distortion terms and
//! the per-frame wand poses.
//!
//! The stage-three objective re-triangulates the markers from the *current*
//! iterate inside every residual evaluation, so its Jacobian is obtained by
//! differentiating through the unprojection (implicitly, via the radial
//! polynomial) and through the smallest-eigenvector triangulation (first-order
//! eigenvector perturbation). The homogeneous column of the stacked system is
//! scaled to scene units to keep that eigenproblem well conditioned.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, RowVector4, SMatrix, Vector3, Vector4};

use crate::ba::{init_wand_poses, BundleProblem, PixelPitchMode};
use crate::camera::{
    default_intrinsics, unproject, unproject_jacobian, CameraIntrinsics, CameraMeta,
};
use crate::epipolar::{
    decompose_essential, estimate_essential_ransac, Correspondence, Pose, RansacConfig,
};
use crate::error::{Error, Result};
use crate::optim::{lm_minimize, sparse_lm_minimize, LeastSquaresProblem, LmConfig, LmReport};
use crate::so3::{exp_so3, left_jacobian, skew};
use crate::triangulate::{cross_rows, recover_scale, select_rows, triangulate, ObservationRay};
use crate::wand::{Marker, ObservationSet, WandGeometry, WandPose};

/// Scale applied to the homogeneous column of the stacked triangulation
/// system (mm); keeps all four columns commensurate for scene-sized rigs.
const HOMOGENEOUS_SCALE: f64 = 1000.0;

/// Dimension of the stage-three state: 6 intrinsics per camera + pose.
pub const DISTANCE_STATE: usize = 18;

/// Policy for the full pair pipeline.
#[derive(Debug, Clone)]
pub struct PairConfig {
    /// Minimum frames with the whole wand visible in both cameras.
    pub min_frames: usize,
    pub ransac: RansacConfig,
    /// Stage-three (wand distance) optimizer settings.
    pub distance_lm: LmConfig,
    /// Stage-four (bundle adjustment) optimizer settings.
    pub bundle_lm: LmConfig,
    pub pixel_pitch: PixelPitchMode,
    /// Relative wand-length error beyond which a frame is discarded.
    pub outlier_threshold: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            min_frames: 30,
            // Bearings unprojected with datasheet-seeded intrinsics carry a
            // systematic warp of a degree or two; the inlier gate must admit
            // it or the surviving set biases the initial pose.
            ransac: RansacConfig {
                threshold: 2.0_f64.to_radians(),
                ..RansacConfig::default()
            },
            distance_lm: LmConfig::default(),
            bundle_lm: LmConfig::default(),
            pixel_pitch: PixelPitchMode::default(),
            outlier_threshold: 0.01,
        }
    }
}

/// Result of a two-camera calibration.
#[derive(Debug, Clone)]
pub struct PairCalibration {
    pub intrinsics: [CameraIntrinsics; 2],
    /// Maps camera-0 coordinates into camera 1.
    pub pose: Pose,
    /// Per-camera RMS reprojection error (px) on the surviving frames.
    pub e_rms: [f64; 2],
    pub frames_used: Vec<usize>,
    pub frames_rejected: Vec<usize>,
    pub distance_report: LmReport,
    pub bundle_report: LmReport,
}

/// Packs two 6-parameter intrinsic sets and a pose into the stage-three
/// state `(k1,k2,mu,mv,u0,v0) x2, r, t`.
pub fn pack_distance_state(intr: &[CameraIntrinsics; 2], pose: &Pose) -> DVector<f64> {
    let mut x = DVector::zeros(DISTANCE_STATE);
    for (c, i) in intr.iter().enumerate() {
        let o = 6 * c;
        x[o] = i.k[0];
        x[o + 1] = i.k[1];
        x[o + 2] = i.mu;
        x[o + 3] = i.mv;
        x[o + 4] = i.u0;
        x[o + 5] = i.v0;
    }
    x.rows_mut(12, 3).copy_from(&pose.r);
    x.rows_mut(15, 3).copy_from(&pose.t);
    x
}

/// Inverse of [`pack_distance_state`]; higher-order coefficients come out
/// zero.
pub fn unpack_distance_state(x: &DVector<f64>, theta_max: [f64; 2]) -> ([CameraIntrinsics; 2], Pose) {
    let intr = |c: usize| {
        let o = 6 * c;
        CameraIntrinsics {
            k: [x[o], x[o + 1], 0.0, 0.0, 0.0],
            mu: x[o + 2],
            mv: x[o + 3],
            u0: x[o + 4],
            v0: x[o + 5],
            theta_max: theta_max[c],
        }
    };
    (
        [intr(0), intr(1)],
        Pose::new(
            Vector3::new(x[12], x[13], x[14]),
            Vector3::new(x[15], x[16], x[17]),
        ),
    )
}

/// Two-view triangulation with sensitivities to the bearings and the pose.
struct TriangulationGrad {
    point: Vector3<f64>,
    /// d point / d m0, m1, r, t (3x3 each).
    d_m0: Matrix3<f64>,
    d_m1: Matrix3<f64>,
    d_r: Matrix3<f64>,
    d_t: Matrix3<f64>,
}

fn view_rows(
    m: &Vector3<f64>,
    q: &Matrix3x4<f64>,
) -> ([RowVector4<f64>; 2], [usize; 2]) {
    let rows = cross_rows(m, q);
    let picked = select_rows(m.z, &rows);
    ([rows[picked[0]], rows[picked[1]]], picked)
}

/// Derivative of a selected cross-product row under perturbations of the
/// bearing and the camera matrix.
fn row_delta(
    sel: usize,
    m: &Vector3<f64>,
    dm: &Vector3<f64>,
    q: &Matrix3x4<f64>,
    dq: &Matrix3x4<f64>,
) -> RowVector4<f64> {
    let (q1, q2, q3) = (q.row(0), q.row(1), q.row(2));
    let (dq1, dq2, dq3) = (dq.row(0), dq.row(1), dq.row(2));
    match sel {
        0 => dq3 * m.x + q3 * dm.x - dq1 * m.z - q1 * dm.z,
        1 => dq3 * m.y + q3 * dm.y - dq2 * m.z - q2 * dm.z,
        _ => dq2 * m.x + q2 * dm.x - dq1 * m.y - q1 * dm.y,
    }
}

/// Triangulates from two bearings with analytic derivatives.
///
/// `d_rot[k]` must be `dR/dr_k`. Derivatives hold in the neighborhood where
/// the row selection is constant; the objective is re-linearized at every
/// evaluation so selection switches only show up as the (documented)
/// non-smoothness of the stage-three residual.
fn triangulate_pair_grad(
    m0: &Vector3<f64>,
    m1: &Vector3<f64>,
    rot: &Matrix3<f64>,
    t: &Vector3<f64>,
    d_rot: Option<&[Matrix3<f64>; 3]>,
) -> Result<TriangulationGrad> {
    let q0 = Matrix3x4::<f64>::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    );
    let mut q1 = Matrix3x4::zeros();
    q1.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
    q1.fixed_view_mut::<3, 1>(0, 3).copy_from(t);

    let (rows0, sel0) = view_rows(m0, &q0);
    let (rows1, sel1) = view_rows(m1, &q1);

    let s = HOMOGENEOUS_SCALE;
    let mut a = SMatrix::<f64, 4, 4>::zeros();
    for (i, row) in rows0.iter().chain(rows1.iter()).enumerate() {
        for c in 0..3 {
            a[(i, c)] = row[c] * s;
        }
        a[(i, 3)] = row[3];
    }

    let m = a.transpose() * a;
    let eig = m.symmetric_eigen();
    let mut jmin = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] < eig.eigenvalues[jmin] {
            jmin = i;
        }
    }
    let v: Vector4<f64> = eig.eigenvectors.column(jmin).into_owned();
    if v[3].abs() < 1e-12 {
        return Err(Error::AtInfinity { w: v[3] });
    }
    let point = Vector3::new(v[0], v[1], v[2]) * (s / v[3]);

    let Some(d_rot) = d_rot else {
        return Ok(TriangulationGrad {
            point,
            d_m0: Matrix3::zeros(),
            d_m1: Matrix3::zeros(),
            d_r: Matrix3::zeros(),
            d_t: Matrix3::zeros(),
        });
    };

    let av = a * v;
    // First-order perturbation of the smallest eigenvector of A'A.
    let point_delta = |da: &SMatrix<f64, 4, 4>| -> Vector3<f64> {
        let w = da.transpose() * av + a.transpose() * (da * v);
        let mut dv = Vector4::zeros();
        for i in 0..4 {
            if i == jmin {
                continue;
            }
            let ui = eig.eigenvectors.column(i);
            dv += ui * (ui.dot(&w) / (eig.eigenvalues[jmin] - eig.eigenvalues[i]));
        }
        (dv.xyz() - (point / s) * dv[3]) * (s / v[3])
    };

    let zero_q = Matrix3x4::zeros();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];

    let build_da = |view: usize, dm: &Vector3<f64>, dq: &Matrix3x4<f64>| {
        let mut da = SMatrix::<f64, 4, 4>::zeros();
        let (m, q, sel, base_row) = if view == 0 {
            (m0, &q0, sel0, 0)
        } else {
            (m1, &q1, sel1, 2)
        };
        for (slot, &sel_idx) in sel.iter().enumerate() {
            let dr = row_delta(sel_idx, m, dm, q, dq);
            for c in 0..3 {
                da[(base_row + slot, c)] = dr[c] * s;
            }
            da[(base_row + slot, 3)] = dr[3];
        }
        da
    };

    let mut grad = TriangulationGrad {
        point,
        d_m0: Matrix3::zeros(),
        d_m1: Matrix3::zeros(),
        d_r: Matrix3::zeros(),
        d_t: Matrix3::zeros(),
    };
    for k in 0..3 {
        let da = build_da(0, &basis[k], &zero_q);
        grad.d_m0.set_column(k, &point_delta(&da));

        let da = build_da(1, &basis[k], &zero_q);
        grad.d_m1.set_column(k, &point_delta(&da));

        let mut dq = Matrix3x4::zeros();
        dq.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_rot[k]);
        let da = build_da(1, &Vector3::zeros(), &dq);
        grad.d_r.set_column(k, &point_delta(&da));

        let mut dq = Matrix3x4::zeros();
        dq.fixed_view_mut::<3, 1>(0, 3).copy_from(&basis[k]);
        let da = build_da(1, &Vector3::zeros(), &dq);
        grad.d_t.set_column(k, &point_delta(&da));
    }
    Ok(grad)
}

/// Stage-three objective: per frame, the three wand-length errors of the
/// re-triangulated markers.
pub struct DistanceProblem<'a> {
    wand: WandGeometry,
    obs: &'a ObservationSet,
    theta_max: [f64; 2],
    base: DVector<f64>,
    active: Vec<usize>,
}

impl<'a> DistanceProblem<'a> {
    /// `obs` must hold two cameras with all markers visible everywhere.
    pub fn new(
        x0: &DVector<f64>,
        obs: &'a ObservationSet,
        wand: WandGeometry,
        theta_max: [f64; 2],
        pitch_mode: PixelPitchMode,
    ) -> Self {
        let active = (0..DISTANCE_STATE)
            .filter(|&i| !(pitch_mode == PixelPitchMode::FixMu && (i == 2 || i == 8)))
            .collect();
        DistanceProblem {
            wand,
            obs,
            theta_max,
            base: x0.clone(),
            active,
        }
    }

    pub fn reduce(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.active.len(), self.active.iter().map(|&i| full[i]))
    }

    pub fn expand(&self, reduced: &DVector<f64>) -> DVector<f64> {
        let mut full = self.base.clone();
        for (slot, &i) in self.active.iter().enumerate() {
            full[i] = reduced[slot];
        }
        full
    }

    fn eval(
        &self,
        reduced: &DVector<f64>,
        with_jac: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let full = self.expand(reduced);
        let (intr, pose) = unpack_distance_state(&full, self.theta_max);
        let rot = exp_so3(&pose.r);
        let d_rot = with_jac.then(|| {
            let jl = left_jacobian(&pose.r);
            [
                skew(&jl.column(0).into_owned()) * rot,
                skew(&jl.column(1).into_owned()) * rot,
                skew(&jl.column(2).into_owned()) * rot,
            ]
        });

        let n_frames = self.obs.frames.len();
        let mut r = DVector::zeros(3 * n_frames);
        let mut jac = with_jac.then(|| DMatrix::zeros(3 * n_frames, self.active.len()));

        for (fi, frame) in self.obs.frames.iter().enumerate() {
            // Marker order A, B, C; each with its point and d(point)/d(x18).
            let mut points = [Vector3::zeros(); 3];
            let mut d_points = [SMatrix::<f64, 3, 18>::zeros(); 3];
            for (mi, marker) in Marker::ALL.into_iter().enumerate() {
                let px0 = frame.detections[0].get(marker).ok_or_else(|| {
                    Error::InvalidInput(format!("frame {} misses a marker in camera 0", frame.frame))
                })?;
                let px1 = frame.detections[1].get(marker).ok_or_else(|| {
                    Error::InvalidInput(format!("frame {} misses a marker in camera 1", frame.frame))
                })?;

                if with_jac {
                    let (b0, db0) = unproject_jacobian(&intr[0], &px0)?;
                    let (b1, db1) = unproject_jacobian(&intr[1], &px1)?;
                    let tri = triangulate_pair_grad(
                        &b0.vector(),
                        &b1.vector(),
                        &rot,
                        &pose.t,
                        d_rot.as_ref(),
                    )?;
                    points[mi] = tri.point;
                    let dp = &mut d_points[mi];
                    // Intrinsics enter through the bearings; the first six
                    // unprojection-parameter slots match the state layout.
                    for p in 0..6 {
                        let col0 = tri.d_m0 * db0[p];
                        let col1 = tri.d_m1 * db1[p];
                        for row in 0..3 {
                            dp[(row, p)] = col0[row];
                            dp[(row, 6 + p)] = col1[row];
                        }
                    }
                    for k in 0..3 {
                        for row in 0..3 {
                            dp[(row, 12 + k)] = tri.d_r[(row, k)];
                            dp[(row, 15 + k)] = tri.d_t[(row, k)];
                        }
                    }
                } else {
                    let b0 = unproject(&intr[0], &px0)?;
                    let b1 = unproject(&intr[1], &px1)?;
                    let tri =
                        triangulate_pair_grad(&b0.vector(), &b1.vector(), &rot, &pose.t, None)?;
                    points[mi] = tri.point;
                }
            }

            // g1 = L1 - |A-B|, g2 = L2 - |B-C|, g3 = L - |A-C|.
            let pairs = [
                (0usize, 1usize, self.wand.l1),
                (1, 2, self.wand.l2),
                (0, 2, self.wand.l),
            ];
            for (gi, &(p, q, len)) in pairs.iter().enumerate() {
                let diff = points[p] - points[q];
                let norm = diff.norm();
                if norm <= 0.0 {
                    return Err(Error::NumericFailure {
                        reason: "coincident reconstructed markers".into(),
                        last_good: full.as_slice().to_vec(),
                    });
                }
                r[3 * fi + gi] = len - norm;
                if let Some(jac) = jac.as_mut() {
                    let d_diff = d_points[p] - d_points[q];
                    let g_row = -(diff.transpose() * d_diff) / norm;
                    for (slot, &ip) in self.active.iter().enumerate() {
                        jac[(3 * fi + gi, slot)] = g_row[ip];
                    }
                }
            }
        }
        Ok((r, jac))
    }
}

impl LeastSquaresProblem for DistanceProblem<'_> {
    fn residual_dim(&self) -> usize {
        3 * self.obs.frames.len()
    }

    fn param_dim(&self) -> usize {
        self.active.len()
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval(x, false)?.0)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.eval(x, true)?.1.unwrap())
    }
}

fn full_visibility(obs: &ObservationSet) -> ObservationSet {
    ObservationSet {
        camera_count: obs.camera_count,
        frames: obs
            .frames
            .iter()
            .filter(|f| f.detections.iter().all(|d| d.all_present()))
            .cloned()
            .collect(),
    }
}

/// Stage two: pose of camera 1 relative to camera 0 from bearing
/// correspondences, with the translation rescaled to wand units.
pub fn init_extrinsics(
    intr0: &CameraIntrinsics,
    intr1: &CameraIntrinsics,
    obs: &ObservationSet,
    wand: &WandGeometry,
    ransac: &RansacConfig,
) -> Result<Pose> {
    let usable = full_visibility(obs);
    let mut corrs = Vec::new();
    // (frame position in `usable`, index of A corr, index of C corr)
    let mut frame_ac: Vec<(usize, Option<usize>, Option<usize>)> = Vec::new();
    for (fi, frame) in usable.frames.iter().enumerate() {
        let mut a_idx = None;
        let mut c_idx = None;
        for marker in Marker::ALL {
            let px0 = frame.detections[0].get(marker).unwrap();
            let px1 = frame.detections[1].get(marker).unwrap();
            let (Ok(m0), Ok(m1)) = (unproject(intr0, &px0), unproject(intr1, &px1)) else {
                continue;
            };
            let idx = corrs.len();
            corrs.push(Correspondence {
                m0,
                m1,
                frame: frame.frame,
                marker,
            });
            match marker {
                Marker::A => a_idx = Some(idx),
                Marker::C => c_idx = Some(idx),
                Marker::B => {}
            }
        }
        frame_ac.push((fi, a_idx, c_idx));
    }

    let (essential, mask) = estimate_essential_ransac(&corrs, ransac)?;
    let inliers: Vec<Correspondence> = corrs
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|(c, _)| *c)
        .collect();
    let unit_pose = decompose_essential(&essential, &inliers)?;

    // Wand length fixes the scale; use frames whose A and C matched the model.
    let mut recons = Vec::new();
    for &(fi, a_idx, c_idx) in &frame_ac {
        let (Some(ai), Some(ci)) = (a_idx, c_idx) else { continue };
        if !(mask[ai] && mask[ci]) {
            continue;
        }
        let _ = fi;
        let tri = |corr: &Correspondence| -> Result<Vector3<f64>> {
            let rays = [
                ObservationRay {
                    camera: 0,
                    bearing: corr.m0,
                    pose: Pose::identity(),
                },
                ObservationRay {
                    camera: 1,
                    bearing: corr.m1,
                    pose: unit_pose,
                },
            ];
            Ok(triangulate(&rays)?.point)
        };
        let (Ok(a), Ok(c)) = (tri(&corrs[ai]), tri(&corrs[ci])) else {
            continue;
        };
        recons.push((a, c));
    }
    if recons.is_empty() {
        return Err(Error::EstimationFailed(
            "no frame survived for scale recovery".into(),
        ));
    }
    let lambda = recover_scale(wand, &recons)?;
    Ok(Pose::new(unit_pose.r, unit_pose.t * lambda))
}

/// Stage three: minimizes the summed squared wand-length errors over the
/// 18-parameter state. Returns the refined full state.
pub fn optimize_distances(
    x0: &DVector<f64>,
    obs: &ObservationSet,
    wand: &WandGeometry,
    theta_max: [f64; 2],
    pitch_mode: PixelPitchMode,
    cfg: &LmConfig,
) -> Result<(DVector<f64>, LmReport)> {
    let usable = full_visibility(obs);
    if usable.frames.is_empty() {
        return Err(Error::InsufficientFrames { got: 0, need: 1 });
    }
    let problem = DistanceProblem::new(x0, &usable, *wand, theta_max, pitch_mode);
    let (reduced, report) = lm_minimize(&problem, &problem.reduce(x0), cfg)?;
    Ok((problem.expand(&reduced), report))
}

/// Removes frames whose reconstructed wand length deviates from the true
/// length by strictly more than `threshold` (relative). Returns the filtered
/// set and the rejected frame ids.
pub fn reject_outliers(
    intr: &[CameraIntrinsics; 2],
    pose: &Pose,
    obs: &ObservationSet,
    wand: &WandGeometry,
    threshold: f64,
) -> Result<(ObservationSet, Vec<usize>)> {
    let usable = full_visibility(obs);
    let mut keep = Vec::new();
    let mut rejected = Vec::new();
    for frame in &usable.frames {
        let end_point = |marker: Marker| -> Result<Vector3<f64>> {
            let px0 = frame.detections[0].get(marker).unwrap();
            let px1 = frame.detections[1].get(marker).unwrap();
            let rays = [
                ObservationRay {
                    camera: 0,
                    bearing: unproject(&intr[0], &px0)?,
                    pose: Pose::identity(),
                },
                ObservationRay {
                    camera: 1,
                    bearing: unproject(&intr[1], &px1)?,
                    pose: *pose,
                },
            ];
            Ok(triangulate(&rays)?.point)
        };
        match (end_point(Marker::A), end_point(Marker::C)) {
            (Ok(a), Ok(c)) => {
                let err = ((wand.l - (a - c).norm()) / wand.l).abs();
                if err > threshold {
                    rejected.push(frame.frame);
                } else {
                    keep.push(frame.frame);
                }
            }
            // A frame the model cannot even reconstruct is an outlier.
            _ => rejected.push(frame.frame),
        }
    }
    if keep.is_empty() {
        return Err(Error::CalibrationFailed {
            stage: "outlier rejection".into(),
            reason: "every frame exceeded the wand-length threshold".into(),
        });
    }
    Ok((usable.retain_frames(&keep), rejected))
}

/// Spec'd orientation extraction; the middle marker is unused because
/// collinearity is enforced by the parameterization.
pub fn wand_pose_from_points(
    a: &Vector3<f64>,
    _b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Result<WandPose> {
    crate::ba::wand_pose_from_markers(a, c)
}

/// Stage four: joint refinement of the 24 camera parameters and all wand
/// poses; reports per-camera RMS reprojection errors.
pub fn bundle_adjust_pair(
    intr: &[CameraIntrinsics; 2],
    pose: &Pose,
    obs: &ObservationSet,
    wand: &WandGeometry,
    pitch_mode: PixelPitchMode,
    cfg: &LmConfig,
) -> Result<([CameraIntrinsics; 2], Pose, [f64; 2], LmReport)> {
    let poses = vec![Pose::identity(), *pose];
    let intr_vec = vec![intr[0], intr[1]];
    let wand_poses = init_wand_poses(&intr_vec, &poses, obs)?;
    let problem = BundleProblem::new(&intr_vec, &poses, 0, *wand, obs, pitch_mode)?;
    let x0 = problem.initial_state(&wand_poses)?;
    let (x, report) = sparse_lm_minimize(&problem, &x0, cfg)?;
    let e_rms = problem.rms_per_camera(&x)?;
    let (intr_out, poses_out, _) = problem.unpack_state(&x);
    Ok((
        [intr_out[0], intr_out[1]],
        poses_out[1],
        [e_rms[0], e_rms[1]],
        report,
    ))
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::CalibrationFailed { stage, reason } => Error::CalibrationFailed { stage, reason },
        other => Error::CalibrationFailed {
            stage: name.into(),
            reason: other.to_string(),
        },
    })
}

/// Full two-camera pipeline.
pub fn calibrate_pair(
    obs: &ObservationSet,
    wand: &WandGeometry,
    metas: &[CameraMeta; 2],
    cfg: &PairConfig,
) -> Result<PairCalibration> {
    wand.validate()?;
    if obs.camera_count != 2 {
        return Err(Error::InvalidInput(format!(
            "pair calibration expects 2 cameras, got {}",
            obs.camera_count
        )));
    }
    let usable = full_visibility(obs);
    if usable.frames.len() < cfg.min_frames {
        return Err(Error::InsufficientFrames {
            got: usable.frames.len(),
            need: cfg.min_frames,
        });
    }

    // Stage 1: datasheet seeding.
    let intr = [
        stage("intrinsic seeding", default_intrinsics(&metas[0]))?,
        stage("intrinsic seeding", default_intrinsics(&metas[1]))?,
    ];
    let theta_max = [intr[0].theta_max, intr[1].theta_max];

    // Stage 2: epipolar initialization with wand-scale recovery.
    let pose0 = stage(
        "extrinsic initialization",
        init_extrinsics(&intr[0], &intr[1], &usable, wand, &cfg.ransac),
    )?;

    // Stage 3: distance objective over the 18-parameter state.
    let x0 = pack_distance_state(&intr, &pose0);
    let (x_opt, distance_report) = stage(
        "distance optimization",
        optimize_distances(&x0, &usable, wand, theta_max, cfg.pixel_pitch, &cfg.distance_lm),
    )?;
    let (intr_opt, pose_opt) = unpack_distance_state(&x_opt, theta_max);

    // Stage 4: outlier rejection, then bundle adjustment.
    let (survivors, frames_rejected) = stage(
        "outlier rejection",
        reject_outliers(&intr_opt, &pose_opt, &usable, wand, cfg.outlier_threshold),
    )?;
    let (intr_final, pose_final, e_rms, bundle_report) = stage(
        "bundle adjustment",
        bundle_adjust_pair(
            &intr_opt,
            &pose_opt,
            &survivors,
            wand,
            cfg.pixel_pitch,
            &cfg.bundle_lm,
        ),
    )?;

    Ok(PairCalibration {
        intrinsics: intr_final,
        pose: pose_final,
        e_rms,
        frames_used: survivors.frames.iter().map(|f| f.frame).collect(),
        frames_rejected,
        distance_report,
        bundle_report,
    })
}
