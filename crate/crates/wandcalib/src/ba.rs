//! Bundle adjustment over camera parameters and wand poses.
//!
//! One problem serves the two-camera and the multi-camera refinements. The
//! global block stacks all camera intrinsics (9 each, in
//! [`CameraIntrinsics::to_params`] order) followed by the poses of every
//! non-reference camera (Rodrigues vector then translation); its dimension is
//! `15m + 9` for `m + 1` cameras. Each frame contributes an independent
//! 5-parameter wand block `(A, phi, theta)`, which the sparse solver
//! eliminates by Schur complement.
//!
//! The model carries an exact gauge: scaling every `k` by `s` and both pixel
//! pitches by `1/s` leaves pixels unchanged. By default `mu` is pinned to its
//! datasheet value for every camera (`mv` stays free to capture the aspect
//! ratio), which removes the redundancy without limiting the model;
//! [`PixelPitchMode::All`] restores the fully free parameterization.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::camera::{project_jacobians, CameraIntrinsics, DEFAULT_FOV_MARGIN, INTRINSIC_PARAMS};
use crate::epipolar::Pose;
use crate::error::{Error, Result};
use crate::optim::BipartiteProblem;
use crate::so3::{exp_so3, left_jacobian, skew};
use crate::wand::{Marker, ObservationSet, WandGeometry, WandPose};

/// Gauge handling for the pixel-pitch/distortion redundancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelPitchMode {
    /// Hold every camera's `mu` at its current value; optimize `mv`.
    #[default]
    FixMu,
    /// Optimize both pitches (the unreduced parameterization).
    All,
}

/// Parameters per wand-pose block: A (3) + phi + theta.
pub const WAND_BLOCK: usize = 5;

/// Position of a non-reference camera's pose among the pose blocks.
fn pose_slot(camera: usize, reference: usize) -> usize {
    if camera < reference {
        camera
    } else {
        camera - 1
    }
}

/// Dimension of the full camera parameter vector for `n` cameras.
pub fn camera_param_dim(cameras: usize) -> usize {
    INTRINSIC_PARAMS * cameras + 6 * (cameras - 1)
}

/// One reprojection residual source: a marker seen by a camera in a frame.
#[derive(Debug, Clone, Copy)]
struct MarkerObservation {
    camera: usize,
    marker: Marker,
    pixel: Vector2<f64>,
}

struct FrameChunk {
    frame_id: usize,
    observations: Vec<MarkerObservation>,
}

/// Reprojection bundle problem over `n >= 2` cameras.
pub struct BundleProblem {
    wand: WandGeometry,
    cameras: usize,
    /// Camera whose pose is pinned to the identity (not parameterized).
    reference: usize,
    theta_max: Vec<f64>,
    frames: Vec<FrameChunk>,
    /// Full camera parameter vector; inactive entries stay at these values.
    base: DVector<f64>,
    /// Active (optimized) indices into the full camera vector.
    active: Vec<usize>,
    /// full index -> active slot.
    slot_of: Vec<Option<usize>>,
}

impl BundleProblem {
    /// Builds the problem from current estimates and the frames to refine.
    ///
    /// Every present camera/marker detection of every frame of `obs`
    /// contributes a residual (pair calibration pre-filters to frames both
    /// cameras see in full; the multi-camera case admits partial
    /// visibility). `poses[reference]` must be the identity.
    pub fn new(
        intrinsics: &[CameraIntrinsics],
        poses: &[Pose],
        reference: usize,
        wand: WandGeometry,
        obs: &ObservationSet,
        pitch_mode: PixelPitchMode,
    ) -> Result<Self> {
        let cameras = intrinsics.len();
        if cameras < 2 || poses.len() != cameras || obs.camera_count != cameras {
            return Err(Error::InvalidInput(
                "bundle problem needs matching camera lists for >= 2 cameras".into(),
            ));
        }
        if reference >= cameras {
            return Err(Error::InvalidInput(format!(
                "reference camera {reference} out of range for {cameras} cameras"
            )));
        }
        if poses[reference].r.norm() != 0.0 || poses[reference].t.norm() != 0.0 {
            return Err(Error::InvalidInput(
                "the reference camera's pose must be the identity".into(),
            ));
        }

        let mut frames = Vec::with_capacity(obs.frames.len());
        for f in &obs.frames {
            let mut observations = Vec::new();
            for cam in 0..cameras {
                for marker in Marker::ALL {
                    if let Some(pixel) = f.detections[cam].get(marker) {
                        observations.push(MarkerObservation {
                            camera: cam,
                            marker,
                            pixel,
                        });
                    }
                }
            }
            frames.push(FrameChunk {
                frame_id: f.frame,
                observations,
            });
        }

        let dim = camera_param_dim(cameras);
        let mut base = DVector::zeros(dim);
        for (c, intr) in intrinsics.iter().enumerate() {
            base.rows_mut(c * INTRINSIC_PARAMS, INTRINSIC_PARAMS)
                .copy_from_slice(&intr.to_params());
        }
        for c in 0..cameras {
            if c == reference {
                continue;
            }
            let off = INTRINSIC_PARAMS * cameras + 6 * pose_slot(c, reference);
            base.rows_mut(off, 3).copy_from(&poses[c].r);
            base.rows_mut(off + 3, 3).copy_from(&poses[c].t);
        }

        let mut active = Vec::new();
        for i in 0..dim {
            let in_intr = i < INTRINSIC_PARAMS * cameras;
            let is_mu = in_intr && i % INTRINSIC_PARAMS == 2;
            if is_mu && pitch_mode == PixelPitchMode::FixMu {
                continue;
            }
            active.push(i);
        }
        let mut slot_of = vec![None; dim];
        for (slot, &i) in active.iter().enumerate() {
            slot_of[i] = Some(slot);
        }

        Ok(BundleProblem {
            wand,
            cameras,
            reference,
            theta_max: intrinsics.iter().map(|i| i.theta_max).collect(),
            frames,
            base,
            active,
            slot_of,
        })
    }

    /// Dimension of the full (unmasked) camera parameter vector, `15m + 9`.
    pub fn camera_dim(&self) -> usize {
        self.base.len()
    }

    pub fn frame_ids(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.frame_id).collect()
    }

    /// Initial optimizer state from the construction-time camera parameters
    /// and the given wand poses (one per frame, same order).
    pub fn initial_state(&self, wand_poses: &[WandPose]) -> Result<DVector<f64>> {
        if wand_poses.len() != self.frames.len() {
            return Err(Error::InvalidInput(format!(
                "{} wand poses for {} frames",
                wand_poses.len(),
                self.frames.len()
            )));
        }
        let mut x = DVector::zeros(self.global_dim() + WAND_BLOCK * self.frames.len());
        for (slot, &i) in self.active.iter().enumerate() {
            x[slot] = self.base[i];
        }
        for (j, wp) in wand_poses.iter().enumerate() {
            let off = self.global_dim() + WAND_BLOCK * j;
            x.rows_mut(off, 3).copy_from(&wp.a);
            x[off + 3] = wp.phi;
            x[off + 4] = wp.theta;
        }
        Ok(x)
    }

    fn full_camera_vector(&self, global: &[f64]) -> DVector<f64> {
        let mut full = self.base.clone();
        for (slot, &i) in self.active.iter().enumerate() {
            full[i] = global[slot];
        }
        full
    }

    fn unpack_full(&self, full: &DVector<f64>) -> (Vec<CameraIntrinsics>, Vec<Pose>) {
        let mut intr = Vec::with_capacity(self.cameras);
        for c in 0..self.cameras {
            intr.push(CameraIntrinsics::from_params(
                full.as_slice()[c * INTRINSIC_PARAMS..(c + 1) * INTRINSIC_PARAMS].as_ref(),
                self.theta_max[c],
            ));
        }
        let mut poses = vec![Pose::identity(); self.cameras];
        for c in 0..self.cameras {
            if c == self.reference {
                continue;
            }
            let off = INTRINSIC_PARAMS * self.cameras + 6 * pose_slot(c, self.reference);
            poses[c] = Pose::new(
                Vector3::new(full[off], full[off + 1], full[off + 2]),
                Vector3::new(full[off + 3], full[off + 4], full[off + 5]),
            );
        }
        (intr, poses)
    }

    /// Final camera parameters and wand poses from an optimizer state.
    pub fn unpack_state(&self, x: &DVector<f64>) -> (Vec<CameraIntrinsics>, Vec<Pose>, Vec<WandPose>) {
        let full = self.full_camera_vector(&x.as_slice()[..self.global_dim()]);
        let (intr, poses) = self.unpack_full(&full);
        let mut wand_poses = Vec::with_capacity(self.frames.len());
        for j in 0..self.frames.len() {
            let off = self.global_dim() + WAND_BLOCK * j;
            wand_poses.push(WandPose {
                a: Vector3::new(x[off], x[off + 1], x[off + 2]),
                phi: x[off + 3],
                theta: x[off + 4],
            });
        }
        (intr, poses, wand_poses)
    }

    /// Per-camera RMS reprojection error at a state: sqrt of the mean squared
    /// pixel distance over that camera's marker observations.
    pub fn rms_per_camera(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let (intr, poses, wand_poses) = self.unpack_state(x);
        let mut sums = vec![0.0; self.cameras];
        let mut counts = vec![0usize; self.cameras];
        for (chunk, wp) in self.frames.iter().zip(&wand_poses) {
            for mo in &chunk.observations {
                let x_ref = wp.marker(mo.marker, &self.wand);
                let x_cam = poses[mo.camera].transform(&x_ref);
                let px = crate::camera::project_with_margin(
                    &intr[mo.camera],
                    &x_cam,
                    DEFAULT_FOV_MARGIN,
                )?;
                sums[mo.camera] += (mo.pixel - px).norm_squared();
                counts[mo.camera] += 1;
            }
        }
        Ok(sums
            .iter()
            .zip(&counts)
            .map(|(&s, &n)| if n == 0 { 0.0 } else { (s / n as f64).sqrt() })
            .collect())
    }
}

impl BipartiteProblem for BundleProblem {
    fn global_dim(&self) -> usize {
        self.active.len()
    }

    fn item_count(&self) -> usize {
        self.frames.len()
    }

    fn item_dim(&self) -> usize {
        WAND_BLOCK
    }

    fn item_residual_dim(&self, item: usize) -> usize {
        2 * self.frames[item].observations.len()
    }

    fn eval_item(
        &self,
        item: usize,
        global: &[f64],
        item_params: &[f64],
        residuals: &mut [f64],
        mut jac_global: Option<&mut DMatrix<f64>>,
        mut jac_item: Option<&mut DMatrix<f64>>,
    ) -> Result<()> {
        let full = self.full_camera_vector(global);
        let (intr, poses) = self.unpack_full(&full);

        let a = Vector3::new(item_params[0], item_params[1], item_params[2]);
        let (phi, theta) = (item_params[3], item_params[4]);
        let dir = Vector3::new(
            phi.sin() * theta.cos(),
            phi.sin() * theta.sin(),
            phi.cos(),
        );
        let d_dir_phi = Vector3::new(
            phi.cos() * theta.cos(),
            phi.cos() * theta.sin(),
            -phi.sin(),
        );
        let d_dir_theta = Vector3::new(-phi.sin() * theta.sin(), phi.sin() * theta.cos(), 0.0);

        let with_jac = jac_global.is_some() || jac_item.is_some();
        // Pose-dependent pieces, reused across this frame's observations.
        let mut rotations: Vec<Matrix3<f64>> = Vec::with_capacity(self.cameras);
        let mut left_jacs: Vec<Matrix3<f64>> = Vec::with_capacity(self.cameras);
        for c in 0..self.cameras {
            rotations.push(poses[c].rotation());
            left_jacs.push(if with_jac && c != self.reference {
                left_jacobian(&poses[c].r)
            } else {
                Matrix3::identity()
            });
        }

        for (row2, mo) in self.frames[item].observations.iter().enumerate() {
            let offset = self.wand.offset(mo.marker);
            let x_ref = a + dir * offset;
            let cam = mo.camera;
            let rotated = rotations[cam] * x_ref;
            let x_cam = rotated + poses[cam].t;

            let (px, d_px_d_point, d_px_d_intr) =
                project_jacobians(&intr[cam], &x_cam, DEFAULT_FOV_MARGIN)?;
            let res = mo.pixel - px;
            residuals[2 * row2] = res.x;
            residuals[2 * row2 + 1] = res.y;

            if !with_jac {
                continue;
            }

            if let Some(jg) = jac_global.as_deref_mut() {
                // d res / d intrinsics = -d px / d intrinsics.
                for p in 0..INTRINSIC_PARAMS {
                    if let Some(slot) = self.slot_of[cam * INTRINSIC_PARAMS + p] {
                        jg[(2 * row2, slot)] = -d_px_d_intr[0][p];
                        jg[(2 * row2 + 1, slot)] = -d_px_d_intr[1][p];
                    }
                }
                if cam != self.reference {
                    let pose_off =
                        INTRINSIC_PARAMS * self.cameras + 6 * pose_slot(cam, self.reference);
                    // d x_cam / d r = -[R x_ref]x J_l.
                    let d_rot = -skew(&rotated) * left_jacs[cam];
                    let d_px_d_r = d_px_d_point * d_rot;
                    for k in 0..3 {
                        if let Some(slot) = self.slot_of[pose_off + k] {
                            jg[(2 * row2, slot)] = -d_px_d_r[(0, k)];
                            jg[(2 * row2 + 1, slot)] = -d_px_d_r[(1, k)];
                        }
                        if let Some(slot) = self.slot_of[pose_off + 3 + k] {
                            jg[(2 * row2, slot)] = -d_px_d_point[(0, k)];
                            jg[(2 * row2 + 1, slot)] = -d_px_d_point[(1, k)];
                        }
                    }
                }
            }

            if let Some(ji) = jac_item.as_deref_mut() {
                let d_px_d_ref = d_px_d_point * rotations[cam];
                for k in 0..3 {
                    ji[(2 * row2, k)] = -d_px_d_ref[(0, k)];
                    ji[(2 * row2 + 1, k)] = -d_px_d_ref[(1, k)];
                }
                let d_px_d_phi = d_px_d_ref * (d_dir_phi * offset);
                let d_px_d_theta = d_px_d_ref * (d_dir_theta * offset);
                ji[(2 * row2, 3)] = -d_px_d_phi.x;
                ji[(2 * row2 + 1, 3)] = -d_px_d_phi.y;
                ji[(2 * row2, 4)] = -d_px_d_theta.x;
                ji[(2 * row2 + 1, 4)] = -d_px_d_theta.y;
            }
        }
        Ok(())
    }
}

/// Initializes wand poses for the given frames by triangulating A and C with
/// the current camera estimates (cameras seeing all three markers take part).
pub fn init_wand_poses(
    intrinsics: &[CameraIntrinsics],
    poses: &[Pose],
    obs: &ObservationSet,
) -> Result<Vec<WandPose>> {
    let mut out = Vec::with_capacity(obs.frames.len());
    for f in &obs.frames {
        let cams = f.fully_visible_cameras();
        if cams.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "frame {} has {} fully-visible cameras; need 2 to seed its wand pose",
                f.frame,
                cams.len()
            )));
        }
        let point = |marker: Marker| -> Result<Vector3<f64>> {
            let mut rays = Vec::with_capacity(cams.len());
            for &c in &cams {
                let px = f.detections[c].get(marker).unwrap();
                rays.push(crate::triangulate::ObservationRay {
                    camera: c,
                    bearing: crate::camera::unproject(&intrinsics[c], &px)?,
                    pose: poses[c],
                });
            }
            Ok(crate::triangulate::triangulate(&rays)?.point)
        };
        let a = point(Marker::A)?;
        let c = point(Marker::C)?;
        out.push(wand_pose_from_markers(&a, &c)?);
    }
    Ok(out)
}

/// Wand pose from reconstructed end markers: direction `(C - A)/||C - A||`,
/// `phi = acos(n_z)`, `theta = atan2(n_y, n_x)` (zero at the poles).
pub fn wand_pose_from_markers(a: &Vector3<f64>, c: &Vector3<f64>) -> Result<WandPose> {
    let d = c - a;
    let len = d.norm();
    if len <= 0.0 {
        return Err(Error::InvalidInput("zero-length wand reconstruction".into()));
    }
    let n = d / len;
    let phi = n.z.clamp(-1.0, 1.0).acos();
    let theta = if n.x == 0.0 && n.y == 0.0 {
        0.0
    } else {
        n.y.atan2(n.x)
    };
    Ok(WandPose { a: *a, phi, theta })
}

/// Validates a camera rotation produced by [`Pose::rotation`]; exposed for
/// sanity checks on loaded calibrations.
pub fn rotation_is_orthonormal(r: &Vector3<f64>) -> bool {
    let rot = exp_so3(r);
    ((rot.transpose() * rot) - Matrix3::identity()).amax() < 1e-12
        && (rot.determinant() - 1.0).abs() < 1e-12
}
