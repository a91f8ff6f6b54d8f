//! Linear triangulation from bearing observations.
//!
//! The spherical analogue of plane-based linear triangulation: each bearing
//! contributes the two independent rows its cross product with the camera
//! matrix yields, the stacked homogeneous system is solved by SVD. Good
//! accuracy under noise comes later from bundle adjustment, not here; the
//! linear solve runs inside optimizer residuals so it stays refinement-free.

use nalgebra::{DMatrix, Matrix3x4, RowVector4, Vector3};

use crate::camera::Bearing;
use crate::epipolar::Pose;
use crate::error::{Error, Result};
use crate::wand::WandGeometry;

/// One bearing observation with the pose mapping reference coordinates into
/// the observing camera's frame (identity for the reference camera).
#[derive(Debug, Clone, Copy)]
pub struct ObservationRay {
    pub camera: usize,
    pub bearing: Bearing,
    pub pose: Pose,
}

/// Triangulation output. `well_conditioned` is false when the rays are close
/// to parallel; the point is still returned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulatedPoint {
    pub point: Vector3<f64>,
    pub well_conditioned: bool,
}

/// Bearings with |cos(theta)| below this use the norm-based row choice; the
/// default row pair degenerates as the ray approaches the theta = 90 deg
/// circle, which 185 deg FOV lenses reach routinely.
pub(crate) const ROW_SWITCH_COS: f64 = 0.1;

const CONDITION_RATIO: f64 = 1e-9;
const CENTER_TOLERANCE: f64 = 1e-9;
/// Minimum sine of the widest ray-pair angle before the result is marked
/// ill conditioned (triangulation error grows as 1 / parallax).
const PARALLAX_SIN_MIN: f64 = 1e-6;

/// Scale for the homogeneous column of the stacked system (mm). Camera
/// translations are scene-sized while bearing entries are O(1); balancing
/// the columns keeps the small singular values trustworthy.
pub(crate) const HOMOGENEOUS_SCALE: f64 = 1000.0;

/// The three cross-product rows `[m]x Q` of one view, as (row, squared norm).
pub(crate) fn cross_rows(m: &Vector3<f64>, q: &Matrix3x4<f64>) -> [RowVector4<f64>; 3] {
    let q1 = q.row(0);
    let q2 = q.row(1);
    let q3 = q.row(2);
    [
        q3 * m.x - q1 * m.z,
        q3 * m.y - q2 * m.z,
        q2 * m.x - q1 * m.y,
    ]
}

/// Indices of the two rows to keep for a bearing with z-component `mz`.
pub(crate) fn select_rows(mz: f64, rows: &[RowVector4<f64>; 3]) -> [usize; 2] {
    if mz.abs() >= ROW_SWITCH_COS {
        return [0, 1];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rows[b].norm_squared().partial_cmp(&rows[a].norm_squared()).unwrap());
    let mut picked = [order[0].min(order[1]), order[0].max(order[1])];
    if picked[0] > picked[1] {
        picked.swap(0, 1);
    }
    picked
}

pub(crate) fn camera_matrix(pose: &Pose) -> Matrix3x4<f64> {
    let rot = pose.rotation();
    let mut q = Matrix3x4::zeros();
    q.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    q.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.t);
    q
}

/// Triangulates a 3D point (mm, reference frame) from two or more rays.
///
/// Requires at least two rays from distinct camera centers. A solution at
/// infinity is an error; near-parallel rays only clear `well_conditioned`.
pub fn triangulate(rays: &[ObservationRay]) -> Result<TriangulatedPoint> {
    if rays.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "triangulation needs >= 2 rays, got {}",
            rays.len()
        )));
    }
    let centers: Vec<Vector3<f64>> = rays.iter().map(|r| r.pose.inverse().t).collect();
    let mut max_baseline: f64 = 0.0;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            max_baseline = max_baseline.max((centers[i] - centers[j]).norm());
        }
    }
    if max_baseline <= CENTER_TOLERANCE {
        return Err(Error::InvalidInput(
            "rays share a camera center; triangulation needs a baseline".into(),
        ));
    }

    let s = HOMOGENEOUS_SCALE;
    let mut a = DMatrix::<f64>::zeros(2 * rays.len(), 4);
    for (i, ray) in rays.iter().enumerate() {
        let q = camera_matrix(&ray.pose);
        let m = ray.bearing.vector();
        let rows = cross_rows(&m, &q);
        let picked = select_rows(m.z, &rows);
        for (slot, &sel) in picked.iter().enumerate() {
            let row = rows[sel];
            for c in 0..3 {
                a[(2 * i + slot, c)] = row[c] * s;
            }
            a[(2 * i + slot, 3)] = row[3];
        }
    }

    // The null vector solves the column-scaled system: (X/s, 1) up to norm.
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().unwrap();
    let h = v_t.row(3);
    let w = h[3];
    if w.abs() < 1e-12 {
        return Err(Error::AtInfinity { w });
    }
    // Parallax: widest angle between ray directions in the reference frame.
    let directions: Vec<Vector3<f64>> = rays
        .iter()
        .map(|r| r.pose.rotation().transpose() * r.bearing.vector())
        .collect();
    let mut max_sin: f64 = 0.0;
    for i in 0..directions.len() {
        for j in i + 1..directions.len() {
            max_sin = max_sin.max(directions[i].cross(&directions[j]).norm());
        }
    }

    let sv = &svd.singular_values;
    Ok(TriangulatedPoint {
        point: Vector3::new(h[0], h[1], h[2]) * (s / w),
        well_conditioned: sv[2] > CONDITION_RATIO * sv[0] && max_sin > PARALLAX_SIN_MIN,
    })
}

/// Scale factor aligning unit-baseline reconstructions with the physical
/// wand length: the mean of `L / ||A_r - C_r||` over all frames.
pub fn recover_scale(wand: &WandGeometry, reconstructions: &[(Vector3<f64>, Vector3<f64>)]) -> Result<f64> {
    if reconstructions.is_empty() {
        return Err(Error::InvalidInput("scale recovery needs at least one frame".into()));
    }
    let mut sum = 0.0;
    for (a, c) in reconstructions {
        let len = (a - c).norm();
        if len <= 0.0 {
            return Err(Error::InvalidInput(
                "zero-length wand reconstruction; cannot recover scale".into(),
            ));
        }
        sum += wand.l / len;
    }
    Ok(sum / reconstructions.len() as f64)
}
