//! Two-view epipolar geometry on unit bearings.
//!
//! Bearings from wide-FOV cameras live on the unit sphere rather than an
//! image plane, so the essential-matrix constraint `m1' * E * m0 = 0` is used
//! directly on bearing vectors and residuals are angular distances from the
//! epipolar plane. The linear 8-point solver runs inside RANSAC; wand capture
//! produces hundreds of correspondences, so a minimal 5-point solver buys
//! nothing here (the sample size is configurable should one be slotted in).

use nalgebra::{Matrix3, SMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Bearing;
use crate::error::{Error, Result};
use crate::so3::{exp_so3, log_so3, skew};
use crate::triangulate::{triangulate, ObservationRay};
use crate::wand::Marker;

/// Rigid transform from one camera frame to another: `x1 = R(r) x0 + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Rodrigues rotation vector (radians).
    pub r: Vector3<f64>,
    /// Translation (mm).
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            r: Vector3::zeros(),
            t: Vector3::zeros(),
        }
    }

    pub fn new(r: Vector3<f64>, t: Vector3<f64>) -> Self {
        Pose { r, t }
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Pose {
            r: log_so3(rotation),
            t,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        exp_so3(&self.r)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.t
    }

    pub fn inverse(&self) -> Pose {
        let rot_t = self.rotation().transpose();
        Pose {
            r: -self.r,
            t: -(rot_t * self.t),
        }
    }
}

/// 3x3 essential matrix with singular values proportional to (1, 1, 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    /// `E = [t]x R` for the pose mapping frame 0 into frame 1.
    pub fn from_pose(pose: &Pose) -> Self {
        EssentialMatrix(skew(&pose.t) * pose.rotation())
    }
}

/// A bearing pair observed by two cameras in one frame.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub m0: Bearing,
    pub m1: Bearing,
    pub frame: usize,
    pub marker: Marker,
}

pub type CorrespondenceSet = Vec<Correspondence>;

/// Angular distance (radians) of `m1` from the epipolar plane of `m0`.
pub fn epipolar_residual(e: &EssentialMatrix, m0: &Bearing, m1: &Bearing) -> f64 {
    let n = e.0 * m0.vector();
    let denom = n.norm();
    if denom == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    (m1.vector().dot(&n).abs() / denom).clamp(0.0, 1.0).asin()
}

fn distinct_frames(corrs: &[Correspondence]) -> usize {
    let mut frames: Vec<usize> = corrs.iter().map(|c| c.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    frames.len()
}

/// Least-squares essential matrix from >= 8 correspondences.
///
/// The three markers within one frame are collinear in 3D, so samples must
/// span at least three distinct frames to constrain E.
pub fn estimate_essential_linear(corrs: &[Correspondence]) -> Result<EssentialMatrix> {
    if corrs.len() < 8 {
        return Err(Error::DegenerateConfiguration(format!(
            "need >= 8 correspondences, got {}",
            corrs.len()
        )));
    }
    if distinct_frames(corrs) < 3 {
        return Err(Error::DegenerateConfiguration(
            "correspondences span fewer than 3 frames (collinear wand markers)".into(),
        ));
    }

    // Normal matrix of the stacked constraint rows m1[a] * m0[b], E row-major.
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for c in corrs {
        let (m0, m1) = (c.m0.vector(), c.m1.vector());
        let mut row = [0.0; 9];
        for a in 0..3 {
            for b in 0..3 {
                row[3 * a + b] = m1[a] * m0[b];
            }
        }
        for i in 0..9 {
            for j in 0..9 {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }

    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let lambda_max = eig.eigenvalues[order[8]].max(f64::MIN_POSITIVE);
    if eig.eigenvalues[order[1]] < 1e-12 * lambda_max {
        return Err(Error::DegenerateConfiguration(
            "constraint stack is rank deficient (degenerate motion)".into(),
        ));
    }
    let v = eig.eigenvectors.column(order[0]);
    let raw = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);

    // Project onto singular values (s, s, 0), then unit Frobenius norm.
    let svd = raw.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = (svd.singular_values[0] + svd.singular_values[1]) / 2.0;
    let e = u * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * vt;
    Ok(EssentialMatrix(e / e.norm()))
}

/// RANSAC policy for [`estimate_essential_ransac`].
#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    /// Angular inlier threshold (radians).
    pub threshold: f64,
    /// Correspondences per hypothesis; the linear solver needs >= 8.
    pub sample_size: usize,
    /// Minimum inlier support for a usable model.
    pub min_inliers: usize,
    /// Hard cap on hypotheses.
    pub max_iterations: usize,
    /// Confidence target for the adaptive iteration count.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            threshold: 0.5_f64.to_radians(),
            sample_size: 8,
            min_inliers: 12,
            max_iterations: 2000,
            confidence: 0.99,
            seed: 0,
        }
    }
}

fn inlier_mask(e: &EssentialMatrix, corrs: &[Correspondence], threshold: f64) -> Vec<bool> {
    corrs
        .iter()
        .map(|c| epipolar_residual(e, &c.m0, &c.m1) < threshold)
        .collect()
}

/// Robust essential-matrix estimation.
///
/// Hypothesis `i` draws its sample from an independently seeded stream, and
/// the best model is chosen by `(inlier_count, hypothesis_index)`, so the
/// result depends only on the configuration, never on evaluation order. The
/// returned matrix is re-estimated from all inliers of the winning hypothesis.
pub fn estimate_essential_ransac(
    corrs: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<(EssentialMatrix, Vec<bool>)> {
    if cfg.sample_size < 8 {
        return Err(Error::InvalidInput(
            "sample_size < 8 requires a minimal solver this build does not provide".into(),
        ));
    }
    if corrs.len() < cfg.sample_size {
        return Err(Error::EstimationFailed(format!(
            "{} correspondences < sample size {}",
            corrs.len(),
            cfg.sample_size
        )));
    }
    if distinct_frames(corrs) < 3 {
        return Err(Error::DegenerateConfiguration(
            "observations span fewer than 3 frames".into(),
        ));
    }

    let n = corrs.len();
    let mut best: Option<(usize, EssentialMatrix, Vec<bool>)> = None;
    let mut needed = cfg.max_iterations;
    let mut index = 0usize;
    while index < needed.min(cfg.max_iterations) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64 + 1);

        // Draw until the sample covers >= 3 frames (the wand is collinear
        // within a frame).
        let mut sample: Option<Vec<usize>> = None;
        for _ in 0..100 {
            let idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, cfg.sample_size).into_vec();
            let picked: Vec<Correspondence> = idx.iter().map(|&i| corrs[i]).collect();
            if distinct_frames(&picked) >= 3 {
                sample = Some(idx);
                break;
            }
        }
        index += 1;
        let Some(idx) = sample else { continue };
        let picked: Vec<Correspondence> = idx.iter().map(|&i| corrs[i]).collect();
        let Ok(hypothesis) = estimate_essential_linear(&picked) else {
            continue;
        };

        let mask = inlier_mask(&hypothesis, corrs, cfg.threshold);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            best = Some((count, hypothesis, mask));
            // Adaptive stopping at the configured confidence. ln_1p keeps
            // the all-outlier limit finite where ln(1 - w^k) underflows.
            let w = count as f64 / n as f64;
            let p_good = w.powi(cfg.sample_size as i32);
            needed = if p_good >= 1.0 - 1e-12 {
                index
            } else {
                let denom = (-p_good).ln_1p();
                let est = (1.0 - cfg.confidence).ln() / denom;
                if est.is_finite() {
                    est.ceil().min(cfg.max_iterations as f64) as usize
                } else {
                    cfg.max_iterations
                }
            };
        }
    }

    let (count, hypothesis, mask) =
        best.ok_or_else(|| Error::EstimationFailed("no valid hypothesis produced".into()))?;
    if count < cfg.min_inliers {
        return Err(Error::EstimationFailed(format!(
            "best hypothesis has {count} inliers, need {}",
            cfg.min_inliers
        )));
    }

    let inliers: Vec<Correspondence> = corrs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect();
    let refined = estimate_essential_linear(&inliers).unwrap_or(hypothesis);
    let final_mask = inlier_mask(&refined, corrs, cfg.threshold);
    let final_count = final_mask.iter().filter(|&&b| b).count();
    if final_count < cfg.min_inliers {
        return Err(Error::EstimationFailed(format!(
            "refined model keeps {final_count} inliers, need {}",
            cfg.min_inliers
        )));
    }
    Ok((refined, final_mask))
}

/// The four (R, +-t) candidates of the SVD decomposition.
pub(crate) fn decompose_candidates(e: &EssentialMatrix) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.0.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Counts correspondences in front of both cameras for each candidate.
///
/// "In front" is the bearing-aligned test `dot(m, X) > 0`, which stays valid
/// for fisheye bearings past 90 degrees where positive-z depth does not.
pub fn cheirality_votes(e: &EssentialMatrix, corrs: &[Correspondence]) -> [usize; 4] {
    let candidates = decompose_candidates(e);
    let mut votes = [0usize; 4];
    for (slot, (rot, t)) in candidates.iter().enumerate() {
        let pose = Pose::from_matrix(rot, *t);
        for c in corrs {
            let rays = [
                ObservationRay {
                    camera: 0,
                    bearing: c.m0,
                    pose: Pose::identity(),
                },
                ObservationRay {
                    camera: 1,
                    bearing: c.m1,
                    pose,
                },
            ];
            let Ok(tri) = triangulate(&rays) else { continue };
            let x0 = tri.point;
            let x1 = pose.transform(&x0);
            if c.m0.vector().dot(&x0) > 0.0 && c.m1.vector().dot(&x1) > 0.0 {
                votes[slot] += 1;
            }
        }
    }
    votes
}

/// Picks the (R, t) candidate with the most cheirality support; `||t|| = 1`.
pub fn decompose_essential(e: &EssentialMatrix, corrs: &[Correspondence]) -> Result<Pose> {
    if corrs.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one correspondence to disambiguate the decomposition".into(),
        ));
    }
    let candidates = decompose_candidates(e);
    let votes = cheirality_votes(e, corrs);
    let best = (0..4).max_by_key(|&i| votes[i]).unwrap();
    if votes.iter().filter(|&&v| v == votes[best]).count() > 1 {
        return Err(Error::AmbiguousDecomposition { votes });
    }
    let (rot, t) = candidates[best];
    Ok(Pose::from_matrix(&rot, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn test_pose() -> Pose {
        Pose::new(Vector3::new(0.2, -0.3, 0.15), Vector3::new(-700.0, 100.0, 200.0))
    }

    /// Exact correspondences of random points in front of both cameras.
    fn exact_correspondences(pose: &Pose, count: usize, rng: &mut impl Rng) -> Vec<Correspondence> {
        let mut out = Vec::new();
        let mut frame = 0;
        while out.len() < count {
            let p = Vector3::new(
                rng.random_range(-400.0..400.0),
                rng.random_range(-400.0..400.0),
                rng.random_range(600.0..1200.0),
            );
            let p1 = pose.transform(&p);
            out.push(Correspondence {
                m0: Bearing::new(p).unwrap(),
                m1: Bearing::new(p1).unwrap(),
                frame,
                marker: Marker::A,
            });
            frame += 1;
        }
        out
    }

    #[test]
    fn exact_correspondence_has_zero_residual() {
        let mut rng = rand::rng();
        let pose = test_pose();
        let e = EssentialMatrix::from_pose(&pose);
        for c in exact_correspondences(&pose, 50, &mut rng) {
            assert!(epipolar_residual(&e, &c.m0, &c.m1) < 1e-12);
        }
    }

    #[test]
    fn residual_is_half_pi_in_worst_case() {
        let mut rng = rand::rng();
        let pose = test_pose();
        let e = EssentialMatrix::from_pose(&pose);
        let c = &exact_correspondences(&pose, 1, &mut rng)[0];
        let worst = Bearing::new(e.0 * c.m0.vector()).unwrap();
        // asin is ill conditioned at 1, so the last digits wobble.
        assert_abs_diff_eq!(
            epipolar_residual(&e, &c.m0, &worst),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-7
        );
    }

    #[test]
    fn residual_tracks_out_of_plane_rotation() {
        let mut rng = rand::rng();
        let pose = test_pose();
        let e = EssentialMatrix::from_pose(&pose);
        for c in exact_correspondences(&pose, 20, &mut rng) {
            let normal = (e.0 * c.m0.vector()).normalize();
            let alpha = 0.01_f64;
            let tilted =
                Bearing::new(c.m1.vector() * alpha.cos() + normal * alpha.sin()).unwrap();
            assert_abs_diff_eq!(
                epipolar_residual(&e, &c.m0, &tilted),
                alpha,
                epsilon = 1e-4
            );
        }
    }

    #[test]
    fn linear_estimate_from_eight_points() {
        let mut rng = rand::rng();
        let pose = test_pose();
        let corrs = exact_correspondences(&pose, 40, &mut rng);
        let e = estimate_essential_linear(&corrs[..8]).unwrap();
        let worst = corrs[8..]
            .iter()
            .map(|c| epipolar_residual(&e, &c.m0, &c.m1))
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "held-out residual {worst}");
    }

    #[test]
    fn linear_estimate_normalization_invariants() {
        let mut rng = rand::rng();
        let pose = test_pose();
        let corrs = exact_correspondences(&pose, 30, &mut rng);
        let e = estimate_essential_linear(&corrs).unwrap();
        assert_abs_diff_eq!(e.0.norm(), 1.0, epsilon = 1e-12);
        assert!(e.0.determinant().abs() < 1e-9);
        let sv = e.0.svd(false, false).singular_values;
        assert!(sv[1] / sv[0] > 1.0 - 1e-9);
        assert!(sv[2] / sv[0] < 1e-9);
    }

    #[test]
    fn linear_estimate_rejects_single_frame() {
        let mut rng = rand::rng();
        let pose = test_pose();
        let mut corrs = exact_correspondences(&pose, 9, &mut rng);
        for c in &mut corrs {
            c.frame = 0;
        }
        assert!(matches!(
            estimate_essential_linear(&corrs),
            Err(Error::DegenerateConfiguration(_))
        ));
        assert!(matches!(
            estimate_essential_linear(&corrs[..3]),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn ransac_keeps_everything_on_clean_data() {
        let mut rng = rand::rng();
        let pose = test_pose();
        let corrs = exact_correspondences(&pose, 60, &mut rng);
        let (_, mask) = estimate_essential_ransac(&corrs, &RansacConfig::default()).unwrap();
        assert!(mask.iter().all(|&b| b));
    }

    #[test]
    fn ransac_is_deterministic_for_a_seed() {
        let mut rng = rand::rng();
        let pose = test_pose();
        let mut corrs = exact_correspondences(&pose, 80, &mut rng);
        // Corrupt a fifth of the matches.
        for c in corrs.iter_mut().step_by(5) {
            c.m1 = Bearing::new(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.1..1.0),
            ))
            .unwrap();
        }
        let cfg = RansacConfig {
            seed: 7,
            ..RansacConfig::default()
        };
        let (e1, m1) = estimate_essential_ransac(&corrs, &cfg).unwrap();
        let (e2, m2) = estimate_essential_ransac(&corrs, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_abs_diff_eq!(e1.0, e2.0, epsilon = 0.0);
    }

    #[test]
    fn ransac_inliers_grow_with_threshold() {
        let mut rng = rand::rng();
        let pose = test_pose();
        let mut corrs = exact_correspondences(&pose, 60, &mut rng);
        for c in corrs.iter_mut() {
            // ~0.1 deg of bearing jitter
            let jitter = Vector3::new(
                rng.random_range(-2e-3..2e-3),
                rng.random_range(-2e-3..2e-3),
                rng.random_range(-2e-3..2e-3),
            );
            c.m1 = Bearing::new(c.m1.vector() + jitter).unwrap();
        }
        let e = EssentialMatrix::from_pose(&pose);
        let narrow = inlier_mask(&e, &corrs, 0.1_f64.to_radians());
        let wide = inlier_mask(&e, &corrs, 1.0_f64.to_radians());
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        assert!(count(&wide) >= count(&narrow));
        assert!(narrow.iter().zip(&wide).all(|(&n, &w)| !n || w));
    }

    #[test]
    fn decomposition_recovers_pose() {
        let mut rng = rand::rng();
        let mut pose = test_pose();
        pose.t /= pose.t.norm();
        let corrs = exact_correspondences(&pose, 50, &mut rng);
        let e = EssentialMatrix::from_pose(&pose);
        let recovered = decompose_essential(&e, &corrs).unwrap();
        assert_abs_diff_eq!(recovered.r, pose.r, epsilon = 1e-6);
        assert_abs_diff_eq!(recovered.t, pose.t, epsilon = 1e-6);
    }

    #[test]
    fn decomposition_of_pure_lateral_translation() {
        let mut rng = rand::rng();
        let pose = Pose::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let corrs = exact_correspondences(&pose, 30, &mut rng);
        let e = EssentialMatrix::from_pose(&pose);
        let recovered = decompose_essential(&e, &corrs).unwrap();
        assert!(recovered.r.norm() < 1e-8);
        assert_abs_diff_eq!(recovered.t, pose.t, epsilon = 1e-8);
    }

    #[test]
    fn wrong_candidates_get_no_cheirality_votes() {
        let mut rng = rand::rng();
        let mut pose = test_pose();
        pose.t /= pose.t.norm();
        let corrs = exact_correspondences(&pose, 25, &mut rng);
        let e = EssentialMatrix::from_pose(&pose);
        let votes = cheirality_votes(&e, &corrs);
        let winner = (0..4).max_by_key(|&i| votes[i]).unwrap();
        assert_eq!(votes[winner], corrs.len());
        // The mirrored-translation twin of the winner fails for every point.
        let twin = winner ^ 1;
        assert_eq!(votes[twin], 0);
    }

    #[test]
    fn skew_operator_identity() {
        let mut rng = rand::rng();
        for _ in 0..50 {
            let t = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let x = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            assert_abs_diff_eq!(skew(&t) * x, t.cross(&x), epsilon = 0.0);
        }
    }
}
