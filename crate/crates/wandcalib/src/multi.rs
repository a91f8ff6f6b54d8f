//! Multi-camera calibration via the vision graph.
//!
//! Cameras are vertices of a weighted undirected graph; an edge carries
//! weight `1 / M_ij` where `M_ij` counts markers the two cameras co-observe.
//! Pairwise calibrations run only along the shortest-path tree from the
//! reference camera, their poses are chained to the reference frame, and one
//! global bundle adjustment over all co-observations finishes the job.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::ba::{wand_pose_from_markers, BundleProblem};
use crate::camera::{unproject, CameraIntrinsics, CameraMeta};
use crate::epipolar::Pose;
use crate::error::{Error, Result};
use crate::optim::{sparse_lm_minimize, LmConfig, LmReport};
use crate::pair::{calibrate_pair, PairConfig};
use crate::triangulate::{triangulate, ObservationRay};
use crate::wand::{FrameObservations, Marker, ObservationSet, WandGeometry};

/// Camera connectivity weighted by inverse co-observation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionGraph {
    pub camera_count: usize,
    /// `(i, j, M_ij)` with `i < j` and `M_ij > 0`.
    pub edges: Vec<(usize, usize, usize)>,
}

impl VisionGraph {
    /// Co-observation count for an (unordered) camera pair, 0 if unlinked.
    pub fn shared_markers(&self, i: usize, j: usize) -> usize {
        let key = (i.min(j), i.max(j));
        self.edges
            .iter()
            .find(|&&(a, b, _)| (a, b) == key)
            .map(|&(_, _, m)| m)
            .unwrap_or(0)
    }

    /// Edge weight `1 / M_ij`; infinite when the cameras share nothing.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        match self.shared_markers(i, j) {
            0 => f64::INFINITY,
            m => 1.0 / m as f64,
        }
    }
}

/// Counts, per camera pair, the markers co-observed across all frames
/// (one marker instance per frame per pair).
pub fn build_vision_graph(obs: &ObservationSet) -> Result<VisionGraph> {
    let n = obs.camera_count;
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "vision graph needs >= 2 cameras, got {n}"
        )));
    }
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for frame in &obs.frames {
        for i in 0..n {
            for j in i + 1..n {
                let shared = Marker::ALL
                    .iter()
                    .filter(|&&m| {
                        frame.detections[i].get(m).is_some() && frame.detections[j].get(m).is_some()
                    })
                    .count();
                if shared > 0 {
                    *counts.entry((i, j)).or_insert(0) += shared;
                }
            }
        }
    }
    Ok(VisionGraph {
        camera_count: n,
        edges: counts.into_iter().map(|((i, j), m)| (i, j, m)).collect(),
    })
}

/// Shortest-path tree from a reference camera.
#[derive(Debug, Clone)]
pub struct PathTree {
    pub reference: usize,
    /// Parent of each camera in the tree; `None` for the reference.
    pub parent: Vec<Option<usize>>,
    /// Accumulated path weight from the reference.
    pub distance: Vec<f64>,
}

impl PathTree {
    /// Vertices from the reference to `camera`, inclusive.
    pub fn path_to(&self, camera: usize) -> Vec<usize> {
        let mut path = vec![camera];
        let mut v = camera;
        while let Some(p) = self.parent[v] {
            path.push(p);
            v = p;
        }
        path.reverse();
        path
    }
}

/// Dijkstra over the vision graph. Ties between equal-weight paths resolve
/// toward smaller vertex ids (vertices settle in id order within equal
/// distances, and relaxations only improve on strictly smaller weights).
pub fn shortest_paths(graph: &VisionGraph, reference: usize) -> Result<PathTree> {
    let n = graph.camera_count;
    if reference >= n {
        return Err(Error::InvalidInput(format!(
            "reference camera {reference} out of range for {n} cameras"
        )));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![None; n];
    let mut settled = vec![false; n];
    dist[reference] = 0.0;

    for _ in 0..n {
        let mut next: Option<usize> = None;
        for v in 0..n {
            if settled[v] || dist[v].is_infinite() {
                continue;
            }
            if next.is_none_or(|u| dist[v] < dist[u]) {
                next = Some(v);
            }
        }
        let Some(u) = next else { break };
        settled[u] = true;
        for &(a, b, m) in &graph.edges {
            for (from, to) in [(a, b), (b, a)] {
                if from != u || settled[to] {
                    continue;
                }
                let cand = dist[u] + 1.0 / m as f64;
                if cand < dist[to] {
                    dist[to] = cand;
                    parent[to] = Some(u);
                }
            }
        }
    }

    let unreachable: Vec<usize> = (0..n).filter(|&v| dist[v].is_infinite()).collect();
    if !unreachable.is_empty() {
        return Err(Error::UnreachableCamera {
            reference,
            unreachable,
        });
    }
    Ok(PathTree {
        reference,
        parent,
        distance: dist,
    })
}

/// Chains `i -> j` and `j -> k` into `i -> k`:
/// `R_ik = R_jk R_ij`, `T_ik = R_jk T_ij + T_jk`.
pub fn chain_transform(pose_ij: &Pose, pose_jk: &Pose) -> Pose {
    let r_jk = pose_jk.rotation();
    let rot = r_jk * pose_ij.rotation();
    Pose::from_matrix(&rot, r_jk * pose_ij.t + pose_jk.t)
}

/// Policy for the multi-camera pipeline.
#[derive(Debug, Clone)]
pub struct MultiConfig {
    /// Camera fixed at the identity pose.
    pub reference: usize,
    pub pair: PairConfig,
    pub bundle_lm: LmConfig,
    /// Cameras that must see the whole wand for a frame to enter the global
    /// bundle adjustment.
    pub min_full_views: usize,
    pub outlier_threshold: f64,
}

impl Default for MultiConfig {
    fn default() -> Self {
        MultiConfig {
            reference: 0,
            pair: PairConfig::default(),
            bundle_lm: LmConfig::default(),
            min_full_views: 2,
            outlier_threshold: 0.01,
        }
    }
}

/// Result of a multi-camera calibration.
#[derive(Debug, Clone)]
pub struct MultiCalibration {
    pub intrinsics: Vec<CameraIntrinsics>,
    /// Pose of every camera relative to the reference; the reference entry
    /// is exactly the identity.
    pub poses: Vec<Pose>,
    pub e_rms: Vec<f64>,
    /// RMS wand-length error (mm) of the final reconstructions.
    pub d_rms: f64,
    pub graph: VisionGraph,
    /// Shortest path from the reference to each camera.
    pub paths: Vec<Vec<usize>>,
    pub frames_used: Vec<usize>,
    pub frames_rejected: Vec<usize>,
    pub bundle_report: LmReport,
    /// Dimension of the camera parameter vector (`15m + 9`).
    pub camera_param_dim: usize,
}

/// Re-expresses the camera poses relative to a different camera.
pub fn rebase(calib: &MultiCalibration, new_reference: usize) -> Vec<Pose> {
    let to_new = calib.poses[new_reference].inverse();
    calib
        .poses
        .iter()
        .map(|p| chain_transform(&to_new, p))
        .collect()
}

/// Frames where at least `min_full_views` cameras see all three markers.
fn global_ba_frames(obs: &ObservationSet, min_full_views: usize) -> ObservationSet {
    ObservationSet {
        camera_count: obs.camera_count,
        frames: obs
            .frames
            .iter()
            .filter(|f| f.fully_visible_cameras().len() >= min_full_views)
            .cloned()
            .collect(),
    }
}

/// Triangulates one marker from every camera that sees it in `frame`.
fn nview_marker(
    intrinsics: &[CameraIntrinsics],
    poses: &[Pose],
    frame: &FrameObservations,
    marker: Marker,
) -> Result<Vector3<f64>> {
    let mut rays = Vec::new();
    for (c, det) in frame.detections.iter().enumerate() {
        let Some(px) = det.get(marker) else { continue };
        let Ok(bearing) = unproject(&intrinsics[c], &px) else {
            continue;
        };
        rays.push(ObservationRay {
            camera: c,
            bearing,
            pose: poses[c],
        });
    }
    if rays.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "marker seen by {} cameras in frame {}; need 2",
            rays.len(),
            frame.frame
        )));
    }
    Ok(triangulate(&rays)?.point)
}

/// Full multi-camera pipeline.
pub fn calibrate_multi(
    obs: &ObservationSet,
    wand: &WandGeometry,
    metas: &[CameraMeta],
    cfg: &MultiConfig,
) -> Result<MultiCalibration> {
    wand.validate()?;
    let n = metas.len();
    if n < 2 || obs.camera_count != n {
        return Err(Error::InvalidInput(format!(
            "multi calibration expects matching metas and observations for >= 2 cameras (got {n})"
        )));
    }

    let graph = build_vision_graph(obs)?;
    let tree = shortest_paths(&graph, cfg.reference)?;

    // Pairwise calibration along tree edges only.
    let mut edge_results: BTreeMap<(usize, usize), crate::pair::PairCalibration> = BTreeMap::new();
    for c in 0..n {
        let Some(p) = tree.parent[c] else { continue };
        let pair_obs = obs.pair_subset(p, c);
        let pair_metas = [metas[p].clone(), metas[c].clone()];
        let result = calibrate_pair(&pair_obs, wand, &pair_metas, &cfg.pair).map_err(|e| {
            Error::CalibrationFailed {
                stage: format!("pairwise {p}-{c}"),
                reason: e.to_string(),
            }
        })?;
        edge_results.insert((p, c), result);
    }

    // Chain poses out from the reference, in order of tree distance so
    // parents are always resolved first.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| tree.distance[a].partial_cmp(&tree.distance[b]).unwrap());
    let mut poses = vec![Pose::identity(); n];
    for &c in &order {
        let Some(p) = tree.parent[c] else { continue };
        let pairwise = &edge_results[&(p, c)].pose;
        poses[c] = chain_transform(&poses[p], pairwise);
    }

    // Intrinsics come from the incident tree edge with the most shared
    // markers; ties go to the smaller partner id.
    let mut intrinsics: Vec<CameraIntrinsics> = Vec::with_capacity(n);
    for c in 0..n {
        let mut best: Option<(usize, usize, CameraIntrinsics)> = None;
        for (&(a, b), result) in &edge_results {
            let (partner, intr) = if a == c {
                (b, result.intrinsics[0])
            } else if b == c {
                (a, result.intrinsics[1])
            } else {
                continue;
            };
            let m = graph.shared_markers(a, b);
            let better = match best {
                None => true,
                Some((bm, bp, _)) => m > bm || (m == bm && partner < bp),
            };
            if better {
                best = Some((m, partner, intr));
            }
        }
        let (_, _, intr) = best.ok_or_else(|| Error::CalibrationFailed {
            stage: "intrinsic seeding".into(),
            reason: format!("camera {c} lies on no calibrated edge"),
        })?;
        intrinsics.push(intr);
    }

    // Global bundle adjustment over frames with enough full views.
    let candidates = global_ba_frames(obs, cfg.min_full_views);
    if candidates.frames.is_empty() {
        return Err(Error::InsufficientFrames { got: 0, need: 1 });
    }
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    let mut wand_poses = Vec::new();
    for frame in &candidates.frames {
        let reconstruct = || -> Result<(Vector3<f64>, Vector3<f64>)> {
            Ok((
                nview_marker(&intrinsics, &poses, frame, Marker::A)?,
                nview_marker(&intrinsics, &poses, frame, Marker::C)?,
            ))
        };
        match reconstruct() {
            Ok((a, c)) => {
                let err = ((wand.l - (a - c).norm()) / wand.l).abs();
                if err > cfg.outlier_threshold {
                    rejected.push(frame.frame);
                } else {
                    kept.push(frame.frame);
                    wand_poses.push(wand_pose_from_markers(&a, &c)?);
                }
            }
            Err(_) => rejected.push(frame.frame),
        }
    }
    if kept.is_empty() {
        return Err(Error::CalibrationFailed {
            stage: "global outlier rejection".into(),
            reason: "every candidate frame exceeded the wand-length threshold".into(),
        });
    }
    let ba_obs = candidates.retain_frames(&kept);

    let problem = BundleProblem::new(
        &intrinsics,
        &poses,
        cfg.reference,
        *wand,
        &ba_obs,
        cfg.pair.pixel_pitch,
    )?;
    let x0 = problem.initial_state(&wand_poses)?;
    let (x, bundle_report) = sparse_lm_minimize(&problem, &x0, &cfg.bundle_lm)?;
    let e_rms = problem.rms_per_camera(&x)?;
    let (intr_final, poses_final, _) = problem.unpack_state(&x);

    // Final wand-length statistics through the refined parameters.
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for frame in &ba_obs.frames {
        if let (Ok(a), Ok(c)) = (
            nview_marker(&intr_final, &poses_final, frame, Marker::A),
            nview_marker(&intr_final, &poses_final, frame, Marker::C),
        ) {
            let e = wand.l - (a - c).norm();
            sq_sum += e * e;
            count += 1;
        }
    }
    let d_rms = if count == 0 {
        f64::NAN
    } else {
        (sq_sum / count as f64).sqrt()
    };

    Ok(MultiCalibration {
        intrinsics: intr_final,
        poses: poses_final,
        e_rms,
        d_rms,
        paths: (0..n).map(|c| tree.path_to(c)).collect(),
        graph,
        frames_used: kept,
        frames_rejected: rejected,
        bundle_report,
        camera_param_dim: problem.camera_dim(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wand::MarkerPixels;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector2;

    fn graph_from(edges: &[(usize, usize, usize)], n: usize) -> VisionGraph {
        VisionGraph {
            camera_count: n,
            edges: edges.to_vec(),
        }
    }

    #[test]
    fn co_observation_counting() {
        // Two cameras sharing 2 full frames and one partial frame.
        let full = MarkerPixels {
            a: Some(Vector2::zeros()),
            b: Some(Vector2::zeros()),
            c: Some(Vector2::zeros()),
        };
        let partial = MarkerPixels {
            a: Some(Vector2::zeros()),
            b: None,
            c: None,
        };
        let empty = MarkerPixels::default();
        let frames = vec![
            FrameObservations {
                frame: 0,
                detections: vec![full, full, empty],
            },
            FrameObservations {
                frame: 1,
                detections: vec![full, full, empty],
            },
            FrameObservations {
                frame: 2,
                detections: vec![full, partial, empty],
            },
        ];
        let obs = ObservationSet {
            camera_count: 3,
            frames,
        };
        let g = build_vision_graph(&obs).unwrap();
        assert_eq!(g.shared_markers(0, 1), 7);
        assert_eq!(g.shared_markers(0, 2), 0);
        assert_eq!(g.shared_markers(1, 2), 0);
        assert_abs_diff_eq!(g.weight(0, 1), 1.0 / 7.0, epsilon = 1e-15);
        assert!(g.weight(0, 2).is_infinite());
    }

    #[test]
    fn no_edge_for_disjoint_cameras_and_unreachable_error() {
        let g = graph_from(&[(0, 1, 900), (1, 2, 400)], 4);
        assert_eq!(g.shared_markers(0, 3), 0);
        let err = shortest_paths(&g, 0).unwrap_err();
        match err {
            Error::UnreachableCamera { unreachable, .. } => assert_eq!(unreachable, vec![3]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn weak_direct_edge_loses_to_two_strong_hops() {
        // Direct 0-2 overlap is tiny; 0-1 and 1-2 are rich.
        let g = graph_from(&[(0, 1, 900), (1, 2, 800), (0, 2, 3)], 3);
        let tree = shortest_paths(&g, 0).unwrap();
        assert_eq!(tree.path_to(2), vec![0, 1, 2]);
    }

    #[test]
    fn equal_weights_prefer_direct_edges() {
        let g = graph_from(&[(0, 1, 100), (0, 2, 100), (1, 2, 100)], 3);
        let tree = shortest_paths(&g, 0).unwrap();
        assert_eq!(tree.path_to(1), vec![0, 1]);
        assert_eq!(tree.path_to(2), vec![0, 2]);
    }

    #[test]
    fn chain_graph_visits_every_vertex() {
        let g = graph_from(&[(0, 1, 10), (1, 2, 10), (2, 3, 10)], 4);
        let tree = shortest_paths(&g, 0).unwrap();
        assert_eq!(tree.path_to(3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn dijkstra_is_scale_invariant() {
        let edges = [(0, 1, 900), (1, 2, 800), (0, 2, 3), (2, 3, 50), (1, 3, 20)];
        let g1 = graph_from(&edges, 4);
        // Scaling all counts scales all weights by the same factor.
        let scaled: Vec<_> = edges.iter().map(|&(a, b, m)| (a, b, m * 7)).collect();
        let g2 = graph_from(&scaled, 4);
        let t1 = shortest_paths(&g1, 0).unwrap();
        let t2 = shortest_paths(&g2, 0).unwrap();
        for v in 0..4 {
            assert_eq!(t1.path_to(v), t2.path_to(v));
        }
    }

    #[test]
    fn chain_transform_identity_and_translations() {
        let p = Pose::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(4.0, 5.0, 6.0));
        let chained = chain_transform(&p, &Pose::identity());
        assert_abs_diff_eq!(chained.r, p.r, epsilon = 1e-12);
        assert_abs_diff_eq!(chained.t, p.t, epsilon = 1e-12);

        let a = Pose::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let b = Pose::new(Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0));
        let ab = chain_transform(&a, &b);
        assert_abs_diff_eq!(ab.t, Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn chain_transform_reproduces_ground_truth_composition() {
        use crate::so3::rotation_from_euler_deg;
        let r01 = rotation_from_euler_deg(&Vector3::new(28.65, 28.65, 28.65));
        let r02 = rotation_from_euler_deg(&Vector3::new(57.3, 57.3, 57.3));
        let t01 = Vector3::new(-700.0, 100.0, 200.0);
        let t02 = Vector3::new(-1200.0, -200.0, 700.0);
        let p01 = Pose::from_matrix(&r01, t01);
        // Derive 1 -> 2 from the ground truth, then chain it back.
        let r12 = r02 * r01.transpose();
        let p12 = Pose::from_matrix(&r12, t02 - r12 * t01);
        let chained = chain_transform(&p01, &p12);
        assert_abs_diff_eq!(chained.rotation(), r02, epsilon = 1e-12);
        assert_abs_diff_eq!(chained.t, t02, epsilon = 1e-9);
    }

    #[test]
    fn chain_transform_is_associative() {
        let p01 = Pose::new(Vector3::new(0.3, -0.1, 0.2), Vector3::new(10.0, -5.0, 3.0));
        let p12 = Pose::new(Vector3::new(-0.2, 0.4, 0.1), Vector3::new(-7.0, 2.0, 9.0));
        let p23 = Pose::new(Vector3::new(0.1, 0.1, -0.3), Vector3::new(1.0, 8.0, -4.0));
        let left = chain_transform(&chain_transform(&p01, &p12), &p23);
        let right = chain_transform(&p01, &chain_transform(&p12, &p23));
        assert_abs_diff_eq!(left.rotation(), right.rotation(), epsilon = 1e-12);
        assert_abs_diff_eq!(left.t, right.t, epsilon = 1e-12);
    }
}
