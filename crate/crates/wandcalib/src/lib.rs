//! Wand-based calibration of multiple fisheye, conventional and mixed
//! camera rigs.
//!
//! A freely moved rigid wand with three collinear markers, observed as pixel
//! coordinates by two or more cameras, is enough to recover every camera's
//! intrinsics (including radial distortion) and the rig's relative poses in
//! metric units. The generic radial projection model makes one pipeline
//! serve conventional lenses and 185-degree fisheyes alike.
//!
//! Pipeline for a camera pair: seed the intrinsics from datasheet values,
//! initialize the relative pose from the essential matrix of unprojected
//! bearings (RANSAC over the 8-point solver), rescale the translation with
//! the known wand length, refine against the marker spacings, then bundle
//! adjust everything including per-frame wand poses. Rigs with more cameras
//! route pairwise calibrations along the shortest paths of a vision graph
//! and finish with a global bundle adjustment.

pub mod ba;
pub mod camera;
pub mod epipolar;
pub mod error;
pub mod io;
pub mod multi;
pub mod optim;
pub mod pair;
pub mod so3;
pub mod synth;
pub mod triangulate;
pub mod wand;

pub use ba::{BundleProblem, PixelPitchMode};
pub use camera::{
    default_intrinsics, fit_initial_k, project, unproject, Bearing, CameraIntrinsics, CameraMeta,
    ModelHint, Projection,
};
pub use epipolar::{
    decompose_essential, epipolar_residual, estimate_essential_linear, estimate_essential_ransac,
    Correspondence, EssentialMatrix, Pose, RansacConfig,
};
pub use error::{Error, Result};
pub use multi::{
    build_vision_graph, calibrate_multi, chain_transform, shortest_paths, MultiCalibration,
    MultiConfig, PathTree, VisionGraph,
};
pub use optim::{lm_minimize, sparse_lm_minimize, LmConfig, LmReport, Termination};
pub use pair::{calibrate_pair, PairCalibration, PairConfig};
pub use synth::{generate, MetricsReport, SimScenario, VisibilityPolicy};
pub use triangulate::{recover_scale, triangulate, ObservationRay, TriangulatedPoint};
pub use wand::{Marker, ObservationSet, WandGeometry, WandObservation, WandPose};
