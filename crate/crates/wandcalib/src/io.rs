//! Observation and calibration file formats (JSON).
//!
//! Observations carry camera datasheets, wand geometry and per-frame marker
//! detections; calibrations carry the recovered intrinsics and poses plus
//! run diagnostics. Both schemas serialize with a fixed key order so
//! parse -> serialize -> parse is a fixed point.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, CameraMeta, ModelHint};
use crate::epipolar::Pose;
use crate::error::{Error, Result};
use crate::wand::{MarkerPixels, ObservationSet, WandGeometry, WandObservation};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub width: u32,
    pub height: u32,
    pub pixel_size_mm: [f64; 2],
    pub nominal_focal_mm: f64,
    pub fov_deg: f64,
    pub model_hint: ModelHint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct WandRecord {
    pub L1_mm: f64,
    pub L2_mm: f64,
    pub L_mm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    /// Camera id (not index).
    pub camera: usize,
    pub a: Option<[f64; 2]>,
    pub b: Option<[f64; 2]>,
    pub c: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: usize,
    pub detections: Vec<DetectionRecord>,
}

/// On-disk observation document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationFile {
    pub schema_version: u32,
    pub cameras: Vec<CameraRecord>,
    pub wand: WandRecord,
    pub frames: Vec<FrameRecord>,
}

/// Observations decoded into pipeline types. Cameras are re-indexed
/// `0..n` in ascending id order; `camera_ids[i]` maps back to the file id.
#[derive(Debug, Clone)]
pub struct LoadedObservations {
    pub metas: Vec<CameraMeta>,
    pub wand: WandGeometry,
    pub observations: ObservationSet,
    pub camera_ids: Vec<usize>,
}

impl ObservationFile {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Parse("observation file lists no cameras".into()));
        }
        let mut ids: Vec<usize> = self.cameras.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.cameras.len() {
            return Err(Error::Parse("camera ids must be unique".into()));
        }
        let mut last_frame: Option<usize> = None;
        for f in &self.frames {
            if let Some(prev) = last_frame {
                if f.id <= prev {
                    return Err(Error::Parse(format!(
                        "frame ids must be unique and ascending ({} follows {prev})",
                        f.id
                    )));
                }
            }
            last_frame = Some(f.id);
            for d in &f.detections {
                if !ids.binary_search(&d.camera).is_ok() {
                    return Err(Error::Parse(format!(
                        "frame {} references unknown camera id {}",
                        f.id, d.camera
                    )));
                }
                for px in [d.a, d.b, d.c].into_iter().flatten() {
                    if !px[0].is_finite() || !px[1].is_finite() {
                        return Err(Error::Parse(format!(
                            "non-finite pixel value in frame {}",
                            f.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Decodes into pipeline types, warning (not rejecting) on pixels that
    /// stray outside the nominal image bounds.
    pub fn decode(&self) -> Result<LoadedObservations> {
        self.validate()?;
        let mut cameras = self.cameras.clone();
        cameras.sort_by_key(|c| c.id);
        let index_of: BTreeMap<usize, usize> =
            cameras.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

        let metas: Vec<CameraMeta> = cameras
            .iter()
            .enumerate()
            .map(|(i, c)| CameraMeta {
                id: i,
                width: c.width,
                height: c.height,
                pixel_size: c.pixel_size_mm,
                nominal_focal: c.nominal_focal_mm,
                fov: c.fov_deg.to_radians(),
                model_hint: c.model_hint,
            })
            .collect();
        for meta in &metas {
            meta.validate()?;
        }

        let wand = WandGeometry {
            l1: self.wand.L1_mm,
            l2: self.wand.L2_mm,
            l: self.wand.L_mm,
        };
        wand.validate()?;

        let mut flat = Vec::new();
        for f in &self.frames {
            for d in &f.detections {
                let cam = index_of[&d.camera];
                let meta = &cameras[cam];
                let to_px = |v: Option<[f64; 2]>| v.map(|p| Vector2::new(p[0], p[1]));
                let pixels = MarkerPixels {
                    a: to_px(d.a),
                    b: to_px(d.b),
                    c: to_px(d.c),
                };
                for px in [pixels.a, pixels.b, pixels.c].into_iter().flatten() {
                    if px.x < 0.0
                        || px.x > meta.width as f64
                        || px.y < 0.0
                        || px.y > meta.height as f64
                    {
                        log::warn!(
                            "frame {}, camera {}: pixel ({:.1}, {:.1}) outside {}x{}",
                            f.id,
                            d.camera,
                            px.x,
                            px.y,
                            meta.width,
                            meta.height
                        );
                    }
                }
                flat.push(WandObservation {
                    frame: f.id,
                    camera: cam,
                    pixels,
                });
            }
        }
        let observations = ObservationSet::from_observations(metas.len(), &flat)?;
        Ok(LoadedObservations {
            metas,
            wand,
            observations,
            camera_ids: cameras.iter().map(|c| c.id).collect(),
        })
    }
}

/// Encodes pipeline observations into the file schema. `camera_ids[i]` is
/// the file id for camera index `i`.
pub fn encode_observations(
    metas: &[CameraMeta],
    camera_ids: &[usize],
    wand: &WandGeometry,
    obs: &ObservationSet,
) -> ObservationFile {
    let cameras = metas
        .iter()
        .zip(camera_ids)
        .map(|(m, &id)| CameraRecord {
            id,
            width: m.width,
            height: m.height,
            pixel_size_mm: m.pixel_size,
            nominal_focal_mm: m.nominal_focal,
            fov_deg: m.fov.to_degrees(),
            model_hint: m.model_hint,
        })
        .collect();
    let frames = obs
        .frames
        .iter()
        .map(|f| FrameRecord {
            id: f.frame,
            detections: f
                .detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.a.is_some() || d.b.is_some() || d.c.is_some())
                .map(|(cam, d)| DetectionRecord {
                    camera: camera_ids[cam],
                    a: d.a.map(|p| [p.x, p.y]),
                    b: d.b.map(|p| [p.x, p.y]),
                    c: d.c.map(|p| [p.x, p.y]),
                })
                .collect(),
        })
        .collect();
    ObservationFile {
        schema_version: SCHEMA_VERSION,
        cameras,
        wand: WandRecord {
            L1_mm: wand.l1,
            L2_mm: wand.l2,
            L_mm: wand.l,
        },
        frames,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntrinsicsRecord {
    pub k: [f64; 5],
    pub mu: f64,
    pub mv: f64,
    pub u0: f64,
    pub v0: f64,
    pub theta_max_rad: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rodrigues: [f64; 3],
    pub t_mm: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibratedCamera {
    pub id: usize,
    pub intrinsics: IntrinsicsRecord,
    /// Pose relative to the reference camera.
    pub pose: PoseRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub e_rms_px: Vec<f64>,
    pub frames_used: usize,
    pub frames_rejected: usize,
    /// Echo of the configuration the run used.
    pub config: serde_json::Value,
    /// Named departures from the plain parameterization (e.g. the pinned
    /// pixel pitch gauge).
    pub deviations: Vec<String>,
}

/// On-disk calibration document; doubles as the ground-truth format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub schema_version: u32,
    pub reference_camera: usize,
    pub cameras: Vec<CalibratedCamera>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl CalibrationFile {
    pub fn from_results(
        camera_ids: &[usize],
        reference_index: usize,
        intrinsics: &[CameraIntrinsics],
        poses: &[Pose],
        diagnostics: Option<Diagnostics>,
    ) -> Self {
        let cameras = camera_ids
            .iter()
            .zip(intrinsics.iter().zip(poses))
            .map(|(&id, (intr, pose))| CalibratedCamera {
                id,
                intrinsics: IntrinsicsRecord {
                    k: intr.k,
                    mu: intr.mu,
                    mv: intr.mv,
                    u0: intr.u0,
                    v0: intr.v0,
                    theta_max_rad: intr.theta_max,
                },
                pose: PoseRecord {
                    rodrigues: [pose.r.x, pose.r.y, pose.r.z],
                    t_mm: [pose.t.x, pose.t.y, pose.t.z],
                },
            })
            .collect();
        CalibrationFile {
            schema_version: SCHEMA_VERSION,
            reference_camera: camera_ids[reference_index],
            cameras,
            diagnostics,
        }
    }

    /// Decodes to pipeline types, sorted by camera id.
    pub fn decode(&self) -> Result<(Vec<usize>, Vec<CameraIntrinsics>, Vec<Pose>)> {
        if self.cameras.is_empty() {
            return Err(Error::Parse("calibration file lists no cameras".into()));
        }
        let mut cams = self.cameras.clone();
        cams.sort_by_key(|c| c.id);
        let ids: Vec<usize> = cams.iter().map(|c| c.id).collect();
        let mut dedup = ids.clone();
        dedup.dedup();
        if dedup.len() != ids.len() {
            return Err(Error::Parse("camera ids must be unique".into()));
        }
        let intr = cams
            .iter()
            .map(|c| CameraIntrinsics {
                k: c.intrinsics.k,
                mu: c.intrinsics.mu,
                mv: c.intrinsics.mv,
                u0: c.intrinsics.u0,
                v0: c.intrinsics.v0,
                theta_max: c.intrinsics.theta_max_rad,
            })
            .collect();
        let poses = cams
            .iter()
            .map(|c| {
                Pose::new(
                    Vector3::from(c.pose.rodrigues),
                    Vector3::from(c.pose.t_mm),
                )
            })
            .collect();
        Ok((ids, intr, poses))
    }
}

fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse(format!("line {}, column {}: {e}", e.line(), e.column()))
}

pub fn read_observations(path: &Path) -> Result<LoadedObservations> {
    let text = std::fs::read_to_string(path)?;
    let file: ObservationFile = serde_json::from_str(&text).map_err(parse_error)?;
    file.decode()
}

pub fn write_observations(path: &Path, file: &ObservationFile) -> Result<()> {
    std::fs::write(path, to_canonical_json(file)?)?;
    Ok(())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationFile> {
    let text = std::fs::read_to_string(path)?;
    let file: CalibrationFile = serde_json::from_str(&text).map_err(parse_error)?;
    file.decode()?;
    Ok(file)
}

pub fn write_calibration(path: &Path, file: &CalibrationFile) -> Result<()> {
    std::fs::write(path, to_canonical_json(file)?)?;
    Ok(())
}

/// Pretty JSON with struct-ordered keys and round-trip-exact floats.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, paper_rig};

    fn sample_file() -> ObservationFile {
        let scenario = paper_rig(2, 8, 0.5, 21);
        let (obs, _) = generate(&scenario).unwrap();
        encode_observations(&scenario.metas, &[0, 1], &scenario.wand, &obs)
    }

    #[test]
    fn observation_round_trip_is_a_fixed_point() {
        let file = sample_file();
        let one = to_canonical_json(&file).unwrap();
        let parsed: ObservationFile = serde_json::from_str(&one).unwrap();
        let two = to_canonical_json(&parsed).unwrap();
        assert_eq!(one, two);
        parsed.decode().unwrap();
    }

    #[test]
    fn decode_matches_encode() {
        let scenario = paper_rig(2, 6, 0.0, 33);
        let (obs, _) = generate(&scenario).unwrap();
        let file = encode_observations(&scenario.metas, &[0, 1], &scenario.wand, &obs);
        let loaded = file.decode().unwrap();
        assert_eq!(loaded.observations, obs);
        assert_eq!(loaded.camera_ids, vec![0, 1]);
        assert!((loaded.wand.l - 600.0).abs() < 1e-12);
    }

    #[test]
    fn non_ascending_frames_rejected() {
        let mut file = sample_file();
        file.frames.swap(0, 1);
        assert!(matches!(file.decode(), Err(Error::Parse(_))));
    }

    #[test]
    fn duplicate_camera_ids_rejected() {
        let mut file = sample_file();
        file.cameras[1].id = file.cameras[0].id;
        assert!(matches!(file.decode(), Err(Error::Parse(_))));
    }

    #[test]
    fn unknown_detection_camera_rejected() {
        let mut file = sample_file();
        file.frames[0].detections[0].camera = 99;
        assert!(matches!(file.decode(), Err(Error::Parse(_))));
    }

    #[test]
    fn calibration_round_trip_is_a_fixed_point() {
        let scenario = paper_rig(3, 1, 0.0, 2);
        let file = CalibrationFile::from_results(
            &[0, 1, 2],
            0,
            &scenario.truth_intrinsics,
            &scenario.truth_poses,
            Some(Diagnostics {
                e_rms_px: vec![0.1, 0.2, 0.3],
                frames_used: 280,
                frames_rejected: 20,
                config: serde_json::json!({"reference": 0}),
                deviations: vec!["gauge_fix_mu".into()],
            }),
        );
        let one = to_canonical_json(&file).unwrap();
        let parsed: CalibrationFile = serde_json::from_str(&one).unwrap();
        let two = to_canonical_json(&parsed).unwrap();
        assert_eq!(one, two);
        let (ids, intr, poses) = parsed.decode().unwrap();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(intr.len(), 3);
        assert!((poses[0].t.norm()) < 1e-15);
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = serde_json::from_str::<ObservationFile>("{ nope }").unwrap_err();
        let wrapped = parse_error(err);
        match wrapped {
            Error::Parse(msg) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
