//! Wand geometry and observation containers.
//!
//! The calibration object is a rigid 1D wand with three collinear markers
//! A, B, C at known spacings. A wand placement is encoded minimally as the
//! position of A plus two spherical direction angles, which makes
//! collinearity and the marker spacings hold by construction.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three wand markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marker {
    A,
    B,
    C,
}

impl Marker {
    pub const ALL: [Marker; 3] = [Marker::A, Marker::B, Marker::C];
}

/// Known marker spacings (mm): `||A-B|| = l1`, `||B-C|| = l2`, `||A-C|| = l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WandGeometry {
    pub l1: f64,
    pub l2: f64,
    pub l: f64,
}

impl WandGeometry {
    /// Spacing of a marker from A along the wand direction.
    pub fn offset(&self, marker: Marker) -> f64 {
        match marker {
            Marker::A => 0.0,
            Marker::B => self.l1,
            Marker::C => self.l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l1 > 0.0 && self.l2 > 0.0 && self.l > 0.0) {
            return Err(Error::InvalidInput("wand lengths must be positive".into()));
        }
        if ((self.l1 + self.l2) - self.l).abs() > 1e-6 * self.l {
            return Err(Error::InvalidInput(format!(
                "wand lengths inconsistent: l1 + l2 = {} but l = {}",
                self.l1 + self.l2,
                self.l
            )));
        }
        Ok(())
    }
}

/// Pixel positions of the three markers seen by one camera in one frame.
/// A missing marker (out of frame, not detected) is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MarkerPixels {
    pub a: Option<Vector2<f64>>,
    pub b: Option<Vector2<f64>>,
    pub c: Option<Vector2<f64>>,
}

impl MarkerPixels {
    pub fn get(&self, marker: Marker) -> Option<Vector2<f64>> {
        match marker {
            Marker::A => self.a,
            Marker::B => self.b,
            Marker::C => self.c,
        }
    }

    pub fn all_present(&self) -> bool {
        self.a.is_some() && self.b.is_some() && self.c.is_some()
    }
}

/// Per frame, per camera pixel observation of the wand markers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WandObservation {
    pub frame: usize,
    pub camera: usize,
    pub pixels: MarkerPixels,
}

/// One frame's detections across all cameras. `detections[i]` belongs to
/// camera index `i`; cameras that saw nothing hold an empty entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservations {
    pub frame: usize,
    pub detections: Vec<MarkerPixels>,
}

impl FrameObservations {
    /// Camera indices that see all three markers this frame.
    pub fn fully_visible_cameras(&self) -> Vec<usize> {
        (0..self.detections.len())
            .filter(|&c| self.detections[c].all_present())
            .collect()
    }
}

/// Frame-indexed observations for a fixed set of cameras `0..camera_count`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    pub camera_count: usize,
    /// Sorted by frame id.
    pub frames: Vec<FrameObservations>,
}

impl ObservationSet {
    /// Groups flat observations by frame. Frames come out sorted by id;
    /// duplicate (frame, camera) records are rejected.
    pub fn from_observations(camera_count: usize, obs: &[WandObservation]) -> Result<Self> {
        let mut frames: Vec<FrameObservations> = Vec::new();
        let mut sorted: Vec<&WandObservation> = obs.iter().collect();
        sorted.sort_by_key(|o| (o.frame, o.camera));
        for o in sorted {
            if o.camera >= camera_count {
                return Err(Error::InvalidInput(format!(
                    "camera index {} out of range for {} cameras",
                    o.camera, camera_count
                )));
            }
            if frames.last().map(|f| f.frame) != Some(o.frame) {
                frames.push(FrameObservations {
                    frame: o.frame,
                    detections: vec![MarkerPixels::default(); camera_count],
                });
            }
            let slot = &mut frames.last_mut().unwrap().detections[o.camera];
            if slot.a.is_some() || slot.b.is_some() || slot.c.is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate observation for frame {} camera {}",
                    o.frame, o.camera
                )));
            }
            *slot = o.pixels;
        }
        Ok(ObservationSet {
            camera_count,
            frames,
        })
    }

    /// Restriction to two cameras, keeping only frames where both see all
    /// three markers. Detections are re-indexed to cameras 0 and 1.
    pub fn pair_subset(&self, cam_i: usize, cam_j: usize) -> ObservationSet {
        let frames = self
            .frames
            .iter()
            .filter(|f| f.detections[cam_i].all_present() && f.detections[cam_j].all_present())
            .map(|f| FrameObservations {
                frame: f.frame,
                detections: vec![f.detections[cam_i], f.detections[cam_j]],
            })
            .collect();
        ObservationSet {
            camera_count: 2,
            frames,
        }
    }

    /// Keeps the frames whose ids appear in `keep` (sorted or not).
    pub fn retain_frames(&self, keep: &[usize]) -> ObservationSet {
        let mut keep_sorted = keep.to_vec();
        keep_sorted.sort_unstable();
        ObservationSet {
            camera_count: self.camera_count,
            frames: self
                .frames
                .iter()
                .filter(|f| keep_sorted.binary_search(&f.frame).is_ok())
                .cloned()
                .collect(),
        }
    }
}

/// Minimal 5-parameter wand placement: marker A plus spherical direction
/// angles. `phi` is the polar angle of the direction against +z, `theta` the
/// azimuth in the xy plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WandPose {
    pub a: Vector3<f64>,
    pub phi: f64,
    pub theta: f64,
}

impl WandPose {
    /// Unit wand direction `(sin(phi)cos(theta), sin(phi)sin(theta), cos(phi))`.
    pub fn direction(&self) -> Vector3<f64> {
        Vector3::new(
            self.phi.sin() * self.theta.cos(),
            self.phi.sin() * self.theta.sin(),
            self.phi.cos(),
        )
    }

    /// World position of a marker: `A + offset * n`.
    pub fn marker(&self, marker: Marker, wand: &WandGeometry) -> Vector3<f64> {
        self.a + self.direction() * wand.offset(marker)
    }
}
