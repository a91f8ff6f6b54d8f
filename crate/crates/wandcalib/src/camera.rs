//! Generic radial camera model.
//!
//! Projection maps the angle `theta` between a ray and the optical axis to a
//! radial image distance through an odd polynomial
//!
//! ```text
//! r(theta) = k1*theta + k2*theta^3 + k3*theta^5 + k4*theta^7 + k5*theta^9
//! ```
//!
//! (`r` in mm on the sensor), then to pixels through per-axis pixel pitch
//! `(mu, mv)` and the principal point `(u0, v0)`. The polynomial subsumes the
//! perspective projection and the common fisheye design projections, so one
//! code path serves conventional, fisheye and mixed rigs. Tangential
//! distortion is not modeled.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance past `theta_max` before projection reports out-of-FOV.
/// Generous enough to absorb optimizer transients.
pub const DEFAULT_FOV_MARGIN: f64 = 5.0 * std::f64::consts::PI / 180.0;

/// Number of scalar parameters in [`CameraIntrinsics`] (k1..k5, mu, mv, u0, v0).
pub const INTRINSIC_PARAMS: usize = 9;

/// Designed projection curves a lens may follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Perspective,
    Equidistance,
    Orthogonal,
    Stereographic,
    Equisolid,
}

impl Projection {
    /// All curves, in their conventional order.
    pub const ALL: [Projection; 5] = [
        Projection::Perspective,
        Projection::Equidistance,
        Projection::Orthogonal,
        Projection::Stereographic,
        Projection::Equisolid,
    ];

    /// Radial image distance for focal length `f` at incidence angle `theta`.
    pub fn radius(self, f: f64, theta: f64) -> f64 {
        match self {
            Projection::Perspective => f * theta.tan(),
            Projection::Equidistance => f * theta,
            Projection::Orthogonal => f * theta.sin(),
            Projection::Stereographic => 2.0 * f * (theta / 2.0).tan(),
            Projection::Equisolid => 2.0 * f * (theta / 2.0).sin(),
        }
    }
}

/// Prior knowledge about the lens design, used when seeding the distortion fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelHint {
    Perspective,
    Equidistance,
    Orthogonal,
    Stereographic,
    Equisolid,
    #[default]
    Auto,
}

impl ModelHint {
    fn candidates(self) -> &'static [Projection] {
        match self {
            ModelHint::Perspective => &[Projection::Perspective],
            ModelHint::Equidistance => &[Projection::Equidistance],
            ModelHint::Orthogonal => &[Projection::Orthogonal],
            ModelHint::Stereographic => &[Projection::Stereographic],
            ModelHint::Equisolid => &[Projection::Equisolid],
            ModelHint::Auto => &Projection::ALL,
        }
    }
}

/// Datasheet description of a camera, the input to intrinsic seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraMeta {
    pub id: usize,
    /// Image width in pixels.
    pub width: u32,
    /// Image height in pixels.
    pub height: u32,
    /// Physical pixel size (mm) along u and v.
    pub pixel_size: [f64; 2],
    /// Nominal focal length (mm) from the manufacturer.
    pub nominal_focal: f64,
    /// Full field of view in radians.
    pub fov: f64,
    pub model_hint: ModelHint,
}

impl CameraMeta {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        if !(self.fov > 0.0 && self.fov < 2.0 * std::f64::consts::PI) {
            return Err(Error::InvalidInput(format!("fov {} outside (0, 2*pi)", self.fov)));
        }
        if self.nominal_focal <= 0.0 {
            return Err(Error::InvalidInput("nominal focal length must be positive".into()));
        }
        if self.pixel_size[0] <= 0.0 || self.pixel_size[1] <= 0.0 {
            return Err(Error::InvalidInput("pixel size must be positive".into()));
        }
        Ok(())
    }
}

/// Unit direction in the camera frame.
///
/// `theta` is the angle from the optical (+z) axis in `[0, pi)`, `phi` the
/// angle of the radial direction against the x axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing(Vector3<f64>);

impl Bearing {
    /// Normalizes `v`; fails on a zero vector.
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if n <= 0.0 {
            return Err(Error::InvalidInput("zero-norm bearing".into()));
        }
        Ok(Bearing(v / n))
    }

    pub fn from_angles(theta: f64, phi: f64) -> Self {
        Bearing(Vector3::new(
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        ))
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.0
    }

    /// Angle from the optical axis, `acos(z)`.
    pub fn theta(&self) -> f64 {
        self.0.z.clamp(-1.0, 1.0).acos()
    }

    /// Angle of the radial direction against the x axis.
    pub fn phi(&self) -> f64 {
        self.0.y.atan2(self.0.x)
    }
}

/// The nine intrinsic parameters of the generic radial model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Radial polynomial coefficients for theta, theta^3, ..., theta^9.
    pub k: [f64; 5],
    /// Pixels per mm, horizontal.
    pub mu: f64,
    /// Pixels per mm, vertical.
    pub mv: f64,
    /// Principal point (pixels).
    pub u0: f64,
    pub v0: f64,
    /// Maximum half-FOV angle (radians); metadata, not optimized.
    pub theta_max: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.k[0] > 0.0) {
            return Err(Error::InvalidInput(format!("k1 must be positive, got {}", self.k[0])));
        }
        if !(self.mu > 0.0 && self.mv > 0.0) {
            return Err(Error::InvalidInput("pixel pitches mu, mv must be positive".into()));
        }
        Ok(())
    }

    /// Radial distance r(theta) in mm.
    pub fn radial(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        // Horner over theta^2, times theta.
        theta
            * (self.k[0]
                + t2 * (self.k[1] + t2 * (self.k[2] + t2 * (self.k[3] + t2 * self.k[4]))))
    }

    /// Derivative r'(theta).
    pub fn radial_deriv(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        self.k[0]
            + t2 * (3.0 * self.k[1]
                + t2 * (5.0 * self.k[2] + t2 * (7.0 * self.k[3] + t2 * 9.0 * self.k[4])))
    }

    /// Checks that r is strictly increasing on `[0, theta_max]` on a
    /// 1024-point grid. A validation utility; not enforced on every call so
    /// optimizers may pass through transiently non-monotone states.
    pub fn check_monotone(&self) -> Result<()> {
        const GRID: usize = 1024;
        for i in 0..=GRID {
            let theta = self.theta_max * i as f64 / GRID as f64;
            if self.radial_deriv(theta) <= 0.0 {
                return Err(Error::NonMonotone {
                    theta,
                    theta_max: self.theta_max,
                });
            }
        }
        Ok(())
    }

    /// Flat parameter vector in the order k1, k2, mu, mv, u0, v0, k3, k4, k5.
    pub fn to_params(&self) -> [f64; INTRINSIC_PARAMS] {
        [
            self.k[0], self.k[1], self.mu, self.mv, self.u0, self.v0, self.k[2], self.k[3],
            self.k[4],
        ]
    }

    /// Inverse of [`to_params`](Self::to_params); `theta_max` is carried over.
    pub fn from_params(p: &[f64], theta_max: f64) -> Self {
        CameraIntrinsics {
            k: [p[0], p[1], p[6], p[7], p[8]],
            mu: p[2],
            mv: p[3],
            u0: p[4],
            v0: p[5],
            theta_max,
        }
    }
}

/// Projects a camera-frame point (mm) to pixel coordinates.
///
/// Fails on a zero-norm point or when the incidence angle exceeds
/// `theta_max` by more than `margin`.
pub fn project_with_margin(
    intr: &CameraIntrinsics,
    point: &Vector3<f64>,
    margin: f64,
) -> Result<Vector2<f64>> {
    let s = (point.x * point.x + point.y * point.y).sqrt();
    if s == 0.0 && point.z == 0.0 {
        return Err(Error::InvalidInput("cannot project the camera center".into()));
    }
    let theta = s.atan2(point.z);
    if theta > intr.theta_max + margin {
        return Err(Error::OutOfFov {
            theta,
            theta_max: intr.theta_max,
            margin,
        });
    }
    let r = intr.radial(theta);
    if s < 1e-300 {
        return Ok(Vector2::new(intr.u0, intr.v0));
    }
    let (cos_phi, sin_phi) = (point.x / s, point.y / s);
    Ok(Vector2::new(
        intr.mu * r * cos_phi + intr.u0,
        intr.mv * r * sin_phi + intr.v0,
    ))
}

/// [`project_with_margin`] with the default 5 degree margin.
pub fn project(intr: &CameraIntrinsics, point: &Vector3<f64>) -> Result<Vector2<f64>> {
    project_with_margin(intr, point, DEFAULT_FOV_MARGIN)
}

/// Largest angle up to `bound` on which r stays strictly increasing.
///
/// Optimizers constrain the polynomial only where observations exist, so the
/// high-order terms may turn it around past the data support; inversion must
/// stay on the monotone prefix.
fn monotone_bound(intr: &CameraIntrinsics, bound: f64) -> f64 {
    const GRID: usize = 256;
    let mut prev = 0.0;
    for i in 1..=GRID {
        let t = bound * i as f64 / GRID as f64;
        if intr.radial_deriv(t) <= 0.0 {
            let (mut lo, mut hi) = (prev, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if intr.radial_deriv(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return lo;
        }
        prev = t;
    }
    bound
}

/// Solves r(theta) = rho on the monotone prefix of `[0, bound]`.
///
/// Newton from `rho / k1`, falling back to bisection whenever an iterate
/// leaves the bracket or the derivative degenerates.
fn invert_radial(intr: &CameraIntrinsics, rho: f64, bound: f64) -> Result<f64> {
    const TOL: f64 = 1e-12;
    const MAX_NEWTON: usize = 50;

    if rho <= 0.0 {
        return Ok(0.0);
    }
    let bound = monotone_bound(intr, bound);
    let rho_max = intr.radial(bound);
    if rho > rho_max * (1.0 + 1e-12) {
        return Err(Error::OutOfRange { rho, rho_max });
    }

    let mut theta = (rho / intr.k[0]).clamp(0.0, bound);
    for _ in 0..MAX_NEWTON {
        let f = intr.radial(theta) - rho;
        let df = intr.radial_deriv(theta);
        if df <= 0.0 {
            break; // non-monotone territory; bisect instead
        }
        let step = f / df;
        let next = theta - step;
        if !(0.0..=bound).contains(&next) {
            break;
        }
        theta = next;
        if step.abs() < TOL {
            return Ok(theta);
        }
    }

    // Bisection on [0, bound]: r(0) - rho <= 0 <= r(bound) - rho.
    let (mut lo, mut hi) = (0.0_f64, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if intr.radial(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < TOL {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Inverts the projection: pixel coordinates to a unit bearing.
pub fn unproject(intr: &CameraIntrinsics, pixel: &Vector2<f64>) -> Result<Bearing> {
    let x = (pixel.x - intr.u0) / intr.mu;
    let y = (pixel.y - intr.v0) / intr.mv;
    let rho = (x * x + y * y).sqrt();
    if rho < 1e-14 {
        return Ok(Bearing(Vector3::new(0.0, 0.0, 1.0)));
    }
    let theta = invert_radial(intr, rho, intr.theta_max + DEFAULT_FOV_MARGIN)?;
    let phi = y.atan2(x);
    Ok(Bearing::from_angles(theta, phi))
}

/// Result of seeding the distortion polynomial from a designed projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialFit {
    pub k1: f64,
    pub k2: f64,
    pub projection: Projection,
    /// Sum of squared fit residuals over the sample grid.
    pub residual: f64,
}

/// Number of samples of `[0, theta_max]` used by [`fit_initial_k`].
pub const FIT_SAMPLES: usize = 100;

/// Seeds `(k1, k2)` by least-squares fitting the two-term polynomial to each
/// candidate projection curve at the nominal focal length, keeping the best.
///
/// The equidistance curve `f * theta` is representable exactly by the first
/// polynomial term, so with `ModelHint::Auto` the search settles on the
/// equidistance seed `(f, 0)`; a non-auto hint narrows the candidates to the
/// stated lens design.
pub fn fit_initial_k(meta: &CameraMeta) -> Result<InitialFit> {
    meta.validate()?;
    let theta_max = meta.fov / 2.0;
    let f = meta.nominal_focal;

    let mut best: Option<InitialFit> = None;
    for &proj in meta.model_hint.candidates() {
        // Normal equations of the p x 2 system [theta, theta^3] k = r_s.
        let (mut a11, mut a12, mut a22) = (0.0, 0.0, 0.0);
        let (mut b1, mut b2) = (0.0, 0.0);
        let mut finite = true;
        let mut samples = Vec::with_capacity(FIT_SAMPLES);
        for j in 1..=FIT_SAMPLES {
            let t = theta_max * j as f64 / FIT_SAMPLES as f64;
            let r = proj.radius(f, t);
            if !r.is_finite() {
                finite = false;
                break;
            }
            let (t3,) = (t * t * t,);
            a11 += t * t;
            a12 += t * t3;
            a22 += t3 * t3;
            b1 += t * r;
            b2 += t3 * r;
            samples.push((t, r));
        }
        if !finite {
            continue;
        }
        let det = a11 * a22 - a12 * a12;
        if det.abs() < 1e-300 {
            continue;
        }
        let k1 = (a22 * b1 - a12 * b2) / det;
        let k2 = (a11 * b2 - a12 * b1) / det;
        let residual: f64 = samples
            .iter()
            .map(|&(t, r)| {
                let e = k1 * t + k2 * t * t * t - r;
                e * e
            })
            .sum();
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(InitialFit {
                k1,
                k2,
                projection: proj,
                residual,
            });
        }
    }
    best.ok_or_else(|| {
        Error::InvalidInput("no projection curve is finite over the given FOV".into())
    })
}

/// Initial intrinsics from datasheet values: principal point at the image
/// center, pixel pitch from the pixel size, `(k1, k2)` from [`fit_initial_k`]
/// and the higher-order coefficients at zero.
pub fn default_intrinsics(meta: &CameraMeta) -> Result<CameraIntrinsics> {
    let fit = fit_initial_k(meta)?;
    Ok(CameraIntrinsics {
        k: [fit.k1, fit.k2, 0.0, 0.0, 0.0],
        mu: 1.0 / meta.pixel_size[0],
        mv: 1.0 / meta.pixel_size[1],
        u0: meta.width as f64 / 2.0,
        v0: meta.height as f64 / 2.0,
        theta_max: meta.fov / 2.0,
    })
}

/// Projection plus its Jacobians: pixel, d(pixel)/d(point) and
/// d(pixel)/d(intrinsics) in [`CameraIntrinsics::to_params`] order.
pub fn project_jacobians(
    intr: &CameraIntrinsics,
    point: &Vector3<f64>,
    margin: f64,
) -> Result<(Vector2<f64>, Matrix2x3<f64>, [[f64; INTRINSIC_PARAMS]; 2])> {
    let (x, y, z) = (point.x, point.y, point.z);
    let s2 = x * x + y * y;
    let s = s2.sqrt();
    let n2 = s2 + z * z;
    if n2 == 0.0 {
        return Err(Error::InvalidInput("cannot project the camera center".into()));
    }
    let theta = s.atan2(z);
    if theta > intr.theta_max + margin {
        return Err(Error::OutOfFov {
            theta,
            theta_max: intr.theta_max,
            margin,
        });
    }

    if s < 1e-12 {
        // On-axis limit: u - u0 ~ mu*k1*x/z, v - v0 ~ mv*k1*y/z.
        let pixel = Vector2::new(intr.u0, intr.v0);
        let d_point =
            Matrix2x3::new(intr.mu * intr.k[0] / z, 0.0, 0.0, 0.0, intr.mv * intr.k[0] / z, 0.0);
        let mut d_intr = [[0.0; INTRINSIC_PARAMS]; 2];
        d_intr[0][4] = 1.0;
        d_intr[1][5] = 1.0;
        return Ok((pixel, d_point, d_intr));
    }

    let r = intr.radial(theta);
    let dr = intr.radial_deriv(theta);
    let (cos_phi, sin_phi) = (x / s, y / s);
    let pixel = Vector2::new(
        intr.mu * r * cos_phi + intr.u0,
        intr.mv * r * sin_phi + intr.v0,
    );

    // theta = atan2(s, z), phi = atan2(y, x)
    let dtheta = Vector3::new(z * x / (n2 * s), z * y / (n2 * s), -s / n2);
    let dcos_phi = Vector3::new(y * y / (s2 * s), -x * y / (s2 * s), 0.0);
    let dsin_phi = Vector3::new(-x * y / (s2 * s), x * x / (s2 * s), 0.0);

    let du = (dtheta * dr * cos_phi + dcos_phi * r) * intr.mu;
    let dv = (dtheta * dr * sin_phi + dsin_phi * r) * intr.mv;
    let d_point = Matrix2x3::new(du.x, du.y, du.z, dv.x, dv.y, dv.z);

    // Parameter order: k1, k2, mu, mv, u0, v0, k3, k4, k5.
    let mut d_intr = [[0.0; INTRINSIC_PARAMS]; 2];
    let powers = [
        theta,
        theta.powi(3),
        theta.powi(5),
        theta.powi(7),
        theta.powi(9),
    ];
    for (slot, pw) in [0usize, 1, 6, 7, 8].into_iter().zip(powers) {
        d_intr[0][slot] = intr.mu * pw * cos_phi;
        d_intr[1][slot] = intr.mv * pw * sin_phi;
    }
    d_intr[0][2] = r * cos_phi;
    d_intr[1][3] = r * sin_phi;
    d_intr[0][4] = 1.0;
    d_intr[1][5] = 1.0;

    Ok((pixel, d_point, d_intr))
}

/// Unprojection plus d(bearing)/d(intrinsics) in
/// [`CameraIntrinsics::to_params`] order.
pub fn unproject_jacobian(
    intr: &CameraIntrinsics,
    pixel: &Vector2<f64>,
) -> Result<(Bearing, [Vector3<f64>; INTRINSIC_PARAMS])> {
    let x = (pixel.x - intr.u0) / intr.mu;
    let y = (pixel.y - intr.v0) / intr.mv;
    let rho2 = x * x + y * y;
    let rho = rho2.sqrt();
    if rho < 1e-12 {
        // Principal point: direction is the optical axis; the derivative is
        // not defined there (phi jumps), so report zero sensitivity.
        return Ok((
            Bearing(Vector3::new(0.0, 0.0, 1.0)),
            [Vector3::zeros(); INTRINSIC_PARAMS],
        ));
    }
    let theta = invert_radial(intr, rho, intr.theta_max + DEFAULT_FOV_MARGIN)?;
    let phi = y.atan2(x);
    let bearing = Bearing::from_angles(theta, phi);
    let dr = intr.radial_deriv(theta);

    // Sensor-plane coordinate sensitivities.
    let mut dx = [0.0; INTRINSIC_PARAMS];
    let mut dy = [0.0; INTRINSIC_PARAMS];
    dx[2] = -x / intr.mu; // d/d mu
    dx[4] = -1.0 / intr.mu; // d/d u0
    dy[3] = -y / intr.mv; // d/d mv
    dy[5] = -1.0 / intr.mv; // d/d v0

    // Direct dependence of the polynomial on each k at fixed theta.
    let mut dk = [0.0; INTRINSIC_PARAMS];
    dk[0] = theta;
    dk[1] = theta.powi(3);
    dk[6] = theta.powi(5);
    dk[7] = theta.powi(7);
    dk[8] = theta.powi(9);

    let dm_dtheta = Vector3::new(
        theta.cos() * phi.cos(),
        theta.cos() * phi.sin(),
        -theta.sin(),
    );
    let dm_dphi = Vector3::new(-theta.sin() * phi.sin(), theta.sin() * phi.cos(), 0.0);

    let mut out = [Vector3::zeros(); INTRINSIC_PARAMS];
    for i in 0..INTRINSIC_PARAMS {
        let drho = (x * dx[i] + y * dy[i]) / rho;
        let dtheta = (drho - dk[i]) / dr;
        let dphi = (x * dy[i] - y * dx[i]) / rho2;
        out[i] = dm_dtheta * dtheta + dm_dphi * dphi;
    }
    Ok((bearing, out))
}
