//! Euler-angle camera rotation, in-plane translation and perspective
//! projection.
//!
//! Conventions, fixed once for the whole crate: right-handed coordinates,
//! camera at the origin looking along +z, image y pointing down, pixel origin
//! at the top-left, principal point at the crop center `((w-1)/2, (h-1)/2)`.
//! Points are rotated by `R = R_x(alpha) * R_y(beta) * R_z(gamma)`, translated
//! by `(T_x, T_y, 0)` (no depth translation; focal length covers scale), then
//! divided by camera-frame depth.

use crate::error::{Error, Result};
use crate::math::{Mat3, Scalar, Vec3};

/// Points closer than this to the camera plane (meters) refuse to project.
pub const Z_MIN: f64 = 1e-4;

/// The optimizable camera unknowns.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraParams<S = f64> {
    /// Focal length in pixels.
    pub focal: S,
    /// Rotation angles (radians) about x, y, z respectively.
    pub euler: Vec3<S>,
    /// In-plane translation (meters); the z component is fixed at zero.
    pub translation: [S; 2],
}

impl CameraParams<f64> {
    pub fn identity(focal: f64) -> CameraParams {
        CameraParams {
            focal,
            euler: Vec3::new(0.0, 0.0, 0.0),
            translation: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::config(format!(
                "focal length must be finite and positive, got {}",
                self.focal
            )));
        }
        if !self.euler.is_finite() || !(self.translation[0].is_finite() && self.translation[1].is_finite()) {
            return Err(Error::config("non-finite camera parameter"));
        }
        Ok(())
    }
}

/// Image crop dimensions; the principal point sits at the crop center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
}

impl ImageGeometry {
    pub fn new(width: usize, height: usize) -> Result<ImageGeometry> {
        if width < 2 || height < 2 {
            return Err(Error::config(format!(
                "image geometry must be at least 2x2, got {width}x{height}"
            )));
        }
        Ok(ImageGeometry { width, height })
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Grid at half the observation resolution (rounded up), used by the
    /// segmentation losses.
    pub fn half(&self) -> ImageGeometry {
        ImageGeometry {
            width: self.width.div_ceil(2),
            height: self.height.div_ceil(2),
        }
    }
}

/// `R_x(alpha) * R_y(beta) * R_z(gamma)`, the x factor applied last.
///
/// The product is expanded analytically rather than composed from elementary
/// matrices; the elementary-product oracle lives in the tests.
pub fn euler_rotation<S: Scalar>(alpha: S, beta: S, gamma: S) -> Mat3<S> {
    let (ca, sa) = (alpha.cos(), alpha.sin());
    let (cb, sb) = (beta.cos(), beta.sin());
    let (cg, sg) = (gamma.cos(), gamma.sin());
    Mat3 {
        m: [
            [cb * cg, -(cb * sg), sb],
            [ca * sg + sa * sb * cg, ca * cg - sa * sb * sg, -(sa * cb)],
            [sa * sg - ca * sb * cg, sa * cg + ca * sb * sg, ca * cb],
        ],
    }
}

/// Rigid part of the camera map: `X' = R * X + (T_x, T_y, 0)`.
pub fn camera_frame<S: Scalar>(points: &[Vec3<S>], cam: &CameraParams<S>) -> Vec<Vec3<S>> {
    let r = euler_rotation(cam.euler.x, cam.euler.y, cam.euler.z);
    points
        .iter()
        .map(|&p| {
            let q = r.mul_vec(p);
            Vec3::new(q.x + cam.translation[0], q.y + cam.translation[1], q.z)
        })
        .collect()
}

/// Perspective divide of camera-frame points into pixel coordinates.
///
/// Fails with the offending indices when any depth is below [`Z_MIN`].
pub fn project_camera_frame<S: Scalar>(
    camframe: &[Vec3<S>],
    focal: S,
    geom: &ImageGeometry,
) -> Result<Vec<[S; 2]>> {
    let (cx, cy) = geom.principal_point();
    let bad: Vec<usize> = camframe
        .iter()
        .enumerate()
        .filter(|(_, p)| p.z.value() < Z_MIN)
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::DepthViolation { indices: bad });
    }
    Ok(camframe
        .iter()
        .map(|&p| {
            let u = (focal * p.x / p.z).addc(cx);
            let v = (focal * p.y / p.z).addc(cy);
            [u, v]
        })
        .collect())
}

/// Full projection: rotate, translate, divide.
pub fn project<S: Scalar>(
    points: &[Vec3<S>],
    cam: &CameraParams<S>,
    geom: &ImageGeometry,
) -> Result<Vec<[S; 2]>> {
    let cf = camera_frame(points, cam);
    project_camera_frame(&cf, cam.focal, geom)
}
