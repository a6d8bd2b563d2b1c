//! Pinhole camera with two-coefficient radial distortion.
//!
//! # Conventions
//!
//! Camera-frame axes follow OpenCV: `x` to the right of the image, `y` down,
//! `z` along the viewing direction. The world frame is right-handed with `z`
//! pointing up.
//!
//! Orientation is given as `(pan, tilt, roll)` in radians. The world-to-camera
//! rotation is
//!
//! ```text
//! R = Rz(-roll) * Rx(pi/2 - tilt) * Rz(pan)
//! ```
//!
//! so that with all three angles zero the camera looks horizontally along the
//! world `+y` axis with the image upright. `pan` turns the heading clockwise
//! when seen from above (heading `(sin pan, cos pan)` in the ground plane),
//! `tilt` is the elevation of the viewing direction (`-pi/2` looks straight
//! down), and `roll` spins the camera about its viewing axis.
//!
//! A world point `p` maps to camera coordinates `R * (p - position)` and then
//! to pixels as `principal_point + f * (x, y) * (1 + k1 r^2 + k2 r^4)` with
//! `(x, y) = (X/Z, Y/Z)` and `r^2 = x^2 + y^2`.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the camera plane (in meters) cannot be projected.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

/// Convergence tolerance of the distortion inversion, in pixels.
pub const UNDISTORT_TOLERANCE_PX: f64 = 1e-10;

pub const UNDISTORT_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    /// Focal length in pixels (square pixels).
    pub focal_length: f64,
    pub k1: f64,
    pub k2: f64,
    pub principal_point: [f64; 2],
    /// Image width and height in pixels.
    pub image_size: [u32; 2],
}

impl CameraIntrinsics {
    /// 1280x720 image with the principal point at the image center.
    pub fn hd720(focal_length: f64, k1: f64, k2: f64) -> Self {
        Self {
            focal_length,
            k1,
            k2,
            principal_point: [640.0, 360.0],
            image_size: [1280, 720],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        let [u0, v0] = self.principal_point;
        if !(self.focal_length.is_finite() && self.focal_length > 0.0) {
            return Err(Error::Validation(format!(
                "focal length must be positive, got {}",
                self.focal_length
            )));
        }
        if !(self.k1.is_finite() && self.k2.is_finite()) {
            return Err(Error::Validation(
                "distortion coefficients must be finite".into(),
            ));
        }
        if !(0.0..=w as f64).contains(&u0) || !(0.0..=h as f64).contains(&v0) {
            return Err(Error::Validation(format!(
                "principal point ({u0}, {v0}) outside the {w}x{h} image"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, px: &PixelPoint) -> bool {
        let [w, h] = self.image_size;
        px.u >= 0.0 && px.v >= 0.0 && px.u <= w as f64 && px.v <= h as f64
    }

    /// Radial factor `1 + k1 r^2 + k2 r^4` for squared normalized radius `r2`.
    fn radial(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    fn radial_derivative(&self, r2: f64) -> f64 {
        self.k1 + 2.0 * self.k2 * r2
    }

    fn distort(&self, undistorted: Vector2<f64>) -> Vector2<f64> {
        undistorted * self.radial(undistorted.norm_squared())
    }

    /// Inverts the radial distortion of a normalized image point.
    ///
    /// Returns the undistorted normalized coordinates together with the number
    /// of fixed-point iterations used.
    pub fn undistort(&self, distorted: Vector2<f64>) -> Result<(Vector2<f64>, usize)> {
        let tol = UNDISTORT_TOLERANCE_PX / self.focal_length;
        let mut x = distorted;
        let mut residual = (self.distort(x) - distorted).norm();
        let mut step = 1.0;
        for iteration in 0..UNDISTORT_MAX_ITERATIONS {
            if residual <= tol {
                return Ok((x, iteration));
            }
            let target = distorted / self.radial(x.norm_squared());
            let mut accepted = false;
            let mut s = step;
            while s >= 1e-6 {
                let candidate = x + (target - x) * s;
                let r = (self.distort(candidate) - distorted).norm();
                if r < residual {
                    x = candidate;
                    residual = r;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if !accepted {
                break;
            }
            step = (s * 2.0).min(1.0);
        }
        if residual <= tol {
            return Ok((x, UNDISTORT_MAX_ITERATIONS));
        }
        Err(Error::NonConvergence {
            iterations: UNDISTORT_MAX_ITERATIONS,
        })
    }
}

/// Camera extrinsics in the world frame: position in meters, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub pan: f64,
    pub tilt: f64,
    pub roll: f64,
}

impl CameraPose {
    pub fn new(position: Vector3<f64>, pan: f64, tilt: f64, roll: f64) -> Self {
        Self {
            x: position.x,
            y: position.y,
            z: position.z,
            pan,
            tilt,
            roll,
        }
    }

    pub fn from_params(p: &[f64; 6]) -> Self {
        Self {
            x: p[0],
            y: p[1],
            z: p[2],
            pan: p[3],
            tilt: p[4],
            roll: p[5],
        }
    }

    /// `[x, y, z, pan, tilt, roll]`, the parameter order used by Jacobians.
    pub fn params(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.pan, self.tilt, self.roll]
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "non-finite camera pose {self:?}"
            )))
        }
    }

    /// World-to-camera rotation.
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_parts(self.pan, self.tilt, self.roll).compose()
    }

    /// Viewing direction (camera `+z`) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation().transpose() * Vector3::z()
    }

    pub fn to_camera_frame(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (point - self.position())
    }
}

/// Geodesic angle in radians between the orientations of two poses.
pub fn rotation_angle_between(a: &CameraPose, b: &CameraPose) -> f64 {
    let r = a.rotation().transpose() * b.rotation();
    let sin = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    )
    .norm()
        / 2.0;
    let cos = (r.trace() - 1.0) / 2.0;
    sin.atan2(cos)
}

struct RotationParts {
    roll: Matrix3<f64>,
    tilt: Matrix3<f64>,
    pan: Matrix3<f64>,
}

impl RotationParts {
    fn compose(&self) -> Matrix3<f64> {
        self.roll * self.tilt * self.pan
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_x_derivative(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn rot_z_derivative(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn rotation_parts(pan: f64, tilt: f64, roll: f64) -> RotationParts {
    RotationParts {
        roll: rot_z(-roll),
        tilt: rot_x(std::f64::consts::FRAC_PI_2 - tilt),
        pan: rot_z(pan),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// Half-line starting at a camera center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    direction: Vector3<f64>,
}

impl Ray {
    /// Builds a ray, normalizing `direction`. Returns `None` for a zero or
    /// non-finite direction.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Option<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) {
            return None;
        }
        Some(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    /// Signed distance along the ray to the foot of the perpendicular from `p`.
    pub fn parameter_of(&self, p: &Vector3<f64>) -> f64 {
        (p - self.origin).dot(&self.direction)
    }

    /// Distance from `p` to the half-line (points behind the origin measure to
    /// the origin itself).
    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        let t = self.parameter_of(p).max(0.0);
        (p - self.at(t)).norm()
    }

    /// Angle in radians between the two ray directions.
    pub fn angle_to(&self, other: &Ray) -> f64 {
        let c = self.direction.dot(&other.direction).clamp(-1.0, 1.0);
        let s = self.direction.cross(&other.direction).norm();
        s.atan2(c)
    }

    /// Closest approach of the two supporting lines: `(t_self, t_other)`.
    /// `None` when the lines are parallel to working precision.
    pub fn closest_parameters(&self, other: &Ray) -> Option<(f64, f64)> {
        let w = self.origin - other.origin;
        let b = self.direction.dot(&other.direction);
        let denom = 1.0 - b * b;
        if denom < 1e-12 {
            return None;
        }
        let d = self.direction.dot(&w);
        let e = other.direction.dot(&w);
        let t = (b * e - d) / denom;
        let s = (e - b * d) / denom;
        Some((t, s))
    }
}

/// Pose and intrinsics of one camera, with the rotation cached.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    rotation: Matrix3<f64>,
}

/// Jacobians of the projected pixel.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionJacobians {
    pub wrt_point: Matrix2x3<f64>,
    /// Columns in [`CameraPose::params`] order.
    pub wrt_pose: SMatrix<f64, 2, 6>,
}

impl Camera {
    pub fn new(pose: CameraPose, intrinsics: CameraIntrinsics) -> Self {
        Self {
            pose,
            intrinsics,
            rotation: pose.rotation(),
        }
    }

    pub fn to_camera_frame(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (point - self.pose.position())
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<PixelPoint> {
        let pc = self.to_camera_frame(point);
        self.project_camera_frame(&pc)
    }

    fn project_camera_frame(&self, pc: &Vector3<f64>) -> Result<PixelPoint> {
        if pc.z.is_nan() || pc.z <= BEHIND_CAMERA_EPS {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        let n = Vector2::new(pc.x / pc.z, pc.y / pc.z);
        let d = self.intrinsics.distort(n) * self.intrinsics.focal_length;
        let [u0, v0] = self.intrinsics.principal_point;
        Ok(PixelPoint::new(u0 + d.x, v0 + d.y))
    }

    pub fn unproject(&self, pixel: &PixelPoint) -> Result<Ray> {
        if !(pixel.u.is_finite() && pixel.v.is_finite()) {
            return Err(Error::Validation(format!("non-finite pixel {pixel:?}")));
        }
        let [u0, v0] = self.intrinsics.principal_point;
        let f = self.intrinsics.focal_length;
        let distorted = Vector2::new((pixel.u - u0) / f, (pixel.v - v0) / f);
        let (n, _) = self.intrinsics.undistort(distorted)?;
        let dir = self.rotation.transpose() * Vector3::new(n.x, n.y, 1.0);
        Ray::new(self.pose.position(), dir)
            .ok_or_else(|| Error::Validation("degenerate ray direction".into()))
    }

    pub fn jacobians(&self, point: &Vector3<f64>) -> Result<ProjectionJacobians> {
        let rel = point - self.pose.position();
        let pc = self.rotation * rel;
        if pc.z.is_nan() || pc.z <= BEHIND_CAMERA_EPS {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        let d_pixel_d_cam = self.pixel_wrt_camera_frame(&pc);

        let wrt_point = d_pixel_d_cam * self.rotation;

        let parts = rotation_parts(self.pose.pan, self.pose.tilt, self.pose.roll);
        let d_pan = parts.roll * parts.tilt * rot_z_derivative(self.pose.pan);
        let d_tilt = -(parts.roll
            * rot_x_derivative(std::f64::consts::FRAC_PI_2 - self.pose.tilt)
            * parts.pan);
        let d_roll = -(rot_z_derivative(-self.pose.roll) * parts.tilt * parts.pan);

        let mut wrt_pose = SMatrix::<f64, 2, 6>::zeros();
        wrt_pose
            .fixed_view_mut::<2, 3>(0, 0)
            .copy_from(&(-wrt_point));
        for (col, d_rot) in [(3, d_pan), (4, d_tilt), (5, d_roll)] {
            wrt_pose.set_column(col, &(d_pixel_d_cam * (d_rot * rel)));
        }
        Ok(ProjectionJacobians {
            wrt_point,
            wrt_pose,
        })
    }

    /// d(pixel)/d(camera-frame point).
    fn pixel_wrt_camera_frame(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let intr = &self.intrinsics;
        let f = intr.focal_length;
        let inv_z = 1.0 / pc.z;
        let x = pc.x * inv_z;
        let y = pc.y * inv_z;
        let r2 = x * x + y * y;
        let s = intr.radial(r2);
        let ds = intr.radial_derivative(r2);
        // d(pixel)/d(normalized)
        let a = f * (s + 2.0 * x * x * ds);
        let b = f * 2.0 * x * y * ds;
        let c = f * (s + 2.0 * y * y * ds);
        // d(normalized)/d(camera point)
        let dn = Matrix2x3::new(inv_z, 0.0, -x * inv_z, 0.0, inv_z, -y * inv_z);
        nalgebra::Matrix2::new(a, b, b, c) * dn
    }
}

pub fn project(
    point: &Vector3<f64>,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> Result<PixelPoint> {
    Camera::new(*pose, *intr).project(point)
}

pub fn unproject(pixel: &PixelPoint, pose: &CameraPose, intr: &CameraIntrinsics) -> Result<Ray> {
    Camera::new(*pose, *intr).unproject(pixel)
}

pub fn projection_jacobians(
    point: &Vector3<f64>,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> Result<ProjectionJacobians> {
    Camera::new(*pose, *intr).jacobians(point)
}
