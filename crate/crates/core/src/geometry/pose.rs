use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{invalid, Result};

/// Rotation and unit translation direction of camera B relative to camera A:
/// `X_b = r·X_a + λ·t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl RelativePose {
    /// Checks orthonormality and normalizes `t`.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(invalid!("rotation matrix is not orthonormal"));
        }
        let n = t.norm();
        if !(n.is_finite() && n > 1e-12) {
            return Err(invalid!("translation direction must be non-zero"));
        }
        Ok(Self { r, t: t / n })
    }

    pub fn from_axis_angle(axis: Vector3<f64>, deg: f64, t: Vector3<f64>) -> Result<Self> {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), deg.to_radians());
        Self::new(*rot.matrix(), t)
    }
}

/// Angle of a rotation matrix in degrees, stable near 0 and π.
pub fn rotation_angle_deg(m: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / 2.0;
    let c = (m.trace() - 1.0) / 2.0;
    s.atan2(c).to_degrees()
}

/// Angle between two vectors in degrees.
pub fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// `max(rotation error, translation-direction error)` in degrees; the
/// translation sign is free.
pub fn pose_error(est: &RelativePose, gt: &RelativePose) -> f64 {
    let (rot, trans) = pose_error_parts(est, gt);
    rot.max(trans)
}

/// Rotation and translation angular errors separately.
pub fn pose_error_parts(est: &RelativePose, gt: &RelativePose) -> (f64, f64) {
    let rot = rotation_angle_deg(&(est.r * gt.r.transpose()));
    let t = angle_between_deg(&est.t, &gt.t);
    (rot, t.min(180.0 - t))
}
