//! Rigid-body poses, pinhole projection, and rectified-stereo triangulation.
//!
//! Conventions: pixel u runs along image x (columns), v along y (rows).
//! Camera frame is right-handed with +z forward; a pose stored for a frame is
//! camera-to-world. Rotations are kept as matrices; quaternions only appear
//! in trajectory files.

mod homography;
mod trajectory;

pub use homography::{apply_homography, sample_homography, warp_image, Homography, HomographyConfig};
pub use trajectory::{read_trajectory, write_trajectory, TrajectoryEntry};

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("disparity {0:.4} px below minimum {1:.4} px")]
    DisparityTooSmall(f64, f64),
    #[error("epipolar violation: |dv| = {0:.4} px exceeds band {1:.4} px")]
    EpipolarViolation(f64, f64),
    #[error("point behind camera (z = {0:.6})")]
    BehindCamera(f64),
    #[error("trajectory file malformed: {0}")]
    BadTrajectory(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rigid transform: `x_out = rotation * x_in + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 { rotation, translation }
    }

    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 { rotation: Rotation3::from_matrix(&rotation), translation }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rot_inv = self.rotation.inverse();
        PoseSE3 { rotation: rot_inv, translation: -(rot_inv * self.translation) }
    }

    /// Relative pose mapping coordinates of `from`'s frame into `to`'s frame,
    /// given both poses expressed in a common (world) frame.
    pub fn relative_to(from: &PoseSE3, to: &PoseSE3) -> PoseSE3 {
        to.inverse().compose(from)
    }

    /// Rotation angle in radians, translation distance in meters between two
    /// poses. The angle comes from atan2 of the skew/trace parts, which stays
    /// accurate near identity where acos(trace) loses half the digits.
    pub fn difference(a: &PoseSE3, b: &PoseSE3) -> (f64, f64) {
        let rel = a.inverse().compose(b);
        let m = rel.rotation.matrix();
        let s = 0.5
            * ((m[(2, 1)] - m[(1, 2)]).powi(2)
                + (m[(0, 2)] - m[(2, 0)]).powi(2)
                + (m[(1, 0)] - m[(0, 1)]).powi(2))
            .sqrt();
        let c = (m.trace() - 1.0) / 2.0;
        (s.atan2(c), rel.translation.norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Pinhole projection of a camera-frame point with positive depth.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Back-projection of a pixel at a given positive depth (z in meters).
    pub fn unproject(&self, pix: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(Vector3::new(
            (pix.x - self.cx) / self.fx * depth,
            (pix.y - self.cy) / self.fy * depth,
            depth,
        ))
    }

    pub fn contains(&self, pix: &Vector2<f64>) -> bool {
        pix.x >= 0.0
            && pix.y >= 0.0
            && pix.x <= (self.width - 1) as f64
            && pix.y <= (self.height - 1) as f64
    }
}

/// Rectified stereo pair: identical intrinsics, right camera displaced by
/// `baseline` meters along +x of the left camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
}

impl StereoRig {
    /// Left-to-right projection of a left-camera point: u shifts by the disparity.
    pub fn project_right(&self, p_left: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        let p_right = Vector3::new(p_left.x - self.baseline, p_left.y, p_left.z);
        self.intrinsics.project(&p_right)
    }

    /// Triangulate a rectified correspondence. Returns the left-camera point
    /// and its depth. Rejects small disparities (far points) and row
    /// disagreements beyond the epipolar band.
    pub fn triangulate_rectified(
        &self,
        left_pix: &Vector2<f64>,
        right_pix: &Vector2<f64>,
        min_disparity: f64,
        epipolar_band: f64,
    ) -> Result<(Vector3<f64>, f64), GeometryError> {
        let dv = (left_pix.y - right_pix.y).abs();
        if dv > epipolar_band {
            return Err(GeometryError::EpipolarViolation(dv, epipolar_band));
        }
        let disparity = left_pix.x - right_pix.x;
        if disparity <= min_disparity {
            return Err(GeometryError::DisparityTooSmall(disparity, min_disparity));
        }
        let depth = self.intrinsics.fx * self.baseline / disparity;
        let point = self.intrinsics.unproject(left_pix, depth)?;
        Ok((point, depth))
    }
}

/// project(transform(point)) − observed, or a behind-camera error when the
/// transformed point has non-positive depth.
pub fn reprojection_residual(
    intr: &CameraIntrinsics,
    pose_a_to_b: &PoseSE3,
    point_in_a: &Vector3<f64>,
    observed_in_b: &Vector2<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let p_b = pose_a_to_b.transform(point_in_a);
    let proj = intr.project(&p_b)?;
    Ok(proj - observed_in_b)
}
