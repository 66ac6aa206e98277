//! Multi-view geometry: fundamental matrices, PnP, similarity alignment and
//! the local-alignment error used to score relocalization.
//!
//! Conventions: poses map world to camera (`x_c = R x_w + t`), the camera
//! looks along +z with x right and y down, and a fundamental matrix `F`
//! relates image-1 point `x` to image-2 point `x'` by `x'^T F x = 0`.

mod align;
mod fundamental;
mod pnp;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

pub use align::{local_alignment_error, umeyama, SimTransform, DEFAULT_ALIGN_WINDOW};
pub use fundamental::{
    epipolar_error, fundamental_8point, ransac_fundamental, FundamentalRansac, DEFAULT_F_THRESHOLD_PX,
};
pub use pnp::{pnp_solve, ransac_pnp, reprojection_error, reprojection_inliers, PnpRansac};

pub type Pixel = Vector2<f64>;

/// 99% probability of drawing at least one all-inlier sample.
pub const RANSAC_CONFIDENCE: f64 = 0.99;
pub const DEFAULT_RANSAC_ITERS: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("pose refinement did not converge (last mean squared residual {residual} px^2)")]
    NotConverged { residual: f64 },
    #[error("only {found} keyframes in the alignment window, need {needed}")]
    InsufficientWindow { found: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(GeomError::InvalidParameter(format!("intrinsics fx={fx} fy={fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pixel of a camera-frame point, or `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Pixel> {
        (p.z > 0.0).then(|| Pixel::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Normalized image coordinates of a pixel.
    pub fn normalize(&self, px: &Pixel) -> Pixel {
        Pixel::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Pose of a camera placed at world position `center` with the given
    /// camera-to-world rotation.
    pub fn from_center(cam_to_world: Matrix3<f64>, center: Vector3<f64>) -> Self {
        let r = cam_to_world.transpose();
        Self {
            rotation: r,
            translation: -(r * center),
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&self.rotation))
    }

    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn is_valid_rotation(&self, tol: f64) -> bool {
        (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max()
            <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }
}

/// Nearest rotation (Frobenius) to an arbitrary 3x3 matrix.
pub(crate) fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // nalgebra orders singular values descending, so the flip lands on the
    // smallest one.
    u * d * vt
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Iterations needed to hit `RANSAC_CONFIDENCE` with the observed inlier
/// ratio and sample size.
pub(crate) fn adaptive_iterations(inliers: usize, total: usize, sample: usize, cap: usize) -> usize {
    if inliers == 0 {
        return cap;
    }
    let w = inliers as f64 / total as f64;
    let p_good = w.powi(sample as i32);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let n = ((1.0 - RANSAC_CONFIDENCE).ln() / (1.0 - p_good).ln()).ceil();
    if n.is_finite() && n >= 0.0 {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}
