//! Rigid transforms, pinhole projection, positional encoding and the
//! Umeyama similarity solver.
//!
//! Conventions used throughout the crate:
//! - camera frame: z forward, x right, y down;
//! - `Pose` is an SE(3) map `p -> R p + t`, serialized as a row-major 3x4
//!   matrix (12 numbers);
//! - camera poses are camera-to-world, so `pose.translation` is the camera
//!   center in world coordinates.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const ORTHONORMALITY_TOL: f64 = 1e-6;
/// Depth below which a point counts as behind the image plane.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation block is not orthonormal (max deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },
    #[error("rotation block has determinant {det:.6}, expected +1")]
    ImproperRotation { det: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point is behind the camera (z = {z:.3e})")]
    BehindCamera { z: f64 },
    #[error("point configuration is degenerate: {0}")]
    DegenerateConfiguration(String),
    #[error("expected 12 pose entries, got {0}")]
    BadPoseLength(usize),
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Validates orthonormality (`R^T R = I` within 1e-6) and `det R = +1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let deviation = (gram - Matrix3::identity()).abs().max();
        if deviation > ORTHONORMALITY_TOL {
            return Err(GeometryError::InvalidRotation { deviation });
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(GeometryError::ImproperRotation { det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rows(rows: &[f64]) -> Result<Self, GeometryError> {
        if rows.len() != 12 {
            return Err(GeometryError::BadPoseLength(rows.len()));
        }
        let rotation = Matrix3::new(
            rows[0], rows[1], rows[2], rows[4], rows[5], rows[6], rows[8], rows[9], rows[10],
        );
        let translation = Vector3::new(rows[3], rows[7], rows[11]);
        Self::new(rotation, translation)
    }

    /// Row-major 3x4 layout: each row is three rotation entries then the
    /// translation component.
    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<f64>::deserialize(deserializer)?;
        Pose::from_rows(&rows).map_err(D::Error::custom)
    }
}

/// Pinhole intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn image_diagonal(&self) -> f64 {
        ((self.width as f64).powi(2) + (self.height as f64).powi(2)).sqrt()
    }
}

/// Continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

/// Similarity transform `p -> s R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Maps a camera-to-world pose into the transformed world frame.
    pub fn apply_pose(&self, p: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * p.rotation,
            translation: self.apply(&p.translation),
        }
    }
}

/// One camera: camera-to-world pose, intrinsics and a normalized timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub timestamp: f64,
}

impl CameraView {
    /// World-to-camera form `(R^T, -R^T t)` used by the rasterizer.
    pub fn world_to_camera(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let rt = self.pose.rotation.transpose();
        (rt, -(rt * self.pose.translation))
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

pub fn pose_inverse(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * p.translation),
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

/// Pose of `p_i` expressed in the camera frame of `p_nov`:
/// `(p_nov)^-1 * p_i`.
pub fn ccm_relative_pose(p_nov: &Pose, p_i: &Pose) -> Pose {
    pose_compose(&pose_inverse(p_nov), p_i)
}

/// Projects the translation of a relative pose through the pinhole model.
pub fn ppm_project(relative: &Pose, k: &Intrinsics) -> Result<PixelPoint, GeometryError> {
    let t = relative.translation;
    if t.z <= MIN_PROJECTION_DEPTH {
        return Err(GeometryError::BehindCamera { z: t.z });
    }
    Ok(PixelPoint {
        u: k.fx * t.x / t.z + k.cx,
        v: k.fy * t.y / t.z + k.cy,
    })
}

/// Frequency encoding: for each input component `v` emits
/// `sin(2^k v), cos(2^k v)` for `k = 0..bands`.
pub fn positional_encoding(values: &[f64], bands: usize) -> Vec<f64> {
    assert!(bands >= 1, "positional encoding needs at least one band");
    let mut out = Vec::with_capacity(values.len() * 2 * bands);
    for &v in values {
        let mut freq = 1.0;
        for _ in 0..bands {
            let x = freq * v;
            out.push(x.sin());
            out.push(x.cos());
            freq *= 2.0;
        }
    }
    out
}

/// Output length of [`positional_encoding`] for a given input dimension.
pub fn positional_encoding_len(dim: usize, bands: usize) -> usize {
    dim * 2 * bands
}

/// Least-squares similarity alignment `dst ~ s R src + t` (Umeyama): SVD of
/// the cross-covariance with the determinant-sign correction.
pub fn umeyama_align(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<Similarity, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "point lists differ in length: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "need at least 3 correspondences, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mean_src: Vector3<f64> = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mean_dst: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() * inv_n;

    let mut cov = Matrix3::<f64>::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst.iter()) {
        let sc = s - mean_src;
        let dc = d - mean_dst;
        cov += dc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov *= inv_n;
    var_src *= inv_n;

    if var_src <= f64::EPSILON {
        return Err(GeometryError::DegenerateConfiguration(
            "source points are coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sigma = svd.singular_values;

    // Collinear points leave the cross-covariance rank-deficient below rank 2
    // and the rotation underdetermined.
    let scale_ref = sigma[0].max(var_src);
    if sigma[1] <= 1e-12 * scale_ref.max(1.0) {
        return Err(GeometryError::DegenerateConfiguration(
            "points are collinear or coincident".into(),
        ));
    }

    let mut s_fix = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_fix[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_fix) * v_t;
    let scale = (sigma[0] * s_fix[0] + sigma[1] * s_fix[1] + sigma[2] * s_fix[2]) / var_src;
    if scale <= 0.0 {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "recovered non-positive scale {scale}"
        )));
    }
    let translation = mean_dst - scale * (rotation * mean_src);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}
