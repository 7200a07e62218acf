//! Pinhole camera model, rigid transformations, rigid flow and the
//! rotation-induced homography.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, FlowField, ValidityMask};

/// Points transformed to a depth at or below this are masked invalid.
pub const MIN_VALID_Z: f64 = 1e-6;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "intrinsics need finite values and positive focal lengths, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K⁻¹ [x, y, 1]ᵀ`: the viewing ray through a pixel, with unit z.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Lifts pixel `p` at depth `d` to a 3D point in the camera frame.
    pub fn backproject(&self, p: Vector2<f64>, d: f64) -> Result<Vector3<f64>> {
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::InvalidInput(format!(
                "depth must be positive, got {d}"
            )));
        }
        Ok(self.ray(p.x, p.y) * d)
    }

    /// Perspective projection of a camera-frame point.
    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(x.z > 0.0) {
            return Err(Error::BehindCamera { z: x.z });
        }
        Ok(self.project_unchecked(x))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, x: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }

    /// Jacobian of the projection w.r.t. the camera-frame point, as rows (du, dv).
    #[inline]
    pub(crate) fn projection_jacobian(&self, x: &Vector3<f64>) -> [Vector3<f64>; 2] {
        let iz = 1.0 / x.z;
        [
            Vector3::new(self.fx * iz, 0.0, -self.fx * x.x * iz * iz),
            Vector3::new(0.0, self.fy * iz, -self.fy * x.y * iz * iz),
        ]
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if !(ortho < 1e-9) || !(self.rotation.determinant() > 0.0) {
            return Err(Error::InvalidInput(format!(
                "rotation is not a proper orthonormal matrix (|RᵀR − I|∞ = {ortho:e})"
            )));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self {
            rotation: r,
            translation: Vector3::zeros(),
        }
    }

    /// Pose from an axis-angle vector and a translation.
    pub fn from_axis_angle(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(&omega),
            translation: t,
        }
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        so3_log(&self.rotation)
    }

    /// Returns `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Pose with the same rotation and translation multiplied by `s`.
    pub fn with_scaled_translation(&self, s: f64) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }

    /// Rotation angle of `self⁻¹ ∘ other`.
    pub fn rotation_distance(&self, other: &PoseSE3) -> f64 {
        so3_log(&(self.rotation.transpose() * other.rotation)).norm()
    }
}

pub fn compose_pose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    a.compose(b)
}

pub fn invert_pose(a: &PoseSE3) -> PoseSE3 {
    a.inverse()
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + w * a + w * w * b
}

/// Inverse of [`so3_exp`] for angles in `[0, π]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = 0.5 * vee.norm();
    let cos = (r.trace() - 1.0) * 0.5;
    let theta = sin.atan2(cos);
    if theta < 1e-6 {
        return vee * 0.5;
    }
    if std::f64::consts::PI - theta < 1e-3 {
        // Near π: recover the axis from the symmetric part,
        // (R + Rᵀ)/2 = cos θ·I + (1 − cos θ)·n nᵀ.
        let sym = (r + r.transpose()) * 0.5;
        let mut col = 0;
        for i in 1..3 {
            if sym[(i, i)] > sym[(col, col)] {
                col = i;
            }
        }
        let mut b = sym;
        for i in 0..3 {
            b[(i, i)] -= cos;
        }
        let mut axis: Vector3<f64> = b.column(col).into();
        axis /= axis.norm();
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

/// Left Jacobian of SO(3): `exp(ω + δ) ≈ exp(J_l(ω) δ) exp(ω)`.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * a + w * w * b
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Projective transform of the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
}

impl Homography {
    /// Wraps `m`, scaling it so the bottom-right entry is 1 when it is nonzero.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let det = m.determinant();
        if !det.is_finite() || det == 0.0 {
            return Err(Error::RankDeficient("homography is singular".into()));
        }
        let m = if m[(2, 2)] != 0.0 { m / m[(2, 2)] } else { m };
        Ok(Self { matrix: m })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Maps a pixel; `None` when it lands on the line at infinity.
    pub fn apply(&self, p: Vector2<f64>) -> Option<Vector2<f64>> {
        let q = self.matrix * Vector3::new(p.x, p.y, 1.0);
        if q.z == 0.0 {
            return None;
        }
        Some(Vector2::new(q.x / q.z, q.y / q.z))
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.matrix
            .try_inverse()
            .and_then(|m| Homography::new(m).ok())
    }

    /// Frobenius distance after scaling both to unit norm with matching sign.
    pub fn distance(&self, other: &Homography) -> f64 {
        let a = self.matrix / self.matrix.norm();
        let b = other.matrix / other.matrix.norm();
        (a - b).norm().min((a + b).norm())
    }
}

/// `H = K R K⁻¹`, the image-plane map induced by a pure rotation.
pub fn homography_from_rotation(r: &Matrix3<f64>, k: &Intrinsics) -> Homography {
    let m = k.matrix() * r * k.inverse_matrix();
    // R is orthonormal, so det(H) = 1 before normalization.
    Homography::new(m).unwrap_or_else(|_| Homography::identity())
}

/// Rigid flow of one pixel with viewing ray `ray` (unit z) at depth `d`,
/// plus the transformed point. Written as a difference in normalized
/// coordinates so that the identity pose yields exactly zero.
#[inline]
pub(crate) fn flow_at(
    k: &Intrinsics,
    ray: &Vector3<f64>,
    d: f64,
    pose: &PoseSE3,
) -> Option<([f64; 2], Vector3<f64>)> {
    let rr = pose.rotation * ray;
    let t = &pose.translation;
    let z = d * rr.z + t.z;
    if z <= MIN_VALID_Z {
        return None;
    }
    let nx = d * (rr.x - ray.x * rr.z) + (t.x - ray.x * t.z);
    let ny = d * (rr.y - ray.y * rr.z) + (t.y - ray.y * t.z);
    let q = Vector3::new(d * rr.x + t.x, d * rr.y + t.y, z);
    Some(([k.fx * nx / z, k.fy * ny / z], q))
}

/// Flow induced by camera motion `pose` (target to source) over a static scene
/// with target-view depth `depth`. Pixels transformed to `z ≤ MIN_VALID_Z`
/// get zero flow and are marked invalid.
pub fn rigid_flow(depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics) -> (FlowField, ValidityMask) {
    let (w, h) = depth.dims();
    let mut flow = FlowField::zeros(w, h);
    let mut mask = ValidityMask::filled(w, h, true);
    for y in 0..h {
        for x in 0..w {
            let ray = k.ray(x as f64, y as f64);
            match flow_at(k, &ray, depth.get(x, y), pose) {
                Some((f, _)) => flow.set(x, y, f),
                None => mask.set(x, y, false),
            }
        }
    }
    (flow, mask)
}
