//! Pinhole camera model and rigid transforms.
//!
//! Camera frame convention: x right, y down, z forward. Pixel coordinates are
//! continuous with integer values at pixel centers, so pixel `(col, row)` has
//! coordinate `(col as T, row as T)`.
//!
//! ```text
//! unproject: X = ((u - cx) d / fx, (v - cy) d / fy, d)
//! project:   u = fx x / z + cx,  v = fy y / z + cy
//! ```

use std::ops::{Add, Mul, Neg, Sub};

use crate::scalar::Real;

/// Tolerance for the orthonormality and determinant checks on rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    PixelOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    #[inline]
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > T::zero() && n.is_finite() {
            Some(self * (T::one() / n))
        } else {
            None
        }
    }

    #[inline]
    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn from_rows(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    /// Matrix whose columns are `a`, `b`, `c`.
    pub fn from_columns(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Self {
        Self {
            m: [[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]],
        }
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Self {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn determinant(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Self { m: out }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, o: &Self) -> T {
        let mut d = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.m[i][j] - o.m[i][j]).abs());
            }
        }
        d
    }
}

/// Pinhole intrinsics plus the image size they apply to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if !(self.fx > T::zero() && self.fy > T::zero()) || !self.fx.is_finite() || !self.fy.is_finite() {
            return bad(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty image size {}x{}", self.width, self.height));
        }
        let w = T::from_usize_lossy(self.width);
        let h = T::from_usize_lossy(self.height);
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return bad(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            ));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Intrinsics {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
        }
    }

    /// Viewing ray `K⁻¹ p` with unit z component.
    #[inline]
    pub fn ray(&self, p: Pixel<T>) -> Vec3<T> {
        Vec3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, T::one())
    }

    #[inline]
    pub fn contains(&self, p: Pixel<T>) -> bool {
        let max_x = T::from_usize_lossy(self.width - 1);
        let max_y = T::from_usize_lossy(self.height - 1);
        p.x >= T::zero() && p.y >= T::zero() && p.x <= max_x && p.y <= max_y
    }
}

/// Continuous pixel coordinate: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pixel<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Pixel<T> {
    #[inline]
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    /// Center of the pixel at `(row, col)`.
    #[inline]
    pub fn center(row: usize, col: usize) -> Self {
        Self::new(T::from_usize_lossy(col), T::from_usize_lossy(row))
    }
}

/// Lifts pixel `p` at depth `d` into the camera frame.
pub fn unproject<T: Real>(p: Pixel<T>, d: T, k: &Intrinsics<T>) -> Result<Vec3<T>, GeometryError> {
    if !(d > T::zero()) || !d.is_finite() {
        return Err(GeometryError::InvalidDepth(d.to_f64_lossy()));
    }
    if !k.contains(p) {
        return Err(GeometryError::PixelOutOfBounds {
            x: p.x.to_f64_lossy(),
            y: p.y.to_f64_lossy(),
            width: k.width,
            height: k.height,
        });
    }
    Ok(k.ray(p) * d)
}

/// Projects a camera-frame point, returning the pixel and its depth.
pub fn project<T: Real>(x: Vec3<T>, k: &Intrinsics<T>) -> Result<(Pixel<T>, T), GeometryError> {
    if !(x.z > T::zero()) {
        return Err(GeometryError::BehindCamera(x.z.to_f64_lossy()));
    }
    Ok((
        Pixel::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy),
        x.z,
    ))
}

/// Rotation followed by translation: `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    rotation: Mat3<T>,
    translation: Vec3<T>,
}

impl<T: Real> RigidTransform<T> {
    /// Validates that `rotation` is a proper rotation; it is never repaired.
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self, GeometryError> {
        let tol = T::lit(ROTATION_TOLERANCE);
        let gram = rotation.transpose().mul_mat(&rotation);
        let ortho = gram.max_abs_diff(&Mat3::identity());
        if !(ortho <= tol) {
            return Err(GeometryError::InvalidRotation(format!(
                "RᵀR deviates from identity by {ortho}"
            )));
        }
        let det = rotation.determinant();
        if !((det - T::one()).abs() <= tol) {
            return Err(GeometryError::InvalidRotation(format!("det(R) = {det}")));
        }
        let t = translation;
        if !(t.x.is_finite() && t.y.is_finite() && t.z.is_finite()) {
            return Err(GeometryError::InvalidRotation("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
        }
    }

    /// Builds from a row-major 4×4 homogeneous matrix (last row ignored).
    pub fn from_matrix(m: [[T; 4]; 4]) -> Result<Self, GeometryError> {
        let rotation = Mat3::from_rows([
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]);
        Self::new(rotation, Vec3::new(m[0][3], m[1][3], m[2][3]))
    }

    pub fn to_matrix(&self) -> [[T; 4]; 4] {
        let r = &self.rotation.m;
        let t = self.translation;
        let (o, z) = (T::one(), T::zero());
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
            [z, z, z, o],
        ]
    }

    #[inline]
    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> Vec3<T> {
        self.translation
    }

    #[inline]
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.rotation.mul_vec(other.translation) + self.translation,
        }
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        let r = &self.rotation.m;
        RigidTransform {
            rotation: Mat3::from_rows([
                [c(r[0][0]), c(r[0][1]), c(r[0][2])],
                [c(r[1][0]), c(r[1][1]), c(r[1][2])],
                [c(r[2][0]), c(r[2][1]), c(r[2][2])],
            ]),
            translation: Vec3::new(
                c(self.translation.x),
                c(self.translation.y),
                c(self.translation.z),
            ),
        }
    }

    /// Largest absolute difference over rotation and translation entries.
    pub fn max_abs_diff(&self, o: &Self) -> T {
        let dt = self.translation - o.translation;
        self.rotation
            .max_abs_diff(&o.rotation)
            .max(dt.x.abs())
            .max(dt.y.abs())
            .max(dt.z.abs())
    }
}

/// Maps target-camera coordinates to source-camera coordinates, given both
/// camera-to-world poses: `source⁻¹ ∘ target`.
pub fn relative_transform<T: Real>(
    pose_target: &RigidTransform<T>,
    pose_source: &RigidTransform<T>,
) -> RigidTransform<T> {
    pose_source.inverse().compose(pose_target)
}
