//! Pinhole camera model, two-view triangulation and reprojection error.
//!
//! Pixel coordinates have their origin at the top-left corner of the image
//! with `v` increasing downward. Camera frames follow the same convention:
//! `x` right, `y` down, `z` forward.

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Camera-frame depth at or below which a projection is rejected.
pub const MIN_DEPTH: f64 = 1e-12;

/// Reprojection error charged for a point behind a camera.
pub const DEFAULT_BEHIND_PENALTY: f64 = 1e6;

/// Camera centers closer than this are treated as coincident.
pub const MIN_BASELINE: f64 = 1e-9;

/// Relative singular-value gap below which the DLT null space is ambiguous.
pub const MIN_SINGULAR_GAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidIntrinsics("principal point not finite".into()));
        }
        Ok(())
    }

    /// Maps a pixel to normalized image coordinates (`z = 1` plane).
    pub fn normalize(&self, px: &Pixel<T>) -> (T, T) {
        ((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy)
    }
}

/// World-to-camera rigid transform: `p_cam = rotation * p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from an axis-angle rotation vector and a translation.
    pub fn from_axis_angle(rotation: Vector3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: Rotation3::new(rotation).into_inner(),
            translation,
        }
    }

    /// Pose of a camera at `center` looking at `target`, with image `v` aligned to `down`.
    pub fn look_at(center: Point3<T>, target: Point3<T>, down: Vector3<T>) -> Result<Self> {
        let forward = target - center;
        let norm = forward.norm();
        if norm <= T::lit(MIN_BASELINE) {
            return Err(Error::InvalidPose("look_at target coincides with center".into()));
        }
        let z = forward / norm;
        let y = down - z * z.dot(&down);
        let y_norm = y.norm();
        if y_norm <= T::lit(1e-9) {
            return Err(Error::InvalidPose("down vector parallel to viewing direction".into()));
        }
        let y = y / y_norm;
        let x = y.cross(&z);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center.coords);
        Pose::new(rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = T::orthonormal_tolerance();
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if !(dev <= tol) {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (max |R^T R - I| = {dev})"
            )));
        }
        let det = self.rotation.determinant();
        if !((det - T::one()).abs() <= tol) {
            return Err(Error::InvalidPose(format!("rotation determinant {det} != 1")));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidPose("translation not finite".into()));
        }
        Ok(())
    }

    pub fn transform(&self, p: &Point3<T>) -> Vector3<T> {
        self.rotation * p.coords + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<T> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Left-multiplies an axis-angle increment onto the rotation and adds a translation increment.
    pub fn retract(&self, omega: &Vector3<T>, delta_t: &Vector3<T>) -> Self {
        let r = Rotation3::new(*omega).into_inner() * self.rotation;
        Self {
            rotation: renormalize(&r),
            translation: self.translation + delta_t,
        }
    }
}

/// Projects a nearly orthonormal matrix back onto SO(3).
fn renormalize<T: Real>(r: &Matrix3<T>) -> Matrix3<T> {
    // Seeded with the input itself, the iteration only removes round-off.
    Rotation3::from_matrix_eps(r, T::default_epsilon(), 100, Rotation3::from_matrix_unchecked(*r)).into_inner()
}

/// Image position in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pixel<T> {
    pub u: T,
    pub v: T,
}

impl<T: Real> Pixel<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel<T>) -> T {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

impl<T: Real> Serialize for Pixel<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.u, self.v].serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for Pixel<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [u, v] = <[T; 2]>::deserialize(d)?;
        Ok(Pixel { u, v })
    }
}

/// A calibrated view: intrinsics, pose and image frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    bound = "T: Real",
    try_from = "CameraRecord<T>",
    into = "CameraRecord<T>"
)]
pub struct CameraView<T: Real> {
    pub intrinsics: Intrinsics<T>,
    pub pose: Pose<T>,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraView<T> {
    pub fn new(intrinsics: Intrinsics<T>, pose: Pose<T>, width: u32, height: u32) -> Result<Self> {
        let view = Self {
            intrinsics,
            pose,
            width,
            height,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidView(format!(
                "image size must be at least 1x1 (got {}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point3<T> {
        self.pose.center()
    }

    /// Whether a pixel lies inside `[0, width) x [0, height)`.
    pub fn contains(&self, px: &Pixel<T>) -> bool {
        px.u >= T::zero()
            && px.v >= T::zero()
            && px.u < T::lit(self.width as f64)
            && px.v < T::lit(self.height as f64)
    }

    /// Projects a camera-frame point through the intrinsics.
    pub fn project_camera_point(&self, pc: &Vector3<T>) -> Result<Pixel<T>> {
        if !(pc.z > T::lit(MIN_DEPTH)) {
            return Err(Error::DegenerateProjection {
                depth: pc.z.as_f64(),
            });
        }
        let k = &self.intrinsics;
        Ok(Pixel {
            u: k.fx * (pc.x / pc.z) + k.cx,
            v: k.fy * (pc.y / pc.z) + k.cy,
        })
    }
}

/// Serialized camera layout: intrinsics, image size, row-major rotation and translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct CameraRecord<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
    pub rotation: [T; 9],
    pub translation: [T; 3],
}

impl<T: Real> TryFrom<CameraRecord<T>> for CameraView<T> {
    type Error = Error;

    fn try_from(r: CameraRecord<T>) -> Result<Self> {
        let rotation = Matrix3::from_row_slice(&r.rotation);
        let translation = Vector3::from_column_slice(&r.translation);
        CameraView::new(
            Intrinsics::new(r.fx, r.fy, r.cx, r.cy)?,
            Pose::new(rotation, translation)?,
            r.width,
            r.height,
        )
    }
}

impl<T: Real> From<CameraView<T>> for CameraRecord<T> {
    fn from(v: CameraView<T>) -> Self {
        let mut rotation = [T::zero(); 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = v.pose.rotation[(r, c)];
            }
        }
        CameraRecord {
            fx: v.intrinsics.fx,
            fy: v.intrinsics.fy,
            cx: v.intrinsics.cx,
            cy: v.intrinsics.cy,
            width: v.width,
            height: v.height,
            rotation,
            translation: [v.pose.translation.x, v.pose.translation.y, v.pose.translation.z],
        }
    }
}

/// Projects a world point into a view.
pub fn project<T: Real>(view: &CameraView<T>, p: &Point3<T>) -> Result<Pixel<T>> {
    view.project_camera_point(&view.pose.transform(p))
}

/// Linear (DLT) triangulation of one point seen in two views.
///
/// The constraints are stacked in normalized image coordinates, each row
/// scaled to unit length, and solved through the SVD null vector.
pub fn triangulate_pair<T: Real>(
    view_a: &CameraView<T>,
    view_b: &CameraView<T>,
    px_a: &Pixel<T>,
    px_b: &Pixel<T>,
) -> Result<Point3<T>> {
    if !(px_a.u.is_finite() && px_a.v.is_finite() && px_b.u.is_finite() && px_b.v.is_finite()) {
        return Err(Error::IllConditioned("non-finite pixel"));
    }
    if (view_a.center() - view_b.center()).norm() < T::lit(MIN_BASELINE) {
        return Err(Error::DegenerateBaseline);
    }

    let mut a = Matrix4::<T>::zeros();
    for (k, (view, px)) in [(view_a, px_a), (view_b, px_b)].into_iter().enumerate() {
        let (x, y) = view.intrinsics.normalize(px);
        let r = &view.pose.rotation;
        let t = &view.pose.translation;
        // Row i of the 3x4 matrix [R | t].
        let row = |i: usize| nalgebra::RowVector4::new(r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
        let r0 = row(2) * x - row(0);
        let r1 = row(2) * y - row(1);
        for (j, constraint) in [r0, r1].into_iter().enumerate() {
            let n = constraint.norm();
            if n <= T::zero() {
                return Err(Error::IllConditioned("zero constraint row"));
            }
            a.set_row(2 * k + j, &(constraint / n));
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::IllConditioned("SVD did not converge"))?;
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap_or(std::cmp::Ordering::Equal));
    let (largest, second_smallest, smallest) = (s[order[0]], s[order[2]], s[order[3]]);
    if largest <= T::zero() || (second_smallest - smallest) / largest < T::lit(MIN_SINGULAR_GAP) {
        return Err(Error::IllConditioned("DLT null space is not one-dimensional"));
    }
    let h = v_t.row(order[3]);
    let w = h[3];
    if w.abs() <= T::default_epsilon() * h.norm() {
        return Err(Error::IllConditioned("triangulated point at infinity"));
    }
    Ok(Point3::new(h[0] / w, h[1] / w, h[2] / w))
}

/// Sum over views of the pixel distance between the projection of `p` and its observation.
///
/// A view in which `p` is behind the camera contributes [`DEFAULT_BEHIND_PENALTY`].
///
/// # Panics
/// Panics if `views` and `observations` differ in length.
pub fn reprojection_error<T: Real>(views: &[CameraView<T>], p: &Point3<T>, observations: &[Pixel<T>]) -> T {
    reprojection_error_with_penalty(views, p, observations, T::lit(DEFAULT_BEHIND_PENALTY))
}

pub fn reprojection_error_with_penalty<T: Real>(
    views: &[CameraView<T>],
    p: &Point3<T>,
    observations: &[Pixel<T>],
    behind_penalty: T,
) -> T {
    assert_eq!(views.len(), observations.len(), "one observation per view");
    views
        .iter()
        .zip(observations)
        .map(|(view, obs)| match project(view, p) {
            Ok(px) => px.distance(obs),
            Err(_) => behind_penalty,
        })
        .fold(T::zero(), |acc, e| acc + e)
}
