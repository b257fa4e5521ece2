use nalgebra::{Point3, Vector3};

use super::AngleConstraint;
use crate::scalar::Real;

/// Segments shorter than this are degenerate and their constraints are skipped.
pub const MIN_SEGMENT_LENGTH: f64 = 1e-9;

/// Angle between two direction vectors and its gradients with respect to each.
/// `None` if either vector is shorter than [`MIN_SEGMENT_LENGTH`].
pub fn segment_angle<T: Real>(d1: &Vector3<T>, d2: &Vector3<T>) -> Option<(T, Vector3<T>, Vector3<T>)> {
    let (n1, n2) = (d1.norm(), d2.norm());
    let min = T::lit(MIN_SEGMENT_LENGTH);
    if n1 < min || n2 < min {
        return None;
    }
    let (u1, u2) = (d1 / n1, d2 / n2);
    let sin = u1.cross(&u2).norm();
    let cos = u1.dot(&u2);
    let theta = sin.atan2(cos);
    if sin <= T::default_epsilon() {
        // Parallel segments: the angle is at an extremum of its range.
        return Some((theta, Vector3::zeros(), Vector3::zeros()));
    }
    let g1 = (u1 * cos - u2) / (n1 * sin);
    let g2 = (u2 * cos - u1) / (n2 * sin);
    Some((theta, g1, g2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnglePenalty<T: Real> {
    /// `sum (theta - theta_ref)^2` over usable constraints.
    pub value: T,
    /// Gradient with respect to every point.
    pub gradient: Vec<Vector3<T>>,
    /// Indices of constraints skipped for degenerate segments.
    pub skipped: Vec<usize>,
}

pub fn angle_penalty<T: Real>(points: &[Point3<T>], constraints: &[AngleConstraint<T>]) -> AnglePenalty<T> {
    let mut out = AnglePenalty {
        value: T::zero(),
        gradient: vec![Vector3::zeros(); points.len()],
        skipped: Vec::new(),
    };
    for (k, c) in constraints.iter().enumerate() {
        let d1 = points[c.a[1]] - points[c.a[0]];
        let d2 = points[c.b[1]] - points[c.b[0]];
        let Some((theta, g1, g2)) = segment_angle(&d1, &d2) else {
            log::warn!("angle constraint {k}: degenerate segment, skipped");
            out.skipped.push(k);
            continue;
        };
        let r = theta - c.reference;
        out.value += r * r;
        let two_r = r + r;
        out.gradient[c.a[1]] += g1 * two_r;
        out.gradient[c.a[0]] -= g1 * two_r;
        out.gradient[c.b[1]] += g2 * two_r;
        out.gradient[c.b[0]] -= g2 * two_r;
    }
    out
}
