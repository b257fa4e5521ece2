use super::BoxXYWH;
use crate::scalar::Real;

/// Overlap of two intervals given by center and length, computed from the
/// center offset so that identical intervals overlap by exactly their length.
fn overlap<T: Real>(ca: T, la: T, cb: T, lb: T) -> T {
    let half_sum = (la + lb) / T::lit(2.0);
    (half_sum - (ca - cb).abs()).min(la).min(lb).max(T::zero())
}

fn intersection<T: Real>(a: &BoxXYWH<T>, b: &BoxXYWH<T>) -> T {
    overlap(a.cx, a.w, b.cx, b.w) * overlap(a.cy, a.h, b.cy, b.h)
}

/// Intersection over union of two boxes with positive size.
pub fn iou<T: Real>(a: &BoxXYWH<T>, b: &BoxXYWH<T>) -> T {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Complete IoU: IoU minus the normalized squared center distance and the
/// weighted aspect-ratio consistency term. Lies in `(-1.5, 1]`: the aspect term can push disjoint boxes below -1.
pub fn ciou<T: Real>(a: &BoxXYWH<T>, b: &BoxXYWH<T>) -> T {
    let iou = iou(a, b);
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let cw = ax1.max(bx1) - ax0.min(bx0);
    let ch = ay1.max(by1) - ay0.min(by0);
    let c2 = cw * cw + ch * ch;
    let rho2 = (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2);

    let pi = T::PI();
    let v = T::lit(4.0) / (pi * pi) * ((b.w / b.h).atan() - (a.w / a.h).atan()).powi(2);
    let alpha = if v > T::zero() {
        v / ((T::one() - iou) + v)
    } else {
        T::zero()
    };
    let distance = if c2 > T::zero() { rho2 / c2 } else { T::zero() };
    iou - distance - alpha * v
}
