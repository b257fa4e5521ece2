//! Anchor-grid detection codec.
//!
//! Decodes raw per-cell logits into lateral-root boxes and start/end
//! keypoints, provides the exact inverse encoder, and evaluates the
//! multi-task detection loss as a pure function of prediction and target
//! grids.

mod ciou;
pub mod grid;
mod loss;

use serde::{Deserialize, Serialize};

use crate::camera::Pixel;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub use ciou::{ciou, iou};
pub use loss::{multitask_loss, LossBreakdown, LossWeights};

/// Number of keypoints per lateral root: start (junction end) and end (tip).
pub const KEYPOINTS: usize = 2;

/// Downsampling factor of a prediction grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Stride {
    S8,
    S16,
    S32,
    S64,
}

impl Stride {
    pub const ALL: [Stride; 4] = [Stride::S8, Stride::S16, Stride::S32, Stride::S64];

    pub fn pixels(self) -> u32 {
        match self {
            Stride::S8 => 8,
            Stride::S16 => 16,
            Stride::S32 => 32,
            Stride::S64 => 64,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u32> for Stride {
    type Error = Error;

    fn try_from(s: u32) -> Result<Self> {
        match s {
            8 => Ok(Stride::S8),
            16 => Ok(Stride::S16),
            32 => Ok(Stride::S32),
            64 => Ok(Stride::S64),
            other => Err(Error::InvalidAnchor(format!("unsupported stride {other}"))),
        }
    }
}

impl From<Stride> for u32 {
    fn from(s: Stride) -> u32 {
        s.pixels()
    }
}

/// Prior box size (pixels) at a given stride.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSpec<T: Real> {
    pub width: T,
    pub height: T,
    pub stride: Stride,
}

impl<T: Real> AnchorSpec<T> {
    pub fn new(width: T, height: T, stride: Stride) -> Result<Self> {
        if !(width > T::zero() && height > T::zero() && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidAnchor(format!("anchor size {width}x{height}")));
        }
        Ok(Self { width, height, stride })
    }

    fn s(&self) -> T {
        T::lit(self.stride.pixels() as f64)
    }
}

/// Grid cell index: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct GridCell {
    pub x: usize,
    pub y: usize,
}

/// Where a decoded detection came from. Ordering is the tie-break order used by filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridProvenance {
    pub stride: Stride,
    pub cell_y: usize,
    pub cell_x: usize,
    pub anchor: usize,
}

/// Raw network output for one anchor of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCellPrediction<T: Real> {
    pub objectness_logit: T,
    /// `(t'_x, t'_y, t'_w, t'_h)`.
    pub box_logits: [T; 4],
    /// `(v'_x, v'_y)` per keypoint.
    pub keypoint_logits: Vec<[T; 2]>,
}

impl<T: Real> RawCellPrediction<T> {
    pub fn zeros(keypoints: usize) -> Self {
        Self {
            objectness_logit: T::zero(),
            box_logits: [T::zero(); 4],
            keypoint_logits: vec![[T::zero(); 2]; keypoints],
        }
    }
}

/// Axis-aligned box in center/size form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXYWH<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Real> BoxXYWH<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        Self { cx, cy, w, h }
    }

    /// `(x_min, y_min, x_max, y_max)`.
    pub fn corners(&self) -> (T, T, T, T) {
        let two = T::lit(2.0);
        (
            self.cx - self.w / two,
            self.cy - self.h / two,
            self.cx + self.w / two,
            self.cy + self.h / two,
        )
    }

    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        let two = T::lit(2.0);
        Self {
            cx: (x0 + x1) / two,
            cy: (y0 + y1) / two,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: &Pixel<T>) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        p.u >= x0 && p.u <= x1 && p.v >= y0 && p.v <= y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint<T> {
    pub pixel: Pixel<T>,
    pub visible: bool,
}

/// One lateral root detected in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D<T: Real> {
    pub bbox: BoxXYWH<T>,
    pub score: T,
    /// `[start, end]`.
    pub keypoints: [Keypoint<T>; KEYPOINTS],
    pub provenance: Option<GridProvenance>,
}

impl<T: Real> Detection2D<T> {
    pub fn start(&self) -> &Pixel<T> {
        &self.keypoints[0].pixel
    }

    pub fn end(&self) -> &Pixel<T> {
        &self.keypoints[1].pixel
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct DetectionRecord<T: Real> {
    #[serde(rename = "box")]
    bbox: [T; 4],
    score: T,
    keypoints: [[T; 3]; KEYPOINTS],
}

impl<T: Real> Serialize for Detection2D<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let vis = |k: &Keypoint<T>| if k.visible { T::one() } else { T::zero() };
        DetectionRecord {
            bbox: [self.bbox.cx, self.bbox.cy, self.bbox.w, self.bbox.h],
            score: self.score,
            keypoints: [
                [self.keypoints[0].pixel.u, self.keypoints[0].pixel.v, vis(&self.keypoints[0])],
                [self.keypoints[1].pixel.u, self.keypoints[1].pixel.v, vis(&self.keypoints[1])],
            ],
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for Detection2D<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = DetectionRecord::<T>::deserialize(d)?;
        let [cx, cy, w, h] = r.bbox;
        if !(w > T::zero() && h > T::zero()) {
            return Err(D::Error::custom("detection box must have positive size"));
        }
        if !(r.score >= T::zero() && r.score <= T::one()) {
            return Err(D::Error::custom("detection score must lie in [0, 1]"));
        }
        let kp = |k: [T; 3]| Keypoint {
            pixel: Pixel::new(k[0], k[1]),
            visible: k[2] > T::zero(),
        };
        Ok(Detection2D {
            bbox: BoxXYWH::new(cx, cy, w, h),
            score: r.score,
            keypoints: [kp(r.keypoints[0]), kp(r.keypoints[1])],
            provenance: None,
        })
    }
}

/// Decoding switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecOptions {
    /// Scale keypoint `y` offsets by the anchor height instead of its width.
    pub keypoint_y_uses_ah: bool,
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// Decoded box in grid units (relative to the cell origin) and in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedBox<T> {
    /// `(t_x, t_y, t_w, t_h)` in grid units.
    pub grid: [T; 4],
    pub image: BoxXYWH<T>,
}

pub fn decode_box<T: Real>(raw: &RawCellPrediction<T>, anchor: &AnchorSpec<T>, cell: GridCell) -> DecodedBox<T> {
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let s = anchor.s();
    let [bx, by, bw, bh] = raw.box_logits;
    let tx = two * sigmoid(bx) - half;
    let ty = two * sigmoid(by) - half;
    let tw = anchor.width / s * (two * sigmoid(bw)).powi(2);
    let th = anchor.height / s * (two * sigmoid(bh)).powi(2);
    DecodedBox {
        grid: [tx, ty, tw, th],
        image: BoxXYWH {
            cx: s * (T::lit(cell.x as f64) + tx),
            cy: s * (T::lit(cell.y as f64) + ty),
            w: s * tw,
            h: s * th,
        },
    }
}

fn keypoint_scales<T: Real>(anchor: &AnchorSpec<T>, opts: CodecOptions) -> (T, T) {
    let s = anchor.s();
    let y_dim = if opts.keypoint_y_uses_ah { anchor.height } else { anchor.width };
    (anchor.width / s, y_dim / s)
}

/// Keypoint offsets in grid units relative to the cell origin.
pub fn keypoint_offsets<T: Real>(raw: &RawCellPrediction<T>, anchor: &AnchorSpec<T>, opts: CodecOptions) -> Vec<[T; 2]> {
    let (sx, sy) = keypoint_scales(anchor, opts);
    let four = T::lit(4.0);
    let two = T::lit(2.0);
    raw.keypoint_logits
        .iter()
        .map(|&[lx, ly]| [sx * (four * sigmoid(lx) - two), sy * (four * sigmoid(ly) - two)])
        .collect()
}

/// Decodes keypoints into image pixels.
pub fn decode_keypoints<T: Real>(
    raw: &RawCellPrediction<T>,
    anchor: &AnchorSpec<T>,
    cell: GridCell,
    opts: CodecOptions,
) -> Vec<Pixel<T>> {
    let s = anchor.s();
    keypoint_offsets(raw, anchor, opts)
        .into_iter()
        .map(|[ox, oy]| Pixel::new(s * (T::lit(cell.x as f64) + ox), s * (T::lit(cell.y as f64) + oy)))
        .collect()
}

/// Decodes one cell into a detection. Requires exactly [`KEYPOINTS`] keypoint logits.
pub fn decode_cell<T: Real>(
    raw: &RawCellPrediction<T>,
    anchor: &AnchorSpec<T>,
    cell: GridCell,
    anchor_index: usize,
    opts: CodecOptions,
) -> Result<Detection2D<T>> {
    if raw.keypoint_logits.len() != KEYPOINTS {
        return Err(Error::ShapeMismatch(format!(
            "expected {KEYPOINTS} keypoints, got {}",
            raw.keypoint_logits.len()
        )));
    }
    let bbox = decode_box(raw, anchor, cell).image;
    let kps = decode_keypoints(raw, anchor, cell, opts);
    Ok(Detection2D {
        bbox,
        score: sigmoid(raw.objectness_logit),
        keypoints: [
            Keypoint { pixel: kps[0], visible: true },
            Keypoint { pixel: kps[1], visible: true },
        ],
        provenance: Some(GridProvenance {
            stride: anchor.stride,
            cell_y: cell.y,
            cell_x: cell.x,
            anchor: anchor_index,
        }),
    })
}

fn open_unit<T: Real>(p: T, what: &str) -> Result<T> {
    if p > T::zero() && p < T::one() {
        Ok(logit(p))
    } else {
        Err(Error::Unrepresentable(format!("{what} outside the decodable range")))
    }
}

/// Inverse of [`decode_box`]: logits reproducing an image-space box from a given cell.
pub fn encode_box<T: Real>(bbox: &BoxXYWH<T>, anchor: &AnchorSpec<T>, cell: GridCell) -> Result<[T; 4]> {
    let s = anchor.s();
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let tx = bbox.cx / s - T::lit(cell.x as f64);
    let ty = bbox.cy / s - T::lit(cell.y as f64);
    let lx = open_unit((tx + half) / two, "box x offset")?;
    let ly = open_unit((ty + half) / two, "box y offset")?;
    // t_w = (A_w / s)(2 sigma)^2  =>  sigma = sqrt(w / A_w) / 2
    let lw = open_unit((bbox.w / anchor.width).sqrt() / two, "box width")?;
    let lh = open_unit((bbox.h / anchor.height).sqrt() / two, "box height")?;
    Ok([lx, ly, lw, lh])
}

/// Inverse of [`decode_keypoints`].
pub fn encode_keypoints<T: Real>(
    keypoints: &[Pixel<T>],
    anchor: &AnchorSpec<T>,
    cell: GridCell,
    opts: CodecOptions,
) -> Result<Vec<[T; 2]>> {
    let s = anchor.s();
    let (sx, sy) = keypoint_scales(anchor, opts);
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    keypoints
        .iter()
        .map(|p| {
            let ox = p.u / s - T::lit(cell.x as f64);
            let oy = p.v / s - T::lit(cell.y as f64);
            Ok([
                open_unit((ox / sx + two) / four, "keypoint x offset")?,
                open_unit((oy / sy + two) / four, "keypoint y offset")?,
            ])
        })
        .collect()
}

/// Keeps detections scoring at least `objectness_threshold`, then applies greedy
/// non-maximum suppression: a detection is dropped when its IoU with a
/// higher-ranked kept detection exceeds `iou_threshold`.
///
/// Rank is score descending, then grid provenance ascending, then input order.
pub fn filter_detections<T: Real>(
    detections: &[Detection2D<T>],
    objectness_threshold: T,
    iou_threshold: T,
) -> Vec<Detection2D<T>> {
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= objectness_threshold)
        .collect();
    order.sort_by(|&a, &b| rank_cmp(detections, a, b));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&detections[k].bbox, &detections[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| detections[i].clone()).collect()
}

/// Ordering used by [`filter_detections`].
pub fn rank_cmp<T: Real>(detections: &[Detection2D<T>], a: usize, b: usize) -> std::cmp::Ordering {
    let (da, db) = (&detections[a], &detections[b]);
    db.score
        .partial_cmp(&da.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| match (&da.provenance, &db.provenance) {
            (Some(pa), Some(pb)) => pa.cmp(pb),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        })
        .then(a.cmp(&b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor() -> AnchorSpec<f64> {
        AnchorSpec::new(40.0, 24.0, Stride::S16).unwrap()
    }

    fn raw(v: f64) -> RawCellPrediction<f64> {
        RawCellPrediction {
            objectness_logit: v,
            box_logits: [v; 4],
            keypoint_logits: vec![[v; 2]; 2],
        }
    }

    #[test]
    fn zero_logits_decode_to_anchor() {
        let a = anchor();
        let d = decode_box(&raw(0.0), &a, GridCell { x: 3, y: 2 });
        assert_eq!(d.grid, [0.5, 0.5, 40.0 / 16.0, 24.0 / 16.0]);
        assert_eq!(d.image, BoxXYWH::new(16.0 * 3.5, 16.0 * 2.5, 40.0, 24.0));
        let kps = decode_keypoints(&raw(0.0), &a, GridCell { x: 3, y: 2 }, CodecOptions::default());
        assert_eq!(kps, vec![Pixel::new(48.0, 32.0); 2]);
    }

    #[test]
    fn logit_limits() {
        let a = anchor();
        let hi = decode_box(&raw(60.0), &a, GridCell::default());
        let lo = decode_box(&raw(-60.0), &a, GridCell::default());
        assert!((hi.grid[0] - 1.5).abs() < 1e-12);
        assert!((lo.grid[0] + 0.5).abs() < 1e-12);
        assert!((hi.grid[2] - 4.0 * 40.0 / 16.0).abs() < 1e-12);
        let off = keypoint_offsets(&raw(60.0), &a, CodecOptions::default());
        assert!((off[0][0] - 2.0 * 40.0 / 16.0).abs() < 1e-12);
        // By default y offsets scale with the anchor width.
        assert!((off[0][1] - 2.0 * 40.0 / 16.0).abs() < 1e-12);
        let off = keypoint_offsets(&raw(60.0), &a, CodecOptions { keypoint_y_uses_ah: true });
        assert!((off[0][1] - 2.0 * 24.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let a = anchor();
        let far = BoxXYWH::new(1000.0, 8.0, 10.0, 10.0);
        assert!(encode_box(&far, &a, GridCell::default()).is_err());
        let huge = BoxXYWH::new(8.0, 8.0, 4.0 * 40.0, 10.0);
        assert!(encode_box(&huge, &a, GridCell::default()).is_err());
    }

    #[test]
    fn stride_validation() {
        assert!(Stride::try_from(12).is_err());
        assert_eq!(Stride::try_from(32).unwrap(), Stride::S32);
        assert!(AnchorSpec::new(0.0, 1.0, Stride::S8).is_err());
    }

    fn det(cx: f64, score: f64) -> Detection2D<f64> {
        Detection2D {
            bbox: BoxXYWH::new(cx, 10.0, 10.0, 10.0),
            score,
            keypoints: [
                Keypoint { pixel: Pixel::new(cx - 3.0, 7.0), visible: true },
                Keypoint { pixel: Pixel::new(cx + 3.0, 13.0), visible: false },
            ],
            provenance: None,
        }
    }

    #[test]
    fn filter_empty_and_identical() {
        assert!(filter_detections::<f64>(&[], 0.5, 0.5).is_empty());
        let out = filter_detections(&[det(10.0, 0.8), det(10.0, 0.9)], 0.5, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        let out = filter_detections(&[det(10.0, 0.4), det(100.0, 0.9)], 0.5, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox.cx, 100.0);
    }

    #[test]
    fn detection_json_layout() {
        let d = det(20.0, 0.75);
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(v["box"], serde_json::json!([20.0, 10.0, 10.0, 10.0]));
        assert_eq!(v["score"], 0.75);
        assert_eq!(v["keypoints"][1], serde_json::json!([23.0, 13.0, 0.0]));
        let back: Detection2D<f64> = serde_json::from_value(v).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<Detection2D<f64>>(
            r#"{"box":[0,0,0,1],"score":0.5,"keypoints":[[0,0,1],[0,0,1]]}"#
        )
        .is_err());
    }
}
