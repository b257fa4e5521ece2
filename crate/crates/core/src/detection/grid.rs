//! Prediction/target grids, target assignment and the raw grid file format.
//!
//! Cells are stored row-major with anchors innermost:
//! `index = (y * width + x) * anchors + a`.
//!
//! Grid files are little-endian: a `u32` header length, a JSON header
//! `{"stride", "width", "height", "anchors": [[w, h], ..], "keypoints"}`, then
//! `height * width * anchors * (5 + 2K)` `f32` values ordered as
//! objectness, four box logits, then `(x, y)` per keypoint.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{
    decode_cell, encode_box, encode_keypoints, iou, AnchorSpec, BoxXYWH, CodecOptions, Detection2D, GridCell,
    Keypoint, RawCellPrediction, Stride,
};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Objectness logit written for occupied cells by [`perfect_predictions`].
pub const CONFIDENT_LOGIT: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GridShape<T: Real> {
    pub stride: Stride,
    pub width: usize,
    pub height: usize,
    pub anchors: Vec<AnchorSpec<T>>,
}

impl<T: Real> GridShape<T> {
    /// Grid covering an image of the given size.
    pub fn for_image(stride: Stride, image_width: u32, image_height: u32, anchors: Vec<AnchorSpec<T>>) -> Self {
        let s = stride.pixels();
        Self {
            stride,
            width: image_width.div_ceil(s) as usize,
            height: image_height.div_ceil(s) as usize,
            anchors,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, cell: GridCell, anchor: usize) -> usize {
        (cell.y * self.width + cell.x) * self.anchors.len() + anchor
    }

    /// Inverse of [`GridShape::index`].
    pub fn locate(&self, index: usize) -> (GridCell, usize) {
        let na = self.anchors.len();
        let a = index % na;
        let c = index / na;
        (GridCell { x: c % self.width, y: c / self.width }, a)
    }

    fn same_layout(&self, other: &GridShape<T>) -> bool {
        self.stride == other.stride
            && self.width == other.width
            && self.height == other.height
            && self.anchors.len() == other.anchors.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid<T: Real> {
    pub shape: GridShape<T>,
    pub cells: Vec<RawCellPrediction<T>>,
}

/// Ground-truth object owned by one cell/anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetObject<T: Real> {
    pub bbox: BoxXYWH<T>,
    pub keypoints: Vec<Keypoint<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid<T: Real> {
    pub shape: GridShape<T>,
    pub cells: Vec<Option<TargetObject<T>>>,
}

impl<T: Real> TargetGrid<T> {
    pub fn empty(shape: GridShape<T>) -> Self {
        let n = shape.len();
        Self {
            shape,
            cells: vec![None; n],
        }
    }

    pub fn object_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

pub(super) fn check_pair<T: Real>(pred: &PredictionGrid<T>, target: &TargetGrid<T>) -> Result<()> {
    if !pred.shape.same_layout(&target.shape) {
        return Err(Error::ShapeMismatch(format!(
            "prediction grid s={} {}x{}x{} vs target s={} {}x{}x{}",
            pred.shape.stride.pixels(),
            pred.shape.height,
            pred.shape.width,
            pred.shape.anchors.len(),
            target.shape.stride.pixels(),
            target.shape.height,
            target.shape.width,
            target.shape.anchors.len()
        )));
    }
    if pred.cells.len() != pred.shape.len() || target.cells.len() != target.shape.len() {
        return Err(Error::ShapeMismatch("cell count does not match grid shape".into()));
    }
    Ok(())
}

/// Assigns each detection to one cell/anchor across the given grids.
///
/// Candidates are the cell containing the box center at every stride and
/// every anchor whose encoding can represent the box and keypoints; the
/// candidate with the highest anchor/box IoU wins (ties: smaller stride,
/// then lower anchor index). Already-occupied slots are skipped.
pub fn assign_targets<T: Real>(
    detections: &[Detection2D<T>],
    shapes: &[GridShape<T>],
    opts: CodecOptions,
) -> Result<Vec<TargetGrid<T>>> {
    let (grids, skipped) = assign_targets_skipping(detections, shapes, opts);
    match skipped.first() {
        Some(d_idx) => Err(Error::Unrepresentable(format!("detection {d_idx} fits no free grid slot"))),
        None => Ok(grids),
    }
}

/// Like [`assign_targets`], but leaves out detections without a free slot and
/// returns their indices.
pub fn assign_targets_skipping<T: Real>(
    detections: &[Detection2D<T>],
    shapes: &[GridShape<T>],
    opts: CodecOptions,
) -> (Vec<TargetGrid<T>>, Vec<usize>) {
    let mut skipped = Vec::new();
    let mut grids: Vec<TargetGrid<T>> = shapes.iter().cloned().map(TargetGrid::empty).collect();
    for (d_idx, det) in detections.iter().enumerate() {
        let mut candidates: Vec<(T, usize, usize, GridCell)> = Vec::new();
        for (g, shape) in shapes.iter().enumerate() {
            let s = T::lit(shape.stride.pixels() as f64);
            let (fx, fy) = ((det.bbox.cx / s).floor(), (det.bbox.cy / s).floor());
            if fx < T::zero() || fy < T::zero() {
                continue;
            }
            let cell = GridCell {
                x: fx.as_f64() as usize,
                y: fy.as_f64() as usize,
            };
            if cell.x >= shape.width || cell.y >= shape.height {
                continue;
            }
            for (a, anchor) in shape.anchors.iter().enumerate() {
                let pixels = [det.keypoints[0].pixel, det.keypoints[1].pixel];
                if encode_box(&det.bbox, anchor, cell).is_err()
                    || encode_keypoints(&pixels, anchor, cell, opts).is_err()
                {
                    continue;
                }
                let prior = BoxXYWH::new(det.bbox.cx, det.bbox.cy, anchor.width, anchor.height);
                candidates.push((iou(&prior, &det.bbox), g, a, cell));
            }
        }
        candidates.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(shapes[x.1].stride.cmp(&shapes[y.1].stride))
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        let slot = candidates.into_iter().find_map(|(_, g, a, cell)| {
            let idx = grids[g].shape.index(cell, a);
            grids[g].cells[idx].is_none().then_some((g, idx))
        });
        let Some((g, idx)) = slot else {
            skipped.push(d_idx);
            continue;
        };
        grids[g].cells[idx] = Some(TargetObject {
            bbox: det.bbox,
            keypoints: det.keypoints.to_vec(),
        });
    }
    (grids, skipped)
}

/// Raw predictions that decode exactly to the given targets.
///
/// Occupied cells get objectness logit `+CONFIDENT_LOGIT`, empty ones the negation.
pub fn perfect_predictions<T: Real>(targets: &[TargetGrid<T>], opts: CodecOptions) -> Result<Vec<PredictionGrid<T>>> {
    targets
        .iter()
        .map(|t| {
            let cells = t
                .cells
                .iter()
                .enumerate()
                .map(|(idx, obj)| {
                    let (cell, a) = t.shape.locate(idx);
                    let anchor = &t.shape.anchors[a];
                    match obj {
                        None => {
                            let mut raw = RawCellPrediction::zeros(super::KEYPOINTS);
                            raw.objectness_logit = T::lit(-CONFIDENT_LOGIT);
                            Ok(raw)
                        }
                        Some(obj) => {
                            let pixels: Vec<_> = obj.keypoints.iter().map(|k| k.pixel).collect();
                            Ok(RawCellPrediction {
                                objectness_logit: T::lit(CONFIDENT_LOGIT),
                                box_logits: encode_box(&obj.bbox, anchor, cell)?,
                                keypoint_logits: encode_keypoints(&pixels, anchor, cell, opts)?,
                            })
                        }
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PredictionGrid {
                shape: t.shape.clone(),
                cells,
            })
        })
        .collect()
}

/// Decodes every cell of a grid.
pub fn decode_grid<T: Real>(grid: &PredictionGrid<T>, opts: CodecOptions) -> Result<Vec<Detection2D<T>>> {
    grid.cells
        .iter()
        .enumerate()
        .map(|(idx, raw)| {
            let (cell, a) = grid.shape.locate(idx);
            decode_cell(raw, &grid.shape.anchors[a], cell, a, opts)
        })
        .collect()
}

/// Default anchors per stride, in pixels, sized for elongated root boxes.
pub fn default_anchors<T: Real>(stride: Stride) -> Vec<AnchorSpec<T>> {
    let sizes: &[(f64, f64)] = match stride {
        Stride::S8 => &[(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
        Stride::S16 => &[(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
        Stride::S32 => &[(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
        Stride::S64 => &[(436.0, 615.0), (739.0, 380.0), (925.0, 792.0)],
    };
    sizes
        .iter()
        .map(|&(w, h)| AnchorSpec {
            width: T::lit(w),
            height: T::lit(h),
            stride,
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridHeader {
    stride: u32,
    width: usize,
    height: usize,
    anchors: Vec<[f64; 2]>,
    keypoints: usize,
}

/// Writes a prediction grid in the binary grid format.
pub fn write_grid<T: Real, W: Write>(grid: &PredictionGrid<T>, mut w: W) -> Result<()> {
    let keypoints = grid.cells.first().map_or(super::KEYPOINTS, |c| c.keypoint_logits.len());
    let header = GridHeader {
        stride: grid.shape.stride.pixels(),
        width: grid.shape.width,
        height: grid.shape.height,
        anchors: grid
            .shape
            .anchors
            .iter()
            .map(|a| [a.width.as_f64(), a.height.as_f64()])
            .collect(),
        keypoints,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for cell in &grid.cells {
        if cell.keypoint_logits.len() != keypoints {
            return Err(Error::ShapeMismatch("inconsistent keypoint count across cells".into()));
        }
        let mut put = |x: T| w.write_all(&(x.as_f64() as f32).to_le_bytes());
        put(cell.objectness_logit)?;
        for b in cell.box_logits {
            put(b)?;
        }
        for [x, y] in &cell.keypoint_logits {
            put(*x)?;
            put(*y)?;
        }
    }
    Ok(())
}

/// Reads a grid written by [`write_grid`].
pub fn read_grid<T: Real, R: Read>(mut r: R) -> Result<PredictionGrid<T>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: GridHeader = serde_json::from_slice(&json)?;
    let stride = Stride::try_from(header.stride)?;
    let anchors = header
        .anchors
        .iter()
        .map(|&[w, h]| AnchorSpec::new(T::lit(w), T::lit(h), stride))
        .collect::<Result<Vec<_>>>()?;
    let shape = GridShape {
        stride,
        width: header.width,
        height: header.height,
        anchors,
    };
    let channels = 5 + 2 * header.keypoints;
    let mut bytes = vec![0u8; shape.len() * channels * 4];
    r.read_exact(&mut bytes)?;
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let cells = values
        .chunks_exact(channels)
        .map(|c| RawCellPrediction {
            objectness_logit: c[0],
            box_logits: [c[1], c[2], c[3], c[4]],
            keypoint_logits: c[5..].chunks_exact(2).map(|p| [p[0], p[1]]).collect(),
        })
        .collect();
    Ok(PredictionGrid { shape, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Pixel;
    use crate::detection::filter_detections;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64) -> Detection2D<f64> {
        Detection2D {
            bbox: BoxXYWH::from_corners(x0.min(x1) - 2.0, y0.min(y1) - 2.0, x0.max(x1) + 2.0, y0.max(y1) + 2.0),
            score: 1.0,
            keypoints: [
                Keypoint { pixel: Pixel::new(x0, y0), visible: true },
                Keypoint { pixel: Pixel::new(x1, y1), visible: true },
            ],
            provenance: None,
        }
    }

    fn shapes() -> Vec<GridShape<f64>> {
        Stride::ALL
            .iter()
            .map(|&s| GridShape::for_image(s, 320, 256, default_anchors(s)))
            .collect()
    }

    #[test]
    fn index_round_trip() {
        let shape = &shapes()[0];
        for idx in [0, 1, 17, shape.len() - 1] {
            let (cell, a) = shape.locate(idx);
            assert_eq!(shape.index(cell, a), idx);
        }
    }

    #[test]
    fn encode_assign_decode_recovers_detections() {
        let dets = vec![det(40.0, 30.0, 80.0, 120.0), det(200.0, 50.0, 150.0, 90.0), det(60.0, 200.0, 62.0, 240.0)];
        let opts = CodecOptions::default();
        let targets = assign_targets(&dets, &shapes(), opts).unwrap();
        assert_eq!(targets.iter().map(|t| t.object_count()).sum::<usize>(), 3);
        let preds = perfect_predictions(&targets, opts).unwrap();
        let mut decoded: Vec<_> = preds.iter().flat_map(|g| decode_grid(g, opts).unwrap()).collect();
        decoded = filter_detections(&decoded, 0.5, 0.99);
        assert_eq!(decoded.len(), 3);
        for d in &dets {
            let hit = decoded
                .iter()
                .find(|x| (x.bbox.cx - d.bbox.cx).abs() < 1e-9 && (x.bbox.cy - d.bbox.cy).abs() < 1e-9)
                .expect("decoded");
            assert!((hit.bbox.w - d.bbox.w).abs() < 1e-9);
            assert!(hit.start().distance(d.start()) < 1e-9);
            assert!(hit.end().distance(d.end()) < 1e-9);
        }
    }

    #[test]
    fn binary_round_trip_is_f32_exact() {
        let dets = vec![det(40.0, 30.0, 80.0, 120.0)];
        let opts = CodecOptions::default();
        let preds = perfect_predictions(&assign_targets(&dets, &shapes(), opts).unwrap(), opts).unwrap();
        let mut buf = Vec::new();
        write_grid(&preds[1], &mut buf).unwrap();
        let back: PredictionGrid<f64> = read_grid(buf.as_slice()).unwrap();
        assert_eq!(back.shape, preds[1].shape);
        for (a, b) in back.cells.iter().zip(&preds[1].cells) {
            assert_eq!(a.objectness_logit, b.objectness_logit as f32 as f64);
            assert_eq!(a.keypoint_logits[1][0], b.keypoint_logits[1][0] as f32 as f64);
        }
    }

    #[test]
    fn truncated_grid_file_fails() {
        let preds = perfect_predictions(&[TargetGrid::empty(shapes()[3].clone())], CodecOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_grid(&preds[0], &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_grid::<f64, _>(buf.as_slice()).is_err());
    }
}
