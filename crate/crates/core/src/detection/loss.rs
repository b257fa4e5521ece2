use std::collections::BTreeMap;

use super::grid::{check_pair, PredictionGrid, TargetGrid};
use super::{ciou, decode_box, decode_keypoints, CodecOptions, Stride};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights<T: Real> {
    /// Objectness weight per stride, indexed by [`Stride::index`].
    pub stride_weights: [T; 4],
    pub lambda_obj: T,
    pub lambda_box: T,
    pub lambda_kps: T,
    pub batch_size: usize,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            stride_weights: [T::lit(4.0), T::lit(1.0), T::lit(0.25), T::lit(0.06)],
            lambda_obj: T::one(),
            lambda_box: T::lit(7.5),
            lambda_kps: T::lit(12.0),
            batch_size: 1,
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .stride_weights
            .iter()
            .chain([&self.lambda_obj, &self.lambda_box, &self.lambda_kps]);
        if all.into_iter().any(|w| !(*w >= T::zero())) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub obj: T,
    pub bbox: T,
    pub kps: T,
    pub total: T,
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, computed from the logit.
fn bce_with_logit<T: Real>(logit: T, target: T) -> T {
    logit.max(T::zero()) - logit * target + (T::one() + (-logit.abs()).exp()).ln()
}

#[derive(Default)]
struct StrideSums<T> {
    cells: usize,
    objects: usize,
    obj: T,
    bbox: T,
    kps: T,
}

/// Multi-task detection loss over a batch of grids.
///
/// Grids of the same stride are pooled. Objectness BCE is averaged over all
/// cells of a stride and weighted per stride; box and keypoint terms are
/// averaged over object cells only, and a stride without objects contributes
/// zero. The objectness target is `p_o * CIoU`, clamped to `[0, 1]`.
pub fn multitask_loss<T: Real>(
    predictions: &[PredictionGrid<T>],
    targets: &[TargetGrid<T>],
    weights: &LossWeights<T>,
    opts: CodecOptions,
) -> Result<LossBreakdown<T>> {
    weights.validate()?;
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction grids vs {} target grids",
            predictions.len(),
            targets.len()
        )));
    }

    let mut per_stride: BTreeMap<Stride, StrideSums<T>> = BTreeMap::new();
    for (pred, target) in predictions.iter().zip(targets) {
        check_pair(pred, target)?;
        let sums = per_stride.entry(pred.shape.stride).or_insert_with(|| StrideSums {
            cells: 0,
            objects: 0,
            obj: T::zero(),
            bbox: T::zero(),
            kps: T::zero(),
        });
        sums.cells += pred.cells.len();
        for (idx, (raw, obj)) in pred.cells.iter().zip(&target.cells).enumerate() {
            let Some(obj) = obj else {
                sums.obj += bce_with_logit(raw.objectness_logit, T::zero());
                continue;
            };
            let (cell, a) = pred.shape.locate(idx);
            let anchor = &pred.shape.anchors[a];
            let predicted_box = decode_box(raw, anchor, cell).image;
            let overlap = ciou(&predicted_box, &obj.bbox);
            let obj_target = overlap.max(T::zero()).min(T::one());
            sums.obj += bce_with_logit(raw.objectness_logit, obj_target);
            sums.bbox += T::one() - overlap;
            sums.objects += 1;

            let predicted_kps = decode_keypoints(raw, anchor, cell, opts);
            if predicted_kps.len() != obj.keypoints.len() {
                return Err(Error::ShapeMismatch("keypoint count differs between prediction and target".into()));
            }
            for (p, t) in predicted_kps.iter().zip(&obj.keypoints) {
                if t.visible {
                    sums.kps += p.distance(&t.pixel);
                }
            }
        }
    }

    let mut out = LossBreakdown {
        obj: T::zero(),
        bbox: T::zero(),
        kps: T::zero(),
        total: T::zero(),
    };
    for (stride, s) in per_stride {
        if s.cells > 0 {
            out.obj += weights.stride_weights[stride.index()] * s.obj / T::lit(s.cells as f64);
        }
        if s.objects > 0 {
            let n = T::lit(s.objects as f64);
            out.bbox += s.bbox / n;
            out.kps += s.kps / n;
        }
    }
    out.total = T::lit(weights.batch_size as f64)
        * (weights.lambda_obj * out.obj + weights.lambda_box * out.bbox + weights.lambda_kps * out.kps);
    Ok(out)
}
