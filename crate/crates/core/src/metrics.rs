//! Lateral-root precision and recall in the image and in 3D.
//!
//! Predictions and ground-truth roots are paired one-to-one by ascending mean
//! endpoint distance (ties by prediction index, then ground-truth index). A
//! pair is a true positive when both endpoints are within the threshold.
//! With no predictions, precision is 1 by convention.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::camera::{project, CameraView, Pixel};
use crate::detection::Detection2D;
use crate::error::{Error, Result};
use crate::fusion::LateralRoot3D;
use crate::main_root::SkeletonGraph;
use crate::synthetic::{bbox_diagonal, render_detections, GroundTruth, GtLateral};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchCriterion {
    /// Largest endpoint distance for a 2D match, pixels.
    pub max_px: f64,
    /// Largest endpoint distance for a 3D match, as a fraction of the
    /// ground-truth lateral bounding-box diagonal.
    pub diagonal_fraction: f64,
}

impl Default for MatchCriterion {
    fn default() -> Self {
        Self {
            max_px: 5.0,
            diagonal_fraction: 0.02,
        }
    }
}

impl MatchCriterion {
    pub fn validate(&self) -> Result<()> {
        if self.max_px > 0.0 && self.diagonal_fraction > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("match thresholds must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub ground_truth: usize,
}

impl PrecisionRecall {
    fn from_counts(tp: usize, predicted: usize, ground_truth: usize) -> Self {
        Self {
            precision: if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 },
            recall: if ground_truth == 0 { 1.0 } else { tp as f64 / ground_truth as f64 },
            true_positives: tp,
            predicted,
            ground_truth,
        }
    }
}

/// Greedy one-to-one assignment from per-pair endpoint distances
/// `(start, end)`; returns `(pred, gt, start_dist, end_dist)` per assigned pair.
pub fn greedy_assignment(
    n_pred: usize,
    n_gt: usize,
    dist: impl Fn(usize, usize) -> (f64, f64),
) -> Vec<(usize, usize, f64, f64)> {
    let mut pairs: Vec<(f64, usize, usize, f64, f64)> = (0..n_pred)
        .flat_map(|i| (0..n_gt).map(move |j| (i, j)))
        .map(|(i, j)| {
            let (ds, de) = dist(i, j);
            ((ds + de) / 2.0, i, j, ds, de)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; n_pred];
    let mut gt_used = vec![false; n_gt];
    let mut out = Vec::new();
    for (_, i, j, ds, de) in pairs {
        if pred_used[i] || gt_used[j] {
            continue;
        }
        pred_used[i] = true;
        gt_used[j] = true;
        out.push((i, j, ds, de));
    }
    out
}

fn score(assignment: &[(usize, usize, f64, f64)], threshold: f64, n_pred: usize, n_gt: usize) -> PrecisionRecall {
    let tp = assignment.iter().filter(|a| a.2 <= threshold && a.3 <= threshold).count();
    PrecisionRecall::from_counts(tp, n_pred, n_gt)
}

pub fn pr_2d(pred: &[Detection2D<f64>], gt: &[Detection2D<f64>], criterion: &MatchCriterion) -> PrecisionRecall {
    let a = greedy_assignment(pred.len(), gt.len(), |i, j| {
        (pred[i].start().distance(gt[j].start()), pred[i].end().distance(gt[j].end()))
    });
    score(&a, criterion.max_px, pred.len(), gt.len())
}

fn assignment_3d(pred: &[LateralRoot3D], gt: &[GtLateral]) -> Vec<(usize, usize, f64, f64)> {
    greedy_assignment(pred.len(), gt.len(), |i, j| {
        ((pred[i].start - gt[j].start).norm(), (pred[i].end - gt[j].end).norm())
    })
}

pub fn threshold_3d(gt: &[GtLateral], criterion: &MatchCriterion) -> f64 {
    criterion.diagonal_fraction * bbox_diagonal(gt.iter().flat_map(|l| [l.start, l.end]))
}

pub fn pr_3d(pred: &[LateralRoot3D], gt: &[GtLateral], criterion: &MatchCriterion) -> PrecisionRecall {
    score(&assignment_3d(pred, gt), threshold_3d(gt, criterion), pred.len(), gt.len())
}

/// Image-space precision/recall of reprojected laterals against a view's
/// ground-truth keypoints. Laterals behind the camera count as unmatched.
pub fn pr_reprojected(
    pred: &[LateralRoot3D],
    view: &CameraView<f64>,
    gt: &[Detection2D<f64>],
    criterion: &MatchCriterion,
) -> PrecisionRecall {
    let far = Pixel::new(f64::INFINITY, f64::INFINITY);
    let proj: Vec<(Pixel<f64>, Pixel<f64>)> = pred
        .iter()
        .map(|l| (project(view, &l.start).unwrap_or(far), project(view, &l.end).unwrap_or(far)))
        .collect();
    let a = greedy_assignment(proj.len(), gt.len(), |i, j| {
        (proj[i].0.distance(gt[j].start()), proj[i].1.distance(gt[j].end()))
    });
    score(&a, criterion.max_px, pred.len(), gt.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub precision_3d: f64,
    pub recall_3d: f64,
    pub true_positives_3d: usize,
    pub predicted: usize,
    pub ground_truth: usize,
    pub threshold_3d: f64,
    /// Mean over views of the reprojected-skeleton precision and recall.
    pub precision_2d: f64,
    pub recall_2d: f64,
    pub adjacency_predicted: usize,
    pub adjacency_correct: usize,
    pub adjacency_ground_truth: usize,
    pub adjacency_exact: bool,
}

/// Scores a reconstructed skeleton against synthetic ground truth. Image-space
/// scores use the true cameras.
pub fn evaluate_scene(graph: &SkeletonGraph, truth: &GroundTruth, criterion: &MatchCriterion) -> Result<SceneMetrics> {
    criterion.validate()?;
    let gt = &truth.system.laterals;
    let thr = threshold_3d(gt, criterion);
    let assignment = assignment_3d(&graph.laterals, gt);
    let pr = score(&assignment, thr, graph.laterals.len(), gt.len());

    let to_gt: BTreeMap<usize, usize> = assignment
        .iter()
        .filter(|a| a.2 <= thr && a.3 <= thr)
        .map(|a| (graph.laterals[a.0].id, a.1))
        .collect();
    // Pairs touching an unmatched lateral can never be correct.
    let predicted: BTreeSet<(usize, usize)> = graph
        .adjacency
        .iter()
        .filter_map(|&(a, b)| Some((*to_gt.get(&a)?, *to_gt.get(&b)?)))
        .map(|(x, y)| (x.min(y), x.max(y)))
        .collect();
    let truth_adj: BTreeSet<(usize, usize)> = truth.system.adjacency.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let correct = predicted.intersection(&truth_adj).count();

    let (mut p2, mut r2) = (0.0, 0.0);
    for cam in &truth.cameras {
        let (exact, _) = render_detections(&truth.system, cam);
        let pr = pr_reprojected(&graph.laterals, cam, &exact, criterion);
        p2 += pr.precision;
        r2 += pr.recall;
    }
    let nv = truth.cameras.len().max(1) as f64;
    Ok(SceneMetrics {
        precision_3d: pr.precision,
        recall_3d: pr.recall,
        true_positives_3d: pr.true_positives,
        predicted: pr.predicted,
        ground_truth: pr.ground_truth,
        threshold_3d: thr,
        precision_2d: p2 / nv,
        recall_2d: r2 / nv,
        adjacency_predicted: graph.adjacency.len(),
        adjacency_correct: correct,
        adjacency_ground_truth: truth_adj.len(),
        adjacency_exact: correct == truth_adj.len() && graph.adjacency.len() == truth_adj.len(),
    })
}

/// Ground-truth laterals as a perfect prediction, for self-evaluation.
pub fn ground_truth_graph(truth: &GroundTruth) -> SkeletonGraph {
    let laterals = truth
        .system
        .laterals
        .iter()
        .enumerate()
        .map(|(i, l)| LateralRoot3D {
            id: i,
            start: l.start,
            end: l.end,
            reproj_error_total: 0.0,
            views: Vec::new(),
            detections: Vec::new(),
            fused_from: Vec::new(),
        })
        .collect();
    let starts: Vec<Point3<f64>> = truth.system.laterals.iter().map(|l| l.start).collect();
    SkeletonGraph {
        laterals,
        adjacency: truth.system.adjacency.clone(),
        main_root: if starts.len() > 1 {
            vec![crate::main_root::MainRootChain {
                roots: (0..starts.len()).collect(),
                points: starts,
            }]
        } else {
            Vec::new()
        },
    }
}

const CSV_HEADER: &str = "scene,precision_3d,recall_3d,true_positives_3d,predicted,ground_truth,threshold_3d,\
precision_2d,recall_2d,adjacency_predicted,adjacency_correct,adjacency_ground_truth,adjacency_exact";

fn csv_row(name: &str, m: &SceneMetrics) -> String {
    format!(
        "{name},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.precision_3d,
        m.recall_3d,
        m.true_positives_3d,
        m.predicted,
        m.ground_truth,
        m.threshold_3d,
        m.precision_2d,
        m.recall_2d,
        m.adjacency_predicted,
        m.adjacency_correct,
        m.adjacency_ground_truth,
        u8::from(m.adjacency_exact)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub scenes: usize,
    pub mean_precision_3d: f64,
    pub mean_recall_3d: f64,
    pub mean_precision_2d: f64,
    pub mean_recall_2d: f64,
    pub adjacency_exact_scenes: usize,
}

pub fn aggregate(scenes: &[SceneMetrics]) -> AggregateMetrics {
    let n = scenes.len().max(1) as f64;
    let mean = |f: fn(&SceneMetrics) -> f64| scenes.iter().map(f).sum::<f64>() / n;
    AggregateMetrics {
        scenes: scenes.len(),
        mean_precision_3d: mean(|m| m.precision_3d),
        mean_recall_3d: mean(|m| m.recall_3d),
        mean_precision_2d: mean(|m| m.precision_2d),
        mean_recall_2d: mean(|m| m.recall_2d),
        adjacency_exact_scenes: scenes.iter().filter(|m| m.adjacency_exact).count(),
    }
}

/// One row per named scene.
pub fn write_metrics_csv<W: Write>(rows: &[(String, SceneMetrics)], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for (name, m) in rows {
        writeln!(w, "{}", csv_row(name, m))?;
    }
    Ok(())
}
