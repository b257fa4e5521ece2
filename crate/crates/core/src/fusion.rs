//! Lateral-root triangulation over view triplets, error-weighted fusion of
//! the two pairwise estimates, and third-view pruning.

use std::collections::BTreeMap;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, reprojection_error, triangulate_pair, CameraView, Pixel};
use crate::detection::Detection2D;
use crate::error::{Error, Result};
use crate::matching::BoxPairing;
use crate::raster::Mask;
use crate::scalar::Real;

/// Floor added to reprojection errors before inverting them, in pixels.
pub const DEFAULT_FUSION_EPSILON: f64 = 1e-6;

/// Minimum 3D length of a reconstructed lateral root, in world units.
pub const DEFAULT_MIN_LENGTH: f64 = 1e-6;

/// A lateral root followed across a view triplet `(i-1, i, i+1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootTrack {
    pub id: usize,
    /// View indices `[i-1, i, i+1]`.
    pub views: [usize; 3],
    /// Detection index in each view; the middle one is always present.
    pub detections: [Option<usize>; 3],
}

impl RootTrack {
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..3).filter_map(|slot| self.detections[slot].map(|d| (slot, self.views[slot], d)))
    }

    pub fn observation_count(&self) -> usize {
        self.detections.iter().flatten().count()
    }
}

/// One pairwise triangulation of an endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<T: Real> {
    pub point: Point3<T>,
    /// Summed reprojection distance in pixels.
    pub error: T,
    /// Views the point was triangulated from.
    pub pair: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackCandidates<T: Real> {
    pub start: Vec<Candidate<T>>,
    pub end: Vec<Candidate<T>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackOptions {
    /// Score the `(i, i+1)` candidate on view `i+1` only instead of on every observed view.
    pub asymmetric_errors_as_printed: bool,
}

/// Triangulates both endpoints from the `(i-1, i)` and `(i, i+1)` view pairs
/// that are present and scores each candidate by reprojection error.
///
/// `views` and `detections` are indexed by triplet slot.
pub fn triangulate_track<T: Real>(
    track: &RootTrack,
    views: [&CameraView<T>; 3],
    detections: [&[Detection2D<T>]; 3],
    opts: TrackOptions,
) -> Result<TrackCandidates<T>> {
    let available = track.observation_count();
    if available < 2 || track.detections[1].is_none() {
        return Err(Error::InsufficientViews {
            track: track.id,
            available,
        });
    }
    let det = |slot: usize| track.detections[slot].map(|d| &detections[slot][d]);
    let mut out = TrackCandidates {
        start: Vec::new(),
        end: Vec::new(),
    };
    for keypoint in 0..2 {
        let observed: Vec<(usize, Pixel<T>)> = (0..3)
            .filter_map(|slot| {
                det(slot)
                    .filter(|d| d.keypoints[keypoint].visible)
                    .map(|d| (slot, d.keypoints[keypoint].pixel))
            })
            .collect();
        let pixel_in = |slot: usize| observed.iter().find(|(s, _)| *s == slot).map(|(_, p)| *p);
        for (sa, sb) in [(0usize, 1usize), (1, 2)] {
            let (Some(pa), Some(pb)) = (pixel_in(sa), pixel_in(sb)) else {
                continue;
            };
            let point = triangulate_pair(views[sa], views[sb], &pa, &pb)?;
            let scored: Vec<(usize, Pixel<T>)> = if opts.asymmetric_errors_as_printed && sa == 1 {
                observed.iter().filter(|(s, _)| *s == 2).copied().collect()
            } else {
                observed.clone()
            };
            let cams: Vec<CameraView<T>> = scored.iter().map(|(s, _)| *views[*s]).collect();
            let obs: Vec<Pixel<T>> = scored.iter().map(|(_, p)| *p).collect();
            let candidate = Candidate {
                point,
                error: reprojection_error(&cams, &point, &obs),
                pair: (track.views[sa], track.views[sb]),
            };
            if keypoint == 0 {
                out.start.push(candidate);
            } else {
                out.end.push(candidate);
            }
        }
    }
    if out.start.is_empty() || out.end.is_empty() {
        return Err(Error::InsufficientViews {
            track: track.id,
            available: 1,
        });
    }
    Ok(out)
}

/// How two candidates are weighted by their reprojection errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightingPolicy {
    /// `w_k ∝ 1 / (epsilon + err_k)`.
    InverseError { epsilon: f64 },
    /// `w_k ∝ exp(-err_k / temperature)`.
    Softmin { temperature: f64 },
}

impl Default for WeightingPolicy {
    fn default() -> Self {
        WeightingPolicy::InverseError {
            epsilon: DEFAULT_FUSION_EPSILON,
        }
    }
}

impl WeightingPolicy {
    /// Normalized weights `(w_a, w_b)`.
    pub fn weights<T: Real>(&self, err_a: T, err_b: T) -> (T, T) {
        let (ra, rb) = match *self {
            WeightingPolicy::InverseError { epsilon } => {
                let eps = T::lit(epsilon);
                (T::one() / (eps + err_a), T::one() / (eps + err_b))
            }
            WeightingPolicy::Softmin { temperature } => {
                let t = T::lit(temperature);
                let lo = err_a.min(err_b);
                (((lo - err_a) / t).exp(), ((lo - err_b) / t).exp())
            }
        };
        let wa = ra / (ra + rb);
        (wa, T::one() - wa)
    }
}

/// Error-weighted combination of two estimates of the same point.
pub fn fuse_candidates<T: Real>(
    a: &Point3<T>,
    err_a: T,
    b: &Point3<T>,
    err_b: T,
    policy: &WeightingPolicy,
) -> Point3<T> {
    let (wa, _) = policy.weights(err_a, err_b);
    // a + w_b (b - a) keeps the result on the segment even under rounding.
    a + (b - a) * (T::one() - wa)
}

fn fuse_list<T: Real>(c: &[Candidate<T>], policy: &WeightingPolicy) -> Point3<T> {
    match c {
        [only] => only.point,
        [a, b] => fuse_candidates(&a.point, a.error, &b.point, b.error, policy),
        _ => unreachable!("at most two candidates per endpoint"),
    }
}

/// A reconstructed lateral root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LateralRoot3D {
    pub id: usize,
    #[serde(with = "point_array")]
    pub start: Point3<f64>,
    #[serde(with = "point_array")]
    pub end: Point3<f64>,
    /// Summed reprojection error of both endpoints over `views`, in pixels.
    #[serde(rename = "err")]
    pub reproj_error_total: f64,
    pub views: Vec<usize>,
    /// Detection index in each of `views`.
    #[serde(default)]
    pub detections: Vec<usize>,
    /// View pairs the endpoints were triangulated from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fused_from: Vec<(usize, usize)>,
}

impl LateralRoot3D {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn observations(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.views.iter().copied().zip(self.detections.iter().copied())
    }
}

pub(crate) mod point_array {
    use nalgebra::Point3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Point3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [p.x, p.y, p.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Point3<f64>, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        Ok(Point3::new(x, y, z))
    }
}

/// Precomputed distance-to-foreground field of a view's mask.
#[derive(Debug, Clone)]
pub struct ForegroundDistance {
    width: usize,
    height: usize,
    distances: Vec<f64>,
}

impl ForegroundDistance {
    pub fn new(mask: &Mask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            distances: mask.distance_transform(),
        }
    }

    /// Distance from the pixel containing `p` to the nearest foreground pixel;
    /// `None` outside the image.
    pub fn at(&self, p: &Pixel<f64>) -> Option<f64> {
        if !(p.u >= 0.0 && p.v >= 0.0) {
            return None;
        }
        let (x, y) = (p.u.floor() as usize, p.v.floor() as usize);
        (x < self.width && y < self.height).then(|| self.distances[y * self.width + x])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PruneDecision {
    Keep,
    Discard(DiscardReason),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiscardReason {
    OutsideImage,
    BehindCamera,
    FarFromForeground { distance: f64 },
}

/// Projects both endpoints into `third` and discards the root if either lands
/// outside the image or farther than `dist_threshold` pixels from foreground.
pub fn prune_by_third_view(
    root: &LateralRoot3D,
    third: &CameraView<f64>,
    foreground: &ForegroundDistance,
    dist_threshold: f64,
) -> Result<PruneDecision> {
    if (foreground.width, foreground.height) != (third.width as usize, third.height as usize) {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs view {}x{}",
            foreground.width, foreground.height, third.width, third.height
        )));
    }
    for p in [&root.start, &root.end] {
        let Ok(px) = project(third, p) else {
            return Ok(PruneDecision::Discard(DiscardReason::BehindCamera));
        };
        match foreground.at(&px) {
            None => return Ok(PruneDecision::Discard(DiscardReason::OutsideImage)),
            Some(d) if d > dist_threshold => {
                return Ok(PruneDecision::Discard(DiscardReason::FarFromForeground { distance: d }))
            }
            Some(_) => {}
        }
    }
    Ok(PruneDecision::Keep)
}

pub const DEFAULT_GATE_SCALE: f64 = 3.0;

/// Settings for turning per-pair box pairings into 3D lateral roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub weighting: WeightingPolicy,
    pub track: TrackOptions,
    /// Third-view pruning threshold in pixels.
    pub dist_threshold: f64,
    /// Largest per-view endpoint reprojection error accepted for a fully observed track.
    pub max_view_error_px: f64,
    pub min_length: f64,
    /// Both gates widen to this multiple of the median per-track view error
    /// when that is larger; 0 keeps them fixed.
    pub gate_scale: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            weighting: WeightingPolicy::default(),
            track: TrackOptions::default(),
            dist_threshold: 5.0,
            max_view_error_px: 4.0,
            min_length: DEFAULT_MIN_LENGTH,
            gate_scale: DEFAULT_GATE_SCALE,
        }
    }
}

/// Joins the pairings of consecutive views `(k, k+1)` into triplet tracks on
/// their shared middle-view box. `pairings[k]` pairs view `k` (side `a`) with
/// view `k + 1` (side `b`).
pub fn build_tracks(pairings: &[BoxPairing], view_count: usize) -> Vec<RootTrack> {
    let mut tracks = Vec::new();
    for mid in 1..view_count.saturating_sub(1) {
        let (left, right) = (&pairings[mid - 1], &pairings[mid]);
        let mut boxes: Vec<usize> = left.pairs.iter().map(|p| p.b).chain(right.pairs.iter().map(|p| p.a)).collect();
        boxes.sort_unstable();
        boxes.dedup();
        for b in boxes {
            tracks.push(RootTrack {
                id: tracks.len(),
                views: [mid - 1, mid, mid + 1],
                detections: [left.partner_of_b(b), Some(b), right.partner_of_a(b)],
            });
        }
    }
    tracks
}

struct TrackEstimate {
    start: Point3<f64>,
    end: Point3<f64>,
    nodes: Vec<(usize, usize)>,
    pairs: Vec<(usize, usize)>,
    /// Largest per-view endpoint error of a fully observed track.
    view_error: Option<f64>,
    /// View to check against the foreground when one slot is empty.
    third: Option<usize>,
}

/// `max(floor, scale * median(errors))`; `floor` when `errors` is empty or
/// `scale` is zero.
pub fn adaptive_gate(errors: &[f64], floor: f64, scale: f64) -> f64 {
    let mut finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
    if finite.is_empty() || scale <= 0.0 {
        return floor;
    }
    finite.sort_by(f64::total_cmp);
    let n = finite.len();
    let median = if n % 2 == 1 { finite[n / 2] } else { (finite[n / 2 - 1] + finite[n / 2]) / 2.0 };
    floor.max(scale * median)
}

fn fit_track(
    track: &RootTrack,
    cameras: &[CameraView<f64>],
    detections: &[Vec<Detection2D<f64>>],
    cfg: &FusionConfig,
) -> Result<Option<TrackEstimate>> {
    let [v0, v1, v2] = track.views;
    let candidates = triangulate_track(
        track,
        [&cameras[v0], &cameras[v1], &cameras[v2]],
        [&detections[v0], &detections[v1], &detections[v2]],
        cfg.track,
    );
    let candidates = match candidates {
        Ok(c) => c,
        Err(Error::InsufficientViews { .. }) | Err(Error::IllConditioned(_)) | Err(Error::DegenerateBaseline) => {
            return Ok(None)
        }
        Err(e) => return Err(e),
    };
    let start = fuse_list(&candidates.start, &cfg.weighting);
    let end = fuse_list(&candidates.end, &cfg.weighting);
    if (end - start).norm() <= cfg.min_length {
        return Ok(None);
    }
    let nodes: Vec<(usize, usize)> = track.observed().map(|(_, v, d)| (v, d)).collect();
    let (view_error, third) = if track.observation_count() == 2 {
        let missing = (0..3).find(|&s| track.detections[s].is_none()).expect("one slot empty");
        (None, Some(track.views[missing]))
    } else {
        let mut worst: f64 = 0.0;
        for &(v, d) in &nodes {
            let det = &detections[v][d];
            for (k, p) in [(0, &start), (1, &end)] {
                if det.keypoints[k].visible {
                    let err = project(&cameras[v], p).map_or(f64::INFINITY, |px| px.distance(&det.keypoints[k].pixel));
                    worst = worst.max(err);
                }
            }
        }
        (Some(worst), None)
    };
    let mut pairs: Vec<(usize, usize)> = candidates.start.iter().map(|c| c.pair).collect();
    pairs.extend(candidates.end.iter().map(|c| c.pair));
    pairs.sort_unstable();
    pairs.dedup();
    Ok(Some(TrackEstimate { start, end, nodes, pairs, view_error, third }))
}

fn accept(e: &TrackEstimate, cameras: &[CameraView<f64>], foreground: &[ForegroundDistance], view_gate: f64, dist_gate: f64) -> Result<bool> {
    if let Some(err) = e.view_error {
        return Ok(err <= view_gate);
    }
    let third = e.third.expect("partial track");
    let probe = LateralRoot3D {
        id: 0,
        start: e.start,
        end: e.end,
        reproj_error_total: 0.0,
        views: Vec::new(),
        detections: Vec::new(),
        fused_from: Vec::new(),
    };
    Ok(prune_by_third_view(&probe, &cameras[third], &foreground[third], dist_gate)? == PruneDecision::Keep)
}

fn consistent_with(e: &TrackEstimate, nodes: &[(usize, usize)], cameras: &[CameraView<f64>], detections: &[Vec<Detection2D<f64>>], limit: f64) -> bool {
    nodes.iter().all(|&(v, d)| {
        let det = &detections[v][d];
        [(0, &e.start), (1, &e.end)].into_iter().all(|(k, p)| {
            !det.keypoints[k].visible
                || project(&cameras[v], p).is_ok_and(|px| px.distance(&det.keypoints[k].pixel) <= limit)
        })
    })
}

/// Estimates from disjoint triplets describe the same root when they never
/// claim different boxes in one view and each reprojects onto the other's
/// keypoints within `limit` pixels.
fn same_root(
    a: &TrackEstimate,
    b: &TrackEstimate,
    cameras: &[CameraView<f64>],
    detections: &[Vec<Detection2D<f64>>],
    limit: f64,
) -> bool {
    let conflict = a.nodes.iter().any(|&(va, da)| b.nodes.iter().any(|&(vb, db)| va == vb && da != db));
    !conflict
        && consistent_with(a, &b.nodes, cameras, detections, limit)
        && consistent_with(b, &a.nodes, cameras, detections, limit)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Triangulates, fuses and prunes every track, then merges estimates that
/// share a detection (the same root seen from overlapping triplets), or that
/// reproject onto each other's keypoints, by averaging. Roots are numbered by their smallest `(view, detection)`.
pub fn reconstruct_laterals(
    tracks: &[RootTrack],
    cameras: &[CameraView<f64>],
    detections: &[Vec<Detection2D<f64>>],
    masks: &[Mask],
    cfg: &FusionConfig,
) -> Result<Vec<LateralRoot3D>> {
    let foreground: Vec<ForegroundDistance> = masks.par_iter().map(ForegroundDistance::new).collect();
    let fitted: Vec<(usize, TrackEstimate)> = tracks
        .par_iter()
        .map(|t| {
            fit_track(t, cameras, detections, cfg)
                .map(|e| e.map(|e| (t.id, e)))
                .map_err(|e| e.in_stage("triangulate", format!("track {}", t.id)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let errors: Vec<f64> = fitted.iter().filter_map(|(_, e)| e.view_error).collect();
    let view_gate = adaptive_gate(&errors, cfg.max_view_error_px, cfg.gate_scale);
    let dist_gate = adaptive_gate(&errors, cfg.dist_threshold, cfg.gate_scale);
    if view_gate > cfg.max_view_error_px {
        log::info!("calibration error widens the view gate to {view_gate:.2} px and the foreground gate to {dist_gate:.2} px");
    }
    let mut estimates = Vec::new();
    for (id, e) in fitted {
        if accept(&e, cameras, &foreground, view_gate, dist_gate).map_err(|err| err.in_stage("triangulate", format!("track {id}")))? {
            estimates.push(e);
        }
    }

    let mut parent: Vec<usize> = (0..estimates.len()).collect();
    let mut owner: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, e) in estimates.iter().enumerate() {
        for node in &e.nodes {
            match owner.get(node) {
                Some(&j) => {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    parent[ri.max(rj)] = ri.min(rj);
                }
                None => {
                    owner.insert(*node, i);
                }
            }
        }
    }
    for i in 0..estimates.len() {
        for j in i + 1..estimates.len() {
            if find(&mut parent, i) != find(&mut parent, j) && same_root(&estimates[i], &estimates[j], cameras, detections, view_gate) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..estimates.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }

    let mut roots: Vec<LateralRoot3D> = groups
        .into_values()
        .map(|members| {
            let n = members.len() as f64;
            let mut start = nalgebra::Vector3::zeros();
            let mut end = nalgebra::Vector3::zeros();
            let mut nodes = Vec::new();
            let mut pairs = Vec::new();
            for &m in &members {
                start += estimates[m].start.coords;
                end += estimates[m].end.coords;
                nodes.extend_from_slice(&estimates[m].nodes);
                pairs.extend_from_slice(&estimates[m].pairs);
            }
            nodes.sort_unstable();
            nodes.dedup();
            pairs.sort_unstable();
            pairs.dedup();
            let start = Point3::from(start / n);
            let end = Point3::from(end / n);
            let reproj_error_total = nodes
                .iter()
                .map(|&(v, d)| {
                    let det = &detections[v][d];
                    reprojection_error(&[cameras[v]], &start, &[*det.start()])
                        + reprojection_error(&[cameras[v]], &end, &[*det.end()])
                })
                .sum();
            LateralRoot3D {
                id: 0,
                start,
                end,
                reproj_error_total,
                views: nodes.iter().map(|n| n.0).collect(),
                detections: nodes.iter().map(|n| n.1).collect(),
                fused_from: pairs,
            }
        })
        .filter(|r| r.length() > cfg.min_length)
        .collect();
    roots.sort_by(|a, b| (a.views[0], a.detections[0]).cmp(&(b.views[0], b.detections[0])));
    for (i, r) in roots.iter_mut().enumerate() {
        r.id = i;
    }
    Ok(roots)
}
