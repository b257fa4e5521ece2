//! End-to-end reconstruction: match → triangulate/fuse/prune → SBA → connect
//! → evaluate → export.
//!
//! Every stage has an in-memory form and a file form. The file forms read
//! the previous stage's artifacts from the output directory, so running the
//! stages one by one writes exactly the same bytes as [`run_pipeline`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{read_json, write_atomic, write_json, Bundle, GROUND_TRUTH_FILE};
use crate::camera::{reprojection_error, CameraView, Pixel};
use crate::config::PipelineConfig;
use crate::detection::Detection2D;
use crate::error::{Error, Result};
use crate::export::{overlay_svg, skeleton_ply};
use crate::fusion::{adaptive_gate, build_tracks, reconstruct_laterals, LateralRoot3D};
use crate::main_root::{connect_laterals, ConnectionLedger, SkeletonGraph};
use crate::matching::{build_score_matrix, greedy_pairing, BoxPairing, MatchProvider};
use crate::metrics::{evaluate_scene, write_metrics_csv, SceneMetrics};
use crate::raster::Mask;
use crate::sba::{run_sba, ScaleAnchor, segment_angle, AngleConstraint, Observation, SbaProblem, SbaReport};

pub const LATERALS_FILE: &str = "laterals.json";
pub const REFINED_LATERALS_FILE: &str = "laterals_refined.json";
pub const REFINED_CAMERAS_FILE: &str = "cameras_refined.json";
pub const SBA_REPORT_FILE: &str = "sba_report.json";
pub const SBA_TRACE_FILE: &str = "sba_trace.csv";
pub const SKELETON_FILE: &str = "skeleton.json";
pub const CONNECTIONS_FILE: &str = "connections.json";
pub const PLY_FILE: &str = "skeleton.ply";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";

pub fn pairings_file(a: usize, b: usize) -> String {
    format!("pairings_{a}_{b}.json")
}

pub fn overlay_file(view: usize) -> String {
    format!("overlay_view_{view}.svg")
}

/// Box pairings between each pair of consecutive views.
pub fn match_views(bundle: &Bundle, provider: &dyn MatchProvider, cfg: &PipelineConfig) -> Result<Vec<BoxPairing>> {
    (0..bundle.view_count() - 1)
        .into_par_iter()
        .map(|a| {
            let b = a + 1;
            let wrap = |e: Error| e.in_stage("match", format!("views {a}-{b}"));
            let matches = provider.matches(a, b).map_err(wrap)?;
            let m = build_score_matrix(&matches, &bundle.detections[a], &bundle.detections[b], cfg.vote_mode());
            Ok(greedy_pairing(&m, cfg.matching_threshold))
        })
        .collect()
}

pub fn triangulate(bundle: &Bundle, pairings: &[BoxPairing], cfg: &PipelineConfig) -> Result<Vec<LateralRoot3D>> {
    let tracks = build_tracks(pairings, bundle.view_count());
    reconstruct_laterals(&tracks, &bundle.cameras, &bundle.detections, &bundle.masks, &cfg.fusion())
}

/// Bundle-adjustment problem over the endpoints of every lateral whose two
/// endpoints are each seen in at least two views. Observations reprojecting
/// further than `max_view_error_px` from the current estimate are left out.
/// Returns the problem and the list positions of the included laterals
/// (point `2k` / `2k + 1` is the start / end of included lateral `k`).
pub fn sba_problem(
    laterals: &[LateralRoot3D],
    cameras: &[CameraView<f64>],
    detections: &[Vec<Detection2D<f64>>],
    adjacency: &BTreeSet<(usize, usize)>,
    max_view_error_px: f64,
) -> Result<(SbaProblem<f64>, Vec<usize>)> {
    let mut points = Vec::new();
    let mut observations = Vec::new();
    let mut included = Vec::new();
    for (pos, l) in laterals.iter().enumerate() {
        let mut per_view: BTreeMap<usize, usize> = BTreeMap::new();
        for (v, d) in l.observations() {
            per_view.entry(v).or_insert(d);
        }
        let obs: [Vec<(usize, Pixel<f64>)>; 2] = [(0, l.start), (1, l.end)].map(|(k, x)| {
            per_view
                .iter()
                .filter(|(v, d)| detections[**v][**d].keypoints[k].visible)
                .map(|(&v, &d)| (v, detections[v][d].keypoints[k].pixel))
                .filter(|(v, px)| reprojection_error(&[cameras[*v]], &x, &[*px]) <= max_view_error_px)
                .collect()
        });
        if obs.iter().any(|o| o.len() < 2) {
            continue;
        }
        let slot = included.len();
        included.push(pos);
        points.push(l.start);
        points.push(l.end);
        for (k, list) in obs.iter().enumerate() {
            for &(camera, pixel) in list {
                observations.push(Observation {
                    camera,
                    point: 2 * slot + k,
                    pixel,
                });
            }
        }
    }
    let slot_of: BTreeMap<usize, usize> = included.iter().enumerate().map(|(s, &p)| (laterals[p].id, s)).collect();
    let mut constraints = Vec::new();
    for &(a, b) in adjacency {
        let (Some(&sa), Some(&sb)) = (slot_of.get(&a), slot_of.get(&b)) else {
            continue;
        };
        let (pa, pb) = ([2 * sa, 2 * sa + 1], [2 * sb, 2 * sb + 1]);
        let Some((theta, _, _)) = segment_angle(&(points[pa[1]] - points[pa[0]]), &(points[pb[1]] - points[pb[0]])) else {
            continue;
        };
        if theta > 1e-6 && theta < std::f64::consts::PI - 1e-6 {
            constraints.push(AngleConstraint { a: pa, b: pb, reference: theta });
        }
    }
    Ok((SbaProblem::new(cameras.to_vec(), points, observations, constraints)?, included))
}

/// Observation gate for SBA: the configured per-view limit, widened by
/// `gate_scale` times the median per-lateral worst endpoint error.
fn observation_gate(laterals: &[LateralRoot3D], cameras: &[CameraView<f64>], detections: &[Vec<Detection2D<f64>>], cfg: &PipelineConfig) -> f64 {
    let worst: Vec<f64> = laterals
        .iter()
        .map(|l| {
            l.observations()
                .flat_map(|(v, d)| {
                    let det = &detections[v][d];
                    [(0, l.start), (1, l.end)]
                        .into_iter()
                        .filter(|(k, _)| det.keypoints[*k].visible)
                        .map(move |(k, x)| reprojection_error(&[cameras[v]], &x, &[det.keypoints[k].pixel]))
                })
                .fold(0.0, f64::max)
        })
        .collect();
    adaptive_gate(&worst, cfg.max_view_error_px, cfg.gate_scale)
}

fn lateral_error(l: &LateralRoot3D, cameras: &[CameraView<f64>], detections: &[Vec<Detection2D<f64>>]) -> f64 {
    l.observations()
        .map(|(v, d)| {
            let det = &detections[v][d];
            reprojection_error(&[cameras[v]], &l.start, &[*det.start()])
                + reprojection_error(&[cameras[v]], &l.end, &[*det.end()])
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub laterals: Vec<LateralRoot3D>,
    pub cameras: Vec<CameraView<f64>>,
    pub report: SbaReport<f64>,
}

/// Preliminary connection on the unrefined skeleton to obtain angle
/// constraints, then bundle adjustment of poses and endpoints.
pub fn refine(bundle: &Bundle, laterals: &[LateralRoot3D], cfg: &PipelineConfig) -> Result<Refinement> {
    let wrap = |e: Error| e.in_stage("sba", "skeleton");
    let (preliminary, _) = connect_laterals(laterals, &bundle.cameras, &bundle.masks, &cfg.connect()).map_err(wrap)?;
    let adjacency: BTreeSet<(usize, usize)> = preliminary.adjacency.iter().copied().collect();
    let gate = observation_gate(laterals, &bundle.cameras, &bundle.detections, cfg);
    let (mut problem, included) = sba_problem(laterals, &bundle.cameras, &bundle.detections, &adjacency, gate).map_err(wrap)?;
    if cfg.sba_fix_scale {
        problem = problem.with_scale_anchor(ScaleAnchor::choose(&bundle.cameras)).map_err(wrap)?;
    }
    let policy = cfg.damping().build();
    let report = run_sba(&problem, cfg.sba_iterations, policy.as_ref(), cfg.angle_weight).map_err(wrap)?;
    let mut refined = laterals.to_vec();
    for (slot, &pos) in included.iter().enumerate() {
        refined[pos].start = report.points[2 * slot];
        refined[pos].end = report.points[2 * slot + 1];
    }
    for l in &mut refined {
        l.reproj_error_total = lateral_error(l, &report.cameras, &bundle.detections);
    }
    Ok(Refinement {
        laterals: refined,
        cameras: report.cameras.clone(),
        report,
    })
}

pub fn connect(
    laterals: &[LateralRoot3D],
    cameras: &[CameraView<f64>],
    masks: &[Mask],
    cfg: &PipelineConfig,
) -> Result<(SkeletonGraph, Vec<ConnectionLedger>)> {
    connect_laterals(laterals, cameras, masks, &cfg.connect())
}

pub fn evaluate(graph: &SkeletonGraph, bundle: &Bundle, cfg: &PipelineConfig) -> Result<SceneMetrics> {
    let truth = bundle
        .truth
        .as_ref()
        .ok_or_else(|| Error::MissingInput(bundle.dir.join(GROUND_TRUTH_FILE)))?;
    evaluate_scene(graph, truth, &cfg.criterion()).map_err(|e| e.in_stage("evaluate", "scene"))
}

fn scene_name(bundle: &Bundle) -> String {
    bundle
        .dir
        .file_name()
        .map_or_else(|| "scene".to_string(), |n| n.to_string_lossy().into_owned())
}

fn write_pairings(out: &Path, pairings: &[BoxPairing]) -> Result<()> {
    for (a, p) in pairings.iter().enumerate() {
        write_json(&out.join(pairings_file(a, a + 1)), p)?;
    }
    Ok(())
}

fn write_refinement(out: &Path, r: &Refinement) -> Result<()> {
    write_json(&out.join(REFINED_LATERALS_FILE), &r.laterals)?;
    write_json(&out.join(REFINED_CAMERAS_FILE), &r.cameras)?;
    write_json(&out.join(SBA_REPORT_FILE), &r.report)?;
    let mut csv = Vec::new();
    r.report.write_trace_csv(&mut csv)?;
    write_atomic(&out.join(SBA_TRACE_FILE), &csv)
}

fn write_skeleton(out: &Path, graph: &SkeletonGraph, ledgers: &[ConnectionLedger]) -> Result<()> {
    write_json(&out.join(SKELETON_FILE), graph)?;
    write_json(&out.join(CONNECTIONS_FILE), ledgers)
}

fn write_metrics(out: &Path, name: String, m: &SceneMetrics) -> Result<()> {
    write_json(&out.join(METRICS_FILE), m)?;
    let mut csv = Vec::new();
    write_metrics_csv(&[(name, m.clone())], &mut csv)?;
    write_atomic(&out.join(METRICS_CSV_FILE), &csv)
}

fn write_export(out: &Path, graph: &SkeletonGraph) -> Result<()> {
    write_atomic(&out.join(PLY_FILE), skeleton_ply(graph).as_bytes())
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub pairings: Vec<BoxPairing>,
    pub laterals: Vec<LateralRoot3D>,
    pub refinement: Refinement,
    pub skeleton: SkeletonGraph,
    pub ledgers: Vec<ConnectionLedger>,
    pub metrics: Option<SceneMetrics>,
}

/// Runs every stage on an in-memory bundle without touching the disk.
pub fn reconstruct(bundle: &Bundle, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let provider = bundle.match_provider(cfg.oracle_matches)?;
    let pairings = match_views(bundle, provider.as_ref(), cfg)?;
    let laterals = triangulate(bundle, &pairings, cfg)?;
    let refinement = refine(bundle, &laterals, cfg)?;
    let (skeleton, ledgers) = connect(&refinement.laterals, &refinement.cameras, &bundle.masks, cfg)?;
    let metrics = bundle.truth.as_ref().map(|_| evaluate(&skeleton, bundle, cfg)).transpose()?;
    Ok(PipelineOutput {
        pairings,
        laterals,
        refinement,
        skeleton,
        ledgers,
        metrics,
    })
}

/// Loads a bundle, runs every stage and writes all artifacts to `out`.
pub fn run_pipeline(bundle_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let bundle = Bundle::load(bundle_dir, cfg)?;
    let result = reconstruct(&bundle, cfg)?;
    std::fs::create_dir_all(out)?;
    write_pairings(out, &result.pairings)?;
    write_json(&out.join(LATERALS_FILE), &result.laterals)?;
    write_refinement(out, &result.refinement)?;
    write_skeleton(out, &result.skeleton, &result.ledgers)?;
    write_export(out, &result.skeleton)?;
    if let Some(m) = &result.metrics {
        write_metrics(out, scene_name(&bundle), m)?;
    }
    Ok(result)
}

/// File-level stages; each reads its inputs from the bundle and `out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Match,
    Triangulate,
    Sba,
    Connect,
    Evaluate,
    Export,
}

fn read_pairings(out: &Path, views: usize) -> Result<Vec<BoxPairing>> {
    (0..views - 1).map(|a| read_json(&out.join(pairings_file(a, a + 1)))).collect()
}

fn check_lateral_refs(laterals: &[LateralRoot3D], bundle: &Bundle, path: PathBuf) -> Result<()> {
    for l in laterals {
        if l.views.len() != l.detections.len()
            || l.observations().any(|(v, d)| v >= bundle.view_count() || d >= bundle.detections[v].len())
        {
            return Err(Error::Malformed {
                path,
                msg: format!("lateral {} references a missing view or detection", l.id),
            });
        }
    }
    Ok(())
}

pub fn run_stage(stage: Stage, bundle_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let bundle = Bundle::load(bundle_dir, cfg)?;
    std::fs::create_dir_all(out)?;
    match stage {
        Stage::Match => {
            let provider = bundle.match_provider(cfg.oracle_matches)?;
            let pairings = match_views(&bundle, provider.as_ref(), cfg)?;
            write_pairings(out, &pairings)
        }
        Stage::Triangulate => {
            let pairings = read_pairings(out, bundle.view_count())?;
            let laterals = triangulate(&bundle, &pairings, cfg)?;
            write_json(&out.join(LATERALS_FILE), &laterals)
        }
        Stage::Sba => {
            let path = out.join(LATERALS_FILE);
            let laterals: Vec<LateralRoot3D> = read_json(&path)?;
            check_lateral_refs(&laterals, &bundle, path)?;
            write_refinement(out, &refine(&bundle, &laterals, cfg)?)
        }
        Stage::Connect => {
            let path = out.join(REFINED_LATERALS_FILE);
            let laterals: Vec<LateralRoot3D> = read_json(&path)?;
            check_lateral_refs(&laterals, &bundle, path)?;
            let cameras: Vec<CameraView<f64>> = read_json(&out.join(REFINED_CAMERAS_FILE))?;
            if cameras.len() != bundle.view_count() {
                return Err(Error::ShapeMismatch(format!(
                    "{} refined cameras for {} views",
                    cameras.len(),
                    bundle.view_count()
                )));
            }
            let (graph, ledgers) = connect(&laterals, &cameras, &bundle.masks, cfg)?;
            write_skeleton(out, &graph, &ledgers)
        }
        Stage::Evaluate => {
            let graph: SkeletonGraph = read_json(&out.join(SKELETON_FILE))?;
            let m = evaluate(&graph, &bundle, cfg)?;
            write_metrics(out, scene_name(&bundle), &m)
        }
        Stage::Export => {
            let graph: SkeletonGraph = read_json(&out.join(SKELETON_FILE))?;
            write_export(out, &graph)
        }
    }
}

/// Writes an SVG overlay of `skeleton.json` on one view, drawn with the
/// refined cameras when present.
pub fn render_overlay(bundle_dir: &Path, out: &Path, view: usize, cfg: &PipelineConfig) -> Result<PathBuf> {
    let bundle = Bundle::load(bundle_dir, cfg)?;
    let graph: SkeletonGraph = read_json(&out.join(SKELETON_FILE))?;
    let refined = out.join(REFINED_CAMERAS_FILE);
    let cameras: Vec<CameraView<f64>> = if refined.exists() { read_json(&refined)? } else { bundle.cameras.clone() };
    let camera = cameras
        .get(view)
        .ok_or_else(|| Error::InvalidView(format!("view {view} does not exist")))?;
    let svg = overlay_svg(&graph, camera, bundle.truth.as_ref().map(|t| &t.system));
    let path = out.join(overlay_file(view));
    write_atomic(&path, svg.as_bytes())?;
    Ok(path)
}
