//! Procedural root systems with calibrated renders, exact and noisy
//! detections, and oracle keypoint matches.
//!
//! Randomness is split by concern: geometry draws from the spec seed, while
//! detection noise, match sampling and pose perturbation each get their own
//! ChaCha stream of the noise seed, so toggling one kind of noise never moves
//! the others.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, reprojection_error, triangulate_pair, CameraView, Intrinsics, Pixel, Pose};
use crate::detection::{BoxXYWH, Detection2D, Keypoint};
use crate::error::{Error, Result};
use crate::fusion::point_array;
use crate::matching::{KeypointMatch, MatchProvider};
use crate::raster::Mask;

/// Margin added around the keypoint bounding box of a rendered detection, in pixels.
pub const BOX_PADDING: f64 = 2.0;

/// Outlier matches are redrawn until their two-view triangulation leaves at
/// least this much summed reprojection error, in pixels.
pub const OUTLIER_MIN_RESIDUAL: f64 = 2.0;

const STREAM_DETECTIONS: u64 = 1 << 32;
const STREAM_MATCHES: u64 = 2 << 32;
const STREAM_POSES: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RootSystemSpec {
    pub seed: u64,
    /// Inclusive range of lateral counts.
    pub lateral_count: [usize; 2],
    pub main_root_length: f64,
    pub lateral_length_mean: f64,
    pub lateral_length_sd: f64,
    pub lateral_length_min: f64,
    /// Angle between a lateral and the downward main-root direction, radians.
    pub branch_angle_mean: f64,
    pub branch_angle_sd: f64,
    /// Azimuth step between consecutive laterals, radians.
    pub divergence_angle: f64,
    /// Standard deviation of the per-lateral azimuth perturbation, radians.
    pub azimuth_sd: f64,
    /// Standard deviation of the horizontal wobble of main-root vertices.
    pub jitter: f64,
    /// Fraction of the main root kept free of junctions at the top and bottom.
    pub junction_margin: f64,
}

impl Default for RootSystemSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            lateral_count: [30, 60],
            main_root_length: 1.0,
            lateral_length_mean: 0.1,
            lateral_length_sd: 0.02,
            lateral_length_min: 0.05,
            branch_angle_mean: 1.35,
            branch_angle_sd: 0.15,
            divergence_angle: std::f64::consts::FRAC_PI_2,
            azimuth_sd: 0.3,
            jitter: 0.002,
            junction_margin: 0.05,
        }
    }
}

impl RootSystemSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        let [lo, hi] = self.lateral_count;
        if lo < 1 || hi < lo {
            return bad("lateral_count must be a range with minimum >= 1");
        }
        if !(self.main_root_length > 0.0 && self.lateral_length_mean > 0.0 && self.lateral_length_min > 0.0) {
            return bad("lengths must be positive");
        }
        if !(self.lateral_length_sd >= 0.0 && self.branch_angle_sd >= 0.0 && self.azimuth_sd >= 0.0 && self.jitter >= 0.0) {
            return bad("spreads must be non-negative");
        }
        if !(self.branch_angle_mean > 0.0 && self.branch_angle_mean < std::f64::consts::FRAC_PI_2) {
            return bad("branch_angle_mean must lie in (0, pi/2)");
        }
        if !self.divergence_angle.is_finite() {
            return bad("divergence_angle must be finite");
        }
        if !(0.0..0.5).contains(&self.junction_margin) {
            return bad("junction_margin must lie in [0, 0.5)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSpec {
    pub camera_count: usize,
    /// Angle between neighbouring cameras on the ring, degrees.
    pub separation_deg: f64,
    pub distance: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub stroke_width: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            camera_count: 5,
            separation_deg: 15.0,
            distance: 3.0,
            focal: 1300.0,
            width: 640,
            height: 768,
            stroke_width: 3.0,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(3..=10).contains(&self.camera_count) {
            return Err(Error::InvalidSpec("camera_count must be between 3 and 10".into()));
        }
        if !(self.separation_deg > 0.0 && self.distance > 0.0 && self.focal > 0.0 && self.stroke_width > 0.0) {
            return Err(Error::InvalidSpec("render geometry must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidSpec("image must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub seed: u64,
    pub keypoint_sigma: f64,
    pub detection_dropout: f64,
    pub match_outlier_rate: f64,
    pub match_dropout_rate: f64,
    pub matches_per_lateral: usize,
    /// Rotation perturbation of every camera but the first, degrees.
    pub pose_rotation_deg: f64,
    /// Translation perturbation as a fraction of the scene diagonal.
    pub pose_translation_frac: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            keypoint_sigma: 0.0,
            detection_dropout: 0.0,
            match_outlier_rate: 0.0,
            match_dropout_rate: 0.0,
            matches_per_lateral: 12,
            pose_rotation_deg: 0.0,
            pose_translation_frac: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let p = [self.detection_dropout, self.match_outlier_rate, self.match_dropout_rate];
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidSpec("noise probabilities must lie in [0, 1]".into()));
        }
        if !(self.keypoint_sigma >= 0.0 && self.pose_rotation_deg >= 0.0 && self.pose_translation_frac >= 0.0) {
            return Err(Error::InvalidSpec("noise magnitudes must be non-negative".into()));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtLateral {
    #[serde(with = "point_array")]
    pub start: Point3<f64>,
    #[serde(with = "point_array")]
    pub end: Point3<f64>,
    /// Index of the main-root vertex the lateral starts at.
    pub junction: usize,
}

/// Root-system geometry. Laterals are ordered top-down, so the adjacency is
/// the path `(0, 1), (1, 2), ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootSystem {
    pub main_root: Vec<[f64; 3]>,
    pub laterals: Vec<GtLateral>,
    pub adjacency: Vec<(usize, usize)>,
}

impl RootSystem {
    pub fn main_root_points(&self) -> Vec<Point3<f64>> {
        self.main_root.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()
    }

    pub fn all_points(&self) -> Vec<Point3<f64>> {
        let mut pts = self.main_root_points();
        pts.extend(self.laterals.iter().flat_map(|l| [l.start, l.end]));
        pts
    }

    pub fn centroid(&self) -> Point3<f64> {
        let pts = self.all_points();
        let sum = pts.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / pts.len() as f64)
    }

    /// Bounding-box diagonal of the lateral endpoints.
    pub fn lateral_diagonal(&self) -> f64 {
        bbox_diagonal(self.laterals.iter().flat_map(|l| [l.start, l.end]))
    }
}

pub fn bbox_diagonal(points: impl IntoIterator<Item = Point3<f64>>) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for p in points {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
        any = true;
    }
    if any {
        (hi - lo).norm()
    } else {
        0.0
    }
}

fn sample_angle(rng: &mut ChaCha8Rng, spec: &RootSystemSpec) -> f64 {
    if spec.branch_angle_sd == 0.0 {
        return spec.branch_angle_mean;
    }
    let dist = Normal::new(spec.branch_angle_mean, spec.branch_angle_sd).expect("validated spread");
    loop {
        let a = dist.sample(rng);
        if a > 0.0 && a < std::f64::consts::FRAC_PI_2 {
            return a;
        }
    }
}

/// Generates a root system; a pure function of `spec`.
pub fn generate(spec: &RootSystemSpec) -> Result<RootSystem> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = rng.random_range(spec.lateral_count[0]..=spec.lateral_count[1]);
    let len = spec.main_root_length;
    let (top, bottom) = (spec.junction_margin * len, (1.0 - spec.junction_margin) * len);
    let spacing = (bottom - top) / n as f64;
    let depths: Vec<f64> = (0..n)
        .map(|k| top + spacing * (k as f64 + 0.5 + rng.random_range(-0.25..0.25)))
        .collect();

    let wobble = |rng: &mut ChaCha8Rng| {
        if spec.jitter == 0.0 {
            0.0
        } else {
            Normal::new(0.0, spec.jitter).expect("validated jitter").sample(rng)
        }
    };
    let mut main_root = vec![[0.0, 0.0, 0.0]];
    for &d in &depths {
        main_root.push([wobble(&mut rng), d, wobble(&mut rng)]);
    }
    main_root.push([wobble(&mut rng), len, wobble(&mut rng)]);

    let length_dist = (spec.lateral_length_sd > 0.0)
        .then(|| Normal::new(spec.lateral_length_mean, spec.lateral_length_sd).expect("validated spread"));
    let azimuth_noise = (spec.azimuth_sd > 0.0).then(|| Normal::new(0.0, spec.azimuth_sd).expect("validated spread"));
    let phi0 = rng.random_range(0.0..std::f64::consts::TAU);
    let laterals = (0..n)
        .map(|k| {
            let alpha = sample_angle(&mut rng, spec);
            let phi = phi0 + spec.divergence_angle * k as f64 + azimuth_noise.map_or(0.0, |d| d.sample(&mut rng));
            let length = length_dist
                .map_or(spec.lateral_length_mean, |d| d.sample(&mut rng))
                .max(spec.lateral_length_min);
            let dir = Vector3::new(alpha.sin() * phi.cos(), alpha.cos(), alpha.sin() * phi.sin());
            let j = main_root[k + 1];
            let start = Point3::new(j[0], j[1], j[2]);
            GtLateral {
                start,
                end: start + dir * length,
                junction: k + 1,
            }
        })
        .collect();
    Ok(RootSystem {
        main_root,
        laterals,
        adjacency: (1..n).map(|k| (k - 1, k)).collect(),
    })
}

/// Ring of cameras around the vertical axis through the root centroid, image
/// `v` pointing down the main root.
pub fn ring_cameras(system: &RootSystem, render: &RenderSpec) -> Result<Vec<CameraView<f64>>> {
    render.validate()?;
    let c = system.centroid();
    let k = Intrinsics::new(render.focal, render.focal, render.width as f64 / 2.0, render.height as f64 / 2.0)?;
    (0..render.camera_count)
        .map(|i| {
            let a = (i as f64 - (render.camera_count - 1) as f64 / 2.0) * render.separation_deg.to_radians();
            let center = c + Vector3::new(a.sin(), 0.0, -a.cos()) * render.distance;
            let pose = Pose::look_at(center, c, Vector3::y())?;
            CameraView::new(k, pose, render.width, render.height)
        })
        .collect()
}

pub fn render_mask(system: &RootSystem, view: &CameraView<f64>, stroke_width: f64) -> Mask {
    let mut mask = Mask::new(view.width as usize, view.height as usize);
    let mut draw = |a: &Point3<f64>, b: &Point3<f64>| {
        if let (Ok(pa), Ok(pb)) = (project(view, a), project(view, b)) {
            mask.draw_segment(&pa, &pb, stroke_width);
        }
    };
    let main = system.main_root_points();
    for w in main.windows(2) {
        draw(&w[0], &w[1]);
    }
    for l in &system.laterals {
        draw(&l.start, &l.end);
    }
    mask
}

fn detection_from_keypoints(view: &CameraView<f64>, s: Pixel<f64>, e: Pixel<f64>) -> Detection2D<f64> {
    let pad = BOX_PADDING;
    Detection2D {
        bbox: BoxXYWH::from_corners(s.u.min(e.u) - pad, s.v.min(e.v) - pad, s.u.max(e.u) + pad, s.v.max(e.v) + pad),
        score: 1.0,
        keypoints: [
            Keypoint { pixel: s, visible: view.contains(&s) },
            Keypoint { pixel: e, visible: view.contains(&e) },
        ],
        provenance: None,
    }
}

/// Exact detections of every lateral with at least one endpoint in the image,
/// in lateral order, with the lateral index of each.
pub fn render_detections(system: &RootSystem, view: &CameraView<f64>) -> (Vec<Detection2D<f64>>, Vec<usize>) {
    let mut dets = Vec::new();
    let mut ids = Vec::new();
    for (i, l) in system.laterals.iter().enumerate() {
        let (Ok(s), Ok(e)) = (project(view, &l.start), project(view, &l.end)) else {
            continue;
        };
        let d = detection_from_keypoints(view, s, e);
        if d.keypoints.iter().any(|k| k.visible) {
            dets.push(d);
            ids.push(i);
        }
    }
    (dets, ids)
}

/// Per-view ground truth: the exact detection of each emitted detection's
/// lateral, and that lateral's index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtView {
    pub detections: Vec<Detection2D<f64>>,
    pub laterals: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub system: RootSystem,
    /// True calibration (the bundle's cameras may be perturbed).
    pub cameras: Vec<CameraView<f64>>,
    pub views: Vec<GtView>,
}

impl GroundTruth {
    pub fn lateral_of(&self, view: usize, detection: usize) -> Option<usize> {
        self.views.get(view)?.laterals.get(detection).copied()
    }
}

/// A fully rendered scene: what the pipeline sees plus the ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub root: RootSystemSpec,
    pub render: RenderSpec,
    pub noise: NoiseSpec,
    /// Calibration handed to the pipeline.
    pub cameras: Vec<CameraView<f64>>,
    pub masks: Vec<Mask>,
    pub detections: Vec<Vec<Detection2D<f64>>>,
    pub truth: GroundTruth,
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
    }
}

fn perturb_cameras(cameras: &[CameraView<f64>], scale: f64, noise: &NoiseSpec) -> Vec<CameraView<f64>> {
    if noise.pose_rotation_deg == 0.0 && noise.pose_translation_frac == 0.0 {
        return cameras.to_vec();
    }
    let mut rng = noise.rng(STREAM_POSES);
    cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let axis = Vector3::from(UnitSphere.sample(&mut rng));
            let dir = Vector3::from(UnitSphere.sample(&mut rng));
            if i == 0 {
                return *c;
            }
            let mut out = *c;
            out.pose = c.pose.retract(
                &(axis * noise.pose_rotation_deg.to_radians()),
                &(dir * noise.pose_translation_frac * scale),
            );
            out
        })
        .collect()
}

impl Scene {
    pub fn synthesize(root: &RootSystemSpec, render: &RenderSpec, noise: &NoiseSpec) -> Result<Scene> {
        noise.validate()?;
        let system = generate(root)?;
        let truth_cameras = ring_cameras(&system, render)?;
        let rendered: Vec<(Mask, Vec<Detection2D<f64>>, Vec<usize>, Vec<Detection2D<f64>>)> = truth_cameras
            .par_iter()
            .enumerate()
            .map(|(v, cam)| {
                let mask = render_mask(&system, cam, render.stroke_width);
                let (exact, ids) = render_detections(&system, cam);
                let mut rng = noise.rng(STREAM_DETECTIONS + v as u64);
                let mut kept = Vec::new();
                let mut kept_ids = Vec::new();
                let mut kept_exact = Vec::new();
                for (d, id) in exact.iter().zip(&ids) {
                    let drop = rng.random_bool(noise.detection_dropout);
                    let mut kp = [d.keypoints[0].pixel, d.keypoints[1].pixel];
                    for p in &mut kp {
                        p.u += gaussian(&mut rng, noise.keypoint_sigma);
                        p.v += gaussian(&mut rng, noise.keypoint_sigma);
                    }
                    if drop {
                        continue;
                    }
                    kept.push(detection_from_keypoints(cam, kp[0], kp[1]));
                    kept_ids.push(*id);
                    kept_exact.push(d.clone());
                }
                (mask, kept, kept_ids, kept_exact)
            })
            .collect();
        let cameras = perturb_cameras(&truth_cameras, bbox_diagonal(system.all_points()), noise);
        let mut masks = Vec::new();
        let mut detections = Vec::new();
        let mut views = Vec::new();
        for (mask, dets, ids, exact) in rendered {
            masks.push(mask);
            detections.push(dets);
            views.push(GtView { detections: exact, laterals: ids });
        }
        Ok(Scene {
            root: root.clone(),
            render: render.clone(),
            noise: noise.clone(),
            cameras,
            masks,
            detections,
            truth: GroundTruth {
                system,
                cameras: truth_cameras,
                views,
            },
        })
    }

    pub fn oracle(&self) -> OracleMatcher<'_> {
        OracleMatcher {
            system: &self.truth.system,
            cameras: &self.truth.cameras,
            noise: &self.noise,
        }
    }
}

/// Samples points along each lateral and pairs their projections in two
/// views, applying the configured noise, dropout and outliers.
pub fn oracle_matches(
    system: &RootSystem,
    cameras: &[CameraView<f64>],
    view_a: usize,
    view_b: usize,
    noise: &NoiseSpec,
) -> Vec<KeypointMatch<f64>> {
    let (ca, cb) = (&cameras[view_a], &cameras[view_b]);
    let mut rng = noise.rng(STREAM_MATCHES + (view_a as u64) * 1024 + view_b as u64);
    let n = noise.matches_per_lateral;
    let mut out = Vec::new();
    for l in &system.laterals {
        for k in 0..n {
            let t = (k as f64 + rng.random::<f64>()) / n as f64;
            let p = l.start + (l.end - l.start) * t;
            let drop = rng.random_bool(noise.match_dropout_rate);
            let outlier = rng.random_bool(noise.match_outlier_rate);
            let mut p1 = project(ca, &p).ok().filter(|q| ca.contains(q));
            let mut p2 = project(cb, &p).ok().filter(|q| cb.contains(q));
            for (q, s) in [(&mut p1, noise.keypoint_sigma), (&mut p2, noise.keypoint_sigma)] {
                if let Some(q) = q {
                    q.u += gaussian(&mut rng, s);
                    q.v += gaussian(&mut rng, s);
                }
            }
            if drop {
                continue;
            }
            let (Some(p1), Some(p2)) = (p1, p2) else { continue };
            let (p1, p2) = if outlier { random_inconsistent_pair(&mut rng, ca, cb) } else { (p1, p2) };
            out.push(KeypointMatch { p1, p2, confidence: 1.0 });
        }
    }
    out
}

fn random_inconsistent_pair(rng: &mut ChaCha8Rng, ca: &CameraView<f64>, cb: &CameraView<f64>) -> (Pixel<f64>, Pixel<f64>) {
    loop {
        let p1 = Pixel::new(rng.random_range(0.0..ca.width as f64), rng.random_range(0.0..ca.height as f64));
        let p2 = Pixel::new(rng.random_range(0.0..cb.width as f64), rng.random_range(0.0..cb.height as f64));
        match triangulate_pair(ca, cb, &p1, &p2) {
            Err(_) => return (p1, p2),
            Ok(x) if reprojection_error(&[*ca, *cb], &x, &[p1, p2]) > OUTLIER_MIN_RESIDUAL => return (p1, p2),
            Ok(_) => {}
        }
    }
}

/// Match provider backed by the ground truth of a synthetic scene.
#[derive(Debug, Clone, Copy)]
pub struct OracleMatcher<'a> {
    pub system: &'a RootSystem,
    pub cameras: &'a [CameraView<f64>],
    pub noise: &'a NoiseSpec,
}

impl MatchProvider for OracleMatcher<'_> {
    fn matches(&self, view_a: usize, view_b: usize) -> Result<Vec<KeypointMatch<f64>>> {
        if view_a >= self.cameras.len() || view_b >= self.cameras.len() {
            return Err(Error::InvalidView(format!("no view pair ({view_a}, {view_b})")));
        }
        Ok(oracle_matches(self.system, self.cameras, view_a, view_b, self.noise))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let spec = RootSystemSpec { seed: 3, ..Default::default() };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert!((30..=60).contains(&a.laterals.len()));
        assert_eq!(a.adjacency.len(), a.laterals.len() - 1);
        assert!(a.main_root.windows(2).all(|w| w[1][1] > w[0][1]));
        for l in &a.laterals {
            let j = a.main_root[l.junction];
            assert_eq!([l.start.x, l.start.y, l.start.z], j);
        }
    }

    #[test]
    fn single_lateral() {
        let spec = RootSystemSpec { lateral_count: [1, 1], ..Default::default() };
        let s = generate(&spec).unwrap();
        assert_eq!((s.laterals.len(), s.adjacency.len()), (1, 0));
    }

    #[test]
    fn whole_scene_fits_in_every_view() {
        for seed in 0..5 {
            let scene = Scene::synthesize(&RootSystemSpec { seed, ..Default::default() }, &RenderSpec::default(), &NoiseSpec::default()).unwrap();
            for (v, dets) in scene.detections.iter().enumerate() {
                assert_eq!(dets.len(), scene.truth.system.laterals.len(), "seed {seed} view {v}");
                assert!(dets.iter().all(|d| d.keypoints.iter().all(|k| k.visible)));
            }
        }
    }

    #[test]
    fn noiseless_matches_share_a_point() {
        let scene = Scene::synthesize(&RootSystemSpec::default(), &RenderSpec::default(), &NoiseSpec::default()).unwrap();
        let m = scene.oracle().matches(1, 2).unwrap();
        assert_eq!(m.len(), 12 * scene.truth.system.laterals.len());
        let (ca, cb) = (&scene.cameras[1], &scene.cameras[2]);
        for km in &m {
            let x = triangulate_pair(ca, cb, &km.p1, &km.p2).unwrap();
            assert!(reprojection_error(&[*ca, *cb], &x, &[km.p1, km.p2]) < 1e-6);
        }
    }
}
