//! Scene bundles and stage artifacts on disk.
//!
//! A bundle directory holds `cameras.json`, per-view `view_k.mask.pgm` and
//! `view_k.detections.json` (or raw `view_k.grid_sN.bin` prediction grids),
//! `matches_a_b.json` for consecutive views, and for synthetic scenes
//! `ground_truth.json` and `scene.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::config::PipelineConfig;
use crate::detection::grid::{assign_targets_skipping, default_anchors, decode_grid, perfect_predictions, read_grid, write_grid, GridShape};
use crate::detection::{filter_detections, Detection2D, Stride};
use crate::error::{Error, Result};
use crate::matching::{KeypointMatch, MatchProvider};
use crate::raster::Mask;
use crate::synthetic::{oracle_matches, GroundTruth, NoiseSpec, RenderSpec, RootSystemSpec, Scene};

pub const CAMERAS_FILE: &str = "cameras.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SCENE_FILE: &str = "scene.json";

pub fn mask_file(view: usize) -> String {
    format!("view_{view}.mask.pgm")
}

pub fn detections_file(view: usize) -> String {
    format!("view_{view}.detections.json")
}

pub fn grid_file(view: usize, stride: Stride) -> String {
    format!("view_{view}.grid_s{}.bin", stride.pixels())
}

pub fn matches_file(a: usize, b: usize) -> String {
    format!("matches_{a}_{b}.json")
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Mask::read_pgm(BufReader::new(open(path)?), path)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut bytes = Vec::new();
    mask.write_pgm(&mut bytes)?;
    write_atomic(path, &bytes)
}

/// Generator settings of a synthetic bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub root: RootSystemSpec,
    pub render: RenderSpec,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleWriteOptions {
    /// Store detections as raw prediction grids instead of JSON.
    pub raw_grids: bool,
    /// Store oracle matches for consecutive views.
    pub matches: bool,
}

impl Default for BundleWriteOptions {
    fn default() -> Self {
        Self {
            raw_grids: false,
            matches: true,
        }
    }
}

fn grid_shapes(view: &CameraView<f64>) -> Vec<GridShape<f64>> {
    Stride::ALL
        .iter()
        .map(|&s| GridShape::for_image(s, view.width, view.height, default_anchors(s)))
        .collect()
}

pub fn write_scene(scene: &Scene, dir: &Path, opts: BundleWriteOptions) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(CAMERAS_FILE), &scene.cameras)?;
    for (v, (mask, dets)) in scene.masks.iter().zip(&scene.detections).enumerate() {
        write_mask(&dir.join(mask_file(v)), mask)?;
        if opts.raw_grids {
            let (targets, skipped) = assign_targets_skipping(dets, &grid_shapes(&scene.cameras[v]), Default::default());
            if !skipped.is_empty() {
                log::warn!("view {v}: {} detection(s) fit no grid slot and were left out", skipped.len());
            }
            for grid in perfect_predictions(&targets, Default::default())? {
                let mut bytes = Vec::new();
                write_grid(&grid, &mut bytes)?;
                write_atomic(&dir.join(grid_file(v, grid.shape.stride)), &bytes)?;
            }
        } else {
            write_json(&dir.join(detections_file(v)), dets)?;
        }
    }
    if opts.matches {
        for a in 0..scene.cameras.len().saturating_sub(1) {
            let m = oracle_matches(&scene.truth.system, &scene.truth.cameras, a, a + 1, &scene.noise);
            write_json(&dir.join(matches_file(a, a + 1)), &m)?;
        }
    }
    write_json(&dir.join(GROUND_TRUTH_FILE), &scene.truth)?;
    write_json(
        &dir.join(SCENE_FILE),
        &SceneSpec {
            root: scene.root.clone(),
            render: scene.render.clone(),
            noise: scene.noise.clone(),
        },
    )
}

fn load_detections(dir: &Path, view: usize, cfg: &PipelineConfig) -> Result<Vec<Detection2D<f64>>> {
    let json = dir.join(detections_file(view));
    if json.exists() {
        return read_json(&json);
    }
    let mut decoded = Vec::new();
    let mut found = false;
    for s in Stride::ALL {
        let path = dir.join(grid_file(view, s));
        if !path.exists() {
            continue;
        }
        found = true;
        let grid = read_grid::<f64, _>(BufReader::new(open(&path)?)).map_err(|e| match e {
            Error::Io(_) | Error::Json(_) => Error::Malformed {
                path: path.clone(),
                msg: e.to_string(),
            },
            other => other,
        })?;
        decoded.extend(decode_grid(&grid, cfg.codec())?);
    }
    if !found {
        return Err(Error::MissingInput(json));
    }
    Ok(filter_detections(&decoded, cfg.objectness_threshold, cfg.nms_iou_threshold))
}

/// Inputs of one scene.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub cameras: Vec<CameraView<f64>>,
    pub masks: Vec<Mask>,
    pub detections: Vec<Vec<Detection2D<f64>>>,
    pub truth: Option<GroundTruth>,
    pub scene: Option<SceneSpec>,
}

impl Bundle {
    pub fn load(dir: &Path, cfg: &PipelineConfig) -> Result<Bundle> {
        let cameras: Vec<CameraView<f64>> = read_json(&dir.join(CAMERAS_FILE))?;
        if cameras.len() < 3 {
            return Err(Error::InvalidView(format!("bundle has {} camera(s), need at least 3", cameras.len())));
        }
        let mut masks = Vec::new();
        let mut detections = Vec::new();
        for (v, cam) in cameras.iter().enumerate() {
            let mask = read_mask(&dir.join(mask_file(v)))?;
            if (mask.width(), mask.height()) != (cam.width as usize, cam.height as usize) {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {}x{} mask for a {}x{} view",
                    mask_file(v),
                    mask.width(),
                    mask.height(),
                    cam.width,
                    cam.height
                )));
            }
            masks.push(mask);
            detections.push(load_detections(dir, v, cfg)?);
        }
        let optional = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let truth = optional(GROUND_TRUTH_FILE).map(|p| read_json(&p)).transpose()?;
        let scene = optional(SCENE_FILE).map(|p| read_json(&p)).transpose()?;
        Ok(Bundle {
            dir: dir.to_path_buf(),
            cameras,
            masks,
            detections,
            truth,
            scene,
        })
    }

    pub fn view_count(&self) -> usize {
        self.cameras.len()
    }

    /// Matches from `matches_a_b.json`, or from the ground truth when
    /// `oracle` is set.
    pub fn match_provider(&self, oracle: bool) -> Result<Box<dyn MatchProvider + '_>> {
        if !oracle {
            return Ok(Box::new(FileMatches { dir: self.dir.clone() }));
        }
        match (&self.truth, &self.scene) {
            (Some(truth), Some(scene)) => Ok(Box::new(crate::synthetic::OracleMatcher {
                system: &truth.system,
                cameras: &truth.cameras,
                noise: &scene.noise,
            })),
            (None, _) => Err(Error::MissingInput(self.dir.join(GROUND_TRUTH_FILE))),
            (_, None) => Err(Error::MissingInput(self.dir.join(SCENE_FILE))),
        }
    }
}

/// Reads `matches_a_b.json` from a directory.
#[derive(Debug, Clone)]
pub struct FileMatches {
    pub dir: PathBuf,
}

impl MatchProvider for FileMatches {
    fn matches(&self, view_a: usize, view_b: usize) -> Result<Vec<KeypointMatch<f64>>> {
        read_json(&self.dir.join(matches_file(view_a, view_b)))
    }
}
