//! Main-root reconstruction by simulated top-down growth.
//!
//! Each view gets a label matrix seeded with the reprojected lateral start
//! points. Labels flow downward row by row; when a run of foreground pixels
//! that already carries label `m` reaches a new start `k`, the pair `(m, k)`
//! is recorded. Pairs seen in enough views become main-root adjacencies.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, CameraView, Pixel};
use crate::error::{Error, Result};
use crate::fusion::LateralRoot3D;
use crate::raster::Mask;

/// Largest distance (px) a start may be moved to land on foreground.
pub const START_SNAP_RADIUS: f64 = 3.0;

pub const DEFAULT_STROKE_WIDTH: f64 = 3.0;

pub const DEFAULT_MIN_COUNT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    /// Foreground not yet reached (`-1`).
    Unlabeled,
    /// Background (`∞`).
    Background,
    Root(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    width: usize,
    height: usize,
    cells: Vec<Label>,
}

impl LabelMatrix {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: Label) {
        self.cells[y * self.width + x] = label;
    }

    pub fn row(&self, y: usize) -> &[Label] {
        &self.cells[y * self.width..(y + 1) * self.width]
    }
}

/// Nearest foreground pixel to `p` (by distance to its center) within
/// [`START_SNAP_RADIUS`]; ties go to the smaller `(y, x)`.
fn snap(foreground: &Mask, p: &Pixel<f64>) -> Option<(usize, usize)> {
    if let Some((x, y)) = foreground.cell_of(p) {
        if foreground.get(x, y) {
            return Some((x, y));
        }
    }
    let r = START_SNAP_RADIUS;
    let clamp = |v: f64, hi: usize| v.clamp(0.0, hi as f64) as usize;
    let (x0, x1) = (clamp((p.u - r).floor(), foreground.width()), clamp((p.u + r).ceil(), foreground.width()));
    let (y0, y1) = (clamp((p.v - r).floor(), foreground.height()), clamp((p.v + r).ceil(), foreground.height()));
    let mut best: Option<(f64, usize, usize)> = None;
    for y in y0..y1 {
        for x in x0..x1 {
            if !foreground.get(x, y) {
                continue;
            }
            let d = Pixel::new(x as f64 + 0.5, y as f64 + 0.5).distance(p);
            if d <= r && best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, x, y));
            }
        }
    }
    best.map(|(_, x, y)| (x, y))
}

/// Foreground cells become [`Label::Unlabeled`], background [`Label::Background`],
/// and each start cell its root index. Starts off the foreground are snapped
/// to the nearest foreground pixel within 3 px. When two starts share a cell
/// the smaller index is kept.
pub fn init_label_matrix(foreground: &Mask, starts: &[(Pixel<f64>, usize)]) -> Result<LabelMatrix> {
    let mut m = LabelMatrix {
        width: foreground.width(),
        height: foreground.height(),
        cells: (0..foreground.height())
            .flat_map(|y| (0..foreground.width()).map(move |x| (x, y)))
            .map(|(x, y)| if foreground.get(x, y) { Label::Unlabeled } else { Label::Background })
            .collect(),
    };
    for &(p, root) in starts {
        let (x, y) = snap(foreground, &p).ok_or(Error::StartOffMask { root, u: p.u, v: p.v })?;
        match m.get(x, y) {
            Label::Root(other) if other <= root => {
                log::warn!("start of root {root} shares a pixel with root {other}; keeping {other}");
            }
            Label::Root(other) => {
                log::warn!("start of root {other} shares a pixel with root {root}; keeping {root}");
                m.set(x, y, Label::Root(root));
            }
            _ => m.set(x, y, Label::Root(root)),
        }
    }
    Ok(m)
}

/// A junction event: label `m` flowing from above met start `k` at `row`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Connection {
    pub m: usize,
    pub k: usize,
    pub row: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionLedger {
    pub view: Option<usize>,
    pub connections: Vec<Connection>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationOptions {
    /// Apply the case-wise cell rule (existing labels keep their value and
    /// only unlabeled cells take the inherited label) instead of relabeling
    /// the whole run with the new start.
    pub casewise_update: bool,
}

/// Most frequent root label among `cells`; ties go to the smallest index.
pub fn run_mode(cells: &[Label]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in cells {
        if let Label::Root(r) = c {
            *counts.entry(*r).or_default() += 1;
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for (label, n) in counts {
        if best.is_none_or(|(_, bn)| n > bn) {
            best = Some((label, n));
        }
    }
    best.map(|(l, _)| l)
}

/// Maximal runs `[x1, x2]` of non-background cells in a row.
pub fn foreground_runs(row: &[Label]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (x, c) in row.iter().enumerate() {
        match (c, start) {
            (Label::Background, Some(s)) => {
                runs.push((s, x - 1));
                start = None;
            }
            (Label::Background, None) => {}
            (_, None) => start = Some(x),
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, row.len() - 1));
    }
    runs
}

/// Scans rows from the top, propagating labels into each run from the row
/// above and recording a connection whenever a run holds a new start.
pub fn propagate_rows(mut m: LabelMatrix, opts: PropagationOptions) -> (LabelMatrix, ConnectionLedger) {
    let mut ledger = ConnectionLedger::default();
    for y in 0..m.height {
        let runs = foreground_runs(m.row(y));
        for (x1, x2) in runs {
            let inherited = if y == 0 { None } else { run_mode(&m.row(y - 1)[x1..=x2]) };
            let starts: BTreeSet<usize> = m.row(y)[x1..=x2]
                .iter()
                .filter_map(|c| match c {
                    Label::Root(r) => Some(*r),
                    _ => None,
                })
                .collect();
            if starts.len() > 1 {
                log::warn!("row {y} run [{x1}, {x2}] holds {} starts", starts.len());
            }
            let fill = match (starts.first(), inherited) {
                (Some(&k), _) => Some(k),
                (None, Some(mv)) => Some(mv),
                (None, None) => None,
            };
            if let Some(mv) = inherited {
                for &k in &starts {
                    if k != mv {
                        ledger.connections.push(Connection { m: mv, k, row: y });
                    }
                }
            }
            let Some(fill) = fill else { continue };
            for x in x1..=x2 {
                let cell = m.get(x, y);
                let new = if opts.casewise_update {
                    match (cell, inherited) {
                        (Label::Unlabeled, Some(mv)) => Label::Root(mv),
                        (c, _) => c,
                    }
                } else {
                    Label::Root(fill)
                };
                m.set(x, y, new);
            }
        }
    }
    (m, ledger)
}

/// Unordered pairs whose total count across all ledgers reaches `min_count`.
pub fn retain_connections(ledgers: &[ConnectionLedger], min_count: usize) -> BTreeSet<(usize, usize)> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for c in ledgers.iter().flat_map(|l| &l.connections) {
        *counts.entry((c.m.min(c.k), c.m.max(c.k))).or_default() += 1;
    }
    counts.into_iter().filter(|&(_, n)| n >= min_count).map(|(p, _)| p).collect()
}

/// One main-root polyline through the starts of a connected group of laterals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MainRootChain {
    /// Lateral ids, top-down.
    pub roots: Vec<usize>,
    #[serde(with = "point_list")]
    pub points: Vec<Point3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonGraph {
    pub laterals: Vec<LateralRoot3D>,
    /// Unordered lateral-id pairs `(min, max)`.
    pub adjacency: Vec<(usize, usize)>,
    pub main_root: Vec<MainRootChain>,
}

impl SkeletonGraph {
    pub fn main_root_edges(&self) -> Vec<(Point3<f64>, Point3<f64>)> {
        self.main_root
            .iter()
            .flat_map(|c| c.points.windows(2).map(|w| (w[0], w[1])))
            .collect()
    }
}

mod point_list {
    use nalgebra::Point3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &[Point3<f64>], s: S) -> Result<S::Ok, S::Error> {
        p.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Point3<f64>>, D::Error> {
        Ok(Vec::<[f64; 3]>::deserialize(d)?.into_iter().map(|[x, y, z]| Point3::new(x, y, z)).collect())
    }
}

fn find(parent: &mut BTreeMap<usize, usize>, x: usize) -> usize {
    let p = *parent.get(&x).unwrap_or(&x);
    if p == x {
        return x;
    }
    let r = find(parent, p);
    parent.insert(x, r);
    r
}

/// Groups laterals into components under `adjacency` and orders each
/// component's starts by their image row in `reference`.
pub fn build_main_root(
    laterals: &[LateralRoot3D],
    adjacency: &BTreeSet<(usize, usize)>,
    reference: &CameraView<f64>,
) -> Result<SkeletonGraph> {
    let by_id: BTreeMap<usize, &LateralRoot3D> = laterals.iter().map(|l| (l.id, l)).collect();
    if by_id.len() != laterals.len() {
        return Err(Error::InvalidProblem("duplicate lateral ids".into()));
    }
    let mut parent = BTreeMap::new();
    for &(a, b) in adjacency {
        if !by_id.contains_key(&a) || !by_id.contains_key(&b) {
            return Err(Error::InvalidProblem(format!("adjacency ({a}, {b}) references an unknown root")));
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent.insert(ra.max(rb), ra.min(rb));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in adjacency {
        for id in [a, b] {
            let r = find(&mut parent, id);
            groups.entry(r).or_default().push(id);
        }
    }
    let mut main_root = Vec::new();
    for (_, mut ids) in groups {
        ids.sort_unstable();
        ids.dedup();
        let mut keyed: Vec<(f64, usize)> = ids
            .into_iter()
            .map(|id| {
                let v = project(reference, &by_id[&id].start).map_or(f64::INFINITY, |p| p.v);
                (v, id)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        main_root.push(MainRootChain {
            roots: keyed.iter().map(|k| k.1).collect(),
            points: keyed.iter().map(|k| by_id[&k.1].start).collect(),
        });
    }
    main_root.sort_by_key(|c| c.roots[0]);
    Ok(SkeletonGraph {
        laterals: laterals.to_vec(),
        adjacency: adjacency.iter().copied().collect(),
        main_root,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectConfig {
    pub stroke_width: f64,
    pub min_count: usize,
    pub casewise_update: bool,
    /// Add each view's foreground mask to the rasterized laterals.
    pub use_view_masks: bool,
    pub reference_view: usize,
}

impl Default for ConnectConfig {
    fn default() -> Self {
        Self {
            stroke_width: DEFAULT_STROKE_WIDTH,
            min_count: DEFAULT_MIN_COUNT,
            casewise_update: false,
            use_view_masks: true,
            reference_view: 0,
        }
    }
}

/// Runs label propagation in one view and returns its ledger.
pub fn view_ledger(
    laterals: &[LateralRoot3D],
    view_index: usize,
    view: &CameraView<f64>,
    mask: Option<&Mask>,
    cfg: &ConnectConfig,
) -> Result<ConnectionLedger> {
    let (w, h) = (view.width as usize, view.height as usize);
    let mut foreground = Mask::new(w, h);
    if let Some(mask) = mask {
        if (mask.width(), mask.height()) != (w, h) {
            return Err(Error::ShapeMismatch(format!(
                "view {view_index}: mask {}x{} vs image {w}x{h}",
                mask.width(),
                mask.height()
            )));
        }
        foreground.union(mask);
    }
    let mut starts = Vec::new();
    for l in laterals {
        let (Ok(a), Ok(b)) = (project(view, &l.start), project(view, &l.end)) else {
            continue;
        };
        foreground.draw_segment(&a, &b, cfg.stroke_width);
        if view.contains(&a) {
            starts.push((a, l.id));
        }
    }
    let m = init_label_matrix(&foreground, &starts)?;
    let (_, mut ledger) = propagate_rows(m, PropagationOptions { casewise_update: cfg.casewise_update });
    ledger.view = Some(view_index);
    Ok(ledger)
}

/// Per-view propagation, cross-view retention and main-root assembly.
pub fn connect_laterals(
    laterals: &[LateralRoot3D],
    cameras: &[CameraView<f64>],
    masks: &[Mask],
    cfg: &ConnectConfig,
) -> Result<(SkeletonGraph, Vec<ConnectionLedger>)> {
    let reference = cameras
        .get(cfg.reference_view)
        .ok_or_else(|| Error::Config(format!("reference view {} does not exist", cfg.reference_view)))?;
    let ledgers = cameras
        .par_iter()
        .enumerate()
        .map(|(i, view)| {
            let mask = if cfg.use_view_masks { masks.get(i) } else { None };
            view_ledger(laterals, i, view, mask, cfg).map_err(|e| e.in_stage("connect", format!("view {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let adjacency = retain_connections(&ledgers, cfg.min_count);
    Ok((build_main_root(laterals, &adjacency, reference)?, ledgers))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> Mask {
        Mask::from_fn(rows[0].len(), rows.len(), |x, y| rows[y].as_bytes()[x] != b'.')
    }

    fn start(x: usize, y: usize, i: usize) -> (Pixel<f64>, usize) {
        (Pixel::new(x as f64 + 0.5, y as f64 + 0.5), i)
    }

    #[test]
    fn init_states() {
        let empty = init_label_matrix(&Mask::new(4, 3), &[]).unwrap();
        assert!(empty.cells.iter().all(|c| *c == Label::Background));
        let mut one = Mask::new(4, 3);
        one.set(2, 1, true);
        let m = init_label_matrix(&one, &[start(2, 1, 7)]).unwrap();
        assert_eq!(m.get(2, 1), Label::Root(7));
        let snapped = init_label_matrix(&one, &[(Pixel::new(0.6, 1.5), 3)]).unwrap();
        assert_eq!(snapped.get(2, 1), Label::Root(3));
        assert!(matches!(
            init_label_matrix(&Mask::new(10, 10), &[start(2, 2, 5)]),
            Err(Error::StartOffMask { root: 5, .. })
        ));
    }

    #[test]
    fn single_column() {
        let m = init_label_matrix(&mask_from(&[".#.", ".#.", ".#."]), &[start(1, 0, 0)]).unwrap();
        let (out, ledger) = propagate_rows(m, PropagationOptions::default());
        assert!((0..3).all(|y| out.get(1, y) == Label::Root(0)));
        assert!(ledger.connections.is_empty());
    }

    #[test]
    fn y_shape_records_junction() {
        let mask = mask_from(&["..#..", "..#..", "..###", "..#.#", "..#.#"]);
        let m = init_label_matrix(&mask, &[start(2, 0, 0), start(2, 2, 1)]).unwrap();
        let (out, ledger) = propagate_rows(m, PropagationOptions::default());
        assert_eq!(ledger.connections, vec![Connection { m: 0, k: 1, row: 2 }]);
        assert_eq!(out.get(4, 4), Label::Root(1));
        assert_eq!(out.get(2, 1), Label::Root(0));

        let m = init_label_matrix(&mask, &[start(2, 0, 0), start(2, 2, 1)]).unwrap();
        let (lit, lit_ledger) = propagate_rows(m, PropagationOptions { casewise_update: true });
        assert_eq!(lit_ledger.connections, ledger.connections);
        assert_eq!((lit.get(2, 2), lit.get(3, 2)), (Label::Root(1), Label::Root(0)));
    }

    #[test]
    fn disjoint_columns_stay_separate() {
        let mask = mask_from(&["#..#", "#..#", "#..#"]);
        let m = init_label_matrix(&mask, &[start(0, 0, 0), start(3, 0, 1)]).unwrap();
        let (out, ledger) = propagate_rows(m, PropagationOptions::default());
        assert!(ledger.connections.is_empty());
        assert_eq!((out.get(0, 2), out.get(3, 2)), (Label::Root(0), Label::Root(1)));
    }

    #[test]
    fn mode_ties_break_low() {
        use Label::*;
        assert_eq!(run_mode(&[Root(4), Root(2), Unlabeled, Background]), Some(2));
        assert_eq!(run_mode(&[Root(4), Root(4), Root(2)]), Some(4));
        assert_eq!(run_mode(&[Unlabeled, Background]), None);
    }

    #[test]
    fn retention_counts_unordered_pairs() {
        let l = |pairs: &[(usize, usize)]| ConnectionLedger {
            view: None,
            connections: pairs.iter().map(|&(m, k)| Connection { m, k, row: 0 }).collect(),
        };
        let ledgers = [l(&[(0, 1), (2, 3)]), l(&[(0, 1)]), l(&[(1, 0)]), l(&[]), l(&[(4, 5)])];
        assert_eq!(retain_connections(&ledgers, 2), BTreeSet::from([(0, 1)]));
        assert_eq!(retain_connections(&ledgers[..2], 2), BTreeSet::from([(0, 1)]));
        assert!(retain_connections(&ledgers, 4).is_empty());
    }
}
