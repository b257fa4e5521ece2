//! Skeleton export: ASCII PLY graphs and SVG overlays.

use std::fmt::Write as _;

use nalgebra::Point3;

use crate::camera::{project, CameraView};
use crate::main_root::SkeletonGraph;
use crate::synthetic::RootSystem;

pub const LATERAL_RGB: [u8; 3] = [255, 0, 0];
pub const MAIN_ROOT_RGB: [u8; 3] = [0, 255, 0];

/// Vertices are lateral starts and ends (`2i`, `2i + 1` for the `i`-th
/// lateral in list order); lateral edges are red and main-root edges green.
pub fn skeleton_ply(graph: &SkeletonGraph) -> String {
    let position: std::collections::BTreeMap<usize, usize> =
        graph.laterals.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
    let mut edges: Vec<(usize, usize, [u8; 3])> = (0..graph.laterals.len()).map(|i| (2 * i, 2 * i + 1, LATERAL_RGB)).collect();
    for chain in &graph.main_root {
        for w in chain.roots.windows(2) {
            edges.push((2 * position[&w[0]], 2 * position[&w[1]], MAIN_ROOT_RGB));
        }
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", 2 * graph.laterals.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(s, "element edge {}", edges.len());
    s.push_str("property int vertex1\nproperty int vertex2\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n");
    s.push_str("end_header\n");
    for l in &graph.laterals {
        for p in [l.start, l.end] {
            let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
        }
    }
    for (a, b, [r, g, bl]) in edges {
        let _ = writeln!(s, "{a} {b} {r} {g} {bl}");
    }
    s
}

/// Reprojection of a skeleton into one view as SVG; the ground truth, when
/// given, is drawn underneath in grey.
pub fn overlay_svg(graph: &SkeletonGraph, view: &CameraView<f64>, truth: Option<&RootSystem>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = view.width,
        h = view.height
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"black\"/>\n");
    fn line(s: &mut String, view: &CameraView<f64>, a: &Point3<f64>, b: &Point3<f64>, color: &str, width: f64) {
        if let (Ok(p), Ok(q)) = (project(view, a), project(view, b)) {
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="{width}"/>"#,
                p.u, p.v, q.u, q.v
            );
        }
    }
    if let Some(t) = truth {
        let main = t.main_root_points();
        for w in main.windows(2) {
            line(&mut s, view, &w[0], &w[1], "#808080", 3.0);
        }
        for l in &t.laterals {
            line(&mut s, view, &l.start, &l.end, "#808080", 3.0);
        }
    }
    for l in &graph.laterals {
        line(&mut s, view, &l.start, &l.end, "red", 1.5);
    }
    for (a, b) in graph.main_root_edges() {
        line(&mut s, view, &a, &b, "lime", 1.5);
    }
    for l in &graph.laterals {
        if let Ok(p) = project(view, &l.start) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="yellow"/>"#, p.u, p.v);
        }
    }
    s.push_str("</svg>\n");
    s
}
