mod common;

use std::collections::BTreeSet;

use nalgebra::{Point3, Vector3};
use proptest::prelude::*;

use rootskel::camera::{CameraView, Intrinsics, Pixel, Pose};
use rootskel::fusion::LateralRoot3D;
use rootskel::main_root::{
    build_main_root, connect_laterals, init_label_matrix, propagate_rows, retain_connections, ConnectConfig, Connection,
    ConnectionLedger, Label, LabelMatrix, PropagationOptions,
};
use rootskel::raster::Mask;
use rootskel::synthetic::{NoiseSpec, RenderSpec, RootSystemSpec, Scene};

const N: usize = 32;

fn center(x: usize, y: usize) -> Pixel<f64> {
    Pixel::new(x as f64 + 0.5, y as f64 + 0.5)
}

fn lateral(id: usize, start: Point3<f64>) -> LateralRoot3D {
    LateralRoot3D {
        id,
        start,
        end: start + Vector3::new(0.1, 0.05, 0.0),
        reproj_error_total: 0.0,
        views: vec![],
        detections: vec![],
        fused_from: vec![],
    }
}

/// Dense mask plus a handful of starts placed on foreground cells.
fn scene32() -> impl Strategy<Value = (Mask, Vec<(Pixel<f64>, usize)>)> {
    (prop::collection::vec(0u8..100, N * N), 1u8..80, prop::collection::vec((0..N, 0..N), 0..10)).prop_map(
        |(bits, density, picks)| {
            let mask = Mask::from_fn(N, N, |x, y| bits[y * N + x] < density);
            let mut used = BTreeSet::new();
            let mut starts = Vec::new();
            for (i, (x, y)) in picks.into_iter().enumerate() {
                if mask.get(x, y) && used.insert((x, y)) {
                    starts.push((center(x, y), i));
                }
            }
            (mask, starts)
        },
    )
}

fn rows(m: &LabelMatrix) -> Vec<Vec<Label>> {
    (0..m.height()).map(|y| m.row(y).to_vec()).collect()
}

#[test]
fn y_shape_hand_trace() {
    // . . 0 . .
    // . . # . .
    // . . 1 # #
    // . # . . #
    // # . . . #
    let pattern = ["..#..", "..#..", "..###", ".#..#", "#...#"];
    let mask = Mask::from_fn(5, 5, |x, y| pattern[y].as_bytes()[x] == b'#');
    let m = init_label_matrix(&mask, &[(center(2, 0), 0), (center(2, 2), 1)]).unwrap();
    let (out, ledger) = propagate_rows(m, PropagationOptions::default());
    use Label::{Background as B, Root as R, Unlabeled as U};
    let expect = vec![
        vec![B, B, R(0), B, B],
        vec![B, B, R(0), B, B],
        vec![B, B, R(1), R(1), R(1)],
        vec![B, U, B, B, R(1)],
        vec![U, B, B, B, R(1)],
    ];
    assert_eq!(rows(&out), expect);
    assert_eq!(ledger.connections, vec![Connection { m: 0, k: 1, row: 2 }]);
}

#[test]
fn trivial_examples() {
    let empty = init_label_matrix(&Mask::new(3, 2), &[]).unwrap();
    assert!(rows(&empty).iter().flatten().all(|c| *c == Label::Background));

    let column = Mask::from_fn(3, 3, |x, _| x == 1);
    let (out, ledger) = propagate_rows(init_label_matrix(&column, &[(center(1, 0), 0)]).unwrap(), PropagationOptions::default());
    assert!((0..3).all(|y| out.get(1, y) == Label::Root(0)));
    assert!(ledger.connections.is_empty());

    let two = Mask::from_fn(4, 3, |x, _| x == 0 || x == 3);
    let m = init_label_matrix(&two, &[(center(0, 0), 0), (center(3, 0), 1)]).unwrap();
    let (out, ledger) = propagate_rows(m, PropagationOptions::default());
    assert!(ledger.connections.is_empty());
    assert!((0..3).all(|y| out.get(0, y) == Label::Root(0) && out.get(3, y) == Label::Root(1)));
}

#[test]
fn retention_examples() {
    let l = |pairs: &[(usize, usize)]| ConnectionLedger {
        view: None,
        connections: pairs.iter().map(|&(m, k)| Connection { m, k, row: 1 }).collect(),
    };
    let ledgers = [l(&[(0, 1)]), l(&[(0, 1), (2, 3)]), l(&[]), l(&[(0, 1)]), l(&[])];
    let kept = retain_connections(&ledgers, 2);
    assert!(kept.contains(&(0, 1)));
    assert!(!kept.contains(&(2, 3)));
}

fn reference_camera() -> CameraView<f64> {
    let pose = Pose::look_at(Point3::new(0.0, 0.0, -5.0), Point3::origin(), Vector3::y()).unwrap();
    CameraView::new(Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap(), pose, 640, 480).unwrap()
}

#[test]
fn main_root_orders_top_down() {
    let cam = reference_camera();
    // Image v grows with world y for this camera.
    let laterals = vec![
        lateral(0, Point3::new(0.0, 0.3, 0.0)),
        lateral(1, Point3::new(0.0, -0.2, 0.1)),
        lateral(2, Point3::new(0.0, 0.05, -0.1)),
        lateral(3, Point3::new(0.5, 0.5, 0.0)),
    ];
    let adjacency = BTreeSet::from([(0, 1), (1, 2)]);
    let g = build_main_root(&laterals, &adjacency, &cam).unwrap();
    assert_eq!(g.main_root.len(), 1);
    assert_eq!(g.main_root[0].roots, vec![1, 2, 0]);
    assert_eq!(g.main_root[0].points, vec![laterals[1].start, laterals[2].start, laterals[0].start]);
    assert_eq!(g.main_root_edges().len(), 2);

    let bare = build_main_root(&laterals, &BTreeSet::new(), &cam).unwrap();
    assert!(bare.main_root.is_empty());
    assert_eq!(bare.laterals, laterals);
}

fn truth_laterals(scene: &Scene) -> Vec<LateralRoot3D> {
    scene
        .truth
        .system
        .laterals
        .iter()
        .enumerate()
        .map(|(i, l)| LateralRoot3D { end: l.end, ..lateral(i, l.start) })
        .collect()
}

#[test]
fn noiseless_scene_recovers_generator_adjacency() {
    for seed in [1, 4] {
        let root = RootSystemSpec { seed, lateral_count: [8, 12], ..RootSystemSpec::default() };
        let scene = Scene::synthesize(&root, &RenderSpec::default(), &NoiseSpec::default()).unwrap();
        let laterals = truth_laterals(&scene);
        let (graph, ledgers) = connect_laterals(&laterals, &scene.truth.cameras, &scene.masks, &ConnectConfig::default()).unwrap();
        assert_eq!(ledgers.len(), scene.cameras.len());
        assert_eq!(graph.adjacency, scene.truth.system.adjacency, "seed {seed}");

        // One chain through every junction, top-down.
        assert_eq!(graph.main_root.len(), 1);
        let chain = &graph.main_root[0];
        assert_eq!(chain.roots, (0..laterals.len()).collect::<Vec<_>>());
        for (p, l) in chain.points.iter().zip(&scene.truth.system.laterals) {
            let j = scene.truth.system.main_root[l.junction];
            assert!((p - Point3::new(j[0], j[1], j[2])).norm() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn init_matches_definition((mask, starts) in scene32()) {
        let m = init_label_matrix(&mask, &starts).unwrap();
        for y in 0..N {
            for x in 0..N {
                let start = starts.iter().find(|(p, _)| p.u as usize == x && p.v as usize == y).map(|s| s.1);
                let expect = match (mask.get(x, y), start) {
                    (false, _) => Label::Background,
                    (true, Some(i)) => Label::Root(i),
                    (true, None) => Label::Unlabeled,
                };
                prop_assert_eq!(m.get(x, y), expect);
            }
        }
    }

    #[test]
    fn propagation_matches_reference((mask, starts) in scene32(), literal in any::<bool>()) {
        let init = init_label_matrix(&mask, &starts).unwrap();
        let (out, ledger) = propagate_rows(init.clone(), PropagationOptions { casewise_update: literal });
        let (grid, pairs) = common::labels::reference_propagation(&init, literal);
        prop_assert_eq!(rows(&out), grid);
        let got: Vec<_> = ledger.connections.iter().map(|c| (c.m, c.k, c.row)).collect();
        prop_assert_eq!(got, pairs);
    }

    #[test]
    fn ledger_and_reachability_invariants((mask, starts) in scene32()) {
        let init = init_label_matrix(&mask, &starts).unwrap();
        let (out, ledger) = propagate_rows(init.clone(), PropagationOptions::default());
        for c in &ledger.connections {
            prop_assert_ne!(c.m, c.k);
            prop_assert!(init.row(c.row).contains(&Label::Root(c.k)));
        }
        // An unlabeled cell never sits under a labeled cell of the row above
        // within its own run.
        for y in 1..N {
            for x in 0..N {
                if out.get(x, y) != Label::Unlabeled {
                    continue;
                }
                let (mut a, mut b) = (x, x);
                while a > 0 && out.get(a - 1, y) != Label::Background { a -= 1; }
                while b + 1 < N && out.get(b + 1, y) != Label::Background { b += 1; }
                prop_assert!((a..=b).all(|i| !matches!(out.get(i, y - 1), Label::Root(_))));
            }
        }
    }

    #[test]
    fn retention_is_monotone(
        views in prop::collection::vec(prop::collection::vec((0usize..6, 0usize..6), 0..8), 1..6),
        lo in 1usize..5,
        extra in 0usize..4,
    ) {
        let ledgers: Vec<ConnectionLedger> = views
            .iter()
            .map(|v| ConnectionLedger {
                view: None,
                connections: v.iter().filter(|(m, k)| m != k).map(|&(m, k)| Connection { m, k, row: 0 }).collect(),
            })
            .collect();
        let loose = retain_connections(&ledgers, lo);
        let strict = retain_connections(&ledgers, lo + extra);
        prop_assert!(strict.is_subset(&loose));
    }

    #[test]
    fn main_root_ignores_input_order(
        ys in prop::collection::vec(-0.5..0.5f64, 2..10),
        edges in prop::collection::vec((0usize..10, 0usize..10), 0..12),
        rot in 0usize..10,
    ) {
        let cam = reference_camera();
        let laterals: Vec<_> = ys.iter().enumerate().map(|(i, &y)| lateral(i, Point3::new(0.02 * i as f64, y, 0.0))).collect();
        let n = laterals.len();
        let adjacency: BTreeSet<(usize, usize)> = edges
            .into_iter()
            .map(|(a, b)| (a % n, b % n))
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        let mut shuffled = laterals.clone();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        let a = build_main_root(&laterals, &adjacency, &cam).unwrap();
        let b = build_main_root(&shuffled, &adjacency, &cam).unwrap();
        prop_assert_eq!(a.main_root, b.main_root);
        prop_assert_eq!(a.adjacency, b.adjacency);
    }
}
