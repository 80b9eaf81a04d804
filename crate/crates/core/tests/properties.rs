use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uak_core::analysis::{
    kld_spatial, knn_distance, mean_nn_error, sectionize, SectionKind, SectionSpec, TrajectorySet, RESIDUAL,
};
use uak_core::behavior::{gvp_velocity, predict_agents, AgentTrack};
use uak_core::geom::fit_cubic_spline;
use uak_core::localization::{
    localization_step, localization_step_forced_failure, predict_from_odometry, reinitialize, resilience_transition,
    LocalizationMode, LocalizerConfig, LocalizerState, OdometryTrack,
};
use uak_core::motion::{generate_primitive, select_micro, BoundaryState, MicroWeights, MotionError, MotionPrimitive, Obstacle};
use uak_core::pointcloud::{voxelize, Frame, LidarPoint, MapStore, PointCloud};
use uak_core::roadgraph::{build_extended_graph, plan_route, route_cost, RoadGraph, RoadLink, RoadNode, RoadType};
use uak_core::sim::fixtures::default_loop;
use uak_core::{OrientedBox, Pose2, Transform2, Vec2};

fn transform() -> impl Strategy<Value = Transform2> {
    (-50.0..50.0f64, -50.0..50.0f64, -3.1..3.1f64).prop_map(|(x, y, t)| Transform2::new(x, y, t))
}

fn points(n: usize, seed: u64, scale: f64) -> Vec<Vec2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vec2::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale)))
        .collect()
}

fn state() -> impl Strategy<Value = BoundaryState> {
    prop::array::uniform6(-100.0..100.0f64).prop_map(|v| BoundaryState {
        x: v[0],
        dx: v[1],
        ddx: v[2],
        y: v[3],
        dy: v[4],
        ddy: v[5],
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spline_second_derivative_matches_differences(seed in 0u64..10_000, n in 3usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec2::zeros();
        let mut heading: f64 = 0.0;
        let mut pts = vec![p];
        for _ in 1..n {
            heading += rng.random_range(-0.6..0.6);
            p += Vec2::new(heading.cos(), heading.sin()) * rng.random_range(0.5..1.5);
            pts.push(p);
        }
        let segs = fit_cubic_spline(&pts).unwrap();
        let h = 1e-4;
        for w in segs.windows(2) {
            let s = w[1].s_start;
            // Central difference straddling the knot, one piece on each side.
            let fd = (w[1].eval(s + h) - w[1].eval(s) * 2.0 + w[0].eval(s - h)) / (h * h);
            prop_assert!((fd - w[1].second_derivative(s)).norm() < 1e-3, "{fd:?}");
            prop_assert!((w[0].second_derivative(s) - w[1].second_derivative(s)).norm() < 1e-6);
        }
    }

    #[test]
    fn quintic_meets_boundaries_over_wide_range(s in state(), e in state(), t0 in -10.0..10.0f64, d in 0.5..10.0f64) {
        let prim = generate_primitive(&s, &e, t0, t0 + d).unwrap();
        for (want, got) in [(s, prim.state_at(t0)), (e, prim.state_at(t0 + d))] {
            let a = [want.x, want.dx, want.ddx, want.y, want.dy, want.ddy];
            let b = [got.x, got.dx, got.ddx, got.y, got.dy, got.ddy];
            for (u, v) in a.iter().zip(b) {
                prop_assert!((u - v).abs() < 1e-9 * (1.0 + u.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn gvp_weights_are_convex(vt in 0.0..20.0f64, ve in 0.0..20.0f64, a in 0.01..20.0f64, b in 0.01..20.0f64, tau in 0.0..=1.0f64) {
        let v = gvp_velocity(vt, ve, a, b, b, a, tau).unwrap();
        prop_assert!(v >= vt.min(ve) - 1e-12 && v <= vt.max(ve) + 1e-12);
        let equal = gvp_velocity(vt, ve, a, a, a, a, tau).unwrap();
        prop_assert!((equal - 0.5 * (vt + ve)).abs() < 1e-12);
    }

    #[test]
    fn predictions_keep_speed(x in 0.0..300.0f64, lateral in -5.0..5.0f64, speed in 0.0..15.0f64, backwards in any::<bool>()) {
        let course = default_loop();
        let route = plan_route(&course.graph, &course.start, &course.far).unwrap();
        let lattice = build_extended_graph(&course.graph, &route, 5.0, &[-3.5, 0.0, 3.5]).unwrap();
        let heading = if backwards { std::f64::consts::PI } else { 0.0 };
        let pose = Pose2::new(20.0 + x.min(150.0), lateral, heading);
        let track = AgentTrack::new(1, &pose, speed, (2.25, 0.9));
        let out = predict_agents(&[track], &lattice, 3.0, 0.1);
        prop_assert_eq!(out[0].predicted.len(), 30);
        for (_, v) in &out[0].predicted {
            prop_assert!((v.norm() - speed).abs() < 1e-9);
        }
    }

    #[test]
    fn box_overlap_is_symmetric(
        a in (-5.0..5.0f64, -5.0..5.0f64, -3.2..3.2f64, 0.2..3.0f64, 0.2..2.0f64),
        b in (-5.0..5.0f64, -5.0..5.0f64, -3.2..3.2f64, 0.2..3.0f64, 0.2..2.0f64),
    ) {
        let ba = OrientedBox::new(Vec2::new(a.0, a.1), a.2, a.3, a.4);
        let bb = OrientedBox::new(Vec2::new(b.0, b.1), b.2, b.3, b.4);
        prop_assert_eq!(ba.overlaps(&bb), bb.overlaps(&ba));
        prop_assert!(ba.overlaps(&ba));
    }

    #[test]
    fn knn_matches_brute_force(seed in 0u64..10_000, n in 2usize..200, k in 1usize..6) {
        let pts = points(n, seed, 20.0);
        let q = points(1, seed + 1, 25.0)[0];
        let mut d: Vec<f64> = pts.iter().map(|p| (p - q).norm()).collect();
        d.sort_by(f64::total_cmp);
        match knn_distance(&pts, &q, k, false) {
            Ok(v) => prop_assert_eq!(v, d[k - 1]),
            Err(_) => prop_assert!(k > n),
        }
        // A member of the set skips itself once.
        let mut own: Vec<f64> = pts.iter().map(|p| (p - pts[0]).norm()).collect();
        own.sort_by(f64::total_cmp);
        if k < n {
            prop_assert_eq!(knn_distance(&pts, &pts[0], k, true).unwrap(), own[k]);
        }
    }

    #[test]
    fn mean_error_is_rigid_invariant(seed in 0u64..10_000, g in transform()) {
        let (xs, ys) = (points(60, seed, 30.0), points(80, seed + 7, 30.0));
        let x = TrajectorySet::from_positions("x", &xs);
        let y = TrajectorySet::from_positions("y", &ys);
        let moved = |t: &str, p: &[Vec2]| TrajectorySet::from_positions(t, &p.iter().map(|q| g.apply(q)).collect::<Vec<_>>());
        let base = mean_nn_error(&x, &y).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((mean_nn_error(&moved("x", &xs), &moved("y", &ys)).unwrap() - base).abs() < 1e-9);
        let kld = kld_spatial(&x, &y, 1).unwrap();
        prop_assert!((kld_spatial(&moved("x", &xs), &moved("y", &ys), 1).unwrap() - kld).abs() < 1e-9);
    }

    #[test]
    fn mean_error_is_zero_only_on_subsets(seed in 0u64..10_000, take in 1usize..40) {
        let ys = points(40, seed, 10.0);
        let x = TrajectorySet::from_positions("x", &ys[..take]);
        let y = TrajectorySet::from_positions("y", &ys);
        prop_assert_eq!(mean_nn_error(&x, &y).unwrap(), 0.0);
        let mut off = ys[..take].to_vec();
        off[0] += Vec2::new(0.0, 1e-3);
        let x = TrajectorySet::from_positions("x", &off);
        let y = TrajectorySet::from_positions("y", &ys[1..]);
        prop_assert!(mean_nn_error(&x, &y).unwrap() > 0.0);
    }

    #[test]
    fn sectionize_matches_ray_casting(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sections: Vec<SectionSpec> = (0..3)
            .map(|i| {
                let (cx, cy) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
                // Star-shaped polygon, so never self-intersecting.
                let polygon = (0..7)
                    .map(|k| {
                        let a = std::f64::consts::TAU * k as f64 / 7.0;
                        let r = rng.random_range(2.0..8.0);
                        [cx + r * a.cos(), cy + r * a.sin()]
                    })
                    .collect();
                SectionSpec { name: format!("s{i}"), kind: SectionKind::Curve, polygon }
            })
            .collect();
        let pts = points(300, seed + 3, 20.0);
        let buckets = sectionize(&TrajectorySet::from_positions("t", &pts), &sections);
        let mut expected: BTreeMap<String, usize> = BTreeMap::new();
        for p in &pts {
            let inside = |poly: &[[f64; 2]]| {
                let mut c = false;
                let mut j = poly.len() - 1;
                for i in 0..poly.len() {
                    let (a, b) = (poly[i], poly[j]);
                    if (a[1] > p.y) != (b[1] > p.y) && p.x < (b[0] - a[0]) * (p.y - a[1]) / (b[1] - a[1]) + a[0] {
                        c = !c;
                    }
                    j = i;
                }
                c
            };
            let name = sections.iter().find(|s| inside(&s.polygon)).map_or(RESIDUAL.to_string(), |s| s.name.clone());
            *expected.entry(name).or_default() += 1;
        }
        for (name, set) in &buckets {
            prop_assert_eq!(set.len(), expected.get(name).copied().unwrap_or(0), "{}", name);
        }
    }

    #[test]
    fn select_micro_is_complete(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = BoundaryState::moving(Vec2::zeros(), Vec2::new(6.0, 0.0));
        let prims: Vec<MotionPrimitive> = (-2..=2)
            .map(|k| {
                let end = BoundaryState::moving(Vec2::new(20.0, 1.6 * k as f64), Vec2::new(6.0, 0.0));
                generate_primitive(&start, &end, 0.0, 3.0).unwrap()
            })
            .collect();
        let obstacles: Vec<Obstacle> = (0..rng.random_range(0..6))
            .map(|_| Obstacle::new(rng.random_range(4.0..22.0), rng.random_range(-4.0..4.0), rng.random_range(0.3..1.5)))
            .collect();
        let w = MicroWeights::default();
        let clear = |p: &MotionPrimitive| p.samples.iter().all(|q| obstacles.iter().all(|o| o.clearance(q) >= w.clearance.c_min()));
        let any_free = prims.iter().any(clear);
        match select_micro(&prims, &obstacles, None, &w) {
            Ok(sel) => {
                prop_assert!(any_free);
                prop_assert!(clear(&sel.primitive));
            }
            Err(e) => {
                prop_assert_eq!(e, MotionError::AllPrimitivesBlocked);
                prop_assert!(!any_free);
            }
        }
    }

    #[test]
    fn route_cost_recomputes(seed in 0u64..10_000) {
        let g = random_graph(seed);
        let ids: Vec<&String> = g.nodes.keys().collect();
        for s in &ids {
            for t in &ids {
                if s == t {
                    continue;
                }
                if let Ok(r) = plan_route(&g, s, t) {
                    prop_assert_eq!(r.total_cost, route_cost(&g, &r.link_ids, 5.0));
                    let first = &g.links[&r.link_ids[0]];
                    prop_assert!(first.node_ids.contains(*s));
                    prop_assert!(g.links[r.link_ids.last().unwrap()].node_ids.contains(*t));
                }
            }
        }
    }
}

fn random_graph(seed: u64) -> RoadGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..7);
    let nodes: Vec<RoadNode> = (0..n)
        .map(|i| RoadNode {
            id: format!("n{i}"),
            x: rng.random_range(0.0..30.0),
            y: rng.random_range(0.0..30.0),
            signal: None,
        })
        .collect();
    let m = rng.random_range(2..10);
    let mut links: Vec<RoadLink> = (0..m)
        .map(|k| {
            let a = rng.random_range(0..n);
            let b = (a + rng.random_range(1..n)) % n;
            RoadLink {
                id: format!("e{k}"),
                node_ids: vec![nodes[a].id.clone(), nodes[b].id.clone()],
                left_link: None,
                right_link: None,
                road_type: RoadType::Straight,
                successors: Vec::new(),
                length: (nodes[a].position() - nodes[b].position()).norm(),
            }
        })
        .collect();
    for i in 0..m {
        for j in 0..m {
            if i != j && links[i].node_ids[1] == links[j].node_ids[0] {
                let id = links[j].id.clone();
                links[i].successors.push(id);
            }
        }
        if rng.random_bool(0.3) {
            links[i].left_link = Some(format!("e{}", rng.random_range(0..m)));
        }
    }
    RoadGraph::new(nodes, links, Vec::new()).unwrap()
}

#[test]
fn lattice_edges_never_skip_a_station() {
    let course = default_loop();
    let route = plan_route(&course.graph, &course.start, &course.far).unwrap();
    let lattice = build_extended_graph(&course.graph, &route, 5.0, &[-3.5, -1.75, 0.0, 1.75, 3.5]).unwrap();
    assert_eq!(lattice.edges.len(), lattice.layers.len() - 1);
    for (i, layer) in lattice.layers.iter().enumerate() {
        for k in 0..layer.len() {
            if i > 0 {
                assert!(lattice.edges[i - 1].iter().any(|&(_, b)| b == k), "layer {i} vertex {k} has no predecessor");
            }
            if i + 1 < lattice.layers.len() {
                assert!(lattice.edges[i].iter().any(|&(a, _)| a == k), "layer {i} vertex {k} has no successor");
            }
        }
    }
    for e in lattice.edges.iter().flatten() {
        assert!(e.0.abs_diff(e.1) <= 1);
    }
}

fn corridor() -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut pts = Vec::new();
    for _ in 0..6000 {
        let x = rng.random_range(-40.0..40.0);
        let side: f64 = if rng.random_bool(0.5) { 8.0 } else { -8.0 };
        let bump = if (x as i64).rem_euclid(10) < 3 { 1.5 } else { 0.0 };
        pts.push(LidarPoint::new(x, side + bump * side.signum(), rng.random_range(0.0..3.0), 0.4));
    }
    for _ in 0..3000 {
        let y = rng.random_range(-8.0..8.0);
        pts.push(LidarPoint::new(if rng.random_bool(0.5) { 40.0 } else { -40.0 }, y, rng.random_range(0.0..3.0), 0.4));
    }
    PointCloud::new(pts, Frame::Map)
}

#[test]
fn forced_failures_chain_odometry_exactly() {
    let cfg = LocalizerConfig::default();
    let store = MapStore::new(voxelize(&corridor(), cfg.voxel_size).unwrap(), Pose2::default());
    let mut odom = OdometryTrack::default();
    for k in 0..=20 {
        let t = 0.1 * k as f64;
        odom.push(t, Pose2::new(0.8 * t, 0.05 * t * t, 0.02 * t)).unwrap();
    }
    let start = LocalizerState::new(0.0, Pose2::new(0.3, -0.2, 0.01));
    let mut state = start;
    let mut chained = Transform2::from_pose(&start.pose);
    for k in 1..=20 {
        let t = 0.1 * k as f64;
        let inc = predict_from_odometry(&odom, state.stamp, t - state.stamp).unwrap();
        chained = chained.compose(&inc);
        let (next, out) = localization_step_forced_failure(t, &odom, &state, &store, &cfg);
        assert!(out.failed);
        assert_eq!(next.pose, chained.to_pose());
        assert_eq!(next.consecutive_failures, k);
        state = next;
    }
}

#[test]
fn steps_never_publish_non_finite_poses() {
    let cfg = LocalizerConfig::default();
    let cloud = corridor();
    let store = MapStore::new(voxelize(&cloud, cfg.voxel_size).unwrap(), Pose2::default());
    let mut odom = OdometryTrack::default();
    odom.push(0.0, Pose2::default()).unwrap();
    odom.push(0.1, Pose2::new(0.8, 0.0, 0.0)).unwrap();
    let scans = [
        cloud.transformed(&Transform2::new(-0.8, 0.0, 0.0), Frame::Body),
        PointCloud::new(Vec::new(), Frame::Body),
        PointCloud::new(vec![LidarPoint::new(1e6, 1e6, 0.0, 0.0)], Frame::Body),
    ];
    for (i, scan) in scans.iter().enumerate() {
        for guess in [Pose2::default(), Pose2::new(500.0, -500.0, 3.0)] {
            let (next, out) = localization_step(scan, 0.1, &odom, &LocalizerState::new(0.0, guess), &store, &cfg, 8.0);
            assert!(next.pose.is_finite(), "scan {i}");
            if i > 0 {
                assert!(out.failed, "scan {i} should fail");
            }
        }
    }
}

#[test]
fn stop_is_absorbing_until_reinitialized() {
    let mut s = LocalizerState::new(0.0, Pose2::default());
    s.mode = LocalizationMode::Stop;
    for healthy in [false, true] {
        for scan_ok in [false, true] {
            for lane in [false, true] {
                assert_eq!(resilience_transition(&s, healthy, scan_ok, lane), LocalizationMode::Stop);
            }
        }
    }
    let r = reinitialize(&s, Pose2::new(1.0, 2.0, 0.5));
    assert_eq!(r.mode, LocalizationMode::Navigation);
    assert_eq!(resilience_transition(&r, true, true, true), LocalizationMode::Navigation);
}
