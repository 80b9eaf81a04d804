//! Built-in two-lane courses. The right lane is the driving lane; the left
//! lane runs parallel one lane width to its left in the same direction.

use std::f64::consts::FRAC_PI_2;

use crate::geom::{cumulative_lengths, Vec2};
use crate::roadgraph::{LanePolyline, NodeId, RoadGraph, RoadLink, RoadNode, RoadType};

pub const LANE_WIDTH: f64 = 3.5;

struct Segment {
    points: Vec<Vec2>,
    /// Unit left normal at each point.
    normals: Vec<Vec2>,
    road_type: RoadType,
}

fn straight(a: Vec2, b: Vec2, spacing: f64) -> Segment {
    let n = ((b - a).norm() / spacing).ceil().max(1.0) as usize;
    let t = (b - a).normalize();
    Segment {
        points: (0..=n).map(|i| a + (b - a) * (i as f64 / n as f64)).collect(),
        normals: vec![Vec2::new(-t.y, t.x); n + 1],
        road_type: RoadType::Straight,
    }
}

fn arc(center: Vec2, radius: f64, from: f64, sweep: f64, count: usize) -> Segment {
    let radial = |i: usize| {
        let a = from + sweep * i as f64 / count as f64;
        Vec2::new(a.cos(), a.sin())
    };
    let inward = -sweep.signum();
    Segment {
        points: (0..=count).map(|i| center + radial(i) * radius).collect(),
        normals: (0..=count).map(|i| radial(i) * inward).collect(),
        road_type: RoadType::Curve,
    }
}

/// Two parallel lanes built from right-lane segments. Node ids are `r{i}` /
/// `l{i}` by index along the lane, links `R{k}` / `L{k}` by segment.
fn two_lane_graph(segments: &[Segment], closed: bool, signals: &[(usize, &str)]) -> RoadGraph {
    let mut right: Vec<Vec2> = Vec::new();
    let mut normals: Vec<Vec2> = Vec::new();
    let mut bounds = Vec::new();
    for seg in segments {
        let start = right.len().saturating_sub(1);
        let skip = usize::from(!right.is_empty());
        right.extend_from_slice(&seg.points[skip..]);
        normals.extend_from_slice(&seg.normals[skip..]);
        bounds.push((start, right.len() - 1));
    }
    let left: Vec<Vec2> = right.iter().zip(&normals).map(|(p, n)| p + n * LANE_WIDTH).collect();
    let count = if closed { right.len() - 1 } else { right.len() };
    let id = |prefix: char, i: usize| -> NodeId { format!("{prefix}{}", if closed { i % count } else { i }) };
    let mut nodes = Vec::new();
    for i in 0..count {
        let signal = signals.iter().find(|(k, _)| *k == i).map(|(_, s)| s.to_string());
        for (prefix, pts) in [('r', &right), ('l', &left)] {
            nodes.push(RoadNode {
                id: id(prefix, i),
                x: pts[i].x,
                y: pts[i].y,
                signal: signal.clone(),
            });
        }
    }
    let mut links = Vec::new();
    let k_last = segments.len() - 1;
    for (k, (seg, &(a, b))) in segments.iter().zip(&bounds).enumerate() {
        let next = if k < k_last {
            Some(k + 1)
        } else if closed {
            Some(0)
        } else {
            None
        };
        for (prefix, upper, pts) in [('r', 'R', &right), ('l', 'L', &left)] {
            let (left_link, right_link) = if upper == 'R' {
                (Some(format!("L{k}")), None)
            } else {
                (None, Some(format!("R{k}")))
            };
            links.push(RoadLink {
                id: format!("{upper}{k}"),
                node_ids: (a..=b).map(|i| id(prefix, i)).collect(),
                left_link,
                right_link,
                road_type: seg.road_type,
                successors: next.map(|n| format!("{upper}{n}")).into_iter().collect(),
                length: *cumulative_lengths(&pts[a..=b]).last().unwrap(),
            });
        }
    }
    let edge = |off: f64| -> Vec<[f64; 2]> {
        right
            .iter()
            .zip(&normals)
            .map(|(p, n)| {
                let q = p + n * off;
                [q.x, q.y]
            })
            .collect()
    };
    let lanes = vec![
        LanePolyline {
            id: "outer_edge".into(),
            kind: "boundary".into(),
            points: edge(-0.5 * LANE_WIDTH),
        },
        LanePolyline {
            id: "divider".into(),
            kind: "dashed".into(),
            points: edge(0.5 * LANE_WIDTH),
        },
        LanePolyline {
            id: "inner_edge".into(),
            kind: "boundary".into(),
            points: edge(1.5 * LANE_WIDTH),
        },
    ];
    RoadGraph::new(nodes, links, lanes).expect("fixture graph is valid")
}

/// Straight eastbound two-lane road starting at the origin, split into
/// 100 m links with nodes every 10 m.
pub fn two_lane_straight(length: f64) -> RoadGraph {
    let n = (length / 100.0).ceil().max(1.0) as usize;
    let segments: Vec<Segment> = (0..n)
        .map(|k| {
            let a = k as f64 * length / n as f64;
            let b = (k + 1) as f64 * length / n as f64;
            straight(Vec2::new(a, 0.0), Vec2::new(b, 0.0), 10.0)
        })
        .collect();
    two_lane_graph(&segments, false, &[])
}

#[derive(Debug, Clone)]
pub struct LoopCourse {
    pub graph: RoadGraph,
    /// Right-lane node where a lap starts and ends.
    pub start: NodeId,
    /// Right-lane node halfway round.
    pub far: NodeId,
    /// Right-lane stop line node.
    pub stop_line: NodeId,
    pub intersection: String,
    pub lap_length: f64,
}

impl LoopCourse {
    /// Waypoints for `laps` counter-clockwise laps from the start node.
    pub fn lap_waypoints(&self, laps: usize) -> Vec<NodeId> {
        let mut w = vec![self.start.clone()];
        for _ in 0..laps {
            w.push(self.far.clone());
            w.push(self.start.clone());
        }
        w
    }
}

/// Counter-clockwise rounded-rectangle loop whose right (outer) lane spans
/// `width` x `height` with corner radius `radius`. A signalized stop line
/// sits halfway along the bottom straight.
pub fn loop_course(width: f64, height: f64, radius: f64) -> LoopCourse {
    let (w, h, r) = (width, height, radius);
    let corner = 16;
    let segments = vec![
        straight(Vec2::new(r, 0.0), Vec2::new(w / 2.0, 0.0), 10.0),
        straight(Vec2::new(w / 2.0, 0.0), Vec2::new(w - r, 0.0), 10.0),
        arc(Vec2::new(w - r, r), r, -FRAC_PI_2, FRAC_PI_2, corner),
        straight(Vec2::new(w, r), Vec2::new(w, h - r), 10.0),
        arc(Vec2::new(w - r, h - r), r, 0.0, FRAC_PI_2, corner),
        straight(Vec2::new(w - r, h), Vec2::new(w / 2.0, h), 10.0),
        straight(Vec2::new(w / 2.0, h), Vec2::new(r, h), 10.0),
        arc(Vec2::new(r, h - r), r, FRAC_PI_2, FRAC_PI_2, corner),
        straight(Vec2::new(0.0, h - r), Vec2::new(0.0, r), 10.0),
        arc(Vec2::new(r, r), r, 2.0 * FRAC_PI_2, FRAC_PI_2, corner),
    ];
    let mut index = 0;
    let mut starts = Vec::new();
    for s in &segments {
        starts.push(index);
        index += s.points.len() - 1;
    }
    let stop_index = starts[1];
    let far_index = starts[6];
    let graph = two_lane_graph(&segments, true, &[(stop_index, "x1")]);
    let lap_length = segments
        .iter()
        .map(|s| *cumulative_lengths(&s.points).last().unwrap())
        .sum();
    LoopCourse {
        graph,
        start: "r0".into(),
        far: format!("r{far_index}"),
        stop_line: format!("r{stop_index}"),
        intersection: "x1".into(),
        lap_length,
    }
}

/// The 200 m x 80 m loop with 20 m corners used by the demo scenarios.
pub fn default_loop() -> LoopCourse {
    loop_course(200.0, 80.0, 20.0)
}

/// Resolves `builtin:<name>` map references.
pub fn builtin_graph(name: &str) -> Option<RoadGraph> {
    match name {
        "two_lane_straight" => Some(two_lane_straight(400.0)),
        "loop" => Some(default_loop().graph),
        _ => None,
    }
}
