use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;

use serde::Serialize;

use super::{LinkId, NodeId, RoadGraph, RoadGraphError};
use crate::geom::{frenet_project, Vec2};

pub const DEFAULT_LANE_CHANGE_PENALTY: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteOptions {
    pub lane_change_penalty: f64,
}

impl Default for RouteOptions {
    fn default() -> Self {
        Self {
            lane_change_penalty: DEFAULT_LANE_CHANGE_PENALTY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Route {
    pub start: NodeId,
    pub goal: NodeId,
    pub link_ids: Vec<LinkId>,
    pub polyline: Vec<Vec2>,
    pub total_cost: f64,
}

impl Route {
    pub fn length(&self) -> f64 {
        crate::geom::polyline_length(&self.polyline)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,x,y\n");
        for (i, p) in self.polyline.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{}", p.x, p.y);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    cost: f64,
    link: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.link.cmp(&self.link))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Index of `node` within `link`, if present.
fn position_in(graph: &RoadGraph, link: &str, node: &str) -> Option<usize> {
    graph.links[link].node_ids.iter().position(|n| n == node)
}

/// Whether a route may begin on `link` when departing from `start`.
fn can_start(graph: &RoadGraph, link: &str, start: &str) -> bool {
    let n = graph.links[link].node_ids.len();
    position_in(graph, link, start).is_some_and(|i| i + 1 < n)
}

/// Whether a route that reached `link` may end there at `goal`.
fn can_finish(graph: &RoadGraph, link: &str, goal: &str, is_first: bool, start: &str) -> bool {
    match position_in(graph, link, goal) {
        None => false,
        Some(j) if is_first => position_in(graph, link, start).is_some_and(|i| i < j),
        Some(j) => j > 0,
    }
}

fn transitions<'a>(graph: &'a RoadGraph, link: &str, parallel: bool) -> Vec<(&'a str, bool)> {
    let l = &graph.links[link];
    let mut out: Vec<(&str, bool)> = l.successors.iter().map(|s| (s.as_str(), false)).collect();
    if parallel {
        out.extend(l.left_link.iter().map(|s| (s.as_str(), true)));
        out.extend(l.right_link.iter().map(|s| (s.as_str(), true)));
    }
    out
}

fn search(graph: &RoadGraph, start: &str, goal: &str, parallel: bool, penalty: f64) -> Option<(Vec<LinkId>, f64)> {
    let ids: Vec<&str> = graph.links.keys().map(String::as_str).collect();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    // State 2k is link k as the departure link, 2k + 1 is link k entered later.
    let n = 2 * ids.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut settled = vec![false; n];
    let mut heap = BinaryHeap::new();
    for (i, id) in ids.iter().enumerate() {
        if can_start(graph, id, start) {
            dist[2 * i] = graph.links[*id].length;
            heap.push(Entry { cost: dist[2 * i], link: 2 * i });
        }
    }
    let mut reached = None;
    while let Some(Entry { cost, link: state }) = heap.pop() {
        if settled[state] {
            continue;
        }
        settled[state] = true;
        let link = ids[state / 2];
        if can_finish(graph, link, goal, state % 2 == 0, start) {
            reached = Some(state);
            break;
        }
        for (next, lateral) in transitions(graph, link, parallel) {
            let j = 2 * index[next] + 1;
            if settled[j] {
                continue;
            }
            let step = graph.links[next].length + if lateral { penalty } else { 0.0 };
            let c = cost + step;
            if c < dist[j] {
                dist[j] = c;
                pred[j] = Some(state);
                heap.push(Entry { cost: c, link: j });
            }
        }
    }
    let end = reached?;
    // Walk the predecessor tree back to the departure link.
    let mut stack = vec![end];
    while let Some(p) = pred[*stack.last().unwrap()] {
        stack.push(p);
    }
    let mut links = Vec::with_capacity(stack.len());
    while let Some(i) = stack.pop() {
        links.push(ids[i / 2].to_string());
    }
    Some((links, dist[end]))
}

/// Sum of link lengths along `links` plus `penalty` per parallel hop.
pub fn route_cost(graph: &RoadGraph, links: &[LinkId], penalty: f64) -> f64 {
    let mut cost = 0.0;
    for (k, id) in links.iter().enumerate() {
        let mut step = graph.links[id].length;
        if k > 0 {
            let prev = &graph.links[&links[k - 1]];
            let lateral = !prev.successors.contains(id)
                && (prev.left_link.as_ref() == Some(id) || prev.right_link.as_ref() == Some(id));
            if lateral {
                step += penalty;
            }
        }
        cost += step;
    }
    cost
}

fn route_polyline(graph: &RoadGraph, links: &[LinkId], start: &str, goal: &str) -> Vec<Vec2> {
    let mut out: Vec<Vec2> = Vec::new();
    for (k, id) in links.iter().enumerate() {
        let link = &graph.links[id];
        let pts = graph.link_polyline(id);
        let from = if k == 0 {
            position_in(graph, id, start).unwrap()
        } else {
            let prev = &graph.links[&links[k - 1]];
            if prev.successors.contains(id) {
                0
            } else {
                // Lane change: rejoin the parallel link ahead of the last point.
                let last = *out.last().unwrap();
                let s = frenet_project(pts, &last).map(|f| f.station).unwrap_or(0.0);
                let cum = crate::geom::cumulative_lengths(pts);
                cum.iter().position(|c| *c > s + 1e-9).unwrap_or(pts.len() - 1)
            }
        };
        let to = if k + 1 == links.len() {
            position_in(graph, id, goal).unwrap()
        } else {
            link.node_ids.len() - 1
        };
        for p in &pts[from..=to.max(from)] {
            if out.last().is_none_or(|q| (q - p).norm() > 1e-9) {
                out.push(*p);
            }
        }
    }
    out
}

pub fn plan_route(graph: &RoadGraph, start: &str, goal: &str) -> Result<Route, RoadGraphError> {
    plan_route_with(graph, start, goal, &RouteOptions::default())
}

/// Same-lane search first; lane-change edges are admitted only when that fails.
pub fn plan_route_with(graph: &RoadGraph, start: &str, goal: &str, opts: &RouteOptions) -> Result<Route, RoadGraphError> {
    let start_node = graph.node(start)?;
    graph.node(goal)?;
    if start == goal {
        return Ok(Route {
            start: start.into(),
            goal: goal.into(),
            link_ids: Vec::new(),
            polyline: vec![start_node.position()],
            total_cost: 0.0,
        });
    }
    let found = search(graph, start, goal, false, opts.lane_change_penalty)
        .or_else(|| search(graph, start, goal, true, opts.lane_change_penalty));
    let (link_ids, total_cost) = found.ok_or_else(|| RoadGraphError::NoRoute {
        from: start.into(),
        to: goal.into(),
    })?;
    let polyline = route_polyline(graph, &link_ids, start, goal);
    Ok(Route {
        start: start.into(),
        goal: goal.into(),
        link_ids,
        polyline,
        total_cost,
    })
}

/// Chains legs through `waypoints` (at least two) into one route.
pub fn plan_route_via(graph: &RoadGraph, waypoints: &[NodeId]) -> Result<Route, RoadGraphError> {
    let Some(first) = waypoints.first() else {
        return Err(RoadGraphError::InvalidLattice("empty waypoint list".into()));
    };
    let mut route = plan_route(graph, first, first)?;
    for pair in waypoints.windows(2) {
        let leg = plan_route(graph, &pair[0], &pair[1])?;
        route.link_ids.extend(leg.link_ids);
        route.total_cost += leg.total_cost;
        for p in leg.polyline {
            if route.polyline.last().is_none_or(|q| (q - p).norm() > 1e-9) {
                route.polyline.push(p);
            }
        }
    }
    route.goal = waypoints.last().unwrap().clone();
    Ok(route)
}
