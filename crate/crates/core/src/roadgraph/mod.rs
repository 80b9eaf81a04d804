//! Semantic road graph: nodes, lane links with parallel-lane references,
//! route search and the Frenet state lattice built along a route.

mod lattice;
mod route;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{cumulative_lengths, project_on_segment, Pose2, Vec2};

pub use lattice::{build_extended_graph, curvature_profile, ExtendedRoadGraph, LatticeVertex};
pub use route::{
    plan_route, plan_route_via, plan_route_with, route_cost, Route, RouteOptions, DEFAULT_LANE_CHANGE_PENALTY,
};

pub type NodeId = String;
pub type LinkId = String;

#[derive(Debug, Error)]
pub enum RoadGraphError {
    #[error("cannot parse road graph: {0}")]
    Parse(String),
    #[error("{owner} references missing id `{missing}`")]
    DanglingReference { owner: String, missing: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("link `{link}` stores length {stored} but its nodes span {geometric}")]
    LengthMismatch { link: LinkId, stored: f64, geometric: f64 },
    #[error("link `{0}` needs at least two nodes")]
    ShortLink(LinkId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("no route from `{from}` to `{to}`")]
    NoRoute { from: NodeId, to: NodeId },
    #[error("route length {length} m is shorter than two station steps ({step} m)")]
    RouteTooShort { length: f64, step: f64 },
    #[error("invalid lattice configuration: {0}")]
    InvalidLattice(String),
    #[error("lateral offset {lateral} m crosses the center of curvature (kappa {kappa})")]
    SingularOffset { kappa: f64, lateral: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadType {
    Straight,
    Curve,
    Intersection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadNode {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
    /// Name of the signalized intersection whose stop line sits at this node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<String>,
}

impl RoadNode {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadLink {
    pub id: LinkId,
    #[serde(rename = "nodes")]
    pub node_ids: Vec<NodeId>,
    #[serde(default, rename = "left", skip_serializing_if = "Option::is_none")]
    pub left_link: Option<LinkId>,
    #[serde(default, rename = "right", skip_serializing_if = "Option::is_none")]
    pub right_link: Option<LinkId>,
    pub road_type: RoadType,
    #[serde(default)]
    pub successors: Vec<LinkId>,
    pub length: f64,
}

/// Painted lane boundary or centerline polyline, kept for drawing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanePolyline {
    pub id: String,
    pub kind: String,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoadGraphFile {
    nodes: Vec<RoadNode>,
    links: Vec<RoadLink>,
    #[serde(default)]
    lanes: Vec<LanePolyline>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    pub nodes: BTreeMap<NodeId, RoadNode>,
    pub links: BTreeMap<LinkId, RoadLink>,
    pub lanes: Vec<LanePolyline>,
    polylines: BTreeMap<LinkId, Vec<Vec2>>,
}

impl RoadGraph {
    /// Builds and validates a graph from its parts.
    pub fn new(
        nodes: Vec<RoadNode>,
        links: Vec<RoadLink>,
        lanes: Vec<LanePolyline>,
    ) -> Result<Self, RoadGraphError> {
        let mut node_map = BTreeMap::new();
        for n in nodes {
            if node_map.contains_key(&n.id) {
                return Err(RoadGraphError::DuplicateId(n.id));
            }
            node_map.insert(n.id.clone(), n);
        }
        let mut link_map = BTreeMap::new();
        for l in links {
            if link_map.contains_key(&l.id) {
                return Err(RoadGraphError::DuplicateId(l.id));
            }
            link_map.insert(l.id.clone(), l);
        }
        let mut polylines = BTreeMap::new();
        for link in link_map.values() {
            if link.node_ids.len() < 2 {
                return Err(RoadGraphError::ShortLink(link.id.clone()));
            }
            let mut pts = Vec::with_capacity(link.node_ids.len());
            for nid in &link.node_ids {
                let node = node_map.get(nid).ok_or_else(|| RoadGraphError::DanglingReference {
                    owner: format!("link `{}`", link.id),
                    missing: nid.clone(),
                })?;
                pts.push(node.position());
            }
            let refs = link
                .left_link
                .iter()
                .chain(link.right_link.iter())
                .chain(link.successors.iter());
            for r in refs {
                if !link_map.contains_key(r) {
                    return Err(RoadGraphError::DanglingReference {
                        owner: format!("link `{}`", link.id),
                        missing: r.clone(),
                    });
                }
            }
            let geometric = *cumulative_lengths(&pts).last().unwrap();
            if (geometric - link.length).abs() > 1e-6 {
                return Err(RoadGraphError::LengthMismatch {
                    link: link.id.clone(),
                    stored: link.length,
                    geometric,
                });
            }
            polylines.insert(link.id.clone(), pts);
        }
        Ok(Self {
            nodes: node_map,
            links: link_map,
            lanes,
            polylines,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, RoadGraphError> {
        let file: RoadGraphFile = serde_json::from_str(text).map_err(|e| RoadGraphError::Parse(e.to_string()))?;
        Self::new(file.nodes, file.links, file.lanes)
    }

    pub fn to_json(&self) -> String {
        let file = RoadGraphFile {
            nodes: self.nodes.values().cloned().collect(),
            links: self.links.values().cloned().collect(),
            lanes: self.lanes.clone(),
        };
        serde_json::to_string_pretty(&file).expect("road graph serializes")
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn node(&self, id: &str) -> Result<&RoadNode, RoadGraphError> {
        self.nodes.get(id).ok_or_else(|| RoadGraphError::UnknownNode(id.to_string()))
    }

    pub fn link_polyline(&self, id: &str) -> &[Vec2] {
        &self.polylines[id]
    }

    /// Nodes carrying a signal stop line, keyed by node id.
    pub fn stop_lines(&self) -> impl Iterator<Item = &RoadNode> {
        self.nodes.values().filter(|n| n.signal.is_some())
    }

    /// All links sharing the successor relation with `id` in either direction
    /// plus its parallel neighbors; used for drawing and connectivity checks.
    pub fn neighbors(&self, id: &str) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        if let Some(l) = self.links.get(id) {
            out.extend(l.successors.iter().map(String::as_str));
            out.extend(l.left_link.iter().map(String::as_str));
            out.extend(l.right_link.iter().map(String::as_str));
        }
        out
    }
}

pub fn load_roadgraph(path: &Path) -> Result<RoadGraph, RoadGraphError> {
    RoadGraph::from_json(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestLink {
    pub link_id: LinkId,
    /// Signed distance, positive left of the link direction.
    pub lateral: f64,
    pub station: f64,
}

/// Closest link centerline to `pose`; ties within 1e-12 m go to the smaller id.
pub fn nearest_link(graph: &RoadGraph, pose: &Pose2) -> Option<NearestLink> {
    let p = pose.position();
    let mut best: Option<(f64, NearestLink)> = None;
    for (id, pts) in &graph.polylines {
        let mut acc = 0.0;
        for w in pts.windows(2) {
            let seg = w[1] - w[0];
            let len = seg.norm();
            let (t, foot) = project_on_segment(&w[0], &w[1], &p);
            let d = (p - foot).norm();
            if best.as_ref().is_none_or(|(bd, _)| d < bd - 1e-12) {
                let rel = p - foot;
                let sign = if seg.x * rel.y - seg.y * rel.x < 0.0 { -1.0 } else { 1.0 };
                best = Some((
                    d,
                    NearestLink {
                        link_id: id.clone(),
                        lateral: sign * d,
                        station: acc + t * len,
                    },
                ));
            }
            acc += len;
        }
    }
    best.map(|(_, n)| n)
}
