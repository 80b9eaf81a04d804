use serde::{Deserialize, Serialize};

use super::{min_clearance, Clearance, MotionError, Obstacle};
use crate::geom::{point_polyline_distance, Vec2};
use crate::roadgraph::{ExtendedRoadGraph, LatticeVertex, Route};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacroWeights {
    pub k_obstacle: f64,
    pub k_curvature: f64,
    pub k_transient: f64,
    pub k_route: f64,
    pub clearance: Clearance,
}

impl Default for MacroWeights {
    fn default() -> Self {
        Self {
            k_obstacle: 20.0,
            k_curvature: 5.0,
            k_transient: 1.0,
            k_route: 0.5,
            clearance: Clearance::default(),
        }
    }
}

impl MacroWeights {
    pub fn zero() -> Self {
        Self {
            k_obstacle: 0.0,
            k_curvature: 0.0,
            k_transient: 0.0,
            k_route: 0.0,
            clearance: Clearance::default(),
        }
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        let w = [self.k_obstacle, self.k_curvature, self.k_transient, self.k_route];
        if w.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(MotionError::InvalidInput(format!("macro weights {w:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroPath {
    /// Chosen vertex index within each lattice layer.
    pub indices: Vec<usize>,
    pub vertices: Vec<LatticeVertex>,
    pub polyline: Vec<Vec2>,
    pub cost: f64,
}

impl MacroPath {
    /// Wraps a bare polyline, e.g. a route, as a previous-path reference.
    pub fn from_polyline(polyline: Vec<Vec2>) -> Self {
        Self {
            indices: Vec::new(),
            vertices: Vec::new(),
            polyline,
            cost: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.polyline.is_empty()
    }
}

/// Per-vertex heuristic cost, or `None` when the vertex is unusable.
pub(crate) fn vertex_cost(
    v: &LatticeVertex,
    route: &Route,
    obstacles: &[Obstacle],
    prev: Option<&MacroPath>,
    w: &MacroWeights,
) -> Option<f64> {
    if !v.drivable {
        return None;
    }
    let p = v.position();
    let clearance = min_clearance(obstacles, &p);
    if clearance < w.clearance.c_min() {
        return None;
    }
    let transient = prev
        .filter(|m| !m.polyline.is_empty())
        .map_or(0.0, |m| point_polyline_distance(&m.polyline, &p));
    let to_route = if route.polyline.is_empty() {
        0.0
    } else {
        point_polyline_distance(&route.polyline, &p)
    };
    Some(
        w.k_obstacle * w.clearance.phi(clearance)
            + w.k_curvature * v.kappa.abs()
            + w.k_transient * transient
            + w.k_route * to_route,
    )
}

/// Minimum-cost chain through the lattice: inter-vertex distance plus the
/// per-vertex heuristic. Exact ties keep the lower vertex index.
pub fn plan_macro(
    lattice: &ExtendedRoadGraph,
    route: &Route,
    obstacles: &[Obstacle],
    prev: Option<&MacroPath>,
    w: &MacroWeights,
) -> Result<MacroPath, MotionError> {
    w.validate()?;
    if lattice.is_empty() {
        return Err(MotionError::InvalidInput("empty lattice".into()));
    }
    let g: Vec<Vec<Option<f64>>> = lattice
        .layers
        .iter()
        .map(|layer| layer.iter().map(|v| vertex_cost(v, route, obstacles, prev, w)).collect())
        .collect();
    let mut best: Vec<Vec<f64>> = vec![g[0].iter().map(|c| c.unwrap_or(f64::INFINITY)).collect()];
    let mut back: Vec<Vec<usize>> = vec![vec![usize::MAX; g[0].len()]];
    for i in 0..lattice.layers.len() - 1 {
        let (cur, next) = (&lattice.layers[i], &lattice.layers[i + 1]);
        let mut row = vec![f64::INFINITY; next.len()];
        let mut from = vec![usize::MAX; next.len()];
        for &(a, b) in &lattice.edges[i] {
            let (Some(gb), true) = (g[i + 1][b], best[i][a].is_finite()) else {
                continue;
            };
            let c = best[i][a] + (next[b].position() - cur[a].position()).norm() + gb;
            if c < row[b] || (c == row[b] && a < from[b]) {
                row[b] = c;
                from[b] = a;
            }
        }
        best.push(row);
        back.push(from);
    }
    let last = best.last().unwrap();
    let (mut idx, cost) = last
        .iter()
        .enumerate()
        .fold((usize::MAX, f64::INFINITY), |acc, (k, &c)| if c < acc.1 { (k, c) } else { acc });
    if !cost.is_finite() {
        return Err(MotionError::NoFeasiblePath);
    }
    let mut indices = vec![idx; lattice.layers.len()];
    for i in (1..lattice.layers.len()).rev() {
        indices[i] = idx;
        idx = back[i][idx];
    }
    indices[0] = idx;
    let vertices: Vec<LatticeVertex> = indices
        .iter()
        .enumerate()
        .map(|(i, &k)| lattice.layers[i][k].clone())
        .collect();
    let polyline = vertices.iter().map(LatticeVertex::position).collect();
    Ok(MacroPath {
        indices,
        vertices,
        polyline,
        cost,
    })
}
