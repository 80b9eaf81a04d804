use serde::Serialize;

use super::{nearest_link, LinkId, RoadGraph, RoadGraphError, Route};
use crate::geom::{dedup_points, three_point_curvature, ArcSpline, Pose2, Vec2};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeVertex {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub kappa: f64,
    pub lateral_index: i32,
    pub lateral: f64,
    pub source_link: LinkId,
    /// Whether the vertex lies on a mapped lane.
    pub drivable: bool,
}

impl LatticeVertex {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtendedRoadGraph {
    pub stations: Vec<f64>,
    pub offsets: Vec<f64>,
    pub layers: Vec<Vec<LatticeVertex>>,
    /// `edges[i]` joins layer `i` to layer `i + 1` as (from, to) vertex indices.
    pub edges: Vec<Vec<(usize, usize)>>,
}

impl ExtendedRoadGraph {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn center_index(&self) -> usize {
        self.offsets.len() / 2
    }

    pub fn centerline(&self) -> Vec<Vec2> {
        let c = self.center_index();
        self.layers.iter().map(|l| l[c].position()).collect()
    }

    /// Sub-lattice of `count` layers starting at layer `first`, clamped to the
    /// available range.
    pub fn window(&self, first: usize, count: usize) -> ExtendedRoadGraph {
        let n = self.layers.len();
        let a = first.min(n);
        let b = (a + count).min(n);
        ExtendedRoadGraph {
            stations: self.stations[a..b].to_vec(),
            offsets: self.offsets.clone(),
            layers: self.layers[a..b].to_vec(),
            edges: self.edges[a.min(b.saturating_sub(1))..b.saturating_sub(1)].to_vec(),
        }
    }

    pub fn station_step(&self) -> f64 {
        if self.stations.len() < 2 {
            0.0
        } else {
            self.stations[1] - self.stations[0]
        }
    }
}

fn validate_offsets(offsets: &[f64]) -> Result<(), RoadGraphError> {
    if offsets.is_empty() || !offsets.contains(&0.0) {
        return Err(RoadGraphError::InvalidLattice("lateral offsets must include 0".into()));
    }
    if offsets.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(RoadGraphError::InvalidLattice("lateral offsets must be strictly increasing".into()));
    }
    let n = offsets.len();
    for i in 0..n {
        if (offsets[i] + offsets[n - 1 - i]).abs() > 1e-12 {
            return Err(RoadGraphError::InvalidLattice("lateral offsets must be symmetric about 0".into()));
        }
    }
    Ok(())
}

/// Samples the route every `station_step` meters with one vertex per lateral offset.
pub fn build_extended_graph(
    graph: &RoadGraph,
    route: &Route,
    station_step: f64,
    lateral_offsets: &[f64],
) -> Result<ExtendedRoadGraph, RoadGraphError> {
    if !(station_step > 0.0) || !station_step.is_finite() {
        return Err(RoadGraphError::InvalidLattice(format!("station step {station_step} must be positive")));
    }
    validate_offsets(lateral_offsets)?;
    let mut pts = dedup_points(&route.polyline, 1e-9);
    let length = crate::geom::polyline_length(&pts);
    if length < 2.0 * station_step {
        return Err(RoadGraphError::RouteTooShort { length, step: station_step });
    }
    if pts.len() == 2 {
        pts.insert(1, (pts[0] + pts[1]) * 0.5);
    }
    let spline = ArcSpline::fit(&pts).map_err(|e| RoadGraphError::InvalidLattice(e.to_string()))?;
    let total = spline.total_length();
    let count = (total / station_step + 1e-9).floor() as usize + 1;
    let stations: Vec<f64> = (0..count).map(|i| i as f64 * station_step).collect();
    let center = lateral_offsets.len() / 2;
    let spacing = lateral_offsets
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let drivable_tolerance = if spacing.is_finite() { 0.5 * spacing } else { 1.75 };

    let mut layers = Vec::with_capacity(count);
    for &s in &stations {
        let p = spline.eval(s);
        let theta = spline.heading(s);
        let normal = Vec2::new(-theta.sin(), theta.cos());
        let mut layer = Vec::with_capacity(lateral_offsets.len());
        for (k, &off) in lateral_offsets.iter().enumerate() {
            let q = p + normal * off;
            let near = nearest_link(graph, &Pose2::new(q.x, q.y, theta));
            let (source_link, drivable) = match near {
                Some(n) => (n.link_id, n.lateral.abs() <= drivable_tolerance + 1e-9),
                None => (String::new(), false),
            };
            layer.push(LatticeVertex {
                x: q.x,
                y: q.y,
                theta,
                kappa: 0.0,
                lateral_index: k as i32 - center as i32,
                lateral: off,
                source_link,
                drivable,
            });
        }
        layers.push(layer);
    }
    let width = lateral_offsets.len();
    let edges = (0..count - 1)
        .map(|_| {
            let mut e = Vec::new();
            for a in 0..width {
                for b in a.saturating_sub(1)..(a + 2).min(width) {
                    e.push((a, b));
                }
            }
            e
        })
        .collect();
    let mut lattice = ExtendedRoadGraph {
        stations,
        offsets: lateral_offsets.to_vec(),
        layers,
        edges,
    };
    let kappa = curvature_profile(&lattice)?;
    for (layer, ks) in lattice.layers.iter_mut().zip(kappa) {
        for (v, k) in layer.iter_mut().zip(ks) {
            v.kappa = k;
        }
    }
    Ok(lattice)
}

/// Centerline curvature by three-point differences, shifted to each offset.
pub fn curvature_profile(lattice: &ExtendedRoadGraph) -> Result<Vec<Vec<f64>>, RoadGraphError> {
    let n = lattice.layers.len();
    if n < 3 {
        return Err(RoadGraphError::InvalidLattice(format!("curvature needs 3 layers, got {n}")));
    }
    let c = lattice.centerline();
    let mut center = vec![0.0; n];
    for i in 1..n - 1 {
        center[i] = three_point_curvature(&c[i - 1], &c[i], &c[i + 1]);
    }
    center[0] = center[1];
    center[n - 1] = center[n - 2];
    let mut out = Vec::with_capacity(n);
    for (layer, &k) in lattice.layers.iter().zip(&center) {
        let mut row = Vec::with_capacity(layer.len());
        for v in layer {
            let denom = 1.0 - k * v.lateral;
            if denom <= 1e-9 {
                return Err(RoadGraphError::SingularOffset {
                    kappa: k,
                    lateral: v.lateral,
                });
            }
            row.push(k / denom);
        }
        out.push(row);
    }
    Ok(out)
}
