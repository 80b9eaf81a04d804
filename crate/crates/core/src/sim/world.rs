//! Synthetic surroundings for localization: box buildings and poles placed
//! clear of the road, sampled into point clouds on demand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{point_polyline_distance, Vec2};
use crate::pointcloud::LidarPoint;
use crate::roadgraph::RoadGraph;

/// Vertical rectangle from `a` to `b` on the ground, `height` tall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Facade {
    pub a: Vec2,
    pub b: Vec2,
    pub height: f64,
    pub reflectivity: f64,
}

impl Facade {
    fn area(&self) -> f64 {
        (self.b - self.a).norm() * self.height
    }

    fn near(&self, center: &Vec2, radius: f64) -> bool {
        crate::geom::point_segment_distance(&self.a, &self.b, center) <= radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    /// Keep-out distance from every lane centerline.
    pub road_clearance: f64,
    /// Band beyond the keep-out in which building centers are drawn.
    pub band: f64,
    /// Candidate spacing along the road.
    pub spacing: f64,
    pub pole_spacing: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            road_clearance: 6.0,
            band: 10.0,
            spacing: 9.0,
            pole_spacing: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub facades: Vec<Facade>,
    /// Lane centerlines, used for the painted ground.
    pub lanes: Vec<Vec<Vec2>>,
}

fn box_facades(center: Vec2, heading: f64, half_l: f64, half_w: f64, height: f64, r: f64) -> [Facade; 4] {
    let ob = crate::geom::OrientedBox::new(center, heading, half_l, half_w);
    let c = ob.corners();
    std::array::from_fn(|i| Facade {
        a: c[i],
        b: c[(i + 1) % 4],
        height,
        reflectivity: r,
    })
}

fn clear_of(lanes: &[Vec<Vec2>], corners: &[Vec2], clearance: f64) -> bool {
    // Corners and edge midpoints cover boxes no wider than the clearance.
    let mut probes: Vec<Vec2> = corners.to_vec();
    for i in 0..corners.len() {
        probes.push((corners[i] + corners[(i + 1) % corners.len()]) * 0.5);
    }
    probes
        .iter()
        .all(|p| lanes.iter().all(|l| point_polyline_distance(l, p) >= clearance))
}

impl World {
    /// Buildings along both sides of every link and a pole row at the road
    /// edge, deterministic in `cfg.seed`.
    pub fn generate(graph: &RoadGraph, cfg: &WorldConfig) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lanes: Vec<Vec<Vec2>> = graph.links.keys().map(|id| graph.link_polyline(id).to_vec()).collect();
        let mut facades: Vec<Facade> = Vec::new();
        let mut footprints: Vec<crate::geom::OrientedBox> = Vec::new();
        let mut pole_gap = 0.0;
        for lane in &lanes {
            for w in lane.windows(2) {
                let seg = w[1] - w[0];
                let len = seg.norm();
                if len < 1e-9 {
                    continue;
                }
                let t = seg / len;
                let n = Vec2::new(-t.y, t.x);
                let mut s = rng.random_range(0.0..cfg.spacing);
                while s < len {
                    for side in [-1.0, 1.0] {
                        let half_l = rng.random_range(3.0..8.0);
                        let half_w = rng.random_range(2.5..5.0);
                        let off = cfg.road_clearance + half_w + rng.random_range(0.0..cfg.band);
                        let yaw = rng.random_range(-0.25..0.25);
                        let height = rng.random_range(3.0..6.0);
                        let refl = rng.random_range(0.1..0.4);
                        let center = w[0] + t * s + n * (side * off);
                        let heading = t.y.atan2(t.x) + yaw;
                        let ob = crate::geom::OrientedBox::new(center, heading, half_l, half_w);
                        let grown = crate::geom::OrientedBox::new(center, heading, half_l + 1.5, half_w + 1.5);
                        if clear_of(&lanes, &ob.corners(), cfg.road_clearance)
                            && footprints.iter().all(|f| !f.overlaps(&grown))
                        {
                            facades.extend(box_facades(center, heading, half_l, half_w, height, refl));
                            footprints.push(grown);
                        }
                    }
                    s += cfg.spacing;
                }
                pole_gap += len;
                if pole_gap >= cfg.pole_spacing {
                    pole_gap = 0.0;
                    let p = w[1] - n * 3.0;
                    let ob = crate::geom::OrientedBox::new(p, 0.0, 0.2, 0.2);
                    if clear_of(&lanes, &ob.corners(), 2.5) && footprints.iter().all(|f| !f.overlaps(&ob)) {
                        facades.extend(box_facades(p, 0.0, 0.2, 0.2, 5.0, 0.9));
                        footprints.push(ob);
                    }
                }
            }
        }
        World { facades, lanes }
    }

    /// Uniform random points on facades within `radius` of `center`, about
    /// `density` per square meter.
    pub fn sample(&self, rng: &mut impl Rng, center: &Vec2, radius: f64, density: f64) -> Vec<LidarPoint> {
        let mut out = Vec::new();
        for f in self.facades.iter().filter(|f| f.near(center, radius)) {
            let count = (f.area() * density).round() as usize;
            for _ in 0..count {
                let u: f64 = rng.random();
                let z: f64 = rng.random::<f64>() * f.height;
                let p = f.a + (f.b - f.a) * u;
                if (p - center).norm() <= radius {
                    out.push(LidarPoint::new(p.x, p.y, z, f.reflectivity));
                }
            }
        }
        out
    }

    /// Dense sampling of every facade for map building.
    pub fn map_points(&self, seed: u64, density: f64) -> Vec<LidarPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for f in &self.facades {
            let count = (f.area() * density).round() as usize;
            for _ in 0..count {
                let p = f.a + (f.b - f.a) * rng.random::<f64>();
                out.push(LidarPoint::new(p.x, p.y, rng.random::<f64>() * f.height, f.reflectivity));
            }
        }
        out
    }

    /// Flat ground on a grid with bright paint along lane boundaries.
    pub fn ground_points(&self, graph: &RoadGraph, spacing: f64) -> Vec<LidarPoint> {
        let marks: Vec<Vec<Vec2>> = graph
            .lanes
            .iter()
            .map(|l| l.points.iter().map(|p| Vec2::new(p[0], p[1])).collect())
            .collect();
        let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
        for p in self.lanes.iter().flatten() {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if !lo.x.is_finite() {
            return Vec::new();
        }
        let margin = 8.0;
        let nx = ((hi.x - lo.x + 2.0 * margin) / spacing).ceil() as usize;
        let ny = ((hi.y - lo.y + 2.0 * margin) / spacing).ceil() as usize;
        let mut out = Vec::new();
        for j in 0..=ny {
            for i in 0..=nx {
                let p = Vec2::new(lo.x - margin + i as f64 * spacing, lo.y - margin + j as f64 * spacing);
                let road = self.lanes.iter().any(|l| point_polyline_distance(l, &p) <= 2.5);
                if !road {
                    continue;
                }
                let painted = marks.iter().any(|m| m.len() >= 2 && point_polyline_distance(m, &p) <= 0.08);
                out.push(LidarPoint::new(p.x, p.y, 0.0, if painted { 0.9 } else { 0.1 }));
            }
        }
        out
    }
}
