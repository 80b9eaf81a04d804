use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use super::{min_clearance, Clearance, MacroPath, MotionError, Obstacle};
use crate::geom::{
    cumulative_lengths, dedup_points, frenet_project, point_polyline_distance, polyline_length, polyline_sample,
    three_point_curvature, ArcSpline, Vec2,
};

/// Samples per primitive, endpoints included.
pub const PRIMITIVE_SAMPLES: usize = 41;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub x: f64,
    pub dx: f64,
    pub ddx: f64,
    pub y: f64,
    pub dy: f64,
    pub ddy: f64,
}

impl BoundaryState {
    pub fn at_rest(p: Vec2) -> Self {
        Self {
            x: p.x,
            y: p.y,
            ..Self::default()
        }
    }

    pub fn moving(p: Vec2, velocity: Vec2) -> Self {
        Self {
            x: p.x,
            dx: velocity.x,
            ddx: 0.0,
            y: p.y,
            dy: velocity.y,
            ddy: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.dx, self.ddx, self.y, self.dy, self.ddy]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvilinearPoint {
    pub s: f64,
    pub x: f64,
    pub y: f64,
}

/// Quintic in local time `tau = t - t_start` on each axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionPrimitive {
    pub coeffs_x: [f64; 6],
    pub coeffs_y: [f64; 6],
    pub t_start: f64,
    pub t_end: f64,
    pub samples: Vec<Vec2>,
    pub curvilinear: Option<Vec<CurvilinearPoint>>,
}

fn poly(c: &[f64; 6], tau: f64) -> [f64; 3] {
    let mut p = 0.0;
    let mut d = 0.0;
    let mut dd = 0.0;
    for k in (0..6).rev() {
        p = p * tau + c[k];
        if k >= 1 {
            d = d * tau + k as f64 * c[k];
        }
        if k >= 2 {
            dd = dd * tau + (k * (k - 1)) as f64 * c[k];
        }
    }
    [p, d, dd]
}

impl MotionPrimitive {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Position, velocity and acceleration at absolute time `t`.
    pub fn state_at(&self, t: f64) -> BoundaryState {
        let tau = t - self.t_start;
        let [x, dx, ddx] = poly(&self.coeffs_x, tau);
        let [y, dy, ddy] = poly(&self.coeffs_y, tau);
        BoundaryState { x, dx, ddx, y, dy, ddy }
    }

    pub fn position_at(&self, t: f64) -> Vec2 {
        let s = self.state_at(t);
        Vec2::new(s.x, s.y)
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        let s = self.state_at(t);
        f64::hypot(s.dx, s.dy)
    }

    pub fn arc_length(&self) -> f64 {
        polyline_length(&self.samples)
    }
}

fn boundary_matrix(duration: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for (row, tau) in [(0, 0.0), (3, duration)] {
        for k in 0..6 {
            let kf = k as f64;
            m[(row, k)] = tau.powi(k as i32);
            if k >= 1 {
                m[(row + 1, k)] = kf * tau.powi(k as i32 - 1);
            }
            if k >= 2 {
                m[(row + 2, k)] = kf * (kf - 1.0) * tau.powi(k as i32 - 2);
            }
        }
    }
    m
}

/// Solves both quintic boundary-value systems and samples the result.
pub fn generate_primitive(
    start: &BoundaryState,
    end: &BoundaryState,
    t_s: f64,
    t_f: f64,
) -> Result<MotionPrimitive, MotionError> {
    let duration = t_f - t_s;
    if !(duration >= 1e-6) {
        return Err(MotionError::SingularSystem(duration));
    }
    if !start.is_finite() || !end.is_finite() {
        return Err(MotionError::InvalidInput("non-finite boundary state".into()));
    }
    let lu = boundary_matrix(duration).lu();
    let bx = Vector6::new(start.x, start.dx, start.ddx, end.x, end.dx, end.ddx);
    let by = Vector6::new(start.y, start.dy, start.ddy, end.y, end.dy, end.ddy);
    let (Some(ax), Some(ay)) = (lu.solve(&bx), lu.solve(&by)) else {
        return Err(MotionError::SingularSystem(duration));
    };
    let mut prim = MotionPrimitive {
        coeffs_x: ax.into(),
        coeffs_y: ay.into(),
        t_start: t_s,
        t_end: t_f,
        samples: Vec::with_capacity(PRIMITIVE_SAMPLES),
        curvilinear: None,
    };
    let dt = duration / (PRIMITIVE_SAMPLES - 1) as f64;
    prim.samples = (0..PRIMITIVE_SAMPLES)
        .map(|k| {
            let tau = k as f64 * dt;
            Vec2::new(poly(&prim.coeffs_x, tau)[0], poly(&prim.coeffs_y, tau)[0])
        })
        .collect();
    Ok(prim)
}

/// Candidate primitives ending on the macro path `horizon` seconds ahead,
/// one per (lateral offset, terminal speed).
pub fn sample_primitive_set(
    ego: &BoundaryState,
    macro_path: &MacroPath,
    road_width: f64,
    terminal_speeds: &[f64],
    lateral_count: usize,
    horizon: f64,
) -> Vec<MotionPrimitive> {
    let reference = dedup_points(&macro_path.polyline, 1e-9);
    if reference.len() < 2 || lateral_count == 0 || !(horizon > 0.0) {
        return Vec::new();
    }
    let cum = cumulative_lengths(&reference);
    let total = *cum.last().unwrap();
    let here = Vec2::new(ego.x, ego.y);
    let s0 = frenet_project(&reference, &here).map_or(0.0, |f| f.station);
    let v0 = f64::hypot(ego.dx, ego.dy);
    let offsets: Vec<f64> = if lateral_count == 1 {
        vec![0.0]
    } else {
        (0..lateral_count)
            .map(|k| -road_width / 2.0 + road_width * k as f64 / (lateral_count - 1) as f64)
            .collect()
    };
    let mut out = Vec::with_capacity(offsets.len() * terminal_speeds.len());
    for &off in &offsets {
        for &vf in terminal_speeds {
            let sf = (s0 + 0.5 * (v0 + vf) * horizon).min(total);
            let (p, tangent) = polyline_sample(&reference, &cum, sf);
            let normal = Vec2::new(-tangent.y, tangent.x);
            let end = BoundaryState::moving(p + normal * off, tangent * vf);
            if let Ok(prim) = generate_primitive(ego, &end, 0.0, horizon) {
                out.push(prim);
            }
        }
    }
    out
}

/// Re-expresses the samples as an arc-length cubic spline, with stations
/// anchored at the reference path's cumulative distance.
pub fn to_curvilinear(prim: &MotionPrimitive, reference: &MacroPath) -> Result<MotionPrimitive, MotionError> {
    if prim.samples.len() < 3 {
        return Err(MotionError::DegeneratePrimitive);
    }
    let chain = cumulative_lengths(&prim.samples);
    if *chain.last().unwrap() < 1e-6 {
        return Err(MotionError::DegeneratePrimitive);
    }
    let anchor = if reference.polyline.len() >= 2 {
        frenet_project(&reference.polyline, &prim.samples[0]).map_or(0.0, |f| f.station)
    } else {
        0.0
    };
    let mut knots = dedup_points(&prim.samples, 1e-9);
    if knots.len() == 2 {
        knots.insert(1, (knots[0] + knots[1]) * 0.5);
    }
    let spline = ArcSpline::fit(&knots).map_err(|_| MotionError::DegeneratePrimitive)?;
    let curvilinear = chain
        .iter()
        .map(|&s| {
            let p = spline.eval(s);
            CurvilinearPoint { s: anchor + s, x: p.x, y: p.y }
        })
        .collect();
    Ok(MotionPrimitive {
        curvilinear: Some(curvilinear),
        ..prim.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroWeights {
    pub w_obstacle: f64,
    pub w_curvature: f64,
    pub w_transient: f64,
    pub clearance: Clearance,
}

impl Default for MicroWeights {
    fn default() -> Self {
        Self {
            w_obstacle: 10.0,
            w_curvature: 1.0,
            w_transient: 1.0,
            clearance: Clearance::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MicroSelection {
    pub index: usize,
    /// Cost per candidate; `None` for blocked ones.
    pub costs: Vec<Option<f64>>,
    pub primitive: MotionPrimitive,
}

/// Mean distance from each sample to the previous primitive's samples.
pub(crate) fn transient_distance(prim: &MotionPrimitive, prev: Option<&MotionPrimitive>) -> f64 {
    match prev {
        Some(p) if !p.samples.is_empty() && !prim.samples.is_empty() => {
            let sum = prim
                .samples
                .iter()
                .fold(0.0, |a, q| a + point_polyline_distance(&p.samples, q));
            sum / prim.samples.len() as f64
        }
        _ => 0.0,
    }
}

fn candidate_cost(
    prim: &MotionPrimitive,
    obstacles: &[Obstacle],
    prev: Option<&MotionPrimitive>,
    w: &MicroWeights,
) -> Option<f64> {
    let mut barrier = 0.0;
    for p in &prim.samples {
        let c = min_clearance(obstacles, p);
        if c < w.clearance.c_min() {
            return None;
        }
        barrier += w.clearance.phi(c);
    }
    let bending = prim
        .samples
        .windows(3)
        .fold(0.0, |a, t| a + three_point_curvature(&t[0], &t[1], &t[2]).abs());
    Some(
        prim.arc_length()
            + w.w_obstacle * barrier
            + w.w_curvature * bending
            + w.w_transient * transient_distance(prim, prev),
    )
}

/// Cheapest collision-free candidate; exact ties keep the lower index.
pub fn select_micro(
    primitives: &[MotionPrimitive],
    obstacles: &[Obstacle],
    prev: Option<&MotionPrimitive>,
    w: &MicroWeights,
) -> Result<MicroSelection, MotionError> {
    if primitives.is_empty() {
        return Err(MotionError::InvalidInput("no candidate primitives".into()));
    }
    let costs: Vec<Option<f64>> = primitives
        .iter()
        .map(|p| candidate_cost(p, obstacles, prev, w))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in costs.iter().enumerate() {
        if let Some(c) = *c {
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((i, c));
            }
        }
    }
    let (index, _) = best.ok_or(MotionError::AllPrimitivesBlocked)?;
    Ok(MicroSelection {
        index,
        costs,
        primitive: primitives[index].clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannerDebugRecord {
    pub cycle: usize,
    pub t: f64,
    pub selected: Option<usize>,
    pub costs: Vec<Option<f64>>,
}

pub fn planner_debug_json(records: &[PlannerDebugRecord]) -> String {
    serde_json::to_string_pretty(records).expect("debug records serialize")
}
