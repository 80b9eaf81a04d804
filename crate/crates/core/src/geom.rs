//! Planar rigid-body geometry, Frenet projection and arc-length cubic splines.
//!
//! Everything here is a plain value type; angles are radians normalized into
//! `(-pi, pi]` and lateral offsets are positive to the left of travel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = nalgebra::Vector2<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("degenerate reference line (length {0:.3e} m)")]
    DegenerateReference(f64),
    #[error("consecutive spline knots {0} and {1} coincide")]
    DuplicateKnot(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::new(self.theta.cos(), self.theta.sin())
    }

    pub fn planar_distance(&self, other: &Pose2) -> f64 {
        (self.position() - other.position()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Rigid SE(2) transform `p -> R(rotation) p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform2 {
    pub rotation: f64,
    pub translation: Vec2,
}

impl Default for Transform2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform2 {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            translation: Vec2::zeros(),
        }
    }

    pub fn new(tx: f64, ty: f64, rotation: f64) -> Self {
        Self {
            rotation: normalize_angle(rotation),
            translation: Vec2::new(tx, ty),
        }
    }

    pub fn rotation_only(rotation: f64) -> Self {
        Self::new(0.0, 0.0, rotation)
    }

    pub fn from_pose(pose: &Pose2) -> Self {
        Self::new(pose.x, pose.y, pose.theta)
    }

    pub fn to_pose(&self) -> Pose2 {
        Pose2::new(self.translation.x, self.translation.y, self.rotation)
    }

    pub fn rotate(&self, v: &Vec2) -> Vec2 {
        let (s, c) = self.rotation.sin_cos();
        Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn apply(&self, p: &Vec2) -> Vec2 {
        self.rotate(p) + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Transform2) -> Transform2 {
        Transform2 {
            rotation: normalize_angle(self.rotation + other.rotation),
            translation: self.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform2 {
        let inv_rot = Transform2::rotation_only(-self.rotation);
        Transform2 {
            rotation: normalize_angle(-self.rotation),
            translation: -inv_rot.rotate(&self.translation),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.x.is_finite() && self.translation.y.is_finite()
    }
}

pub fn se2_compose(a: &Transform2, b: &Transform2) -> Transform2 {
    a.compose(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetCoord {
    pub station: f64,
    pub lateral: f64,
}

/// Cumulative arc length at every vertex of a polyline.
pub fn cumulative_lengths(points: &[Vec2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            acc += (p - points[i - 1]).norm();
        }
        out.push(acc);
    }
    out
}

pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Closest point on segment `[a, b]` as `(parameter in [0,1], point)`.
pub fn project_on_segment(a: &Vec2, b: &Vec2, p: &Vec2) -> (f64, Vec2) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (0.0, *a);
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (t, a + ab * t)
}

pub fn point_segment_distance(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    (p - project_on_segment(a, b, p).1).norm()
}

/// Shortest distance from `p` to a polyline (a single point counts as a
/// degenerate polyline).
pub fn point_polyline_distance(points: &[Vec2], p: &Vec2) -> f64 {
    match points.len() {
        0 => f64::INFINITY,
        1 => (p - points[0]).norm(),
        _ => points
            .windows(2)
            .map(|w| point_segment_distance(&w[0], &w[1], p))
            .fold(f64::INFINITY, f64::min),
    }
}

fn project_segments(
    reference: &[Vec2],
    cum: &[f64],
    point: &Vec2,
    segments: std::ops::Range<usize>,
) -> Option<FrenetCoord> {
    let mut best: Option<(f64, FrenetCoord)> = None;
    for i in segments {
        let (a, b) = (reference[i], reference[i + 1]);
        let seg = b - a;
        let len = seg.norm();
        if len == 0.0 {
            continue;
        }
        let (t, foot) = project_on_segment(&a, &b, point);
        let d = (point - foot).norm();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            let rel = point - foot;
            let cross = seg.x * rel.y - seg.y * rel.x;
            let lateral = d * if cross < 0.0 { -1.0 } else { 1.0 };
            best = Some((
                d,
                FrenetCoord {
                    station: cum[i] + t * len,
                    lateral,
                },
            ));
        }
    }
    best.map(|(_, c)| c)
}

/// Projects `point` onto the polyline `reference`.
pub fn frenet_project(reference: &[Vec2], point: &Vec2) -> Result<FrenetCoord, GeomError> {
    let cum = cumulative_lengths(reference);
    let total = cum.last().copied().unwrap_or(0.0);
    if reference.len() < 2 || total < 1e-9 {
        return Err(GeomError::DegenerateReference(total));
    }
    Ok(project_segments(reference, &cum, point, 0..reference.len() - 1).expect("non-degenerate"))
}

/// Frenet projection restricted to the stations `[hint - window, hint + window]`.
/// Needed for references that revisit the same place (multi-lap routes).
pub fn frenet_project_near(
    reference: &[Vec2],
    cum: &[f64],
    point: &Vec2,
    station_hint: f64,
    window: f64,
) -> Option<FrenetCoord> {
    if reference.len() < 2 {
        return None;
    }
    let lo = cum.partition_point(|&s| s < station_hint - window).saturating_sub(1);
    let hi = cum
        .partition_point(|&s| s <= station_hint + window)
        .min(reference.len() - 1);
    if lo >= hi {
        return None;
    }
    project_segments(reference, cum, point, lo..hi)
}

/// Point and unit tangent on a polyline at `station` (clamped to its extent).
pub fn polyline_sample(reference: &[Vec2], cum: &[f64], station: f64) -> (Vec2, Vec2) {
    debug_assert!(reference.len() >= 2);
    let total = *cum.last().unwrap();
    let s = station.clamp(0.0, total);
    let mut i = cum.partition_point(|&c| c <= s).saturating_sub(1);
    i = i.min(reference.len() - 2);
    // skip zero-length segments
    while i + 1 < reference.len() - 1 && cum[i + 1] - cum[i] == 0.0 {
        i += 1;
    }
    let seg = reference[i + 1] - reference[i];
    let len = seg.norm();
    if len == 0.0 {
        return (reference[i], Vec2::new(1.0, 0.0));
    }
    let t = ((s - cum[i]) / len).clamp(0.0, 1.0);
    (reference[i] + seg * t, seg / len)
}

/// Inverse of [`frenet_project`] for a polyline reference.
pub fn frenet_to_cartesian(reference: &[Vec2], coord: &FrenetCoord) -> Vec2 {
    let cum = cumulative_lengths(reference);
    let (p, t) = polyline_sample(reference, &cum, coord.station);
    p + Vec2::new(-t.y, t.x) * coord.lateral
}

/// Natural cubic spline through `(knots[i], values[i])`; returns per-interval
/// coefficients `(a, b, c, d)` of `a u^3 + b u^2 + c u + d`, `u = t - knots[i]`.
pub fn natural_cubic_coefficients(knots: &[f64], values: &[f64]) -> Vec<[f64; 4]> {
    let n = knots.len();
    debug_assert_eq!(n, values.len());
    debug_assert!(n >= 2);
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    // second derivatives m_i with m_0 = m_{n-1} = 0; Thomas algorithm on the
    // interior tridiagonal system.
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut upper = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for j in 0..k {
            let i = j + 1;
            diag[j] = 2.0 * (h[i - 1] + h[i]);
            upper[j] = h[i];
            rhs[j] = 6.0 * ((values[i + 1] - values[i]) / h[i] - (values[i] - values[i - 1]) / h[i - 1]);
        }
        for j in 1..k {
            let w = h[j] / diag[j - 1];
            diag[j] -= w * upper[j - 1];
            rhs[j] -= w * rhs[j - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for j in (0..k - 1).rev() {
            m[j + 1] = (rhs[j] - upper[j] * m[j + 2]) / diag[j];
        }
    }
    (0..n - 1)
        .map(|i| {
            let d = values[i];
            let c = (values[i + 1] - values[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0;
            let b = m[i] / 2.0;
            let a = (m[i + 1] - m[i]) / (6.0 * h[i]);
            [a, b, c, d]
        })
        .collect()
}

/// One interval of an arc-length parameterized planar cubic spline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineSegment {
    pub coeffs_x: [f64; 4],
    pub coeffs_y: [f64; 4],
    pub s_start: f64,
    pub length: f64,
}

fn cubic(c: &[f64; 4], u: f64) -> f64 {
    ((c[0] * u + c[1]) * u + c[2]) * u + c[3]
}

fn cubic_d1(c: &[f64; 4], u: f64) -> f64 {
    (3.0 * c[0] * u + 2.0 * c[1]) * u + c[2]
}

fn cubic_d2(c: &[f64; 4], u: f64) -> f64 {
    6.0 * c[0] * u + 2.0 * c[1]
}

impl SplineSegment {
    pub fn eval(&self, s: f64) -> Vec2 {
        let u = s - self.s_start;
        Vec2::new(cubic(&self.coeffs_x, u), cubic(&self.coeffs_y, u))
    }

    pub fn derivative(&self, s: f64) -> Vec2 {
        let u = s - self.s_start;
        Vec2::new(cubic_d1(&self.coeffs_x, u), cubic_d1(&self.coeffs_y, u))
    }

    pub fn second_derivative(&self, s: f64) -> Vec2 {
        let u = s - self.s_start;
        Vec2::new(cubic_d2(&self.coeffs_x, u), cubic_d2(&self.coeffs_y, u))
    }
}

/// Fits a natural cubic spline to ordered points, parameterized by the
/// cumulative chord length.
pub fn fit_cubic_spline(points: &[Vec2]) -> Result<Vec<SplineSegment>, GeomError> {
    if points.len() < 3 {
        return Err(GeomError::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    for (i, w) in points.windows(2).enumerate() {
        if (w[1] - w[0]).norm() < 1e-9 {
            return Err(GeomError::DuplicateKnot(i, i + 1));
        }
    }
    let knots = cumulative_lengths(points);
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let cx = natural_cubic_coefficients(&knots, &xs);
    let cy = natural_cubic_coefficients(&knots, &ys);
    Ok(cx
        .into_iter()
        .zip(cy)
        .enumerate()
        .map(|(i, (coeffs_x, coeffs_y))| SplineSegment {
            coeffs_x,
            coeffs_y,
            s_start: knots[i],
            length: knots[i + 1] - knots[i],
        })
        .collect())
}

/// Convenience wrapper for evaluating a fitted spline by station.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcSpline {
    pub segments: Vec<SplineSegment>,
}

impl ArcSpline {
    pub fn fit(points: &[Vec2]) -> Result<Self, GeomError> {
        Ok(Self {
            segments: fit_cubic_spline(points)?,
        })
    }

    pub fn total_length(&self) -> f64 {
        self.segments
            .last()
            .map(|s| s.s_start + s.length)
            .unwrap_or(0.0)
    }

    fn segment_at(&self, s: f64) -> &SplineSegment {
        let i = self
            .segments
            .partition_point(|seg| seg.s_start <= s)
            .saturating_sub(1);
        &self.segments[i]
    }

    pub fn eval(&self, s: f64) -> Vec2 {
        self.segment_at(s).eval(s)
    }

    pub fn derivative(&self, s: f64) -> Vec2 {
        self.segment_at(s).derivative(s)
    }

    pub fn second_derivative(&self, s: f64) -> Vec2 {
        self.segment_at(s).second_derivative(s)
    }

    pub fn heading(&self, s: f64) -> f64 {
        let d = self.derivative(s);
        d.y.atan2(d.x)
    }
}

/// Signed curvature of the circle through three points (zero when collinear
/// or degenerate).
pub fn three_point_curvature(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    let ab = b - a;
    let bc = c - b;
    let ca = a - c;
    let denom = ab.norm() * bc.norm() * ca.norm();
    if denom < 1e-18 {
        return 0.0;
    }
    let cross = ab.x * bc.y - ab.y * bc.x;
    2.0 * cross / denom
}

/// Removes consecutive points closer than `tol`.
pub fn dedup_points(points: &[Vec2], tol: f64) -> Vec<Vec2> {
    let mut out: Vec<Vec2> = Vec::with_capacity(points.len());
    for p in points {
        if out.last().is_none_or(|q| (p - q).norm() >= tol) {
            out.push(*p);
        }
    }
    out
}

/// Rectangle centered at `center`, rotated by `heading`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, heading: f64, half_length: f64, half_width: f64) -> Self {
        Self {
            center,
            heading,
            half_length,
            half_width,
        }
    }

    fn axes(&self) -> [Vec2; 2] {
        let (s, c) = self.heading.sin_cos();
        [Vec2::new(c, s), Vec2::new(-s, c)]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [u, v] = self.axes();
        let (a, b) = (u * self.half_length, v * self.half_width);
        [self.center + a + b, self.center - a + b, self.center - a - b, self.center + a - b]
    }

    fn projected_radius(&self, axis: &Vec2) -> f64 {
        let [u, v] = self.axes();
        self.half_length * u.dot(axis).abs() + self.half_width * v.dot(axis).abs()
    }

    /// Separating-axis overlap test; touching boxes count as overlapping.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let d = other.center - self.center;
        self.axes()
            .into_iter()
            .chain(other.axes())
            .all(|axis| d.dot(&axis).abs() <= self.projected_radius(&axis) + other.projected_radius(&axis))
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        let [u, v] = self.axes();
        let d = p - self.center;
        d.dot(&u).abs() <= self.half_length && d.dot(&v).abs() <= self.half_width
    }
}
