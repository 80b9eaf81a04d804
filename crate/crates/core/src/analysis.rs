//! Trajectory-similarity analytics between driven logs.
//!
//! Spatial similarity is a k-nearest-neighbor Kullback-Leibler divergence
//! estimate over 2-D positions, with timestamps ignored:
//!
//! `D(P || Q) = (d / n) * sum_x log(s_k(x) / r_k(x)) + log(m / (n - 1))`
//!
//! where `r_k(x)` is the distance from `x` to its k-th nearest neighbor in
//! `P` (itself excluded), `s_k(x)` the same distance into `Q`, `n = |P|`,
//! `m = |Q|` and `d = 2`. The unit-ball volume appears in both density
//! estimates and cancels in their ratio.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{point_segment_distance, Vec2};
use crate::parallel::ordered_map;

pub const DEFAULT_K: usize = 1;
pub const DEFAULT_MIN_SAMPLES: usize = 50;
/// Substitute for a zero neighbor distance (duplicate samples).
pub const DISTANCE_EPSILON: f64 = 1e-9;
/// Bucket name for points outside every section.
pub const RESIDUAL: &str = "residual";
/// Scope name for the whole trajectory in a report.
pub const FULL_ROUTE: &str = "full";

const DIM: f64 = 2.0;
const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("insufficient data: need {needed} points, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("invalid section `{name}`: {reason}")]
    InvalidSection { name: String, reason: String },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub team: String,
    pub points: Vec<TrajPoint>,
}

impl TrajectorySet {
    pub fn new(team: impl Into<String>, points: Vec<TrajPoint>) -> Self {
        Self {
            team: team.into(),
            points,
        }
    }

    /// Untimed set from positions; timestamps are the sample indices.
    pub fn from_positions(team: impl Into<String>, positions: &[Vec2]) -> Self {
        let points = positions
            .iter()
            .enumerate()
            .map(|(i, p)| TrajPoint { t: i as f64, x: p.x, y: p.y })
            .collect();
        Self::new(team, points)
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.points.iter().map(|p| Vec2::new(p.x, p.y)).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SectionKind {
    Curve,
    Intersection,
    Straight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionSpec {
    pub name: String,
    pub kind: SectionKind,
    pub polygon: Vec<[f64; 2]>,
}

impl SectionSpec {
    /// At least three finite vertices and no two non-adjacent edges touching.
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |reason: &str| AnalysisError::InvalidSection {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.name == RESIDUAL || self.name == FULL_ROUTE {
            return Err(bad("name is reserved"));
        }
        let n = self.polygon.len();
        if n < 3 {
            return Err(bad("polygon needs at least 3 vertices"));
        }
        if self.polygon.iter().flatten().any(|c| !c.is_finite()) {
            return Err(bad("non-finite vertex"));
        }
        let v = self.vertices();
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_touch(&v[i], &v[(i + 1) % n], &v[j], &v[(j + 1) % n]) {
                    return Err(bad("polygon is self-intersecting"));
                }
            }
        }
        Ok(())
    }

    pub fn vertices(&self) -> Vec<Vec2> {
        self.polygon.iter().map(|p| Vec2::new(p[0], p[1])).collect()
    }

    /// Even-odd interior, or within 1e-9 m of the boundary.
    pub fn contains(&self, p: &Vec2) -> bool {
        let v = self.vertices();
        on_boundary(&v, p) || even_odd(&v, p)
    }
}

fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn segments_touch(a: &Vec2, b: &Vec2, c: &Vec2, d: &Vec2) -> bool {
    let d1 = cross(&(b - a), &(c - a));
    let d2 = cross(&(b - a), &(d - a));
    let d3 = cross(&(d - c), &(a - c));
    let d4 = cross(&(d - c), &(b - c));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    point_segment_distance(a, b, c) <= BOUNDARY_TOL
        || point_segment_distance(a, b, d) <= BOUNDARY_TOL
        || point_segment_distance(c, d, a) <= BOUNDARY_TOL
        || point_segment_distance(c, d, b) <= BOUNDARY_TOL
}

fn on_boundary(poly: &[Vec2], p: &Vec2) -> bool {
    (0..poly.len()).any(|i| point_segment_distance(&poly[i], &poly[(i + 1) % poly.len()], p) <= BOUNDARY_TOL)
}

/// Crossing-number test with a rightward ray.
pub fn even_odd(poly: &[Vec2], p: &Vec2) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (&poly[i], &poly[(i + 1) % n]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Exact distance from `query` to its k-th nearest point. With
/// `exclude_self`, one point at distance exactly zero is skipped.
pub fn knn_distance(points: &[Vec2], query: &Vec2, k: usize, exclude_self: bool) -> Result<f64, AnalysisError> {
    let needed = if exclude_self { k + 1 } else { k };
    if k == 0 || points.len() < needed {
        return Err(AnalysisError::InsufficientData {
            needed: needed.max(1),
            available: points.len(),
        });
    }
    // Sorted k smallest squared distances.
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    let mut skipped = !exclude_self;
    for p in points {
        let d = (p - query).norm_squared();
        if !skipped && d == 0.0 {
            skipped = true;
            continue;
        }
        if best.len() == k && d >= best[k - 1] {
            continue;
        }
        let at = best.partition_point(|b| *b <= d);
        best.insert(at, d);
        best.truncate(k);
    }
    if best.len() < k {
        return Err(AnalysisError::InsufficientData {
            needed,
            available: points.len(),
        });
    }
    Ok(best[k - 1].sqrt())
}

/// k-NN estimate of `D(P || Q)` in nats over positions.
pub fn kld_spatial(p: &TrajectorySet, q: &TrajectorySet, k: usize) -> Result<f64, AnalysisError> {
    kld_points(&p.positions(), &q.positions(), k, default_workers())
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |w| w.get())
}

/// As [`kld_spatial`] on raw positions. Per-point terms are summed in input
/// order, so `workers` never changes the result.
pub fn kld_points(ps: &[Vec2], qs: &[Vec2], k: usize, workers: usize) -> Result<f64, AnalysisError> {
    let (n, m) = (ps.len(), qs.len());
    if k == 0 {
        return Err(AnalysisError::Invalid("k must be at least 1".into()));
    }
    if n < k + 1 || n < 2 {
        return Err(AnalysisError::InsufficientData {
            needed: (k + 1).max(2),
            available: n,
        });
    }
    if m < k {
        return Err(AnalysisError::InsufficientData { needed: k, available: m });
    }
    // Comparing a set with itself excludes the query point from both sides.
    let same = ps == qs;
    let terms = ordered_map(ps, workers, |x| -> Result<f64, AnalysisError> {
        let r = knn_distance(ps, x, k, true)?.max(DISTANCE_EPSILON);
        let s = knn_distance(qs, x, k, same)?.max(DISTANCE_EPSILON);
        Ok((s / r).ln())
    });
    let mut sum = 0.0;
    for t in terms {
        sum += t?;
    }
    Ok(DIM / n as f64 * sum + (m as f64 / (n as f64 - 1.0)).ln())
}

fn nn_distances(xs: &[Vec2], ys: &[Vec2], workers: usize) -> Result<Vec<f64>, AnalysisError> {
    if xs.is_empty() || ys.is_empty() {
        return Err(AnalysisError::InsufficientData {
            needed: 1,
            available: xs.len().min(ys.len()),
        });
    }
    Ok(ordered_map(xs, workers, |x| {
        ys.iter().map(|y| (y - x).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
    }))
}

/// Mean distance from each point of `x` to its nearest point in `y`.
pub fn mean_nn_error(x: &TrajectorySet, y: &TrajectorySet) -> Result<f64, AnalysisError> {
    let d = nn_distances(&x.positions(), &y.positions(), default_workers())?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Root-mean-square of the same nearest-neighbor distances.
pub fn rms_nn_error(x: &TrajectorySet, y: &TrajectorySet) -> Result<f64, AnalysisError> {
    let d = nn_distances(&x.positions(), &y.positions(), default_workers())?;
    Ok((d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt())
}

/// Splits a trajectory by section polygons. A point on a shared edge goes
/// to the first-listed section; points in no section go to [`RESIDUAL`].
/// Every section and the residual bucket are present, possibly empty.
pub fn sectionize(traj: &TrajectorySet, sections: &[SectionSpec]) -> BTreeMap<String, TrajectorySet> {
    let polys: Vec<Vec<Vec2>> = sections.iter().map(SectionSpec::vertices).collect();
    let mut out: BTreeMap<String, TrajectorySet> = sections
        .iter()
        .map(|s| s.name.clone())
        .chain(std::iter::once(RESIDUAL.to_string()))
        .map(|name| (name, TrajectorySet::new(traj.team.clone(), Vec::new())))
        .collect();
    for tp in &traj.points {
        let p = Vec2::new(tp.x, tp.y);
        let owner = polys
            .iter()
            .position(|v| on_boundary(v, &p) || even_odd(v, &p))
            .map_or(RESIDUAL, |i| sections[i].name.as_str());
        out.get_mut(owner).expect("bucket exists").points.push(*tp);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionCell {
    /// [`FULL_ROUTE`], a section name, or [`RESIDUAL`].
    pub scope: String,
    pub n: usize,
    pub m: usize,
    /// `D(row || column)`; `None` when flagged.
    pub kld: Option<f64>,
    pub insufficient_data: bool,
    /// Mean nearest-neighbor distance from the row team to the column team.
    pub mean_error: Option<f64>,
    /// Root-mean-square of the same distances.
    pub rms_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub row: String,
    pub column: String,
    pub cells: Vec<SectionCell>,
}

impl PairReport {
    pub fn cell(&self, scope: &str) -> Option<&SectionCell> {
        self.cells.iter().find(|c| c.scope == scope)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub teams: Vec<String>,
    pub k: usize,
    pub min_samples: usize,
    pub scopes: Vec<String>,
    /// Upper triangle, row-major: (0,1), (0,2), ..., (1,2), ...
    pub pairs: Vec<PairReport>,
}

impl SimilarityReport {
    pub fn pair(&self, a: &str, b: &str) -> Option<&PairReport> {
        self.pairs
            .iter()
            .find(|p| (p.row == a && p.column == b) || (p.row == b && p.column == a))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One matrix per scope: rows and columns are teams, each upper cell
    /// reads `kld (mean)`, and the diagonal is `-`.
    pub fn to_text(&self) -> String {
        let width = self
            .teams
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(16);
        let mut out = String::new();
        for scope in &self.scopes {
            let _ = writeln!(out, "[{scope}] KLD in nats (mean nearest-neighbor error in m)");
            let _ = write!(out, "{:width$}", "");
            for t in &self.teams {
                let _ = write!(out, " {t:>width$}");
            }
            out.push('\n');
            for (i, a) in self.teams.iter().enumerate() {
                let _ = write!(out, "{a:width$}");
                for (j, b) in self.teams.iter().enumerate() {
                    let text = if i == j {
                        "-".to_string()
                    } else if j < i {
                        String::new()
                    } else {
                        match self.pair(a, b).and_then(|p| p.cell(scope)) {
                            Some(c) if c.insufficient_data => {
                                c.rms_error.map_or("n/a".to_string(), |v| format!("rmse {v:.2}"))
                            }
                            Some(c) => {
                                let kld = c.kld.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                                let mean = c.mean_error.map_or("n/a".to_string(), |v| format!("{v:.2}"));
                                format!("{kld} ({mean})")
                            }
                            None => String::new(),
                        }
                    };
                    let _ = write!(out, " {text:>width$}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        if self.pairs.iter().flat_map(|p| &p.cells).any(|c| c.insufficient_data) {
            let _ = writeln!(
                out,
                "rmse: fewer than {} samples on a side, nearest-neighbor RMS error reported instead of KLD",
                self.min_samples
            );
        }
        out
    }
}

fn cell(scope: &str, p: &TrajectorySet, q: &TrajectorySet, k: usize, min_samples: usize, workers: usize) -> SectionCell {
    let (ps, qs) = (p.positions(), q.positions());
    let (n, m) = (ps.len(), qs.len());
    let enough = n >= min_samples.max(k + 1) && m >= min_samples.max(k);
    let kld = if enough { kld_points(&ps, &qs, k, workers).ok() } else { None };
    let nn = nn_distances(&ps, &qs, workers).ok();
    let mean_error = nn.as_ref().map(|d| d.iter().sum::<f64>() / d.len() as f64);
    let rms_error = nn.as_ref().map(|d| (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt());
    SectionCell {
        scope: scope.to_string(),
        n,
        m,
        insufficient_data: kld.is_none(),
        kld,
        mean_error,
        rms_error,
    }
}

/// Every unordered team pair over the full route, each section, and the
/// residual bucket.
pub fn pairwise_report(
    sets: &[TrajectorySet],
    sections: &[SectionSpec],
    k: usize,
    min_samples: usize,
) -> Result<SimilarityReport, AnalysisError> {
    pairwise_report_with_workers(sets, sections, k, min_samples, default_workers())
}

pub fn pairwise_report_with_workers(
    sets: &[TrajectorySet],
    sections: &[SectionSpec],
    k: usize,
    min_samples: usize,
    workers: usize,
) -> Result<SimilarityReport, AnalysisError> {
    if sets.len() < 2 {
        return Err(AnalysisError::Invalid(format!("need at least 2 trajectory sets, got {}", sets.len())));
    }
    if k == 0 {
        return Err(AnalysisError::Invalid("k must be at least 1".into()));
    }
    for s in sections {
        s.validate()?;
    }
    for (i, s) in sections.iter().enumerate() {
        if sections[..i].iter().any(|o| o.name == s.name) {
            return Err(AnalysisError::InvalidSection {
                name: s.name.clone(),
                reason: "duplicate name".into(),
            });
        }
    }
    for (i, s) in sets.iter().enumerate() {
        if sets[..i].iter().any(|o| o.team == s.team) {
            return Err(AnalysisError::Invalid(format!("team `{}` appears twice", s.team)));
        }
    }
    let mut scopes = vec![FULL_ROUTE.to_string()];
    scopes.extend(sections.iter().map(|s| s.name.clone()));
    if !sections.is_empty() {
        scopes.push(RESIDUAL.to_string());
    }
    let split: Vec<BTreeMap<String, TrajectorySet>> = sets.iter().map(|s| sectionize(s, sections)).collect();
    let mut pairs = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let cells = scopes
                .iter()
                .map(|scope| {
                    if scope == FULL_ROUTE {
                        cell(scope, &sets[i], &sets[j], k, min_samples, workers)
                    } else {
                        cell(scope, &split[i][scope], &split[j][scope], k, min_samples, workers)
                    }
                })
                .collect();
            pairs.push(PairReport {
                row: sets[i].team.clone(),
                column: sets[j].team.clone(),
                cells,
            });
        }
    }
    Ok(SimilarityReport {
        teams: sets.iter().map(|s| s.team.clone()).collect(),
        k,
        min_samples,
        scopes,
        pairs,
    })
}

/// Section list as read from a TOML file of `[[sections]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionFile {
    #[serde(default)]
    pub sections: Vec<SectionSpec>,
}

impl SectionFile {
    pub fn from_toml(text: &str) -> Result<Self, AnalysisError> {
        let f: SectionFile = toml::from_str(text).map_err(|e| AnalysisError::Parse {
            line: e.span().map_or(0, |sp| text[..sp.start].lines().count().max(1) as u64),
            message: e.message().to_string(),
        })?;
        for s in &f.sections {
            s.validate()?;
        }
        Ok(f)
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    team: String,
    t: f64,
    x: f64,
    y: f64,
}

/// Parses `team,t,x,y` rows into one set per team, in order of first
/// appearance. Errors carry the 1-based file line.
pub fn read_trajectories_csv(text: &str) -> Result<Vec<TrajectorySet>, AnalysisError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| AnalysisError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["team", "t", "x", "y"] {
        return Err(AnalysisError::Parse {
            line: 1,
            message: format!("expected header `team,t,x,y`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut sets: Vec<TrajectorySet> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| AnalysisError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: CsvRow = rec.deserialize(None).map_err(|e| AnalysisError::Parse {
            line,
            message: e.to_string(),
        })?;
        if !(row.t.is_finite() && row.x.is_finite() && row.y.is_finite()) {
            return Err(AnalysisError::Parse {
                line,
                message: "non-finite value".into(),
            });
        }
        let point = TrajPoint { t: row.t, x: row.x, y: row.y };
        match sets.iter_mut().find(|s| s.team == row.team) {
            Some(s) => s.points.push(point),
            None => sets.push(TrajectorySet::new(row.team, vec![point])),
        }
    }
    Ok(sets)
}

pub fn write_trajectories_csv(sets: &[TrajectorySet]) -> String {
    let mut out = String::from("team,t,x,y\n");
    for s in sets {
        for p in &s.points {
            let _ = writeln!(out, "{},{},{},{}", s.team, p.t, p.x, p.y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, mean: (f64, f64), seed: u64) -> TrajectorySet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec2> = (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                Vec2::new(x + mean.0, y + mean.1)
            })
            .collect();
        TrajectorySet::from_positions("g", &pts)
    }

    fn square(name: &str, x0: f64, x1: f64) -> SectionSpec {
        SectionSpec {
            name: name.into(),
            kind: SectionKind::Straight,
            polygon: vec![[x0, 0.0], [x1, 0.0], [x1, 1.0], [x0, 1.0]],
        }
    }

    #[test]
    fn knn_hand_case() {
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(3.0, 0.0)];
        assert_eq!(knn_distance(&pts, &Vec2::zeros(), 1, true).unwrap(), 1.0);
        assert_eq!(knn_distance(&pts, &Vec2::zeros(), 1, false).unwrap(), 0.0);
        assert_eq!(knn_distance(&pts, &Vec2::zeros(), 2, true).unwrap(), 3.0);
        assert!(matches!(knn_distance(&pts, &Vec2::zeros(), 3, true), Err(AnalysisError::InsufficientData { .. })));
        assert!(matches!(knn_distance(&pts, &Vec2::zeros(), 4, false), Err(AnalysisError::InsufficientData { .. })));
    }

    #[test]
    fn knn_matches_sorting() {
        let set = gaussian(500, (0.0, 0.0), 4).positions();
        let q = Vec2::new(0.3, -0.2);
        let mut d: Vec<f64> = set.iter().map(|p| (p - q).norm()).collect();
        d.sort_by(f64::total_cmp);
        assert_eq!(knn_distance(&set, &q, 3, false).unwrap(), d[2]);
    }

    #[test]
    fn same_distribution_is_near_zero() {
        let p = gaussian(2000, (0.0, 0.0), 1);
        let q = gaussian(2000, (0.0, 0.0), 2);
        let d = kld_spatial(&p, &q, 1).unwrap();
        assert!(d.abs() < 0.1, "{d}");
    }

    #[test]
    fn shifted_gaussian_matches_closed_form() {
        // KL(N(0, I) || N(mu, I)) = |mu|^2 / 2.
        let p = gaussian(2000, (0.0, 0.0), 1);
        let q = gaussian(2000, (1.0, 0.0), 2);
        let d = kld_spatial(&p, &q, 1).unwrap();
        assert!((d - 0.5).abs() < 0.15, "{d}");
    }

    #[test]
    fn duplicates_use_epsilon() {
        let pts = vec![Vec2::new(0.0, 0.0); 5];
        let p = TrajectorySet::from_positions("a", &pts);
        let d = kld_spatial(&p, &p, 1).unwrap();
        assert!(d.is_finite());
        assert!(d.abs() < 1.0, "{d}");
    }

    #[test]
    fn kld_preconditions() {
        let one = TrajectorySet::from_positions("a", &[Vec2::zeros()]);
        let two = TrajectorySet::from_positions("b", &[Vec2::zeros(), Vec2::new(1.0, 0.0)]);
        assert!(matches!(kld_spatial(&one, &two, 1), Err(AnalysisError::InsufficientData { .. })));
        assert!(matches!(kld_spatial(&two, &one, 2), Err(AnalysisError::InsufficientData { .. })));
    }

    #[test]
    fn mean_error_cases() {
        let line: Vec<Vec2> = (0..50).map(|i| Vec2::new(10.0 * i as f64, 0.0)).collect();
        let shifted: Vec<Vec2> = line.iter().map(|p| p + Vec2::new(0.0, 0.5)).collect();
        let x = TrajectorySet::from_positions("x", &line);
        let y = TrajectorySet::from_positions("y", &shifted);
        assert_eq!(mean_nn_error(&x, &x).unwrap(), 0.0);
        assert_eq!(mean_nn_error(&x, &y).unwrap(), 0.5);
        assert_eq!(rms_nn_error(&x, &y).unwrap(), 0.5);
        let empty = TrajectorySet::new("e", Vec::new());
        assert!(mean_nn_error(&x, &empty).is_err());
    }

    #[test]
    fn sections_and_ties() {
        let secs = [square("a", 0.0, 1.0), square("b", 1.0, 2.0)];
        let t = TrajectorySet::from_positions(
            "t",
            &[Vec2::new(0.5, 0.5), Vec2::new(1.0, 0.5), Vec2::new(1.5, 0.5), Vec2::new(5.0, 5.0)],
        );
        let out = sectionize(&t, &secs);
        assert_eq!(out["a"].len(), 2);
        assert_eq!(out["b"].len(), 1);
        assert_eq!(out[RESIDUAL].len(), 1);
        let swapped = sectionize(&t, &[secs[1].clone(), secs[0].clone()]);
        assert_eq!(swapped["b"].len(), 2);
    }

    #[test]
    fn section_validation() {
        assert!(square("a", 0.0, 1.0).validate().is_ok());
        let bow = SectionSpec {
            name: "bow".into(),
            kind: SectionKind::Curve,
            polygon: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]],
        };
        assert!(bow.validate().is_err());
        let thin = SectionSpec {
            polygon: vec![[0.0, 0.0], [1.0, 0.0]],
            ..bow
        };
        assert!(thin.validate().is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let sets = vec![
            TrajectorySet::new("A", vec![TrajPoint { t: 0.0, x: 1.0, y: 2.0 }]),
            TrajectorySet::new("B", vec![TrajPoint { t: 0.5, x: -1.0, y: 0.25 }]),
        ];
        let text = write_trajectories_csv(&sets);
        assert_eq!(read_trajectories_csv(&text).unwrap(), sets);
        let bad = "team,t,x,y\nA,0,1,2\nA,0.1,oops,2\n";
        match read_trajectories_csv(bad) {
            Err(AnalysisError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_trajectories_csv("a,b\n"), Err(AnalysisError::Parse { line: 1, .. })));
    }

    #[test]
    fn identical_sets_report_zero() {
        let g = gaussian(200, (0.0, 0.0), 9);
        let a = TrajectorySet { team: "A".into(), ..g.clone() };
        let b = TrajectorySet { team: "B".into(), ..g };
        let r = pairwise_report(&[a, b], &[], 1, 50).unwrap();
        let c = r.pairs[0].cell(FULL_ROUTE).unwrap();
        assert_eq!(c.mean_error, Some(0.0));
        assert!(c.kld.unwrap().abs() < 0.05, "{:?}", c.kld);
        assert!(r.to_text().contains("[full]"));
    }
}
