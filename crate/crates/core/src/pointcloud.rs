//! Point clouds, voxel-Gaussian statistics, the sliding-window map store and
//! reflectivity road features.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2, Transform2, Vec2};

/// Smallest eigenvalue after plane-to-plane regularization.
pub const COVARIANCE_EPSILON: f64 = 1e-3;

/// Laplacian high-pass kernel used for road-marking extraction.
pub const SHARPEN_KERNEL: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]];

const VGM_MAGIC: &[u8; 4] = b"VGM1";

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("voxel size must be positive, got {0}")]
    InvalidVoxelSize(f64),
    #[error("reflectivity raster is empty")]
    EmptyRaster,
    #[error("point {index} is invalid: {reason}")]
    InvalidPoint { index: usize, reason: &'static str },
    #[error("malformed map data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Body,
    Map,
}

/// LiDAR return: position in meters plus reflectivity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn xyz(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    fn sort_key(&self) -> [u64; 4] {
        [self.x, self.y, self.z, self.r].map(|v| v.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), PointCloudError> {
        for (index, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(PointCloudError::InvalidPoint {
                    index,
                    reason: "non-finite coordinate",
                });
            }
            if !(0.0..=1.0).contains(&p.r) {
                return Err(PointCloudError::InvalidPoint {
                    index,
                    reason: "reflectivity outside [0, 1]",
                });
            }
        }
        Ok(())
    }

    /// Applies a planar rigid transform to x/y; z and reflectivity are kept.
    pub fn transformed(&self, t: &Transform2, frame: Frame) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = t.apply(&Vec2::new(p.x, p.y));
                LidarPoint::new(q.x, q.y, p.z, p.r)
            })
            .collect();
        PointCloud { points, frame }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelCell {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub count: u64,
}

impl VoxelCell {
    /// Rigidly moves the cell statistics by a planar transform.
    pub fn transformed(&self, t: &Transform2) -> VoxelCell {
        let r = planar_rotation(t.rotation);
        let mean = r * self.mean + Vector3::new(t.translation.x, t.translation.y, 0.0);
        VoxelCell {
            mean,
            covariance: r * self.covariance * r.transpose(),
            count: self.count,
        }
    }
}

pub type VoxelIndex = [i64; 3];

pub(crate) fn planar_rotation(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGaussianGrid {
    pub voxel_size: f64,
    pub cells: BTreeMap<VoxelIndex, VoxelCell>,
}

impl VoxelGaussianGrid {
    pub fn empty(voxel_size: f64) -> Self {
        Self {
            voxel_size,
            cells: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index_of(&self, p: &Vector3<f64>) -> VoxelIndex {
        voxel_index(p, self.voxel_size)
    }

    /// Moves every cell by `t`, re-indexing by the transformed mean.
    pub fn transformed(&self, t: &Transform2) -> VoxelGaussianGrid {
        let mut cells = BTreeMap::new();
        for cell in self.cells.values() {
            let moved = cell.transformed(t);
            cells.insert(voxel_index(&moved.mean, self.voxel_size), moved);
        }
        VoxelGaussianGrid {
            voxel_size: self.voxel_size,
            cells,
        }
    }
}

pub fn voxel_index(p: &Vector3<f64>, voxel_size: f64) -> VoxelIndex {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// Plane-to-plane regularization: keep the eigenvectors, replace the
/// eigenvalues (sorted descending) by `(1, 1, eps)`.
pub fn regularize_covariance(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = [1.0, 1.0, COVARIANCE_EPSILON];
    let mut out = Matrix3::zeros();
    for (rank, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        out += v * v.transpose() * values[rank];
    }
    (out + out.transpose()) * 0.5
}

/// Groups points into cubic voxels and summarizes each voxel as a Gaussian.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGaussianGrid, PointCloudError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(PointCloudError::InvalidVoxelSize(voxel_size));
    }
    if cloud.is_empty() {
        return Err(PointCloudError::EmptyCloud);
    }
    let mut buckets: BTreeMap<VoxelIndex, Vec<LidarPoint>> = BTreeMap::new();
    for p in &cloud.points {
        buckets.entry(voxel_index(&p.xyz(), voxel_size)).or_default().push(*p);
    }
    let mut cells = BTreeMap::new();
    for (index, mut members) in buckets {
        // fixed summation order makes the statistics independent of input order
        members.sort_by_key(LidarPoint::sort_key);
        let n = members.len() as f64;
        let mean = members.iter().map(LidarPoint::xyz).sum::<Vector3<f64>>() / n;
        let mut cov = Matrix3::zeros();
        for p in &members {
            let d = p.xyz() - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        cells.insert(
            index,
            VoxelCell {
                mean,
                covariance: regularize_covariance(&cov),
                count: members.len() as u64,
            },
        );
    }
    Ok(VoxelGaussianGrid { voxel_size, cells })
}

/// Speed-dependent sliding-window radius `base + gain * speed`.
pub fn window_radius(speed: f64, base: f64, gain: f64) -> f64 {
    base + gain * speed.max(0.0)
}

/// Pre-built voxelized map in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStore {
    full_map: VoxelGaussianGrid,
    pub origin: Pose2,
}

impl MapStore {
    pub fn new(full_map: VoxelGaussianGrid, origin: Pose2) -> Self {
        Self { full_map, origin }
    }

    pub fn full_map(&self) -> &VoxelGaussianGrid {
        &self.full_map
    }

    /// Loads a `.vgm` map directly or voxelizes a `.csv` point list.
    pub fn load(path: &Path, voxel_size: f64) -> Result<Self, PointCloudError> {
        let grid = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => voxelize(&read_points_csv(path, Frame::Map)?, voxel_size)?,
            _ => read_vgm(path)?,
        };
        Ok(Self::new(grid, Pose2::default()))
    }
}

/// Map cells whose mean lies strictly within `radius` (planar) of `pose`.
pub fn sliding_window(store: &MapStore, pose: &Pose2, radius: f64) -> VoxelGaussianGrid {
    let r2 = radius * radius;
    let cells = store
        .full_map
        .cells
        .iter()
        .filter(|(_, c)| {
            let dx = c.mean.x - pose.x;
            let dy = c.mean.y - pose.y;
            dx * dx + dy * dy < r2
        })
        .map(|(k, c)| (*k, *c))
        .collect();
    VoxelGaussianGrid {
        voxel_size: store.full_map.voxel_size,
        cells,
    }
}

/// Writes a grid in the little-endian `.vgm` layout:
/// magic, voxel size (f64), cell count (u64), then per cell the index
/// (3 x i64), mean (3 x f64), row-major covariance (9 x f64) and count (u64).
pub fn write_vgm(grid: &VoxelGaussianGrid, mut out: impl Write) -> io::Result<()> {
    out.write_all(VGM_MAGIC)?;
    out.write_all(&grid.voxel_size.to_le_bytes())?;
    out.write_all(&(grid.cells.len() as u64).to_le_bytes())?;
    for (index, cell) in &grid.cells {
        for i in index {
            out.write_all(&i.to_le_bytes())?;
        }
        for v in cell.mean.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        for r in 0..3 {
            for c in 0..3 {
                out.write_all(&cell.covariance[(r, c)].to_le_bytes())?;
            }
        }
        out.write_all(&cell.count.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_vgm(grid: &VoxelGaussianGrid, path: &Path) -> io::Result<()> {
    let mut buf = Vec::new();
    write_vgm(grid, &mut buf)?;
    fs::write(path, buf)
}

pub fn decode_vgm(bytes: &[u8]) -> Result<VoxelGaussianGrid, PointCloudError> {
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8], PointCloudError> {
        if cursor.len() < n {
            return Err(PointCloudError::Format("truncated .vgm data".into()));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    if take(4)? != VGM_MAGIC {
        return Err(PointCloudError::Format("bad .vgm magic".into()));
    }
    let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
    let voxel_size = f64_at(take(8)?);
    if !(voxel_size > 0.0) {
        return Err(PointCloudError::InvalidVoxelSize(voxel_size));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let mut cells = BTreeMap::new();
    for _ in 0..count {
        let mut index = [0i64; 3];
        for i in &mut index {
            *i = i64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let mut mean = Vector3::zeros();
        for k in 0..3 {
            mean[k] = f64_at(take(8)?);
        }
        let mut covariance = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                covariance[(r, c)] = f64_at(take(8)?);
            }
        }
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap());
        if n == 0 {
            return Err(PointCloudError::Format(format!("cell {index:?} has zero count")));
        }
        cells.insert(
            index,
            VoxelCell {
                mean,
                covariance,
                count: n,
            },
        );
    }
    if !cursor.is_empty() {
        return Err(PointCloudError::Format("trailing bytes after cell records".into()));
    }
    Ok(VoxelGaussianGrid { voxel_size, cells })
}

pub fn read_vgm(path: &Path) -> Result<VoxelGaussianGrid, PointCloudError> {
    decode_vgm(&fs::read(path)?)
}

/// Reads `x,y,z,r` rows; a header line and blank lines are skipped.
pub fn read_points_csv(path: &Path, frame: Frame) -> Result<PointCloud, PointCloudError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('x') || line.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match vals {
            Ok(v) if v.len() == 4 => points.push(LidarPoint::new(v[0], v[1], v[2], v[3])),
            _ => {
                return Err(PointCloudError::Format(format!(
                    "{}: line {} is not x,y,z,r",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    let cloud = PointCloud::new(points, frame);
    cloud.validate()?;
    Ok(cloud)
}

pub fn write_points_csv(cloud: &PointCloud, path: &Path) -> io::Result<()> {
    let mut out = String::with_capacity(cloud.len() * 40);
    out.push_str("x,y,z,r\n");
    for p in &cloud.points {
        out.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.z, p.r));
    }
    fs::write(path, out)
}

/// Row-major 2-D reflectivity raster (`values[row * width + col]`, row = y).
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectivityRaster {
    pub origin: Vec2,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ReflectivityRaster {
    pub fn new(origin: Vec2, cell_size: f64, width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        Self {
            origin,
            cell_size,
            width,
            height,
            values,
        }
    }

    /// Rasterizes ordered points by averaging reflectivity per cell; empty
    /// cells read zero.
    pub fn from_points(points: &[LidarPoint], cell_size: f64) -> Result<Self, PointCloudError> {
        if points.is_empty() {
            return Err(PointCloudError::EmptyRaster);
        }
        let min_x = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let min_y = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_x = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let max_y = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        let width = ((max_x - min_x) / cell_size).floor() as usize + 1;
        let height = ((max_y - min_y) / cell_size).floor() as usize + 1;
        let mut sum = vec![0.0; width * height];
        let mut count = vec![0u32; width * height];
        for p in points {
            let c = (((p.x - min_x) / cell_size).floor() as usize).min(width - 1);
            let r = (((p.y - min_y) / cell_size).floor() as usize).min(height - 1);
            sum[r * width + c] += p.r;
            count[r * width + c] += 1;
        }
        let values = sum
            .iter()
            .zip(&count)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect();
        Ok(Self::new(Vec2::new(min_x, min_y), cell_size, width, height, values))
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        self.origin + Vec2::new(col as f64 + 0.5, row as f64 + 0.5) * self.cell_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadFeature {
    pub x: f64,
    pub y: f64,
    pub strength: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadFeatureSet {
    pub features: Vec<RoadFeature>,
}

impl RoadFeatureSet {
    /// `x,y,strength` rows, usable as a lane-marking polyline fixture.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,strength\n");
        for f in &self.features {
            out.push_str(&format!("{},{},{}\n", f.x, f.y, f.strength));
        }
        out
    }
}

/// Convolves the raster with [`SHARPEN_KERNEL`] (edge cells replicate their
/// border) and keeps cells whose absolute response reaches `threshold`.
pub fn extract_road_features(
    raster: &ReflectivityRaster,
    threshold: f64,
) -> Result<RoadFeatureSet, PointCloudError> {
    if raster.width == 0 || raster.height == 0 {
        return Err(PointCloudError::EmptyRaster);
    }
    let clamp_row = |r: isize| r.clamp(0, raster.height as isize - 1) as usize;
    let clamp_col = |c: isize| c.clamp(0, raster.width as isize - 1) as usize;
    let mut features = Vec::new();
    for row in 0..raster.height {
        for col in 0..raster.width {
            let mut response = 0.0;
            for (kr, krow) in SHARPEN_KERNEL.iter().enumerate() {
                for (kc, w) in krow.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    let r = clamp_row(row as isize + kr as isize - 1);
                    let c = clamp_col(col as isize + kc as isize - 1);
                    response += w * raster.at(r, c);
                }
            }
            if response.abs() >= threshold {
                let center = raster.cell_center(row, col);
                features.push(RoadFeature {
                    x: center.x,
                    y: center.y,
                    strength: response.abs(),
                });
            }
        }
    }
    Ok(RoadFeatureSet { features })
}
