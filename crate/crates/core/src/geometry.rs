//! Depth-image back-projection, rigid camera-to-world transforms, and
//! voxelization of labeled point clouds.
//!
//! Coordinate conventions used throughout the crate:
//!
//! - Camera frame: +X right, +Y up, +Z forward. Depth images store the
//!   forward (+Z) distance per pixel, not the ray length.
//! - World frame: +Y is vertical (height above the floor). At `yaw = 0`,
//!   `pitch = 0` the camera frame coincides with the world frame, so an
//!   identity pose leaves a cloud unchanged.
//! - Yaw rotates about +Y such that `yaw = pi/2` maps the forward axis
//!   (0,0,1) to (-1,0,0). Positive pitch looks up. A pose transform applies
//!   pitch first, then yaw, then translation.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::SegmentationFrame;

/// Vector in meters. `y` is height.
pub type Vec3 = Vector3<f64>;

/// Default maximum usable depth; readings beyond this are treated as invalid.
pub const DEFAULT_MAX_RANGE_M: f64 = 10.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("image dimensions {got:?} do not match intrinsics {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected an {expected:?} cloud, got {got:?}")]
    WrongFrame { expected: Frame, got: Frame },
    #[error("evidence grid {got:?} does not match map grid {expected:?}")]
    GridMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },
}

/// Pinhole camera model with a single focal length and principal point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        focal_px: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if focal_px <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal length must be positive, got {focal_px}"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            focal_px,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square image with a 90 degree field of view (focal = side / 2).
    pub fn square_fov90(side: usize) -> Self {
        let half = side as f64 / 2.0;
        Self {
            focal_px: half,
            cx: half,
            cy: half,
            width: side,
            height: side,
        }
    }
}

/// Camera pose: position in meters, yaw and pitch in radians.
///
/// Yaw is normalized to `[0, 2*pi)`; pitch is clamped to `[-pi/2, pi/2]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub yaw: f64,
    pub pitch: f64,
}

impl Pose {
    pub fn new(position: Vec3, yaw: f64, pitch: f64) -> Self {
        Self {
            position,
            yaw: normalize_yaw(yaw),
            pitch: pitch.clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), 0.0, 0.0)
    }

    /// Rotation taking egocentric (camera) coordinates to world coordinates.
    pub fn rotation(&self) -> nalgebra::Matrix3<f64> {
        yaw_matrix(self.yaw) * pitch_matrix(self.pitch)
    }

    /// Unit forward vector in the ground plane (ignores pitch).
    pub fn forward(&self) -> Vec3 {
        Vec3::new(-self.yaw.sin(), 0.0, self.yaw.cos())
    }
}

pub fn normalize_yaw(yaw: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut y = yaw % tau;
    if y < 0.0 {
        y += tau;
    }
    y
}

fn yaw_matrix(yaw: f64) -> nalgebra::Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    nalgebra::Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

fn pitch_matrix(pitch: f64) -> nalgebra::Matrix3<f64> {
    let (s, c) = pitch.sin_cos();
    nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

/// Depth image in meters. Zero, negative, non-finite, or beyond-range values
/// are invalid.
#[derive(Debug, Clone)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }
}

/// Flat RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> [f32; 3] {
        self.data[v * self.width + u]
    }
}

/// Which frame a point cloud lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Egocentric,
    Geocentric,
}

/// One back-projected pixel: position, class probabilities, observed color,
/// and the openness attribute of the detection it came from (0 when none).
#[derive(Debug, Clone)]
pub struct CloudPoint {
    pub pos: Vec3,
    pub class_probs: Vec<(u16, f32)>,
    pub rgb: [f32; 3],
    pub openness: f32,
    /// Whether this point carries foreground (object) class evidence; only
    /// such points contribute to a voxel's color and openness when present.
    pub foreground: bool,
}

/// Point cloud with per-point class probability vectors.
///
/// Probability vectors are sparse `(class, p)` pairs; absent classes are
/// zero. Each vector is elementwise nonnegative and sums to at most one
/// (sub-normalized after confidence filtering).
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
    pub frame: Frame,
    pub num_classes: usize,
}

/// Axis-aligned voxel grid. `dims` are voxel counts along world (x, y, z);
/// the y axis (`dims[1]`) is vertical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vec3,
    pub num_classes: usize,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: Vec3, num_classes: usize) -> Self {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        assert!(dims.iter().all(|&d| d >= 1), "grid dims must be >= 1");
        Self {
            dims,
            voxel_size,
            origin,
            num_classes,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    #[inline]
    pub fn unflat(&self, flat: usize) -> [usize; 3] {
        let z = flat % self.dims[2];
        let rest = flat / self.dims[2];
        let y = rest % self.dims[1];
        let x = rest / self.dims[1];
        [x, y, z]
    }

    /// Voxel index of a world point, or `None` when out of bounds. Points
    /// exactly on the far boundary belong to the last voxel.
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let t = (p[a] - self.origin[a]) / self.voxel_size;
            if t < 0.0 {
                return None;
            }
            let mut i = t.floor() as usize;
            if i >= self.dims[a] {
                if t == self.dims[a] as f64 {
                    i = self.dims[a] - 1;
                } else {
                    return None;
                }
            }
            idx[a] = i;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin.x + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin.y + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin.z + (idx[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Ground-plane center of column `(i, k)` at floor height.
    pub fn column_center(&self, i: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin.x + (i as f64 + 0.5) * self.voxel_size,
            self.origin.y,
            self.origin.z + (k as f64 + 0.5) * self.voxel_size,
        )
    }
}

/// Accumulated per-voxel evidence from one observation.
///
/// Semantically this is an `dims x C` probability tensor plus a binary mask
/// that is 1 exactly on occupied voxels; it is stored sparsely because a
/// single frame touches a tiny fraction of the grid. Voxels absent from
/// `entries` have mask 0 and a zero probability vector.
#[derive(Debug, Clone)]
pub struct VoxelEvidence {
    pub dims: [usize; 3],
    pub num_classes: usize,
    /// Sorted by flat voxel index.
    pub entries: Vec<EvidenceEntry>,
    /// Points that fell outside the grid and were dropped.
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct EvidenceEntry {
    pub flat: usize,
    /// Mean class-probability vector of the points in this voxel, sparse.
    pub probs: Vec<(u16, f32)>,
    /// Mean observed color of the points in this voxel.
    pub rgb: [f32; 3],
    /// Mean openness attribute of the points in this voxel.
    pub openness: f32,
}

/// Back-projects a depth image into an egocentric point cloud.
///
/// Every pixel with finite depth in `(0, max_range]` yields one point
/// carrying that pixel's class-probability vector from `seg` (zero when no
/// detection covers the pixel) and its color from `rgb`. Camera math:
/// `x = (u - cx) * d / f`, `z = d`, and `y = -(v - cy) * d / f` so that +Y
/// points up in the output.
pub fn depth_to_pointcloud(
    depth: &DepthImage,
    seg: &SegmentationFrame,
    rgb: &RgbImage,
    intr: &CameraIntrinsics,
    max_range: f64,
) -> Result<PointCloud, GeometryError> {
    for (w, h) in [
        (depth.width, depth.height),
        (seg.width, seg.height),
        (rgb.width, rgb.height),
    ] {
        if (w, h) != (intr.width, intr.height) {
            return Err(GeometryError::DimensionMismatch {
                expected: (intr.width, intr.height),
                got: (w, h),
            });
        }
    }

    let table = seg.rasterize();
    let mut points = Vec::with_capacity(depth.data.len());
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d = depth.at(u, v) as f64;
            if !d.is_finite() || d <= 0.0 || d > max_range {
                continue;
            }
            let x = (u as f64 - intr.cx) * d / intr.focal_px;
            let y = -(v as f64 - intr.cy) * d / intr.focal_px;
            let (class_probs, openness, foreground) = match table.at(u, v) {
                Some(hit) => (
                    vec![(hit.class_id, hit.confidence)],
                    hit.openness,
                    hit.class_id as usize >= seg.background_classes,
                ),
                None => (Vec::new(), 0.0, false),
            };
            points.push(CloudPoint {
                pos: Vec3::new(x, y, d),
                class_probs,
                rgb: rgb.at(u, v),
                openness,
                foreground,
            });
        }
    }
    Ok(PointCloud {
        points,
        frame: Frame::Egocentric,
        num_classes: seg.num_classes,
    })
}

/// Applies the rigid transform of `pose` to an egocentric cloud.
pub fn transform_to_world(cloud: &PointCloud, pose: &Pose) -> Result<PointCloud, GeometryError> {
    if cloud.frame != Frame::Egocentric {
        return Err(GeometryError::WrongFrame {
            expected: Frame::Egocentric,
            got: cloud.frame,
        });
    }
    let rot = pose.rotation();
    let points = cloud
        .points
        .iter()
        .map(|p| CloudPoint {
            pos: rot * p.pos + pose.position,
            class_probs: p.class_probs.clone(),
            rgb: p.rgb,
            openness: p.openness,
            foreground: p.foreground,
        })
        .collect();
    Ok(PointCloud {
        points,
        frame: Frame::Geocentric,
        num_classes: cloud.num_classes,
    })
}

/// Bins a geocentric cloud into voxel evidence.
///
/// Points sharing a voxel average their class vectors, colors, and openness.
/// Out-of-bounds points are dropped and counted in `dropped`.
pub fn voxelize(cloud: &PointCloud, grid: &GridSpec) -> Result<VoxelEvidence, GeometryError> {
    if cloud.frame != Frame::Geocentric {
        return Err(GeometryError::WrongFrame {
            expected: Frame::Geocentric,
            got: cloud.frame,
        });
    }

    struct Accum {
        probs: Vec<f32>,
        rgb: [f64; 3],
        openness: f64,
        count: u32,
        /// Color/openness samples from foreground points; when present they
        /// define the voxel color so boundary voxels do not blend in floor
        /// or wall pixels.
        labeled_rgb: [f64; 3],
        labeled_openness: f64,
        labeled_count: u32,
    }

    let c = grid.num_classes;
    let mut cells: std::collections::HashMap<usize, Accum> = std::collections::HashMap::new();
    let mut dropped = 0usize;
    for p in &cloud.points {
        let Some(idx) = grid.voxel_of(&p.pos) else {
            dropped += 1;
            continue;
        };
        let flat = grid.flat(idx);
        let acc = cells.entry(flat).or_insert_with(|| Accum {
            probs: vec![0.0; c],
            rgb: [0.0; 3],
            openness: 0.0,
            count: 0,
            labeled_rgb: [0.0; 3],
            labeled_openness: 0.0,
            labeled_count: 0,
        });
        for &(cls, prob) in &p.class_probs {
            acc.probs[cls as usize] += prob;
        }
        for ch in 0..3 {
            acc.rgb[ch] += p.rgb[ch] as f64;
        }
        acc.openness += p.openness as f64;
        acc.count += 1;
        if p.foreground {
            for ch in 0..3 {
                acc.labeled_rgb[ch] += p.rgb[ch] as f64;
            }
            acc.labeled_openness += p.openness as f64;
            acc.labeled_count += 1;
        }
    }

    let mut entries: Vec<EvidenceEntry> = cells
        .into_iter()
        .map(|(flat, acc)| {
            let n = acc.count as f32;
            let probs = acc
                .probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(cls, &p)| (cls as u16, p / n))
                .collect();
            let (rgb_sum, open_sum, n) = if acc.labeled_count > 0 {
                (acc.labeled_rgb, acc.labeled_openness, acc.labeled_count)
            } else {
                (acc.rgb, acc.openness, acc.count)
            };
            EvidenceEntry {
                flat,
                probs,
                rgb: [
                    (rgb_sum[0] / n as f64) as f32,
                    (rgb_sum[1] / n as f64) as f32,
                    (rgb_sum[2] / n as f64) as f32,
                ],
                openness: (open_sum / n as f64) as f32,
            }
        })
        .collect();
    entries.sort_by_key(|e| e.flat);

    Ok(VoxelEvidence {
        dims: grid.dims,
        num_classes: c,
        entries,
        dropped,
    })
}

/// Adds zero-mean Gaussian noise to valid depth readings. Off by default in
/// every pipeline; exposed for robustness experiments.
pub fn apply_depth_noise(depth: &mut DepthImage, sigma: f64, rng: &mut impl rand::Rng) {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and nonnegative");
    for d in depth.data.iter_mut() {
        if *d > 0.0 && d.is_finite() {
            *d = (*d as f64 + normal.sample(rng)).max(1e-3) as f32;
        }
    }
}
