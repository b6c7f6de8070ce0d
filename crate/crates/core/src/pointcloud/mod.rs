//! Point-cloud geometry: camera back-projection into the world frame,
//! workspace pruning, farthest point sampling, and nearest-neighbor lookup.
//!
//! Everything here is a pure function of its inputs.

mod geom;
mod io;

pub use geom::{Mat3, Vec3};
pub use io::{cloud_from_binary, cloud_from_csv, cloud_to_binary, cloud_to_csv};

use crate::diffmath::DiffError;

/// Partial point cloud: world-frame positions in meters and RGB colors in
/// [0, 1], row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Vec<Vec3>) -> Result<Self, DiffError> {
        if positions.len() != colors.len() {
            return Err(DiffError::DimMismatch {
                what: "positions and colors must be row-aligned",
            });
        }
        if !positions.iter().flatten().all(|v| v.is_finite()) {
            return Err(DiffError::InvalidArg {
                what: "positions must be finite",
            });
        }
        if !colors.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)) {
            return Err(DiffError::InvalidArg {
                what: "colors must lie in [0,1]",
            });
        }
        Ok(PointCloud { positions, colors })
    }

    pub fn empty() -> Self {
        PointCloud {
            positions: Vec::new(),
            colors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// N×6 feature rows: [x y z r g b].
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 6);
        for (p, c) in self.positions.iter().zip(&self.colors) {
            out.extend_from_slice(p);
            out.extend_from_slice(c);
        }
        out
    }
}

/// Pinhole camera: vertical field of view, image size, and camera-to-world
/// pose. Square pixels; the horizontal FoV follows from the aspect ratio.
#[derive(Clone, Debug)]
pub struct CameraModel {
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world rotation. Camera frame: +x right, +y down (image v),
    /// +z forward along the optical axis.
    pub rot: Mat3,
    pub pos: Vec3,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), DiffError> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(DiffError::InvalidArg {
                what: "field of view must lie in (0, pi)",
            });
        }
        if !self.rot.is_rotation(1e-9) {
            return Err(DiffError::InvalidArg {
                what: "camera rotation must be orthonormal with det +1",
            });
        }
        Ok(())
    }

    /// Focal length in pixels (vertical).
    pub fn focal(&self) -> f64 {
        self.height as f64 / (2.0 * (self.fov_y / 2.0).tan())
    }

    pub fn principal_point(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    /// Camera looking from `pos` toward `target` with `up` as the world up
    /// direction.
    pub fn look_at(fov_y: f64, width: usize, height: usize, pos: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = geom::normalize(geom::sub(target, pos));
        let right = geom::normalize(geom::cross(forward, up));
        let down = geom::cross(forward, right);
        // columns are the camera axes expressed in world coordinates
        let rot = Mat3::from_cols(right, down, forward);
        CameraModel {
            fov_y,
            width,
            height,
            rot,
            pos,
        }
    }

    /// World point to (u, v, z-depth) in pixel coordinates; `None` when the
    /// point is behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let rel = geom::sub(p, self.pos);
        let cam = self.rot.transpose().mul_vec(rel);
        if cam[2] <= 0.0 {
            return None;
        }
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        Some((cx + f * cam[0] / cam[2], cy + f * cam[1] / cam[2], cam[2]))
    }

    /// Pixel (u, v) with z-depth `d` to a world point.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vec3 {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        let cam = [(u - cx) / f * d, (v - cy) / f * d, d];
        geom::add(self.rot.mul_vec(cam), self.pos)
    }
}

/// Axis-aligned workspace bounds in the world frame.
#[derive(Clone, Copy, Debug)]
pub struct WorkspaceBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl WorkspaceBox {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        assert!(
            min.iter().zip(&max).all(|(a, b)| a < b),
            "workspace box min must be below max per axis"
        );
        WorkspaceBox { min, max }
    }

    /// Strict interior test.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] > self.min[i] && p[i] < self.max[i])
    }
}

/// Pinhole back-projection of a depth + RGB image into a world-frame cloud.
/// Zero depth means "no return" and is skipped, so the output has at most
/// H·W points.
pub fn backproject(
    depth: &[f64],
    rgb: &[Vec3],
    camera: &CameraModel,
) -> Result<PointCloud, DiffError> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    if depth.len() != w * h || rgb.len() != w * h {
        return Err(DiffError::DimMismatch {
            what: "depth/rgb buffers must match camera resolution",
        });
    }
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let d = depth[v * w + u];
            if d <= 0.0 {
                continue;
            }
            positions.push(camera.unproject(u as f64, v as f64, d));
            colors.push(rgb[v * w + u]);
        }
    }
    Ok(PointCloud { positions, colors })
}

/// Keep exactly the points strictly inside the box, order preserved.
pub fn prune(pc: &PointCloud, bounds: &WorkspaceBox) -> PointCloud {
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        if bounds.contains(*p) {
            positions.push(*p);
            colors.push(*c);
        }
    }
    PointCloud { positions, colors }
}

/// Greedy max-min subset selection over positions. The first pick is
/// `seed_index`; every later pick maximizes the distance to the selected
/// set, ties broken by lowest index. Returns selected indices in pick order.
pub fn farthest_point_sample_indices(
    positions: &[Vec3],
    k: usize,
    seed_index: usize,
) -> Result<Vec<u32>, DiffError> {
    let n = positions.len();
    if k == 0 {
        return Err(DiffError::InvalidArg {
            what: "farthest_point_sample requires k >= 1",
        });
    }
    if n == 0 {
        return Err(DiffError::InvalidArg {
            what: "farthest_point_sample on an empty cloud",
        });
    }
    if seed_index >= n {
        return Err(DiffError::InvalidArg {
            what: "farthest_point_sample seed index out of range",
        });
    }
    if k >= n {
        return Ok((0..n as u32).collect());
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut last = seed_index;
    selected.push(seed_index as u32);
    for _ in 1..k {
        let lp = positions[last];
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d2 = geom::dist2(positions[i], lp);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            // strict > keeps the lowest index on ties
            if min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        selected.push(best as u32);
        last = best;
    }
    Ok(selected)
}

/// Cloud-level farthest point sampling; `k >= N` returns the cloud
/// unchanged.
pub fn farthest_point_sample(
    pc: &PointCloud,
    k: usize,
    seed_index: usize,
) -> Result<PointCloud, DiffError> {
    if k >= pc.len() && !pc.is_empty() {
        return Ok(pc.clone());
    }
    let idx = farthest_point_sample_indices(&pc.positions, k, seed_index)?;
    Ok(gather(pc, &idx))
}

/// Rows of `pc` at `idx`, in index order.
pub fn gather(pc: &PointCloud, idx: &[u32]) -> PointCloud {
    PointCloud {
        positions: idx.iter().map(|&i| pc.positions[i as usize]).collect(),
        colors: idx.iter().map(|&i| pc.colors[i as usize]).collect(),
    }
}

/// For each query point, the indices of its k nearest reference points by
/// Euclidean distance, sorted ascending with ties broken by lowest index.
/// Output is row-major M×k.
pub fn knn_gather(
    query: &[Vec3],
    reference: &[Vec3],
    k: usize,
) -> Result<Vec<u32>, DiffError> {
    let n = reference.len();
    if k > n {
        return Err(DiffError::InvalidArg {
            what: "knn_gather requires k <= reference size",
        });
    }
    let mut out = Vec::with_capacity(query.len() * k);
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(n);
    for q in query {
        scratch.clear();
        scratch.extend(
            reference
                .iter()
                .enumerate()
                .map(|(i, p)| (geom::dist2(*q, *p), i as u32)),
        );
        let cmp = |a: &(f64, u32), b: &(f64, u32)| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        };
        if k < n {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        scratch[..k].sort_unstable_by(cmp);
        out.extend(scratch[..k].iter().map(|&(_, i)| i));
    }
    Ok(out)
}
