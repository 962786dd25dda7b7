//! Metric voxel grid, FOV masks and occupancy labels.
//!
//! Cells are half-open, `[min + i*res, min + (i+1)*res)`, and arrays are laid
//! out x-major: `index = (i * Y + j) * Z + k`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraRig, Point3};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("voxel index ({i}, {j}, {k}) out of bounds for dims {dims:?}")]
    IndexOutOfBounds {
        i: usize,
        j: usize,
        k: usize,
        dims: (usize, usize, usize),
    },
    #[error("grid shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed occupancy file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const OCCUPANCY_MAGIC: &[u8; 4] = b"OCCG";

/// Grid range and resolution. `y` is the camera's (downward) height axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub resolution: f64,
}

fn axis_len(range: [f64; 2], res: f64) -> usize {
    let ratio = (range[1] - range[0]) / res;
    let nearest = ratio.round();
    // 64 / 0.2 evaluates to 320.00000000000006; treat near-integers as exact.
    if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        ratio.ceil() as usize
    }
}

impl VoxelGridSpec {
    /// The detection range used for KITTI: 64 m wide, 60.8 m deep, 3 m tall at 0.2 m.
    pub fn kitti() -> Self {
        Self {
            x_range: [-32.0, 32.0],
            y_range: [-1.0, 2.0],
            z_range: [2.0, 62.8],
            resolution: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(GridError::InvalidSpec(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        for (name, r) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[1] > r[0]) {
                return Err(GridError::InvalidSpec(format!(
                    "{name} range must satisfy min < max, got [{}, {})",
                    r[0], r[1]
                )));
            }
        }
        Ok(())
    }

    /// `(X, Y, Z)` = (width, height, depth) voxel counts.
    pub fn grid_dims(&self) -> Result<(usize, usize, usize), GridError> {
        self.validate()?;
        Ok(self.dims_unchecked())
    }

    pub(crate) fn dims_unchecked(&self) -> (usize, usize, usize) {
        (
            axis_len(self.x_range, self.resolution),
            axis_len(self.y_range, self.resolution),
            axis_len(self.z_range, self.resolution),
        )
    }

    pub fn num_voxels(&self) -> usize {
        let (x, y, z) = self.dims_unchecked();
        x * y * z
    }

    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        let (_, y, z) = self.dims_unchecked();
        (i * y + j) * z + k
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Result<Point3, GridError> {
        let dims = self.grid_dims()?;
        if i >= dims.0 || j >= dims.1 || k >= dims.2 {
            return Err(GridError::IndexOutOfBounds { i, j, k, dims });
        }
        Ok(self.center_unchecked(i, j, k))
    }

    pub(crate) fn center_unchecked(&self, i: usize, j: usize, k: usize) -> Point3 {
        let r = self.resolution;
        Point3 {
            x: self.x_range[0] + (i as f64 + 0.5) * r,
            y: self.y_range[0] + (j as f64 + 0.5) * r,
            z: self.z_range[0] + (k as f64 + 0.5) * r,
        }
    }

    fn axis_index(&self, v: f64, range: [f64; 2], n: usize) -> Option<usize> {
        if !(v >= range[0] && v < range[1]) {
            return None;
        }
        let idx = ((v - range[0]) / self.resolution).floor() as usize;
        Some(idx.min(n - 1))
    }

    /// Voxel containing `p`, or `None` when `p` is outside `[min, max)` on any axis.
    pub fn point_to_voxel(&self, p: Point3) -> Option<(usize, usize, usize)> {
        let (nx, ny, nz) = self.dims_unchecked();
        Some((
            self.axis_index(p.x, self.x_range, nx)?,
            self.axis_index(p.y, self.y_range, ny)?,
            self.axis_index(p.z, self.z_range, nz)?,
        ))
    }

    /// Same grid shifted by whole voxels along each axis.
    pub fn translated(&self, dx: i64, dy: i64, dz: i64) -> Self {
        let r = self.resolution;
        let shift = |range: [f64; 2], d: i64| [range[0] + d as f64 * r, range[1] + d as f64 * r];
        Self {
            x_range: shift(self.x_range, dx),
            y_range: shift(self.y_range, dy),
            z_range: shift(self.z_range, dz),
            resolution: r,
        }
    }
}

/// Per-voxel FOV test at voxel centers.
pub fn fov_mask(spec: &VoxelGridSpec, rig: &CameraRig, require_both_cameras: bool) -> Vec<bool> {
    let (nx, ny, nz) = spec.dims_unchecked();
    let mut mask = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                mask.push(rig.in_fov_with(spec.center_unchecked(i, j, k), require_both_cameras));
            }
        }
    }
    mask
}

/// Occupancy labels (0/1) or probabilities plus the FOV mask deciding which
/// voxels take part in the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: VoxelGridSpec,
    pub values: Vec<f64>,
    pub fov_mask: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(spec: VoxelGridSpec, values: Vec<f64>, fov_mask: Vec<bool>) -> Result<Self, GridError> {
        let n = spec.grid_dims().map(|(x, y, z)| x * y * z)?;
        if values.len() != n || fov_mask.len() != n {
            return Err(GridError::ShapeMismatch(format!(
                "expected {n} voxels, got {} values and {} mask entries",
                values.len(),
                fov_mask.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GridError::ShapeMismatch("occupancy values must lie in [0, 1]".into()));
        }
        Ok(Self { spec, values, fov_mask })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.spec.dims_unchecked()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.spec.flat_index(i, j, k)]
    }

    pub fn occupied_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    /// Voxel IoU of `self >= threshold` against binary `labels`, inside the FOV.
    pub fn voxel_iou(&self, labels: &OccupancyGrid, threshold: f64) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for ((&p, &y), &m) in self.values.iter().zip(&labels.values).zip(&labels.fov_mask) {
            if !m {
                continue;
            }
            let a = p >= threshold;
            let b = y >= 0.5;
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Writes the `OCCG` layout: magic, `u32` X/Y/Z, one byte per voxel
    /// (`round(v * 255)`), then one mask byte per voxel.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        let (x, y, z) = self.dims();
        w.write_all(OCCUPANCY_MAGIC)?;
        for d in [x, y, z] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let bytes: Vec<u8> = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
        let mask: Vec<u8> = self.fov_mask.iter().map(|&m| m as u8).collect();
        w.write_all(&mask)?;
        Ok(())
    }

    /// Reads an `OCCG` file. The byte layout carries no metric range, so the
    /// caller supplies the spec and the dims are checked against it.
    pub fn read_from<R: Read>(mut r: R, spec: VoxelGridSpec) -> Result<Self, GridError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != OCCUPANCY_MAGIC {
            return Err(GridError::Malformed("bad magic".into()));
        }
        let dim = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
        let dims = (dim(4), dim(8), dim(12));
        if dims != spec.grid_dims()? {
            return Err(GridError::ShapeMismatch(format!(
                "file dims {dims:?} do not match spec dims {:?}",
                spec.dims_unchecked()
            )));
        }
        let n = dims.0 * dims.1 * dims.2;
        let mut values = vec![0u8; n];
        r.read_exact(&mut values)?;
        let mut mask = vec![0u8; n];
        r.read_exact(&mut mask)?;
        Ok(Self {
            spec,
            values: values.into_iter().map(|b| b as f64 / 255.0).collect(),
            fov_mask: mask.into_iter().map(|b| b != 0).collect(),
        })
    }
}

/// Binary occupancy: a voxel is 1 when at least one point falls in its cell.
pub fn occupancy_from_points(
    spec: &VoxelGridSpec,
    rig: &CameraRig,
    cloud: &[Point3],
    require_both_cameras: bool,
) -> OccupancyGrid {
    let mut values = vec![0.0; spec.num_voxels()];
    for p in cloud {
        if let Some((i, j, k)) = spec.point_to_voxel(*p) {
            values[spec.flat_index(i, j, k)] = 1.0;
        }
    }
    OccupancyGrid {
        spec: *spec,
        values,
        fov_mask: fov_mask(spec, rig, require_both_cameras),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> VoxelGridSpec {
        VoxelGridSpec {
            x_range: [-1.0, 1.0],
            y_range: [0.0, 1.0],
            z_range: [1.0, 3.0],
            resolution: 0.2,
        }
    }

    fn rig() -> CameraRig {
        CameraRig::new(50.0, 50.0, 32.0, 16.0, 0.3, 64, 32).unwrap()
    }

    #[test]
    fn kitti_dims() {
        assert_eq!(VoxelGridSpec::kitti().grid_dims().unwrap(), (320, 15, 304));
    }

    #[test]
    fn ceil_convention() {
        let s = VoxelGridSpec {
            x_range: [0.0, 1.0],
            y_range: [0.0, 1.0],
            z_range: [0.0, 1.0],
            resolution: 1.0,
        };
        assert_eq!(s.grid_dims().unwrap(), (1, 1, 1));
        let s = VoxelGridSpec { resolution: 0.3, ..s };
        // cells [0,.3) [.3,.6) [.6,.9) [.9,1.2) are needed to cover [0, 1)
        let covering = (0..10).filter(|i| (*i as f64) * 0.3 < 1.0).count();
        assert_eq!(covering, 4);
        assert_eq!(s.grid_dims().unwrap(), (4, 4, 4));
    }

    #[test]
    fn invalid_specs() {
        let mut s = small_spec();
        s.resolution = 0.0;
        assert!(matches!(s.grid_dims(), Err(GridError::InvalidSpec(_))));
        let mut s = small_spec();
        s.y_range = [1.0, 1.0];
        assert!(s.grid_dims().is_err());
    }

    #[test]
    fn voxel_center_examples() {
        let s = VoxelGridSpec::kitti();
        let c = s.voxel_center(0, 0, 0).unwrap();
        assert!((c.x + 31.9).abs() < 1e-12);
        assert!(matches!(
            s.voxel_center(320, 0, 0),
            Err(GridError::IndexOutOfBounds { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = Point3::new(
                rng.gen_range(-32.0..32.0),
                rng.gen_range(-1.0..2.0),
                rng.gen_range(2.0..62.8),
            );
            let (i, j, k) = s.point_to_voxel(p).unwrap();
            let c = s.voxel_center(i, j, k).unwrap();
            assert_eq!(s.point_to_voxel(c), Some((i, j, k)));
        }
    }

    #[test]
    fn global_max_boundary_discarded() {
        let s = small_spec();
        assert_eq!(s.point_to_voxel(Point3::new(1.0, 0.5, 2.0)), None);
        assert_eq!(s.point_to_voxel(Point3::new(-1.0, 0.0, 1.0)), Some((0, 0, 0)));
    }

    #[test]
    fn occupancy_examples() {
        let s = small_spec();
        let g = occupancy_from_points(&s, &rig(), &[], true);
        assert!(g.values.iter().all(|&v| v == 0.0));

        let c = s.voxel_center(3, 2, 5).unwrap();
        let g = occupancy_from_points(&s, &rig(), &[c], true);
        assert_eq!(g.occupied_count(), 1);
        assert_eq!(g.get(3, 2, 5), 1.0);
    }

    #[test]
    fn fov_mask_examples() {
        let s = VoxelGridSpec {
            x_range: [-1.0, 1.0],
            y_range: [-1.0, 1.0],
            z_range: [-2.0, 2.0],
            resolution: 0.5,
        };
        let huge = CameraRig::new(1.0, 1.0, 5e5, 5e5, 0.1, 1_000_000, 1_000_000).unwrap();
        let mask = fov_mask(&s, &huge, true);
        let (nx, ny, nz) = s.grid_dims().unwrap();
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let c = s.voxel_center(i, j, k).unwrap();
                    assert_eq!(mask[s.flat_index(i, j, k)], c.z > 0.0);
                }
            }
        }
    }

    #[test]
    fn occupancy_file_round_trip() {
        let s = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cloud: Vec<Point3> = (0..50)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(1.0..3.0),
                )
            })
            .collect();
        let g = occupancy_from_points(&s, &rig(), &cloud, true);
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let (x, y, z) = g.dims();
        assert_eq!(buf.len(), 16 + 2 * x * y * z);
        assert_eq!(&buf[..4], b"OCCG");
        let back = OccupancyGrid::read_from(buf.as_slice(), s).unwrap();
        assert_eq!(back, g);
        assert!(OccupancyGrid::read_from(&buf[..10], s).is_err());
    }
}
