use super::{NetworkConfig, NetworkError, Result};
use crate::geometry::CameraRig;
use crate::tensor::{Tape, Tensor, Var};
use crate::voxel_grid::{fov_mask, VoxelGridSpec};

/// Pseudo-LiDAR feature volume `[C, X, Y, Z]` over `spec`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVolume {
    pub values: Var,
    pub spec: VoxelGridSpec,
}

/// Per-voxel sampling locations in feature-map pixels (x-major voxel
/// order); `None` for voxels outside the field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct PlumeTaps {
    pub left: Vec<Option<(f64, f64)>>,
    pub right: Vec<Option<(f64, f64)>>,
    pub mask: Vec<bool>,
}

/// Projects every voxel center of `spec` into both feature maps. `rig` is
/// the full-resolution rig; features at `factor`× lower resolution use its
/// rescaled intrinsics. The FOV mask is decided at full resolution.
pub fn plume_taps(spec: &VoxelGridSpec, rig: &CameraRig, factor: usize, require_both: bool) -> Result<PlumeTaps> {
    let (nx, ny, nz) = spec.grid_dims()?;
    let mask = fov_mask(spec, rig, require_both);
    let frig = rig.rescaled(factor);
    let n = nx * ny * nz;
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let idx = spec.flat_index(i, j, k);
                if !mask[idx] {
                    left.push(None);
                    right.push(None);
                    continue;
                }
                let p = spec.center_unchecked(i, j, k);
                let l = frig
                    .project_to_image(p)
                    .map_err(|e| NetworkError::RigMismatch(e.to_string()))?;
                let r = frig
                    .project_to_right(p)
                    .map_err(|e| NetworkError::RigMismatch(e.to_string()))?;
                left.push(Some((l.u, l.v)));
                right.push(Some((r.u, r.v)));
            }
        }
    }
    Ok(PlumeTaps { left, right, mask })
}

fn check_features(tape: &Tape, left: Var, right: Var, rig: &CameraRig, factor: usize) -> Result<usize> {
    let ls = tape.shape(left);
    if ls.len() != 3 || ls != tape.shape(right) {
        return Err(NetworkError::ShapeMismatch(format!(
            "stereo feature maps must share a [C, H, W] shape, got {ls:?} and {:?}",
            tape.shape(right)
        )));
    }
    let frig = rig.rescaled(factor);
    if (ls[1], ls[2]) != (frig.image_h, frig.image_w) {
        return Err(NetworkError::RigMismatch(format!(
            "feature maps are {}x{} but the rig at 1/{factor} resolution is {}x{}",
            ls[1], ls[2], frig.image_h, frig.image_w
        )));
    }
    Ok(ls[0])
}

fn gather_pair(tape: &mut Tape, left: Var, right: Var, taps: &PlumeTaps) -> Result<Var> {
    let l = tape.bilinear_gather(left, &taps.left)?;
    let r = tape.bilinear_gather(right, &taps.right)?;
    Ok(tape.concat(&[l, r], 0)?)
}

/// Samples both feature maps at every voxel center's projections and stacks
/// `[left | right | (x, y, z)?]` into a `[C, X, Y, Z]` volume. Voxels outside
/// the field of view get all-zero features.
pub fn build_plume(
    tape: &mut Tape,
    left: Var,
    right: Var,
    grid: &VoxelGridSpec,
    rig: &CameraRig,
    cfg: &NetworkConfig,
) -> Result<FeatureVolume> {
    let factor = cfg.image_feature_resolution.factor();
    check_features(tape, left, right, rig, factor)?;
    let (nx, ny, nz) = grid.grid_dims()?;
    let taps = plume_taps(grid, rig, factor, cfg.require_both_cameras)?;
    let mut stacked = gather_pair(tape, left, right, &taps)?;
    if cfg.concat_voxel_coords {
        let n = nx * ny * nz;
        let mut coords = vec![0.0; 3 * n];
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let idx = grid.flat_index(i, j, k);
                    if taps.mask[idx] {
                        let p = grid.center_unchecked(i, j, k);
                        coords[idx] = p.x;
                        coords[n + idx] = p.y;
                        coords[2 * n + idx] = p.z;
                    }
                }
            }
        }
        let c = tape.constant(Tensor::new(vec![3, n], coords)?);
        stacked = tape.concat(&[stacked, c], 0)?;
    }
    let channels = tape.shape(stacked)[0];
    let values = tape.reshape(stacked, &[channels, nx, ny, nz])?;
    Ok(FeatureVolume { values, spec: *grid })
}

/// Warps both feature maps into the grid, weights every voxel by its
/// predicted occupancy, sums over height and appends the result to the BEV
/// features: `[C_bev + 2C, X, Z]`.
pub fn image_feature_fusion(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    left: Var,
    right: Var,
    occupancy: Var,
    bev: Var,
    rig: &CameraRig,
) -> Result<Var> {
    if !cfg.fusion_enabled {
        return Err(NetworkError::InvalidConfig("image feature fusion is disabled".into()));
    }
    let factor = cfg.image_feature_resolution.factor();
    let c = check_features(tape, left, right, rig, factor)?;
    let grid = &cfg.grid;
    let (nx, ny, nz) = grid.grid_dims()?;
    let n = nx * ny * nz;
    if tape.data(occupancy).len() != n {
        return Err(NetworkError::ShapeMismatch(format!(
            "occupancy {:?} does not cover the {nx}x{ny}x{nz} grid",
            tape.shape(occupancy)
        )));
    }
    let bs = tape.shape(bev).to_vec();
    if bs.len() != 3 || (bs[1], bs[2]) != (nx, nz) {
        return Err(NetworkError::ShapeMismatch(format!(
            "BEV features {bs:?} do not match grid {nx}x{nz}"
        )));
    }
    let taps = plume_taps(grid, rig, factor, cfg.require_both_cameras)?;
    let vol = gather_pair(tape, left, right, &taps)?;
    let occ = tape.reshape(occupancy, &[n])?;
    let weighted = tape.mul_broadcast(vol, occ)?;
    let weighted = tape.reshape(weighted, &[2 * c, nx, ny, nz])?;
    let summed = tape.sum_axis(weighted, 2)?;
    Ok(tape.concat(&[bev, summed], 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::networks::tests::{toy_config, toy_rig};
    use crate::networks::FeatureResolution;

    /// Channels 0/1 hold the pixel's own u/v, so bilinear sampling returns
    /// the projected coordinates exactly.
    fn coordinate_map(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[2, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            if c == 0 {
                (p % w) as f64
            } else {
                (p / w) as f64
            }
        })
    }

    #[test]
    fn samples_land_on_projections() {
        let cfg = NetworkConfig {
            concat_voxel_coords: true,
            ..toy_config()
        };
        let rig = toy_rig();
        let mut tape = Tape::new();
        let l = tape.constant(coordinate_map(16, 32));
        let r = tape.constant(coordinate_map(16, 32));
        let vol = build_plume(&mut tape, l, r, &cfg.grid, &rig, &cfg).unwrap();
        let (nx, ny, nz) = cfg.grid.grid_dims().unwrap();
        assert_eq!(tape.shape(vol.values), &[7, nx, ny, nz]);
        let d = tape.data(vol.values);
        let n = nx * ny * nz;
        let mut inside = 0;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let idx = (i * ny + j) * nz + k;
                    let p = Point3 {
                        x: cfg.grid.x_range[0] + (i as f64 + 0.5) * 0.2,
                        y: cfg.grid.y_range[0] + (j as f64 + 0.5) * 0.2,
                        z: cfg.grid.z_range[0] + (k as f64 + 0.5) * 0.2,
                    };
                    let ul = 20.0 * p.x / p.z + 15.5;
                    let v = 20.0 * p.y / p.z + 7.5;
                    let ur = ul - 20.0 * 0.5 / p.z;
                    let vis = (0.0..=31.0).contains(&ul) && (0.0..=31.0).contains(&ur) && (0.0..=15.0).contains(&v);
                    let got: Vec<f64> = (0..7).map(|c| d[c * n + idx]).collect();
                    if vis {
                        inside += 1;
                        let want = [ul, v, ur, v, p.x, p.y, p.z];
                        for (g, w) in got.iter().zip(want) {
                            assert!((g - w).abs() < 1e-9, "{got:?} vs {want:?}");
                        }
                    } else {
                        assert!(got.iter().all(|&g| g == 0.0));
                    }
                }
            }
        }
        assert!(inside > 0 && inside < n);
    }

    #[test]
    fn lower_resolution_uses_scaled_intrinsics() {
        let cfg = NetworkConfig {
            image_feature_resolution: FeatureResolution::Half,
            ..toy_config()
        };
        let rig = toy_rig();
        let mut tape = Tape::new();
        let l = tape.constant(coordinate_map(8, 16));
        let r = tape.constant(coordinate_map(8, 16));
        let vol = build_plume(&mut tape, l, r, &cfg.grid, &rig, &cfg).unwrap();
        let full = plume_taps(&cfg.grid, &rig, 1, true).unwrap();
        let d = tape.data(vol.values);
        let n = full.mask.len();
        for (idx, t) in full.left.iter().enumerate() {
            if let Some((u, v)) = t {
                assert!((d[idx] - u / 2.0).abs() < 1e-9);
                assert!((d[n + idx] - v / 2.0).abs() < 1e-9);
            } else {
                assert_eq!(d[idx], 0.0);
                assert_eq!(d[2 * n + idx], 0.0);
            }
        }
        let wrong = tape.constant(coordinate_map(16, 32));
        assert!(matches!(
            build_plume(&mut tape, wrong, wrong, &cfg.grid, &rig, &cfg),
            Err(NetworkError::RigMismatch(_))
        ));
    }

    #[test]
    fn fusion_sums_occupancy_weighted_features() {
        let cfg = NetworkConfig {
            fusion_enabled: true,
            ..toy_config()
        };
        let rig = toy_rig();
        let (nx, ny, nz) = cfg.grid.grid_dims().unwrap();
        let n = nx * ny * nz;
        let mut tape = Tape::new();
        let l = tape.constant(coordinate_map(16, 32));
        let r = tape.constant(coordinate_map(16, 32));
        let bev = tape.constant(Tensor::full(&[3, nx, nz], 7.0));
        let ones = tape.constant(Tensor::full(&[nx, ny, nz], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[nx, ny, nz]));
        let full = image_feature_fusion(&mut tape, &cfg, l, r, ones, bev, &rig).unwrap();
        let none = image_feature_fusion(&mut tape, &cfg, l, r, zeros, bev, &rig).unwrap();
        assert_eq!(tape.shape(full), &[7, nx, nz]);
        let vol = build_plume(&mut tape, l, r, &cfg.grid, &rig, &cfg).unwrap();
        let v = tape.data(vol.values).to_vec();
        let f = tape.data(full);
        let m = nx * nz;
        assert!(f[..3 * m].iter().all(|&x| x == 7.0));
        for c in 0..4 {
            for i in 0..nx {
                for k in 0..nz {
                    let want: f64 = (0..ny).map(|j| v[c * n + (i * ny + j) * nz + k]).sum();
                    assert!((f[(3 + c) * m + i * nz + k] - want).abs() < 1e-9);
                }
            }
        }
        assert!(tape.data(none)[3 * m..].iter().all(|&x| x == 0.0));
        let off = toy_config();
        assert!(image_feature_fusion(&mut tape, &off, l, r, ones, bev, &rig).is_err());
    }
}
