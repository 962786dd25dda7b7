//! Voxelizes a synthetic point cloud and reports how much of the grid the
//! cameras can see.

use plumenet::data_io::{synth_scene, SyntheticSceneSpec};
use plumenet::geometry::Point3;
use plumenet::voxel_grid::{occupancy_from_points, VoxelGridSpec};

fn main() {
    let kitti = VoxelGridSpec::kitti();
    println!(
        "KITTI grid {:?} voxels {}",
        kitti.grid_dims().unwrap(),
        kitti.num_voxels()
    );

    let scene = synth_scene(&SyntheticSceneSpec::toy(3)).unwrap();
    let rig = scene.sample.rig;
    let grid = occupancy_from_points(&scene.labels.spec, &rig, &scene.sample.cloud, true);
    let visible = grid.fov_mask.iter().filter(|&&m| m).count();
    println!(
        "toy grid {:?}: {} points, {} occupied, {} of {} voxels in view",
        grid.dims(),
        scene.sample.cloud.len(),
        grid.occupied_count(),
        visible,
        grid.values.len()
    );

    let p = Point3 { x: 1.0, y: 0.5, z: 8.0 };
    let px = rig.project_to_image(p).unwrap();
    println!(
        "point {p:?} -> pixel ({:.2}, {:.2}), disparity {:.3}, voxel {:?}",
        px.u,
        px.v,
        rig.depth_to_disparity(p.z).unwrap(),
        grid.spec.point_to_voxel(p)
    );

    // top-down occupancy, one character per (x, z) column
    let (nx, ny, nz) = grid.dims();
    for k in (0..nz).rev().step_by(4) {
        let row: String = (0..nx)
            .step_by(2)
            .map(|i| match (0..ny).any(|j| grid.get(i, j, k) > 0.5) {
                true => '#',
                false => '.',
            })
            .collect();
        println!("{row}");
    }
}
