//! Lifts a stereo pair into the pseudo-LiDAR feature volume and compares the
//! energy of voxels that hold points with the empty ones.

use plumenet::data_io::{synth_scene, SyntheticSceneSpec};
use plumenet::networks::{build_plume, plume_taps, NetworkConfig};
use plumenet::tensor::Tape;

fn main() {
    let scene = synth_scene(&SyntheticSceneSpec::toy(1)).unwrap();
    let cfg = NetworkConfig {
        grid: scene.labels.spec,
        ..NetworkConfig::default()
    };
    let rig = scene.sample.rig;
    let mut tape = Tape::new();
    let l = tape.constant(scene.sample.left.clone());
    let r = tape.constant(scene.sample.right.clone());
    let volume = build_plume(&mut tape, l, r, &cfg.grid, &rig, &cfg).unwrap();
    let v = tape.value(volume.values);
    println!("volume shape {:?}", v.shape());

    // photo-consistency: left and right samples agree where surfaces are
    let n = scene.labels.values.len();
    let c = v.shape()[0] / 2;
    let (mut occ, mut free) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        if !scene.labels.fov_mask[i] {
            continue;
        }
        let d: f64 = (0..c)
            .map(|ch| (v.data()[ch * n + i] - v.data()[(ch + c) * n + i]).powi(2))
            .sum();
        let acc = if scene.labels.values[i] > 0.5 {
            &mut occ
        } else {
            &mut free
        };
        acc.0 += d;
        acc.1 += 1;
    }
    println!(
        "mean left/right disagreement: occupied {:.4}, empty {:.4}",
        occ.0 / occ.1 as f64,
        free.0 / free.1 as f64
    );

    let taps = plume_taps(&cfg.grid, &rig, 1, true).unwrap();
    let first = taps.mask.iter().position(|&m| m).unwrap();
    println!(
        "first visible voxel {first}: left {:?} right {:?}",
        taps.left[first], taps.right[first]
    );
}
