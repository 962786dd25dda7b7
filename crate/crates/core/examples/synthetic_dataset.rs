//! Generates synthetic stereo scenes, stores them in the KITTI directory
//! layout and reads them back.

use plumenet::data_io::{count_frames, load_kitti_sample, synth_scene, write_kitti_sample, SyntheticSceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("plumenet-synthetic");
    for i in 0..3 {
        let scene = synth_scene(&SyntheticSceneSpec::toy(i as u64))?;
        write_kitti_sample(&root, i, &scene)?;
        for o in &scene.objects {
            println!("{i:06} {}", o.to_line());
        }
    }
    let n = count_frames(&root)?;
    println!("{n} frames under {}", root.display());
    for i in 0..n {
        let s = load_kitti_sample(&root, i)?;
        println!(
            "{i:06}: {}x{} images, {} points, {} boxes, baseline {:.2} m",
            s.rig.image_w,
            s.rig.image_h,
            s.cloud.len(),
            s.gt_boxes.len(),
            s.rig.baseline
        );
    }
    Ok(())
}
