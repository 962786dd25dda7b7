//! Prints the layer-by-layer shape plan of every variant and checks it
//! against the reference architecture table.

use plumenet::networks::{paper_table, shape_plan, NetworkConfig, Variant};

fn main() {
    for variant in Variant::ALL {
        let cfg = NetworkConfig {
            variant,
            ..NetworkConfig::default()
        };
        let plan = shape_plan(&cfg).expect("default config is valid");
        println!("== {} ==", variant.name());
        print!("{}", plan.to_text());
        println!(
            "rows differing from the table: {}\n",
            plan.diff(&paper_table(variant)).len()
        );
    }

    // concrete sizes for a 256x512 stereo pair on the KITTI grid
    let plan = shape_plan(&NetworkConfig::default()).unwrap();
    for (name, dims) in plan.concrete(256, 512).unwrap() {
        if ["fpn_conv", "plume", "bev_conv0", "conv4", "det_cls"].contains(&name.as_str()) {
            println!("{name:<10} {dims:?}");
        }
    }
}
