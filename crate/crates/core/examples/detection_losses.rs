//! Encodes BEV boxes into dense detection targets and evaluates the focal
//! and smooth-L1 losses for a few predictions.

use plumenet::losses::{
    bce, detection_loss, encode_detection_targets, focal, smooth_l1, DetectionLossConfig, SmoothL1Mode,
};
use plumenet::networks::DETECTION_STRIDE;
use plumenet::postproc::{decode_boxes, BevBox};
use plumenet::voxel_grid::VoxelGridSpec;

fn main() {
    for p in [0.1, 0.5, 0.9] {
        println!(
            "p {p}: bce {:.4}  focal(γ=2, α=0.25) {:.4}  focal(γ=0, α=0.5) {:.4}",
            bce(p, 1.0),
            focal(p, true, 0.25, 2.0),
            focal(p, true, 0.5, 0.0)
        );
    }
    for x in [0.2, 0.4, 0.5, 2.0] {
        println!(
            "x {x}: smooth-L1 literal {:.3}  huber {:.3}",
            smooth_l1(x, SmoothL1Mode::PaperLiteral),
            smooth_l1(x, SmoothL1Mode::HuberBeta05)
        );
    }

    let grid = VoxelGridSpec {
        x_range: [-6.4, 6.4],
        y_range: [-0.6, 1.0],
        z_range: [2.0, 14.8],
        resolution: 0.2,
    };
    let boxes = [
        BevBox::new(-2.0, 8.0, 1.6, 3.9, 0.4),
        BevBox::new(3.0, 11.0, 1.7, 4.1, -1.0),
    ];
    let targets = encode_detection_targets(&boxes, &grid, DETECTION_STRIDE);
    println!("targets {:?}, {} positive cells", targets.dims, targets.num_positive());

    let cfg = DetectionLossConfig::default();
    for confidence in [0.6, 0.99] {
        let pred = targets.as_detections(confidence);
        let report = detection_loss(&pred, &targets, &cfg).unwrap();
        let decoded = decode_boxes(&pred, &grid, DETECTION_STRIDE, 0.5).unwrap();
        println!(
            "confidence {confidence}: focal {:.4} regression {:.4}, {} boxes decoded",
            report.focal_loss,
            report.regression_loss,
            decoded.len()
        );
    }
}
