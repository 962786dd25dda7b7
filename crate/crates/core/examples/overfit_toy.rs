//! Trains the eighth-width network on four synthetic scenes, stage by stage,
//! then runs inference on the training set. Takes about a minute.

use std::time::Instant;

use plumenet::evaluation::{evaluate, ApMode, Level};
use plumenet::harness::{infer, toy_dataset, train, Stage, TrainConfig};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = TrainConfig::toy();
    let data = toy_dataset(0, 4).unwrap();
    let start = Instant::now();
    let (model, report) = train(&cfg, &data).unwrap();
    for stage in [Stage::BackboneOccupancy, Stage::DetectionHead] {
        let l = report.stage_losses(stage);
        println!(
            "{}: {} steps, loss {:.4} -> {:.4}",
            stage.name(),
            l.len(),
            l[0],
            l[l.len() - 1]
        );
    }

    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let out = infer(&model, &s.sample, cfg.score_threshold, cfg.nms_iou).unwrap();
        println!(
            "scene {i}: {} boxes, {} ground truth, voxel IoU {:.3}",
            out.boxes.len(),
            s.sample.gt_boxes.len(),
            out.occupancy.voxel_iou(&s.labels, 0.5)
        );
        dets.push(out.boxes);
        gts.push(s.sample.gt_boxes.clone());
    }
    let table = evaluate(&dets, &gts, &cfg.class_name, ApMode::ElevenPoint).unwrap();
    println!(
        "AP@0.5 (all) {:.3}, {:.0?} total",
        table.get(Level::All, 0.5).unwrap(),
        start.elapsed()
    );
}
