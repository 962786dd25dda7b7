//! Rotated BEV IoU by polygon clipping, then greedy NMS over a cluster of
//! overlapping candidates.

use std::f64::consts::FRAC_PI_4;

use plumenet::postproc::{nms, rotated_iou, write_detections, BevBox};

fn main() {
    let square = BevBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
    let diamond = BevBox::new(0.0, 0.0, 1.0, 1.0, FRAC_PI_4);
    println!(
        "unit square vs 45° copy: {:.6}",
        rotated_iou(&square, &diamond).unwrap()
    );

    let car = BevBox::new(2.0, 15.0, 1.6, 3.9, 0.3);
    for (du, dtheta) in [(0.0, 0.0), (0.4, 0.0), (0.0, 0.5), (1.0, 1.2)] {
        let other = BevBox::new(car.u + du, car.v, car.w, car.h, car.theta + dtheta);
        println!(
            "shift {du:.1} m, turn {dtheta:.1} rad -> IoU {:.4}",
            rotated_iou(&car, &other).unwrap()
        );
    }

    let candidates: Vec<BevBox> = (0..8)
        .map(|i| {
            let f = i as f64;
            BevBox::new(2.0 + 0.15 * f, 15.0 + 0.1 * f, 1.6, 3.9, 0.3 + 0.05 * f).with_score(0.9 - 0.1 * f)
        })
        .chain([BevBox::new(-4.0, 20.0, 1.7, 4.2, -1.2).with_score(0.55)])
        .collect();
    let kept = nms(&candidates, 0.3);
    println!("{} candidates -> {} kept", candidates.len(), kept.len());
    print!("{}", write_detections(&kept));
}
