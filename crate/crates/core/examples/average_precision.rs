//! BEV average precision of a noisy detector on random frames, in the
//! difficulty × IoU table layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plumenet::evaluation::{evaluate, ApMode, GroundTruthBox};
use plumenet::postproc::BevBox;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..20 {
        let frame: Vec<GroundTruthBox> = (0..rng.gen_range(1..5))
            .map(|i| {
                let b = BevBox::new(
                    i as f64 * 5.0 - 8.0,
                    rng.gen_range(5.0..45.0),
                    1.6,
                    3.9,
                    rng.gen_range(-3.0..3.0),
                );
                let height = rng.gen_range(20.0..90.0);
                GroundTruthBox::new(b, "Car", height, rng.gen_range(0..3), rng.gen_range(0.0..0.5))
            })
            .collect();
        let mut found = Vec::new();
        for g in &frame {
            if !rng.gen_bool(0.85) {
                continue;
            }
            let b = g.bev;
            let (du, dv) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.8..0.8));
            found.push(BevBox::new(b.u + du, b.v + dv, b.w, b.h, b.theta).with_score(rng.gen_range(0.3..1.0)));
        }
        if rng.gen_bool(0.3) {
            found.push(
                BevBox::new(rng.gen_range(-10.0..10.0), rng.gen_range(5.0..45.0), 1.6, 3.9, 0.0).with_score(rng.gen()),
            );
        }
        dets.push(found);
        gts.push(frame);
    }
    for mode in [ApMode::ElevenPoint, ApMode::FortyPoint] {
        let table = evaluate(&dets, &gts, "Car", mode).unwrap();
        println!("{mode:?}\n{}", table.to_text());
    }
}
