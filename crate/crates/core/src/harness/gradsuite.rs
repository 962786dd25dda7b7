use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Result;
use crate::data_io::{synth_scene, SyntheticSceneSpec};
use crate::losses::{
    detection_loss_var, encode_detection_targets, occupancy_bce_var, DetectionLossConfig, SmoothL1Mode,
};
use crate::networks::{forward, Ctx, Heads, NetworkConfig, Trainable, DETECTION_STRIDE};
use crate::postproc::{detection_dims, BevBox, REGRESSION_CHANNELS};
use crate::tensor::gradcheck::{
    check_gradients, op_suite, relative_error, GradCheckOptions, GradCheckReport, WorstEntry,
};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::voxel_grid::{OccupancyGrid, VoxelGridSpec};

/// One named finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub shapes: String,
    pub report: GradCheckReport,
}

fn micro_grid(rng: &mut ChaCha8Rng) -> VoxelGridSpec {
    let n = |rng: &mut ChaCha8Rng| rng.gen_range(2..=5) as f64 * 0.4;
    VoxelGridSpec {
        x_range: [-n(rng), n(rng)],
        y_range: [-0.4, rng.gen_range(1..=3) as f64 * 0.2],
        z_range: [2.0, 2.0 + 2.0 * n(rng)],
        resolution: 0.2,
    }
}

/// Masked occupancy BCE on a random grid, probabilities kept off the clamp.
fn occupancy_case(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<SuiteEntry> {
    let grid = micro_grid(rng);
    let (nx, ny, nz) = grid.grid_dims()?;
    let n = nx * ny * nz;
    let values = (0..n).map(|_| f64::from(rng.gen_bool(0.3))).collect();
    let mask = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    let labels = OccupancyGrid::new(grid, values, mask)?;
    let probs = Tensor::from_fn(&[nx, ny, nz], |_| rng.gen_range(0.05..0.95));
    let report = check_gradients(&[probs], |t, v| occupancy_bce_var(t, v[0], &labels), opts)?;
    Ok(SuiteEntry {
        name: "occupancy_bce".into(),
        shapes: format!("[{nx}, {ny}, {nz}]"),
        report,
    })
}

/// Focal + smooth-L1 detection loss with a few random boxes.
fn detection_case(rng: &mut ChaCha8Rng, mode: SmoothL1Mode, opts: GradCheckOptions) -> Result<SuiteEntry> {
    let grid = micro_grid(rng);
    let (dx, dz) = detection_dims(&grid, DETECTION_STRIDE);
    let boxes: Vec<BevBox> = (0..rng.gen_range(1..=3))
        .map(|_| {
            BevBox::new(
                rng.gen_range(grid.x_range[0]..grid.x_range[1]),
                rng.gen_range(grid.z_range[0]..grid.z_range[1]),
                rng.gen_range(0.5..1.5),
                rng.gen_range(1.0..3.0),
                rng.gen_range(-3.0..3.0),
            )
        })
        .collect();
    let targets = encode_detection_targets(&boxes, &grid, DETECTION_STRIDE);
    let cfg = DetectionLossConfig {
        smooth_l1: mode,
        ..DetectionLossConfig::default()
    };
    let logits = Tensor::from_fn(&[1, dx, dz], |_| rng.gen_range(-3.0..3.0));
    let reg = Tensor::from_fn(&[REGRESSION_CHANNELS, dx, dz], |_| rng.gen_range(-2.0..2.0));
    let report = check_gradients(
        &[logits, reg],
        |t, v| Ok(detection_loss_var(t, v[0], v[1], &targets, &cfg)?.0),
        opts,
    )?;
    Ok(SuiteEntry {
        name: "detection_loss".into(),
        shapes: format!("[1, {dx}, {dz}] [{REGRESSION_CHANNELS}, {dx}, {dz}]"),
        report,
    })
}

/// Relative error above which other step sizes are tried.
const KINK_RETRY_ABOVE: f64 = 1e-5;

/// Occupancy plus detection loss of the whole network on a tiny synthetic
/// scene, with dropout active under a fixed mask. Checks `per_tensor`
/// evenly spaced entries of every parameter and of both images.
pub fn end_to_end_gradcheck(seed: u64, per_tensor: usize, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let scene = synth_scene(&SyntheticSceneSpec::micro(seed))?;
    let cfg = NetworkConfig {
        scale: 0.125,
        grid: scene.labels.spec,
        ..NetworkConfig::default()
    };
    let boxes: Vec<BevBox> = scene.sample.gt_boxes.iter().map(|g| g.bev).collect();
    let targets = encode_detection_targets(&boxes, &cfg.grid, DETECTION_STRIDE);
    let loss_cfg = DetectionLossConfig::default();
    let rig = scene.sample.rig;

    // parameters and images all live in one store so they are perturbed alike
    let loss = |params: &mut ParamStore, grads: bool| -> Result<(f64, Vec<(String, Vec<f64>)>)> {
        let mut tape = Tape::with_precision(opts.precision);
        tape.set_train(true, seed);
        let images = [params.get("image.left"), params.get("image.right")].map(|t| t.cloned());
        let [Some(left), Some(right)] = images else {
            unreachable!("images are inserted before the first evaluation")
        };
        let l = tape.leaf(left, grads);
        let r = tape.leaf(right, grads);
        let mut ctx = Ctx::new(
            &mut tape,
            params,
            seed,
            if grads { Trainable::All } else { Trainable::None },
        );
        let out = forward(&mut ctx, &cfg, l, r, &rig, Heads::ALL)?;
        let occ = occupancy_bce_var(ctx.tape, out.occupancy.expect("requested"), &scene.labels)?;
        let maps = out.detection.expect("requested");
        let (det, _) = detection_loss_var(ctx.tape, maps.class_logits, maps.regression, &targets, &loss_cfg)?;
        let total = ctx.tape.add(occ, det)?;
        let mut g = Vec::new();
        if grads {
            ctx.tape.backward(total)?;
            g = ctx
                .bound_params()
                .into_iter()
                .map(|(n, v)| (n, ctx.tape.grad(v).map_or_else(Vec::new, <[f64]>::to_vec)))
                .collect();
            for (name, v) in [("image.left", l), ("image.right", r)] {
                g.push((
                    name.to_string(),
                    ctx.tape.grad(v).map_or_else(Vec::new, <[f64]>::to_vec),
                ));
            }
        }
        Ok((tape.data(total)[0], g))
    };

    // Flat image regions and empty voxels put whole feature maps exactly on
    // ReLU kinks and pooling ties, where finite differences are meaningless.
    // Dithering the images and the zero-initialized biases avoids that.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dither = |t: &Tensor, a: f64| Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.gen_range(-a..a));
    let mut params = ParamStore::new();
    params.insert("image.left", dither(&scene.sample.left, 0.05));
    params.insert("image.right", dither(&scene.sample.right, 0.05));
    loss(&mut params, false)?;
    for name in params.names().to_vec() {
        if name.ends_with(".b") {
            let t = dither(params.get(&name).expect("listed"), 0.05);
            params.insert(name, t);
        }
    }
    let (_, analytic) = loss(&mut params, true)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (input, (name, grad)) in analytic.iter().enumerate() {
        let n = params.get(name).map_or(0, Tensor::numel);
        let step = n.div_ceil(per_tensor.max(1)).max(1);
        for entry in (0..n).step_by(step) {
            let analytic = grad.get(entry).copied().unwrap_or(0.0);
            let orig = params.get(name).expect("bound parameter").data()[entry];
            let mut central = |eps: f64| -> Result<f64> {
                let mut eval_at = |x: f64| -> Result<f64> {
                    params.get_mut(name).expect("bound parameter").data_mut()[entry] = x;
                    Ok(loss(&mut params, false)?.0)
                };
                let d = (eval_at(orig + eps)? - eval_at(orig - eps)?) / (2.0 * eps);
                eval_at(orig)?;
                Ok(d)
            };
            // A ReLU kink inside [x - eps, x + eps] spoils a single step size;
            // a wrong gradient disagrees at every step size.
            let mut numeric = central(opts.eps)?;
            let mut err = relative_error(analytic, numeric, opts.abs_floor);
            for eps in [opts.eps * 0.1, opts.eps * 10.0] {
                if err <= KINK_RETRY_ABOVE {
                    break;
                }
                let n = central(eps)?;
                let e = relative_error(analytic, n, opts.abs_floor);
                if e < err {
                    (numeric, err) = (n, e);
                }
            }
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(WorstEntry {
                    input,
                    entry,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Every differentiable tape operation on `cases` random shapes each, both
/// loss functions on `cases` random grids, and one end-to-end network check.
pub fn gradient_suite(seed: u64, cases: usize, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut out: Vec<SuiteEntry> = op_suite(seed, cases, opts)?
        .into_iter()
        .map(|c| SuiteEntry {
            name: c.op.to_string(),
            shapes: c.shapes,
            report: c.report,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for _ in 0..cases {
        out.push(occupancy_case(&mut rng, opts)?);
        out.push(detection_case(&mut rng, SmoothL1Mode::HuberBeta05, opts)?);
    }
    out.push(SuiteEntry {
        name: "end_to_end".into(),
        shapes: "toy network, 16x4x16 grid, 32x16 images".into(),
        report: end_to_end_gradcheck(seed, 2, opts)?,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let opts = GradCheckOptions::default();
        assert!(occupancy_case(&mut rng, opts).unwrap().report.passes(1e-5));
        let det = detection_case(&mut rng, SmoothL1Mode::HuberBeta05, opts).unwrap();
        assert!(det.report.passes(1e-5), "{det:?}");
    }
}
