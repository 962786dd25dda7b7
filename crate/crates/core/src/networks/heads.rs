use super::ctx::Init;
use super::{Ctx, NetworkConfig, NetworkError, Result};
use crate::postproc::REGRESSION_CHANNELS;
use crate::tensor::Var;

/// Prior probability the classification bias starts at, so the initial
/// focal loss is not dominated by the many negative cells.
const CLASS_PRIOR: f64 = 0.01;

/// Init gain of every output convolution. Small initial logits keep the
/// first updates from silencing the features beneath them.
const OUTPUT_GAIN: f64 = 0.1;

fn check_bev(ctx: &Ctx, cfg: &NetworkConfig, x: Var, channels: Option<usize>) -> Result<(usize, usize)> {
    let (nx, _, nz) = cfg.grid.grid_dims()?;
    let s = ctx.tape.shape(x);
    if s.len() != 3 || (s[1], s[2]) != (nx, nz) || channels.is_some_and(|c| c != s[0]) {
        return Err(NetworkError::ShapeMismatch(format!(
            "head input {s:?} does not match {}x{nx}x{nz}",
            channels.map_or("C".to_string(), |c| c.to_string())
        )));
    }
    Ok((nx, nz))
}

/// BEV features `[C, X, Z]` → occupancy probabilities `[X, Y, Z]`.
pub fn occupancy_head(ctx: &mut Ctx, cfg: &NetworkConfig, bev: Var) -> Result<Var> {
    check_bev(ctx, cfg, bev, None)?;
    let (_, ny, _) = cfg.grid.grid_dims()?;
    let ch = cfg.channels();
    let y = ctx.conv_relu("occupancy.conv3", bev, ch.occ_conv3, 3, &[1, 1], 1)?;
    ctx.record("conv3", y);
    let logits = ctx.conv("occupancy.conv4", y, ny, 3, &[1, 1], 1, OUTPUT_GAIN)?;
    ctx.record("conv4", logits);
    let xyz = ctx.tape.permute(logits, &[1, 0, 2])?;
    Ok(ctx.tape.sigmoid(xyz))
}

/// Dense outputs of the detection head at stride 4.
#[derive(Debug, Clone, Copy)]
pub struct DetectionMaps {
    /// Logits `[1, X/4, Z/4]`.
    pub class_logits: Var,
    /// `[6, X/4, Z/4]`: `du, dv, log w, log h, sin θ, cos θ`.
    pub regression: Var,
}

/// Detection stride of the head.
pub const DETECTION_STRIDE: usize = 4;

/// Five-block residual encoder (block 1 plain convolutions, blocks 2–5
/// strided bottleneck stacks), a two-level top-down decoder back to stride
/// 4, and sibling classification/regression convolutions.
pub fn detection_head(ctx: &mut Ctx, cfg: &NetworkConfig, input: Var) -> Result<DetectionMaps> {
    check_bev(ctx, cfg, input, Some(cfg.detection_input_channels()))?;
    let ch = cfg.channels();
    let one = [1, 1];
    let mut x = input;
    for l in 0..ch.det_layers[0] {
        x = ctx.conv_relu(&format!("detection.block1.{l}"), x, ch.det_channels[0], 3, &one, 1)?;
    }
    ctx.record("det_block1", x);
    let mut blocks = vec![x];
    for b in 1..5 {
        for l in 0..ch.det_layers[b] {
            let stride = if l == 0 { 2 } else { 1 };
            x = ctx.bottleneck(&format!("detection.block{}.{l}", b + 1), x, ch.det_channels[b], stride)?;
        }
        ctx.record(&format!("det_block{}", b + 1), x);
        blocks.push(x);
    }
    let dec = ch.det_decoder();
    let mut top = blocks[4];
    for (level, lateral) in [(4usize, blocks[3]), (3, blocks[2])] {
        let size = ctx.tape.shape(lateral)[1..].to_vec();
        let up = ctx.deconv(&format!("detection.up{level}"), top, dec, &[2, 2], &size)?;
        let lat = ctx.conv(&format!("detection.lateral{level}"), lateral, dec, 1, &one, 1, 1.0)?;
        let s = ctx.tape.add(up, lat)?;
        top = ctx.tape.relu(s);
    }
    ctx.record("det_fpn", top);
    let mut h = top;
    for l in 0..2 {
        h = ctx.conv_relu(&format!("detection.header.{l}"), h, dec, 3, &one, 1)?;
    }
    let fan_in = dec * 9;
    let cw = ctx.param(
        "detection.cls.w",
        &[1, dec, 3, 3],
        Init::FanIn {
            fan_in,
            gain: OUTPUT_GAIN,
        },
    )?;
    let cb = ctx.param(
        "detection.cls.b",
        &[1],
        Init::Const(-((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln()),
    )?;
    let class_logits = ctx.tape.conv(h, cw, Some(cb), &one, &one, &one)?;
    ctx.record("det_cls", class_logits);
    let rw = ctx.param(
        "detection.reg.w",
        &[REGRESSION_CHANNELS, dec, 3, 3],
        Init::FanIn {
            fan_in,
            gain: OUTPUT_GAIN,
        },
    )?;
    let rb = ctx.param("detection.reg.b", &[REGRESSION_CHANNELS], Init::Const(0.0))?;
    let regression = ctx.tape.conv(h, rw, Some(rb), &one, &one, &one)?;
    ctx.record("det_reg", regression);
    Ok(DetectionMaps {
        class_logits,
        regression,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::tests::toy_config;
    use crate::networks::Trainable;
    use crate::tensor::{ParamStore, Tape, Tensor};

    #[test]
    fn zero_weights_give_even_odds() {
        let cfg = toy_config();
        let (nx, ny, nz) = cfg.grid.grid_dims().unwrap();
        let bev = Tensor::from_fn(&[cfg.channels().bev0, nx, nz], |i| (i % 5) as f64);
        let mut params = ParamStore::new();
        for pass in 0..2 {
            let mut tape = Tape::new();
            let x = tape.constant(bev.clone());
            let mut ctx = Ctx::new(&mut tape, &mut params, 0, Trainable::All);
            let occ = occupancy_head(&mut ctx, &cfg, x).unwrap();
            assert_eq!(ctx.tape.shape(occ), &[nx, ny, nz]);
            if pass == 1 {
                assert!(ctx.tape.data(occ).iter().all(|&p| p == 0.5));
            }
            let names: Vec<String> = params.names().to_vec();
            for n in names {
                params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|w| *w = 0.0);
            }
        }
    }

    #[test]
    fn detection_maps_start_at_the_prior() {
        let cfg = toy_config();
        let (nx, _, nz) = cfg.grid.grid_dims().unwrap();
        let mut params = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[cfg.detection_input_channels(), nx, nz]));
        let mut ctx = Ctx::new(&mut tape, &mut params, 0, Trainable::All);
        let maps = detection_head(&mut ctx, &cfg, x).unwrap();
        assert_eq!(ctx.tape.shape(maps.class_logits), &[1, nx.div_ceil(4), nz.div_ceil(4)]);
        assert_eq!(ctx.tape.shape(maps.regression), &[6, nx.div_ceil(4), nz.div_ceil(4)]);
        let want = -(99.0f64).ln();
        assert!(ctx
            .tape
            .data(maps.class_logits)
            .iter()
            .all(|&l| (l - want).abs() < 1e-12));
        assert!(ctx.tape.data(maps.regression).iter().all(|&r| r == 0.0));
        let bad = ctx.tape.constant(Tensor::zeros(&[1, nx, nz]));
        assert!(detection_head(&mut ctx, &cfg, bad).is_err());
    }
}
