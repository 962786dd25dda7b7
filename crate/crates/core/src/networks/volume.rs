use super::{Ctx, NetworkConfig, NetworkError, Result, VolumeNet};
use crate::tensor::Var;

/// `[C, X, Y, Z]` → `[C·Y, X, Z]`, channel index `c·Y + y`.
pub(crate) fn flatten_height(ctx: &mut Ctx, v: Var) -> Result<Var> {
    let s = ctx.tape.shape(v).to_vec();
    let p = ctx.tape.permute(v, &[0, 2, 1, 3])?;
    Ok(ctx.tape.reshape(p, &[s[0] * s[2], s[1], s[3]])?)
}

/// Spatial extents after a stride-2, pad-1, 3-kernel convolution.
fn halve(dims: &[usize], stride: &[usize]) -> Vec<usize> {
    dims.iter()
        .zip(stride)
        .map(|(&d, &s)| if s == 2 { d.div_ceil(2) } else { d })
        .collect()
}

/// Residual hourglass shared by the BEV (2-D) and all-3D variants: two
/// full-resolution stages with a skip, two strided stages, two transposed
/// stages with a skip back to the half-resolution map.
fn hourglass(ctx: &mut Ctx, x: Var, c0: usize, c2: usize, down: &[usize]) -> Result<Var> {
    let rank = ctx.tape.shape(x).len() - 1;
    let one = vec![1; rank];
    let full = ctx.tape.shape(x)[1..].to_vec();

    let y = ctx.conv_relu("volume.bev_conv0.0", x, c0, 3, &one, 1)?;
    let b0 = ctx.conv_relu("volume.bev_conv0.1", y, c0, 3, &one, 1)?;
    ctx.record("bev_conv0", b0);

    let y = ctx.conv_relu("volume.bev_conv1.0", b0, c0, 3, &one, 1)?;
    let y = ctx.conv("volume.bev_conv1.1", y, c0, 3, &one, 1, super::ctx::RESIDUAL_GAIN)?;
    let y = ctx.tape.add(y, b0)?;
    let b1 = ctx.tape.relu(y);
    ctx.record("bev_conv1", b1);

    let y = ctx.conv_relu("volume.bev_conv2.0", b1, c2, 3, down, 1)?;
    let b2 = ctx.conv_relu("volume.bev_conv2.1", y, c2, 3, &one, 1)?;
    ctx.record("bev_conv2", b2);
    let half = halve(&full, down);

    let y = ctx.conv_relu("volume.bev_conv3.0", b2, c2, 3, down, 1)?;
    let b3 = ctx.conv_relu("volume.bev_conv3.1", y, c2, 3, &one, 1)?;
    ctx.record("bev_conv3", b3);

    let y = ctx.deconv("volume.bev_deconv4.0", b3, c2, down, &half)?;
    let y = ctx.tape.relu(y);
    let y = ctx.conv("volume.bev_deconv4.1", y, c2, 3, &one, 1, 1.0)?;
    let y = ctx.tape.add(y, b2)?;
    let d4 = ctx.tape.relu(y);
    ctx.record("bev_deconv4", d4);

    let y = ctx.deconv("volume.bev_deconv5.0", d4, c0, down, &full)?;
    let y = ctx.tape.relu(y);
    let d5 = ctx.conv_relu("volume.bev_deconv5.1", y, c0, 3, &one, 1)?;
    ctx.record("bev_deconv5", d5);
    Ok(d5)
}

/// Feature volume `[C, X, Y, Z]` → BEV features `[C_bev, X, Z]`.
pub fn volume_forward(ctx: &mut Ctx, cfg: &NetworkConfig, volume: Var) -> Result<Var> {
    let (nx, ny, nz) = cfg.grid.grid_dims()?;
    let s = ctx.tape.shape(volume).to_vec();
    if s.len() != 4 || s[1..] != [nx, ny, nz] {
        return Err(NetworkError::ShapeMismatch(format!(
            "feature volume {s:?} does not match grid {nx}x{ny}x{nz}"
        )));
    }
    let ch = cfg.channels();
    let one3 = [1, 1, 1];
    let conv3d = |ctx: &mut Ctx, x: Var| -> Result<Var> {
        let y = ctx.conv_relu("volume.3dconv0.0", x, ch.conv3d, 3, &one3, 1)?;
        let y = ctx.conv_relu("volume.3dconv0.1", y, ch.conv3d, 3, &one3, 1)?;
        ctx.record("3dconv0", y);
        Ok(y)
    };
    match cfg.volume_net {
        VolumeNet::Hybrid3dBev => {
            let v = conv3d(ctx, volume)?;
            let flat = flatten_height(ctx, v)?;
            ctx.record("reshape", flat);
            hourglass(ctx, flat, ch.bev0, ch.bev2, &[2, 2])
        }
        VolumeNet::BevOnly => {
            let flat = flatten_height(ctx, volume)?;
            ctx.record("reshape", flat);
            hourglass(ctx, flat, ch.bev0, ch.bev2, &[2, 2])
        }
        VolumeNet::Pure3d => {
            let v = conv3d(ctx, volume)?;
            let (c0, c2) = ch.pure3d();
            let h = hourglass(ctx, v, c0, c2, &[2, 1, 2])?;
            let flat = flatten_height(ctx, h)?;
            ctx.record("reshape", flat);
            let out = ctx.conv_relu("volume.flatten_proj", flat, ch.bev0, 1, &[1, 1], 1)?;
            ctx.record("flatten_proj", out);
            Ok(out)
        }
    }
}
