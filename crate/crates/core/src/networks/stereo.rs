use super::{Ctx, NetworkConfig, NetworkError, Result};
use crate::tensor::Var;

/// Average-pool windows of the four pyramid branches.
pub(crate) const SPP_WINDOWS: [usize; 4] = [64, 32, 16, 8];

fn at(h: usize, w: usize, factor: usize) -> (usize, usize) {
    (h.div_ceil(factor), w.div_ceil(factor))
}

/// Image `[3, H, W]` → features `[C, H/f, W/f]` with `f` the configured
/// feature-resolution factor.
pub fn stereo_forward(ctx: &mut Ctx, cfg: &NetworkConfig, image: Var, prefix: &str) -> Result<Var> {
    let shape = ctx.tape.shape(image).to_vec();
    if shape.len() != 3
        || shape[0] != 3
        || !shape[1].is_multiple_of(4)
        || !shape[2].is_multiple_of(4)
        || shape[1] == 0
        || shape[2] == 0
    {
        return Err(NetworkError::ShapeMismatch(format!(
            "stereo input must be [3, H, W] with H and W positive multiples of 4, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let ch = cfg.channels();
    let n = |s: &str| format!("{prefix}.{s}");
    let one = [1, 1];

    let mut x = image;
    for i in 0..ch.conv0_layers {
        x = ctx.conv_relu(&n(&format!("conv0.{i}")), x, ch.conv0, 3, &one, 1)?;
    }
    let conv0 = x;
    ctx.record("conv0", conv0);

    let mut x = ctx.tape.max_pool2d(conv0, 3, 2, 1)?;
    if ch.maxpool0 != ch.conv0 {
        x = ctx.conv_relu(&n("maxpool0.proj"), x, ch.maxpool0, 1, &one, 1)?;
    }
    ctx.record("maxpool0", x);

    let specs = [
        ("layer1", ch.layer1, 1, 1),
        ("layer2", ch.layer2, 2, 1),
        ("layer3", ch.layer3, 1, 1),
        ("layer4", ch.layer4, 1, 2),
    ];
    let mut layers = Vec::with_capacity(4);
    for ((name, cout, stride, dil), &blocks) in specs.into_iter().zip(&ch.blocks) {
        for b in 0..blocks {
            let s = if b == 0 { stride } else { 1 };
            x = ctx.basic_block(&n(&format!("{name}.{b}")), x, cout, s, dil)?;
        }
        ctx.record(name, x);
        layers.push(x);
    }
    let (layer1, layer2, layer4) = (layers[0], layers[1], layers[3]);
    let (qh, qw) = at(h, w, 4);

    let mut parts = vec![layer2, layer4];
    for (i, &win) in SPP_WINDOWS.iter().enumerate() {
        let name = format!("branch{}", i + 1);
        let pooled = ctx.tape.avg_pool2d(layer4, [win.min(qh), win.min(qw)])?;
        let y = ctx.conv_relu(&n(&name), pooled, ch.branch, 3, &one, 1)?;
        let y = ctx.tape.upsample_bilinear(y, qh, qw)?;
        ctx.record(&name, y);
        parts.push(y);
    }
    let cat = ctx.tape.concat(&parts, 0)?;
    ctx.record("concat", cat);
    let conv1 = ctx.conv_relu(&n("conv1"), cat, ch.conv1, 3, &one, 1)?;
    ctx.record("conv1", conv1);
    let conv2 = ctx.conv(&n("conv2"), conv1, ch.conv2, 1, &one, 1, 1.0)?;
    ctx.record("conv2", conv2);

    let f = cfg.image_feature_resolution.factor();
    let (oh, ow) = at(h, w, f);
    let (hh, hw) = at(h, w, 2);

    let fpn2 = ctx.conv(&n("fpn_conv2"), conv1, ch.fpn, 1, &one, 1, 1.0)?;
    ctx.record("fpn_conv2", fpn2);
    let mut up2 = fpn2;
    for (i, factor) in [f.max(2), f].into_iter().enumerate() {
        let y = ctx.conv_relu(&n(&format!("fpn_conv2_up.{i}")), up2, ch.fpn, 3, &one, 1)?;
        let (th, tw) = at(h, w, factor);
        up2 = ctx.tape.upsample_bilinear(y, th, tw)?;
    }
    ctx.record("fpn_conv2_up", up2);

    let lat1 = ctx.conv(&n("fpn_conv1"), layer1, ch.fpn, 1, &one, 1, 1.0)?;
    let top1 = ctx.tape.upsample_bilinear(fpn2, hh, hw)?;
    let fpn1 = ctx.tape.add(lat1, top1)?;
    ctx.record("fpn_conv1", fpn1);
    let y = ctx.conv_relu(&n("fpn_conv1_up"), fpn1, ch.fpn, 3, &one, 1)?;
    let up1 = ctx.tape.upsample_bilinear(y, oh, ow)?;
    ctx.record("fpn_conv1_up", up1);

    let lat0 = ctx.conv(&n("fpn_conv0"), conv0, ch.fpn, 1, &one, 1, 1.0)?;
    let top0 = ctx.tape.upsample_bilinear(fpn1, h, w)?;
    let fpn0 = ctx.tape.add(lat0, top0)?;
    ctx.record("fpn_conv0", fpn0);
    let y = ctx.conv_relu(&n("fpn_conv0_up"), fpn0, ch.fpn, 3, &one, 1)?;
    let up0 = ctx.tape.upsample_bilinear(y, oh, ow)?;
    ctx.record("fpn_conv0_up", up0);

    let s = ctx.tape.add(up0, up1)?;
    let s = ctx.tape.add(s, up2)?;
    ctx.record("fpn_sum", s);
    let d = ctx.tape.dropout(s, cfg.dropout)?;
    ctx.record("dropout", d);
    let out = ctx.conv(&n("fpn_conv"), d, ch.fpn_conv, 3, &one, 1, 1.0)?;
    ctx.record("fpn_conv", out);
    Ok(out)
}
