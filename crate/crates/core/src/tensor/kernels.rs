//! Raw-slice kernels behind the tape operations.
//!
//! Convolutions are written once for three spatial axes; 1-D and 2-D calls
//! pad the leading axes with singletons. Parallel loops split over disjoint
//! output rows, and every output element is accumulated in a fixed order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

/// Stride, padding and dilation per spatial axis (leading axes first).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvGeom {
    /// Same stride/padding/dilation on every axis of a `rank`-D convolution.
    pub fn uniform(rank: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        let mut g = Self::identity();
        for a in 3 - rank..3 {
            g.stride[a] = stride;
            g.padding[a] = padding;
            g.dilation[a] = dilation;
        }
        g
    }

    pub fn identity() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
        }
    }
}

/// Output extent of a convolution along one axis, `None` if the kernel does
/// not fit the padded input.
pub fn conv_out_len(n: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let eff = dilation * (k - 1) + 1;
    if n + 2 * padding < eff || stride == 0 {
        return None;
    }
    Some((n + 2 * padding - eff) / stride + 1)
}

/// `[lo, hi)` of output positions whose tap `k` reads a valid input index.
#[inline]
fn valid_range(n_in: usize, n_out: usize, k: usize, s: usize, p: usize, d: usize) -> (usize, usize) {
    let off = (k * d) as isize - p as isize;
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let last = n_in as isize - 1 - off;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / s + 1).min(n_out)
    };
    (lo, hi.max(lo))
}

/// Index of the input row touched by output `o` through tap `k`, if valid.
#[inline]
fn in_index(o: usize, k: usize, s: usize, p: usize, d: usize, n_in: usize) -> Option<usize> {
    let i = (o * s + k * d) as isize - p as isize;
    if i >= 0 && (i as usize) < n_in {
        Some(i as usize)
    } else {
        None
    }
}

/// Input `[ci, d0, d1, d2]`, weight `[co, ci, k0, k1, k2]`, output `[co, o0, o1, o2]`.
pub fn conv_forward(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    ys: [usize; 4],
) -> Vec<f64> {
    let [ci_n, n0, n1, n2] = xs;
    let [_, _, k0, k1, k2] = ws;
    let [co_n, m0, m1, m2] = ys;
    let in_sp = n0 * n1 * n2;
    let ktot = k0 * k1 * k2;
    let mut y = vec![0.0; co_n * m0 * m1 * m2];
    if m2 == 0 {
        return y;
    }
    y.par_chunks_mut(m2).enumerate().for_each(|(row, yrow)| {
        let co = row / (m0 * m1);
        let o0 = (row / m1) % m0;
        let o1 = row % m1;
        if let Some(b) = bias {
            yrow.fill(b[co]);
        }
        for ci in 0..ci_n {
            let xc = &x[ci * in_sp..(ci + 1) * in_sp];
            let wc = &w[(co * ci_n + ci) * ktot..(co * ci_n + ci + 1) * ktot];
            for a in 0..k0 {
                let Some(i0) = in_index(o0, a, g.stride[0], g.padding[0], g.dilation[0], n0) else {
                    continue;
                };
                for b in 0..k1 {
                    let Some(i1) = in_index(o1, b, g.stride[1], g.padding[1], g.dilation[1], n1) else {
                        continue;
                    };
                    let xrow = &xc[(i0 * n1 + i1) * n2..(i0 * n1 + i1 + 1) * n2];
                    for c in 0..k2 {
                        let wv = wc[(a * k1 + b) * k2 + c];
                        let (lo, hi) = valid_range(n2, m2, c, g.stride[2], g.padding[2], g.dilation[2]);
                        let off = (c * g.dilation[2]) as isize - g.padding[2] as isize;
                        let s = g.stride[2];
                        if s == 1 {
                            let start = (lo as isize + off) as usize;
                            let len = hi - lo;
                            for (yv, xv) in yrow[lo..hi].iter_mut().zip(&xrow[start..start + len]) {
                                *yv += wv * xv;
                            }
                        } else {
                            for o2 in lo..hi {
                                yrow[o2] += wv * xrow[((o2 * s) as isize + off) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

/// Gradient of [`conv_forward`] with respect to its input.
pub fn conv_backward_input(
    gy: &[f64],
    ys: [usize; 4],
    w: &[f64],
    ws: [usize; 5],
    g: &ConvGeom,
    xs: [usize; 4],
) -> Vec<f64> {
    let [ci_n, n0, n1, n2] = xs;
    let [_, _, k0, k1, k2] = ws;
    let [co_n, m0, m1, m2] = ys;
    let out_sp = m0 * m1 * m2;
    let ktot = k0 * k1 * k2;
    let mut gx = vec![0.0; ci_n * n0 * n1 * n2];
    if n2 == 0 {
        return gx;
    }
    gx.par_chunks_mut(n2).enumerate().for_each(|(row, grow)| {
        let ci = row / (n0 * n1);
        let i0 = (row / n1) % n0;
        let i1 = row % n1;
        for co in 0..co_n {
            let gc = &gy[co * out_sp..(co + 1) * out_sp];
            let wc = &w[(co * ci_n + ci) * ktot..(co * ci_n + ci + 1) * ktot];
            for a in 0..k0 {
                // o0 * s + a * d - p == i0
                let num = (i0 + g.padding[0]) as isize - (a * g.dilation[0]) as isize;
                if num < 0 || !(num as usize).is_multiple_of(g.stride[0]) {
                    continue;
                }
                let o0 = num as usize / g.stride[0];
                if o0 >= m0 {
                    continue;
                }
                for b in 0..k1 {
                    let num = (i1 + g.padding[1]) as isize - (b * g.dilation[1]) as isize;
                    if num < 0 || !(num as usize).is_multiple_of(g.stride[1]) {
                        continue;
                    }
                    let o1 = num as usize / g.stride[1];
                    if o1 >= m1 {
                        continue;
                    }
                    let grow_out = &gc[(o0 * m1 + o1) * m2..(o0 * m1 + o1 + 1) * m2];
                    for c in 0..k2 {
                        let wv = wc[(a * k1 + b) * k2 + c];
                        let (lo, hi) = valid_range(n2, m2, c, g.stride[2], g.padding[2], g.dilation[2]);
                        let off = (c * g.dilation[2]) as isize - g.padding[2] as isize;
                        let s = g.stride[2];
                        if s == 1 {
                            let start = (lo as isize + off) as usize;
                            let len = hi - lo;
                            for (gv, yv) in grow[start..start + len].iter_mut().zip(&grow_out[lo..hi]) {
                                *gv += wv * yv;
                            }
                        } else {
                            for o2 in lo..hi {
                                grow[((o2 * s) as isize + off) as usize] += wv * grow_out[o2];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient of [`conv_forward`] with respect to its weight.
pub fn conv_backward_weight(
    gy: &[f64],
    ys: [usize; 4],
    x: &[f64],
    xs: [usize; 4],
    ws: [usize; 5],
    g: &ConvGeom,
) -> Vec<f64> {
    let [ci_n, n0, n1, n2] = xs;
    let [_, _, k0, k1, k2] = ws;
    let [co_n, m0, m1, m2] = ys;
    let in_sp = n0 * n1 * n2;
    let out_sp = m0 * m1 * m2;
    let ktot = k0 * k1 * k2;
    let mut gw = vec![0.0; co_n * ci_n * ktot];
    gw.par_chunks_mut(ktot).enumerate().for_each(|(pair, gk)| {
        let co = pair / ci_n;
        let ci = pair % ci_n;
        let gc = &gy[co * out_sp..(co + 1) * out_sp];
        let xc = &x[ci * in_sp..(ci + 1) * in_sp];
        for a in 0..k0 {
            let (l0, h0) = valid_range(n0, m0, a, g.stride[0], g.padding[0], g.dilation[0]);
            for b in 0..k1 {
                let (l1, h1) = valid_range(n1, m1, b, g.stride[1], g.padding[1], g.dilation[1]);
                for c in 0..k2 {
                    let (l2, h2) = valid_range(n2, m2, c, g.stride[2], g.padding[2], g.dilation[2]);
                    let off2 = (c * g.dilation[2]) as isize - g.padding[2] as isize;
                    let mut acc = 0.0;
                    for o0 in l0..h0 {
                        let i0 = o0 * g.stride[0] + a * g.dilation[0] - g.padding[0];
                        for o1 in l1..h1 {
                            let i1 = o1 * g.stride[1] + b * g.dilation[1] - g.padding[1];
                            let yrow = &gc[(o0 * m1 + o1) * m2..];
                            let xrow = &xc[(i0 * n1 + i1) * n2..];
                            for o2 in l2..h2 {
                                acc += yrow[o2] * xrow[((o2 * g.stride[2]) as isize + off2) as usize];
                            }
                        }
                    }
                    gk[(a * k1 + b) * k2 + c] = acc;
                }
            }
        }
    });
    gw
}

pub fn bias_grad(gy: &[f64], co_n: usize) -> Vec<f64> {
    let sp = gy.len() / co_n.max(1);
    (0..co_n).map(|c| gy[c * sp..(c + 1) * sp].iter().sum()).collect()
}

/// Max pooling over `[c, h, w]` with implicit `-inf` padding. Ties go to
/// the first element in scan order. Returns values and flat argmax indices.
pub fn max_pool2d(
    x: &[f64],
    [c, h, w]: [usize; 3],
    window: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    [oh, ow]: [usize; 2],
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..window[0] {
                    let iy = (oy * stride[0] + ky) as isize - padding[0] as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..window[1] {
                        let ix = (ox * stride[1] + kx) as isize - padding[1] as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = (ch * h + iy as usize) * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Non-overlapping average pooling (stride equals the window).
pub fn avg_pool2d(x: &[f64], [c, h, w]: [usize; 3], window: [usize; 2]) -> Vec<f64> {
    let (oh, ow) = (h / window[0], w / window[1]);
    let norm = 1.0 / (window[0] * window[1]) as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..window[0] {
                    let row = (ch * h + oy * window[0] + ky) * w + ox * window[1];
                    acc += x[row..row + window[1]].iter().sum::<f64>();
                }
                out.push(acc * norm);
            }
        }
    }
    out
}

pub fn avg_pool2d_backward(gy: &[f64], [c, h, w]: [usize; 3], window: [usize; 2]) -> Vec<f64> {
    let (oh, ow) = (h / window[0], w / window[1]);
    let norm = 1.0 / (window[0] * window[1]) as f64;
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[(ch * oh + oy) * ow + ox] * norm;
                for ky in 0..window[0] {
                    let row = (ch * h + oy * window[0] + ky) * w + ox * window[1];
                    for v in &mut gx[row..row + window[1]] {
                        *v += g;
                    }
                }
            }
        }
    }
    gx
}

/// Align-corners interpolation taps for resizing an axis from `n_in` to `n_out`.
pub fn align_corners_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = if n_out == 1 || n_in == 1 {
                0.0
            } else {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear(x: &[f64], [c, h, w]: [usize; 3], [oh, ow]: [usize; 2]) -> Vec<f64> {
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    out.par_chunks_mut(ow).enumerate().for_each(|(row, orow)| {
        let ch = row / oh;
        let (y0, y1, fy) = ty[row % oh];
        let r0 = &x[(ch * h + y0) * w..(ch * h + y0 + 1) * w];
        let r1 = &x[(ch * h + y1) * w..(ch * h + y1 + 1) * w];
        for (o, &(x0, x1, fx)) in orow.iter_mut().zip(&tx) {
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
    });
    out
}

pub fn resize_bilinear_backward(gy: &[f64], [c, h, w]: [usize; 3], [oh, ow]: [usize; 2]) -> Vec<f64> {
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    let mut gx = vec![0.0; c * h * w];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(ch, gc)| {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let grow = &gy[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (&g, &(x0, x1, fx)) in grow.iter().zip(&tx) {
                gc[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gc[y0 * w + x1] += g * (1.0 - fy) * fx;
                gc[y1 * w + x0] += g * fy * (1.0 - fx);
                gc[y1 * w + x1] += g * fy * fx;
            }
        }
    });
    gx
}

/// Up to four `(flat pixel index, weight)` taps of a bilinear lookup.
pub type BilinearTaps = [(usize, f64); 4];

/// Taps for sampling an `h x w` map at subpixel `(u, v)`. Points outside
/// `[0, w-1] x [0, h-1]` get all-zero weights; neighbours past the border
/// are zero-padded.
pub fn bilinear_taps(h: usize, w: usize, u: f64, v: f64) -> BilinearTaps {
    let mut taps = [(0usize, 0.0f64); 4];
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return taps;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (t, &(cx, cy, wt)) in taps.iter_mut().zip(&corners) {
        if cx < w && cy < h {
            *t = (cy * w + cx, wt);
        }
    }
    taps
}

/// Gathers `[c, n]` features from a `[c, h*w]` map using precomputed taps.
pub fn gather(feat: &[f64], c: usize, hw: usize, taps: &[BilinearTaps]) -> Vec<f64> {
    let n = taps.len();
    let mut out = vec![0.0; c * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(ch, orow)| {
        let fc = &feat[ch * hw..(ch + 1) * hw];
        for (o, t) in orow.iter_mut().zip(taps) {
            *o = t[0].1 * fc[t[0].0] + t[1].1 * fc[t[1].0] + t[2].1 * fc[t[2].0] + t[3].1 * fc[t[3].0];
        }
    });
    out
}

pub fn gather_backward(gy: &[f64], c: usize, hw: usize, taps: &[BilinearTaps]) -> Vec<f64> {
    let n = taps.len();
    let mut gx = vec![0.0; c * hw];
    gx.par_chunks_mut(hw.max(1)).enumerate().for_each(|(ch, gc)| {
        let grow = &gy[ch * n..(ch + 1) * n];
        for (&g, t) in grow.iter().zip(taps) {
            for &(idx, wt) in t {
                gc[idx] += g * wt;
            }
        }
    });
    gx
}
