use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, BilinearTaps, ConvGeom};
use super::{shape_str, Result, Tensor, TensorError};

/// Storage precision of tape values and gradients. Arithmetic is always
/// 64-bit; `F32` rounds every stored result to single precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        xs: [usize; 4],
        ws: [usize; 5],
        ys: [usize; 4],
    },
    ConvTranspose {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        xs: [usize; 4],
        ws: [usize; 5],
        ys: [usize; 4],
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
        dims: [usize; 3],
        window: [usize; 2],
    },
    Resize {
        x: usize,
        dims: [usize; 3],
        out: [usize; 2],
    },
    Gather {
        x: usize,
        c: usize,
        hw: usize,
        taps: Vec<BilinearTaps>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulBroadcast {
        x: usize,
        w: usize,
    },
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Concat {
        inputs: Vec<usize>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Sum(usize),
    SumAxis {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    /// Scalar sum of per-element terms whose local derivatives were
    /// computed during the forward pass.
    Reduce {
        x: usize,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations for one forward/backward pass. A tape is confined to
/// the thread that builds it.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    train: bool,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch(msg()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            precision: Precision::F64,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            backward_done: false,
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::new()
        }
    }

    /// Enables dropout; `seed` fixes its masks.
    pub fn set_train(&mut self, train: bool, seed: u64) {
        self.train = train;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn round(&self, mut data: Vec<f64>) -> Vec<f64> {
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        data
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let data = self.round(data);
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ---- convolution family -------------------------------------------------

    fn conv_shapes(&self, x: Var, w: Var, transposed: bool) -> Result<(usize, [usize; 4], [usize; 5])> {
        let xsh = self.shape(x);
        let wsh = self.shape(w);
        let rank = xsh.len().saturating_sub(1);
        check((1..=3).contains(&rank), || {
            format!(
                "conv input must be [C, spatial..] with 1-3 spatial axes, got {}",
                shape_str(xsh)
            )
        })?;
        check(wsh.len() == rank + 2, || {
            format!("conv weight {} does not match input rank {}", shape_str(wsh), rank)
        })?;
        let in_ch = if transposed { wsh[0] } else { wsh[1] };
        check(in_ch == xsh[0], || {
            format!(
                "conv expects {} input channels, input {} has {}",
                in_ch,
                shape_str(xsh),
                xsh[0]
            )
        })?;
        let mut xs = [xsh[0], 1, 1, 1];
        let mut ws = [wsh[0], wsh[1], 1, 1, 1];
        for a in 0..rank {
            xs[4 - rank + a] = xsh[1 + a];
            ws[5 - rank + a] = wsh[2 + a];
        }
        Ok((rank, xs, ws))
    }

    fn lift_geom(rank: usize, stride: &[usize], padding: &[usize], dilation: &[usize]) -> Result<ConvGeom> {
        let mut g = ConvGeom::identity();
        for (name, v) in [("stride", stride), ("padding", padding), ("dilation", dilation)] {
            if v.len() != rank {
                return Err(TensorError::InvalidArgument(format!(
                    "{name} needs {rank} entries, got {}",
                    v.len()
                )));
            }
        }
        for a in 0..rank {
            let t = 3 - rank + a;
            g.stride[t] = stride[a];
            g.padding[t] = padding[a];
            g.dilation[t] = dilation[a];
            if stride[a] == 0 || dilation[a] == 0 {
                return Err(TensorError::InvalidArgument("stride and dilation must be >= 1".into()));
            }
        }
        Ok(g)
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            check(self.shape(b) == [channels], || {
                format!(
                    "bias {} does not match {channels} output channels",
                    shape_str(self.shape(b))
                )
            })?;
        }
        Ok(())
    }

    /// N-d cross-correlation (N = 1..3). `x: [C_in, ...]`, `w: [C_out, C_in, k...]`.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: &[usize],
        padding: &[usize],
        dilation: &[usize],
    ) -> Result<Var> {
        let (rank, xs, ws) = self.conv_shapes(x, w, false)?;
        let geom = Self::lift_geom(rank, stride, padding, dilation)?;
        self.check_bias(b, ws[0])?;
        let mut ys = [ws[0], 1, 1, 1];
        for t in 1..4 {
            ys[t] = kernels::conv_out_len(
                xs[t],
                ws[t + 1],
                geom.stride[t - 1],
                geom.padding[t - 1],
                geom.dilation[t - 1],
            )
            .ok_or_else(|| {
                TensorError::ShapeMismatch(format!(
                    "kernel {} does not fit padded input {}",
                    shape_str(self.shape(w)),
                    shape_str(self.shape(x))
                ))
            })?;
        }
        let y = kernels::conv_forward(self.data(x), xs, self.data(w), ws, b.map(|b| self.data(b)), &geom, ys);
        let mut shape = vec![ys[0]];
        shape.extend_from_slice(&ys[4 - rank..]);
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            shape,
            y,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                xs,
                ws,
                ys,
            },
            rg,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        check(self.shape(x).len() == 3, || {
            format!("conv2d input must be [C, H, W], got {}", shape_str(self.shape(x)))
        })?;
        self.conv(x, w, b, &[stride; 2], &[padding; 2], &[dilation; 2])
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        check(self.shape(x).len() == 4, || {
            format!("conv3d input must be [C, D1, D2, D3], got {}", shape_str(self.shape(x)))
        })?;
        self.conv(x, w, b, &[stride; 3], &[padding; 3], &[dilation; 3])
    }

    /// Transposed convolution (adjoint of [`Tape::conv`]). `w: [C_in, C_out, k...]`;
    /// `out_size` picks the output extent among the ones the stride admits.
    pub fn conv_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: &[usize],
        padding: &[usize],
        out_size: &[usize],
    ) -> Result<Var> {
        let (rank, xs, ws) = self.conv_shapes(x, w, true)?;
        let geom = Self::lift_geom(rank, stride, padding, &vec![1; rank])?;
        self.check_bias(b, ws[1])?;
        check(out_size.len() == rank, || format!("out_size needs {rank} entries"))?;
        let mut ys = [ws[1], 1, 1, 1];
        for a in 0..rank {
            let t = 4 - rank + a;
            ys[t] = out_size[a];
            // the forward conv of the output back to the input must give xs[t]
            let back = kernels::conv_out_len(ys[t], ws[t + 1], geom.stride[t - 1], geom.padding[t - 1], 1);
            check(back == Some(xs[t]), || {
                format!(
                    "transposed conv output extent {} incompatible with input extent {} (stride {}, pad {})",
                    ys[t],
                    xs[t],
                    geom.stride[t - 1],
                    geom.padding[t - 1]
                )
            })?;
        }
        // y = conv_backward_input(gy = x) with conv weight layout [C_in(x), C_out(y), k]
        let mut y = kernels::conv_backward_input(self.data(x), xs, self.data(w), ws, &geom, ys);
        if let Some(b) = b {
            let sp = ys[1] * ys[2] * ys[3];
            for (c, &bv) in self.data(b).iter().enumerate() {
                for v in &mut y[c * sp..(c + 1) * sp] {
                    *v += bv;
                }
            }
        }
        let mut shape = vec![ys[0]];
        shape.extend_from_slice(&ys[4 - rank..]);
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            shape,
            y,
            Op::ConvTranspose {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                xs,
                ws,
                ys,
            },
            rg,
        ))
    }

    // ---- pooling and resampling ---------------------------------------------

    fn chw(&self, x: Var, what: &str) -> Result<[usize; 3]> {
        let s = self.shape(x);
        check(s.len() == 3, || {
            format!("{what} expects [C, H, W], got {}", shape_str(s))
        })?;
        Ok([s[0], s[1], s[2]])
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let dims = self.chw(x, "max_pool2d")?;
        check(window > 0 && stride > 0 && padding < window, || {
            "max_pool2d needs window > padding and stride >= 1".into()
        })?;
        let oh = kernels::conv_out_len(dims[1], window, stride, padding, 1);
        let ow = kernels::conv_out_len(dims[2], window, stride, padding, 1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(TensorError::ShapeMismatch(format!(
                "max_pool2d window {window} exceeds padded input {}",
                shape_str(self.shape(x))
            )));
        };
        let (y, argmax) = kernels::max_pool2d(self.data(x), dims, [window; 2], [stride; 2], [padding; 2], [oh, ow]);
        let rg = self.rg(x.0);
        Ok(self.push(vec![dims[0], oh, ow], y, Op::MaxPool { x: x.0, argmax }, rg))
    }

    /// Non-overlapping average pooling; stride equals `window`.
    pub fn avg_pool2d(&mut self, x: Var, window: [usize; 2]) -> Result<Var> {
        let dims = self.chw(x, "avg_pool2d")?;
        check(
            window[0] >= 1 && window[1] >= 1 && window[0] <= dims[1] && window[1] <= dims[2],
            || {
                format!(
                    "avg_pool2d window {window:?} exceeds input {}",
                    shape_str(self.shape(x))
                )
            },
        )?;
        let y = kernels::avg_pool2d(self.data(x), dims, window);
        let rg = self.rg(x.0);
        Ok(self.push(
            vec![dims[0], dims[1] / window[0], dims[2] / window[1]],
            y,
            Op::AvgPool { x: x.0, dims, window },
            rg,
        ))
    }

    /// Align-corners bilinear resize of `[C, H, W]` to `[C, out_h, out_w]`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = self.chw(x, "upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidArgument("upsample output dims must be >= 1".into()));
        }
        if [out_h, out_w] == [dims[1], dims[2]] {
            return Ok(x);
        }
        let y = kernels::resize_bilinear(self.data(x), dims, [out_h, out_w]);
        let rg = self.rg(x.0);
        Ok(self.push(
            vec![dims[0], out_h, out_w],
            y,
            Op::Resize {
                x: x.0,
                dims,
                out: [out_h, out_w],
            },
            rg,
        ))
    }

    /// Bilinear lookups of a `[C, H, W]` map at `points` (`None` yields zeros).
    /// Output is `[C, N]`.
    pub fn bilinear_gather(&mut self, feat: Var, points: &[Option<(f64, f64)>]) -> Result<Var> {
        let [c, h, w] = self.chw(feat, "bilinear_gather")?;
        let taps: Vec<BilinearTaps> = points
            .iter()
            .map(|p| match p {
                Some((u, v)) => kernels::bilinear_taps(h, w, *u, *v),
                None => [(0, 0.0); 4],
            })
            .collect();
        let y = kernels::gather(self.data(feat), c, h * w, &taps);
        let rg = self.rg(feat.0);
        Ok(self.push(
            vec![c, points.len()],
            y,
            Op::Gather {
                x: feat.0,
                c,
                hw: h * w,
                taps,
            },
            rg,
        ))
    }

    /// Single-point lookup, `[C]`.
    pub fn bilinear_sample(&mut self, feat: Var, u: f64, v: f64) -> Result<Var> {
        let g = self.bilinear_gather(feat, &[Some((u, v))])?;
        let c = self.shape(g)[0];
        self.reshape(g, &[c])
    }

    // ---- elementwise ----------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        check(self.shape(a) == self.shape(b), || {
            format!("{what}: {} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b)))
        })
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let y: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(self.shape(a).to_vec(), y, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `x: [C, rest..] * w: [rest..]`, broadcasting `w` over the leading axis.
    pub fn mul_broadcast(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        check(xs.len() >= 2 && xs[1..] == *self.shape(w), || {
            format!("mul_broadcast: {} vs {}", shape_str(xs), shape_str(self.shape(w)))
        })?;
        let inner = self.value(w).numel();
        let wd = self.data(w);
        let y: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * wd[i % inner])
            .collect();
        let rg = self.rg(x.0) || self.rg(w.0);
        Ok(self.push(self.shape(x).to_vec(), y, Op::MulBroadcast { x: x.0, w: w.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.data(x).iter().map(|v| v * k).collect();
        let rg = self.rg(x.0);
        self.push(self.shape(x).to_vec(), y, Op::Scale(x.0, k), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.rg(x.0);
        self.push(self.shape(x).to_vec(), y, Op::Relu(x.0), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x.0);
        self.push(self.shape(x).to_vec(), y, Op::Sigmoid(x.0), rg)
    }

    /// Inverted dropout: identity outside train mode, otherwise zeroes with
    /// probability `p` and rescales survivors by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout p must be in [0, 1), got {p}"
            )));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let y = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x.0);
        Ok(self.push(self.shape(x).to_vec(), y, Op::Dropout { x: x.0, mask }, rg))
    }

    // ---- shape ----------------------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        check(!xs.is_empty(), || "concat of zero tensors".into())?;
        let first = self.shape(xs[0]).to_vec();
        check(axis < first.len(), || {
            format!("concat axis {axis} out of range for {}", shape_str(&first))
        })?;
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            check(
                s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                || format!("concat on axis {axis}: {} vs {}", shape_str(&first), shape_str(s)),
            )?;
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &n) in xs.iter().zip(&sizes) {
                y.extend_from_slice(&self.data(x)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|x| self.rg(x.0));
        Ok(self.push(
            shape,
            y,
            Op::Concat {
                inputs: xs.iter().map(|x| x.0).collect(),
                sizes,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        check(n == self.value(x).numel(), || {
            format!("cannot reshape {} into {}", shape_str(self.shape(x)), shape_str(shape))
        })?;
        let y = self.data(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape.to_vec(), y, Op::Reshape(x.0), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        check(perm.len() == in_shape.len(), || {
            format!("permute {perm:?} for rank {}", in_shape.len())
        })?;
        for &p in perm {
            check(p < seen.len() && !seen[p], || format!("invalid permutation {perm:?}"))?;
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let y = permute_data(self.data(x), &in_shape, perm);
        let rg = self.rg(x.0);
        Ok(self.push(
            out_shape,
            y,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
                in_shape,
            },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(x.0);
        self.push(vec![1], vec![s], Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check(axis < shape.len(), || {
            format!("sum_axis {axis} out of range for {}", shape_str(&shape))
        })?;
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xd[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, s) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            out_shape,
            y,
            Op::SumAxis {
                x: x.0,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    /// Scalar `sum_i f(i, x_i)` where `f` returns the term and its derivative.
    pub fn reduce_with(&mut self, x: Var, mut f: impl FnMut(usize, f64) -> (f64, f64)) -> Var {
        let mut total = 0.0;
        let mut local_grad = Vec::with_capacity(self.value(x).numel());
        for (i, &v) in self.data(x).iter().enumerate() {
            let (val, d) = f(i, v);
            total += val;
            local_grad.push(d);
        }
        let rg = self.rg(x.0);
        self.push(vec![1], vec![total], Op::Reduce { x: x.0, local_grad }, rg)
    }

    // ---- backward -------------------------------------------------------------

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every
    /// node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let mut reached_leaf = false;
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                if let Some(g) = g {
                    reached_leaf |= matches!(node.op, Op::Leaf);
                    node.grad = Some(if self.precision == Precision::F32 {
                        g.into_iter().map(|v| v as f32 as f64).collect()
                    } else {
                        g
                    });
                }
            }
        }
        if !reached_leaf {
            log::warn!("backward: loss is not connected to any trainable tensor");
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], idx: usize, contrib: Vec<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                xs,
                ws,
                ys,
            } => {
                if self.rg(*x) {
                    let gx = kernels::conv_backward_input(g, *ys, self.nodes[*w].value.data(), *ws, geom, *xs);
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let gw = kernels::conv_backward_weight(g, *ys, self.nodes[*x].value.data(), *xs, *ws, geom);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, kernels::bias_grad(g, ys[0]));
                }
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                geom,
                xs,
                ws,
                ys,
            } => {
                if self.rg(*x) {
                    let gx = kernels::conv_forward(g, *ys, self.nodes[*w].value.data(), *ws, None, geom, *xs);
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let gw = kernels::conv_backward_weight(self.nodes[*x].value.data(), *xs, g, *ys, *ws, geom);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, kernels::bias_grad(g, ys[0]));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.nodes[*x].value.numel()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    if a != usize::MAX {
                        gx[a] += gv;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool { x, dims, window } => {
                self.accumulate(grads, *x, kernels::avg_pool2d_backward(g, *dims, *window));
            }
            Op::Resize { x, dims, out } => {
                self.accumulate(grads, *x, kernels::resize_bilinear_backward(g, *dims, *out));
            }
            Op::Gather { x, c, hw, taps } => {
                self.accumulate(grads, *x, kernels::gather_backward(g, *c, *hw, taps));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
                }
            }
            Op::MulBroadcast { x, w } => {
                let (xd, wd) = (self.nodes[*x].value.data(), self.nodes[*w].value.data());
                let inner = wd.len();
                if self.rg(*x) {
                    self.accumulate(
                        grads,
                        *x,
                        g.iter().enumerate().map(|(i, g)| g * wd[i % inner]).collect(),
                    );
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; inner];
                    for (i, (gv, xv)) in g.iter().zip(xd).enumerate() {
                        gw[i % inner] += gv * xv;
                    }
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.iter().map(|v| v * k).collect()),
            Op::Relu(x) => {
                let xd = self.nodes[*x].value.data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                self.accumulate(grads, *x, g.iter().zip(yd).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::Concat {
                inputs,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&inp, &n) in inputs.iter().zip(sizes) {
                    if self.rg(inp) {
                        let mut gx = Vec::with_capacity(outer * n * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[start..start + n * inner]);
                        }
                        self.accumulate(grads, inp, gx);
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, perm, in_shape } => {
                let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, permute_data(g, &out_shape, &inv));
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis { x, outer, n, inner } => {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..*outer {
                    for a in 0..*n {
                        gx[(o * n + a) * inner..(o * n + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reduce { x, local_grad } => {
                self.accumulate(grads, *x, local_grad.iter().map(|d| d * g[0]).collect());
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn permute_data(x: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * in_shape[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut y = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        y.push(x[src]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            src += strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            src -= strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_1x1_conv() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 3, 4], |i| i as f64 * 0.5 - 1.0), false);
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0]), false);
        let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn ones_kernel_on_one_hot() {
        let mut tape = Tape::new();
        let mut d = vec![0.0; 25];
        d[12] = 1.0;
        let x = tape.leaf(t(&[1, 5, 5], &d), false);
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let y = tape.conv2d(x, w, None, 1, 1, 1).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let expect = if (1..=3).contains(&r) && (1..=3).contains(&c) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(tape.data(y)[r * 5 + c], expect);
            }
        }
    }

    #[test]
    fn conv3d_identity_and_delta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 3, 3], |i| i as f64), false);
        let mut wd = vec![0.0; 4];
        wd[0] = 1.0;
        wd[3] = 1.0;
        let w = tape.leaf(t(&[2, 2, 1, 1, 1], &wd), false);
        let y = tape.conv3d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let mut d = vec![0.0; 27];
        d[13] = 1.0;
        let x = tape.leaf(t(&[1, 3, 3, 3], &d), false);
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3, 3], 1.0), false);
        let y = tape.conv3d(x, w, None, 1, 1, 1).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        assert!(matches!(
            tape.conv2d(x, w, None, 1, 1, 1),
            Err(TensorError::ShapeMismatch(_))
        ));
        let w = tape.leaf(Tensor::zeros(&[1, 2, 7, 7]), false);
        assert!(matches!(
            tape.conv2d(x, w, None, 1, 1, 1),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let a = tape.avg_pool2d(x, [2, 2]).unwrap();
        let m = tape.max_pool2d(x, 2, 2, 0).unwrap();
        assert_eq!(tape.data(a), &[2.5]);
        assert_eq!(tape.data(m), &[4.0]);

        let c = tape.leaf(Tensor::full(&[2, 6, 6], 3.0), false);
        let a = tape.avg_pool2d(c, [3, 3]).unwrap();
        let m = tape.max_pool2d(c, 3, 2, 1).unwrap();
        assert!(tape.data(a).iter().all(|&v| v == 3.0));
        assert!(tape.data(m).iter().all(|&v| v == 3.0));
        assert_eq!(tape.shape(m), &[2, 3, 3]);
        assert!(tape.avg_pool2d(c, [7, 7]).is_err());
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2], 1.0), true);
        let m = tape.max_pool2d(x, 2, 2, 0).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2], &[0.0, 1.0]), false);
        let y = tape.upsample_bilinear(x, 1, 3).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.5, 1.0]);
        let same = tape.upsample_bilinear(x, 1, 2).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
    }

    #[test]
    fn bilinear_sample_examples() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64), false);
        let s = tape.bilinear_sample(f, 2.0, 1.0).unwrap();
        assert_eq!(tape.data(s), &[6.0, 18.0]);
        let m = tape.leaf(t(&[1, 1, 2], &[0.0, 1.0]), false);
        let s = tape.bilinear_sample(m, 0.5, 0.0).unwrap();
        assert_eq!(tape.data(s), &[0.5]);
        let s = tape.bilinear_sample(f, -1.0, 1.0).unwrap();
        assert_eq!(tape.data(s), &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]), true);
        let y = tape.sigmoid(x);
        assert_eq!(tape.data(y), &[0.5]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::full(&[2, 3], 1.0), false);
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[4, 3]);
        let d = tape.dropout(c, 0.5).unwrap();
        assert_eq!(d, c);
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn dropout_train_mode_scales() {
        let mut tape = Tape::new();
        tape.set_train(true, 9);
        let x = tape.leaf(Tensor::full(&[1000], 1.0), false);
        let y = tape.dropout(x, 0.2).unwrap();
        for &v in tape.data(y) {
            assert!(v == 0.0 || (v - 1.25).abs() < 1e-15);
        }
        let kept = tape.data(y).iter().filter(|&&v| v > 0.0).count();
        assert!((700..900).contains(&kept));
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(matches!(tape.backward(s), Err(TensorError::DoubleBackward)));
        tape.zero_grad();
        tape.backward(s).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
        assert!(matches!(tape.backward(x), Err(TensorError::DoubleBackward)));

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn permute_and_reshape_preserve_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64), false);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(tape.data(p)[(1 * 2 + 1) * 3 + 2], ((1 * 3 + 2) * 4 + 1) as f64);
        let r = tape.reshape(x, &[6, 4]).unwrap();
        assert_eq!(tape.data(r), tape.data(x));
    }

    #[test]
    fn transposed_conv_is_adjoint() {
        // <conv(x), y> == <x, conv_T(y)>
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 5, 6], |i| ((i * 7) % 5) as f64 - 2.0), false);
        let w = tape.leaf(Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 3) % 4) as f64 - 1.5), false);
        let cx = tape.conv(x, w, None, &[2, 2], &[1, 1], &[1, 1]).unwrap();
        let y = tape.leaf(Tensor::from_fn(tape.shape(cx), |i| ((i * 5) % 3) as f64 - 1.0), false);
        let ty = tape.conv_transpose(y, w, None, &[2, 2], &[1, 1], &[5, 6]).unwrap();
        let lhs: f64 = tape.data(cx).iter().zip(tape.data(y)).map(|(a, b)| a * b).sum();
        let rhs: f64 = tape.data(x).iter().zip(tape.data(ty)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
        assert!(tape.conv_transpose(y, w, None, &[2, 2], &[1, 1], &[9, 9]).is_err());
    }
}
