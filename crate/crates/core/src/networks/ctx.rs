use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NetworkError, Result};
use crate::tensor::params::fnv1a;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Which parameters receive gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    All,
    None,
    /// Only names starting with one of the prefixes.
    Prefixes(Vec<String>),
    /// Every name except those starting with one of the prefixes.
    Except(Vec<String>),
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
            Trainable::Except(p) => !p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Weight initialization of a new parameter.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Uniform in `±gain·sqrt(6 / fan_in)`.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
    Const(f64),
}

/// Binds named parameters to tape leaves for one forward pass, creating
/// missing ones with a per-name seeded initializer. Also records the shape
/// trace of named layers.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    params: &'a mut ParamStore,
    seed: u64,
    trainable: Trainable,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    trace: Vec<(String, Vec<usize>)>,
    tracing: bool,
}

/// Gain of the last convolution in every residual branch, keeping the
/// activation scale of deep residual stacks bounded without normalization.
pub(crate) const RESIDUAL_GAIN: f64 = 0.5;

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a mut ParamStore, seed: u64, trainable: Trainable) -> Self {
        Self {
            tape,
            params,
            seed,
            trainable,
            bound: HashMap::new(),
            order: Vec::new(),
            trace: Vec::new(),
            tracing: true,
        }
    }

    pub(crate) fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = match self.params.get(name) {
            Some(t) if t.shape() != shape => {
                return Err(NetworkError::CheckpointMismatch {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                })
            }
            Some(t) => t.clone(),
            None => {
                let t = init_tensor(shape, init, self.seed ^ fnv1a(name.as_bytes()));
                self.params.insert(name, t.clone());
                t
            }
        };
        let v = self.tape.leaf(t, self.trainable.includes(name));
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// Parameters bound so far, in first-use order.
    pub fn bound_params(&self) -> Vec<(String, Var)> {
        self.order.iter().map(|n| (n.clone(), self.bound[n])).collect()
    }

    /// Records `name → shape(v)` the first time `name` is seen.
    pub fn record(&mut self, name: &str, v: Var) {
        if self.tracing && !self.trace.iter().any(|(n, _)| n == name) {
            self.trace.push((name.to_string(), self.tape.shape(v).to_vec()));
        }
    }

    pub fn trace(&self) -> &[(String, Vec<usize>)] {
        &self.trace
    }

    pub(crate) fn without_trace<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.tracing;
        self.tracing = false;
        let out = f(self);
        self.tracing = prev;
        out
    }

    /// N-d convolution layer `name` with a `k`-sized kernel on every axis
    /// and "same" padding for stride 1.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv(
        &mut self,
        name: &str,
        x: Var,
        cout: usize,
        k: usize,
        stride: &[usize],
        dilation: usize,
        gain: f64,
    ) -> Result<Var> {
        let xs = self.tape.shape(x).to_vec();
        let rank = xs.len() - 1;
        let cin = xs[0];
        let mut wshape = vec![cout, cin];
        wshape.extend(std::iter::repeat_n(k, rank));
        let fan_in = cin * k.pow(rank as u32);
        let w = self.param(&format!("{name}.w"), &wshape, Init::FanIn { fan_in, gain })?;
        let b = self.param(&format!("{name}.b"), &[cout], Init::Const(0.0))?;
        let pad = dilation * (k - 1) / 2;
        Ok(self
            .tape
            .conv(x, w, Some(b), stride, &vec![pad; rank], &vec![dilation; rank])?)
    }

    pub(crate) fn conv_relu(
        &mut self,
        name: &str,
        x: Var,
        cout: usize,
        k: usize,
        stride: &[usize],
        dilation: usize,
    ) -> Result<Var> {
        let y = self.conv(name, x, cout, k, stride, dilation, 1.0)?;
        Ok(self.tape.relu(y))
    }

    /// Stride-2 transposed 3-kernel convolution back to `out_size`.
    pub(crate) fn deconv(
        &mut self,
        name: &str,
        x: Var,
        cout: usize,
        stride: &[usize],
        out_size: &[usize],
    ) -> Result<Var> {
        let xs = self.tape.shape(x).to_vec();
        let rank = xs.len() - 1;
        let cin = xs[0];
        let mut wshape = vec![cin, cout];
        wshape.extend(std::iter::repeat_n(3, rank));
        // each output sees about cin * 3^rank / stride^rank taps
        let taps: usize = stride.iter().map(|&s| 3usize.div_ceil(s)).product();
        let w = self.param(
            &format!("{name}.w"),
            &wshape,
            Init::FanIn {
                fan_in: cin * taps,
                gain: 1.0,
            },
        )?;
        let b = self.param(&format!("{name}.b"), &[cout], Init::Const(0.0))?;
        Ok(self
            .tape
            .conv_transpose(x, w, Some(b), stride, &vec![1; rank], out_size)?)
    }

    /// Two 3×3 convolutions with an identity (or 1×1 projection) skip.
    pub(crate) fn basic_block(
        &mut self,
        name: &str,
        x: Var,
        cout: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        let rank = self.tape.shape(x).len() - 1;
        let st = vec![stride; rank];
        let y = self.conv_relu(&format!("{name}.conv1"), x, cout, 3, &st, dilation)?;
        let y = self.conv(
            &format!("{name}.conv2"),
            y,
            cout,
            3,
            &vec![1; rank],
            dilation,
            RESIDUAL_GAIN,
        )?;
        let skip = self.skip(name, x, cout, &st)?;
        let s = self.tape.add(y, skip)?;
        Ok(self.tape.relu(s))
    }

    /// 1×1 reduce, 3×3 (strided), 1×1 expand, with a residual skip.
    pub(crate) fn bottleneck(&mut self, name: &str, x: Var, cout: usize, stride: usize) -> Result<Var> {
        let mid = cout.div_ceil(4);
        let y = self.conv_relu(&format!("{name}.reduce"), x, mid, 1, &[1, 1], 1)?;
        let y = self.conv_relu(&format!("{name}.conv"), y, mid, 3, &[stride, stride], 1)?;
        let y = self.conv(&format!("{name}.expand"), y, cout, 1, &[1, 1], 1, RESIDUAL_GAIN)?;
        let skip = self.skip(name, x, cout, &[stride, stride])?;
        let s = self.tape.add(y, skip)?;
        Ok(self.tape.relu(s))
    }

    fn skip(&mut self, name: &str, x: Var, cout: usize, stride: &[usize]) -> Result<Var> {
        if self.tape.shape(x)[0] == cout && stride.iter().all(|&s| s == 1) {
            Ok(x)
        } else {
            self.conv(&format!("{name}.proj"), x, cout, 1, stride, 1, 1.0)
        }
    }
}

fn init_tensor(shape: &[usize], init: Init, seed: u64) -> Tensor {
    match init {
        Init::Const(c) => Tensor::full(shape, c),
        Init::FanIn { fan_in, gain } => {
            let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("length matches shape")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_per_name_and_order_independent() {
        let mut p1 = ParamStore::new();
        let mut p2 = ParamStore::new();
        let init = Init::FanIn { fan_in: 9, gain: 1.0 };
        {
            let mut t = Tape::new();
            let mut c = Ctx::new(&mut t, &mut p1, 7, Trainable::All);
            c.param("a", &[3, 3], init).unwrap();
            c.param("b", &[2], init).unwrap();
        }
        {
            let mut t = Tape::new();
            let mut c = Ctx::new(&mut t, &mut p2, 7, Trainable::All);
            c.param("b", &[2], init).unwrap();
            c.param("a", &[3, 3], init).unwrap();
        }
        assert_eq!(p1.get("a"), p2.get("a"));
        assert_eq!(p1.get("b"), p2.get("b"));
        assert_ne!(p1.get("a").unwrap().data()[..2], p1.get("b").unwrap().data()[..]);
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(p1.get("a").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::zeros(&[2]));
        let mut t = Tape::new();
        let mut c = Ctx::new(&mut t, &mut p, 0, Trainable::All);
        assert!(matches!(
            c.param("a", &[3], Init::Const(0.0)),
            Err(NetworkError::CheckpointMismatch { .. })
        ));
    }

    #[test]
    fn trainable_filters() {
        let t = Trainable::Prefixes(vec!["detection.".into()]);
        assert!(t.includes("detection.block1.w") && !t.includes("stereo.conv0.w"));
        let t = Trainable::Except(vec!["detection.".into()]);
        assert!(!t.includes("detection.block1.w") && t.includes("stereo.conv0.w"));
    }
}
