//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes on fresh tapes, so it
//! shares no code with the reverse sweep it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Precision, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    /// Cap on checked entries per input (evenly strided); `None` checks all.
    pub max_entries_per_input: Option<usize>,
    pub precision: Precision,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            abs_floor: 1e-5,
            max_entries_per_input: None,
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstEntry {
    pub input: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<WorstEntry>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(inputs: &[Tensor], f: &F, precision: Precision) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_precision(precision);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.data(out)[0])
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_precision(opts.precision);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut perturbed = inputs.to_vec();
    for (input, grads) in analytic.iter().enumerate() {
        let n = inputs[input].numel();
        let step = match opts.max_entries_per_input {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for entry in (0..n).step_by(step) {
            let orig = inputs[input].data()[entry];
            perturbed[input].data_mut()[entry] = orig + opts.eps;
            let plus = evaluate(&perturbed, &f, opts.precision)?;
            perturbed[input].data_mut()[entry] = orig - opts.eps;
            let minus = evaluate(&perturbed, &f, opts.precision)?;
            perturbed[input].data_mut()[entry] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(grads[entry], numeric, opts.abs_floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(WorstEntry {
                    input,
                    entry,
                    analytic: grads[entry],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// One finite-difference check of a single operation on one random shape.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub shapes: String,
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Collapses `y` to a scalar with fixed random weights so every output entry
/// feeds the gradient with a distinct coefficient.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random(&mut rng, t.shape(y)));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Builds one random case of `op`: its inputs and the function under test.
fn op_case(op: &'static str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, OpFn) {
    let mut g = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut dim = |lo: usize, hi: usize| g.gen_range(lo..=hi);
    let (c, h, w) = (dim(1, 4), dim(3, 7), dim(3, 7));
    let (co, k) = (dim(1, 4), [1, 3][dim(0, 1)]);
    let (stride, dil) = (dim(1, 2), dim(1, 2));
    let d = dim(2, 4);
    let n = dim(2, 6);
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut t = |shape: &[usize]| random(&mut r, shape);
    match op {
        "conv2d" => {
            let pad = dil * (k - 1) / 2;
            (
                vec![t(&[c, h, w]), t(&[co, c, k, k]), t(&[co])],
                Box::new(move |tp, v| tp.conv2d(v[0], v[1], Some(v[2]), stride, pad, dil)),
            )
        }
        "conv3d" => (
            vec![t(&[c, d, h, w]), t(&[co, c, 3, 3, 3]), t(&[co])],
            Box::new(move |tp, v| tp.conv(v[0], v[1], Some(v[2]), &[stride, 1, stride], &[1; 3], &[1; 3])),
        ),
        "conv_transpose2d" => {
            let out = [(h - 1) * stride + 1, (w - 1) * stride + stride];
            (
                vec![t(&[c, h, w]), t(&[c, co, 3, 3]), t(&[co])],
                Box::new(move |tp, v| tp.conv_transpose(v[0], v[1], Some(v[2]), &[stride; 2], &[1; 2], &out)),
            )
        }
        "conv_transpose3d" => (
            vec![t(&[c, d, h, w]), t(&[c, co, 3, 3, 3]), t(&[co])],
            Box::new(move |tp, v| tp.conv_transpose(v[0], v[1], Some(v[2]), &[2, 1, 2], &[1; 3], &[2 * d, h, 2 * w])),
        ),
        "max_pool2d" => (vec![t(&[c, h, w])], Box::new(|tp, v| tp.max_pool2d(v[0], 3, 2, 1))),
        "avg_pool2d" => {
            let win = [dim(1, h), dim(1, w)];
            (vec![t(&[c, h, w])], Box::new(move |tp, v| tp.avg_pool2d(v[0], win)))
        }
        "upsample_bilinear" => {
            let (oh, ow) = (dim(1, 12), dim(2, 12));
            (
                vec![t(&[c, h, w])],
                Box::new(move |tp, v| tp.upsample_bilinear(v[0], oh, ow)),
            )
        }
        "bilinear_gather" => {
            // some points partially or fully off the map
            let pts: Vec<Option<(f64, f64)>> = (0..n)
                .map(|i| {
                    (i % 5 != 4).then(|| (rng.gen_range(-1.5..w as f64 + 0.5), rng.gen_range(-1.5..h as f64 + 0.5)))
                })
                .collect();
            (
                vec![t(&[c, h, w])],
                Box::new(move |tp, v| tp.bilinear_gather(v[0], &pts)),
            )
        }
        "add" => (vec![t(&[c, h, w]), t(&[c, h, w])], Box::new(|tp, v| tp.add(v[0], v[1]))),
        "sub" => (vec![t(&[c, h, w]), t(&[c, h, w])], Box::new(|tp, v| tp.sub(v[0], v[1]))),
        "mul" => (vec![t(&[c, h, w]), t(&[c, h, w])], Box::new(|tp, v| tp.mul(v[0], v[1]))),
        "mul_broadcast" => (
            vec![t(&[c, h, w]), t(&[h, w])],
            Box::new(|tp, v| tp.mul_broadcast(v[0], v[1])),
        ),
        "scale" => (vec![t(&[c, h])], Box::new(|tp, v| Ok(tp.scale(v[0], -1.7)))),
        "relu" => (vec![t(&[c, h, w])], Box::new(|tp, v| Ok(tp.relu(v[0])))),
        "sigmoid" => (
            vec![t(&[c, h, w])],
            Box::new(|tp, v| {
                let y = tp.scale(v[0], 4.0);
                Ok(tp.sigmoid(y))
            }),
        ),
        "dropout" => {
            let seed = rng.gen();
            (
                vec![t(&[c, h, w])],
                Box::new(move |tp, v| {
                    tp.set_train(true, seed);
                    tp.dropout(v[0], 0.2)
                }),
            )
        }
        "concat" => {
            let axis = dim(0, 2);
            let mut other = [c, h, w];
            other[axis] = n;
            (
                vec![t(&[c, h, w]), t(&other)],
                Box::new(move |tp, v| tp.concat(&[v[0], v[1]], axis)),
            )
        }
        "reshape" => (
            vec![t(&[c, h, w])],
            Box::new(move |tp, v| tp.reshape(v[0], &[c * h, w])),
        ),
        "permute" => (
            vec![t(&[c, d, h, w])],
            Box::new(|tp, v| tp.permute(v[0], &[0, 2, 1, 3])),
        ),
        "sum" => (vec![t(&[c, h, w])], Box::new(|tp, v| Ok(tp.sum(v[0])))),
        "mean" => (vec![t(&[c, h, w])], Box::new(|tp, v| Ok(tp.mean(v[0])))),
        "sum_axis" => {
            let axis = dim(0, 2);
            (vec![t(&[c, h, w])], Box::new(move |tp, v| tp.sum_axis(v[0], axis)))
        }
        "reduce_with" => (
            vec![t(&[c, h, w])],
            Box::new(|tp, v| Ok(tp.reduce_with(v[0], |i, x| ((i as f64 + 1.0) * x.sin(), (i as f64 + 1.0) * x.cos())))),
        ),
        other => unreachable!("no gradient case for {other}"),
    }
}

/// Every differentiable operation of the tape.
pub const DIFFERENTIABLE_OPS: [&str; 23] = [
    "conv2d",
    "conv3d",
    "conv_transpose2d",
    "conv_transpose3d",
    "max_pool2d",
    "avg_pool2d",
    "upsample_bilinear",
    "bilinear_gather",
    "add",
    "sub",
    "mul",
    "mul_broadcast",
    "scale",
    "relu",
    "sigmoid",
    "dropout",
    "concat",
    "reshape",
    "permute",
    "sum",
    "mean",
    "sum_axis",
    "reduce_with",
];

/// Checks every differentiable operation on `cases` random shapes each.
pub fn op_suite(seed: u64, cases: usize, opts: GradCheckOptions) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for op in DIFFERENTIABLE_OPS {
        for _ in 0..cases {
            let (inputs, f) = op_case(op, &mut rng);
            let shapes = inputs
                .iter()
                .map(|t| format!("{:?}", t.shape()))
                .collect::<Vec<_>>()
                .join(" ");
            let wseed = rng.gen();
            let report = check_gradients(
                &inputs,
                |tp, v| {
                    let y = f(tp, v)?;
                    weighted_sum(tp, y, wseed)
                },
                opts,
            )?;
            out.push(OpCheck { op, shapes, report });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let r = check_gradients(
            &[x],
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.passes(1e-8), "{r:?}");
    }

    #[test]
    fn every_op_passes_on_one_shape() {
        for c in op_suite(11, 1, GradCheckOptions::default()).unwrap() {
            assert!(c.report.passes(1e-5), "{} {} {:?}", c.op, c.shapes, c.report);
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        // reduce_with with a deliberately wrong local derivative
        let x = Tensor::from_fn(&[3], |i| i as f64 + 1.0);
        let r = check_gradients(
            &[x],
            |t, v| Ok(t.reduce_with(v[0], |_, x| (x * x, x))),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passes(1e-2));
    }
}
