//! Reverse-mode autodiff on a tiny conv net, checked against central finite
//! differences.

use plumenet::tensor::gradcheck::{check_gradients, GradCheckOptions};
use plumenet::tensor::{Tape, Tensor};

fn main() {
    let x = Tensor::from_fn(&[2, 6, 6], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
    let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 17) % 7) as f64 / 7.0 - 0.4);
    let b = Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap();

    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.leaf(x.clone(), true),
        tape.leaf(w.clone(), true),
        tape.leaf(b.clone(), true),
    );
    let y = tape.conv2d(xv, wv, Some(bv), 1, 1, 1).unwrap();
    let y = tape.sigmoid(y);
    let p = tape.max_pool2d(y, 2, 2, 0).unwrap();
    let loss = tape.mean(p);
    tape.backward(loss).unwrap();
    println!(
        "loss {:.6}  |dL/dw| {:.6}",
        tape.data(loss)[0],
        tape.grad(wv).unwrap().iter().map(|g| g * g).sum::<f64>().sqrt()
    );

    let report = check_gradients(
        &[x, w, b],
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
            let y = t.sigmoid(y);
            let p = t.max_pool2d(y, 2, 2, 0)?;
            Ok(t.mean(p))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    println!(
        "checked {} entries, max relative error {:.2e}",
        report.checked, report.max_rel_err
    );
}
