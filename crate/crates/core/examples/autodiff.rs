//! Builds a small graph on the gradient tape, backpropagates, and checks the
//! result against central differences.

use foci::rng::SplitMix64;
use foci::tensor::{grad_check, ConvSpec, Shape, Tape, Tensor};

fn main() -> foci::Result<()> {
    let mut rng = SplitMix64::new(1);
    let spec = ConvSpec::new(1, 2, 3).same();
    let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 5, 5), |_| rng.uniform(-1.0, 1.0));
    let w = Tensor::<f64>::from_fn(spec.weight_shape(), |_| rng.uniform(-1.0, 1.0));

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let y = tape.conv2d(xv, wv, None, spec)?;
    let y = tape.sigmoid(y);
    let loss = tape.sum(y);
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item());
    println!("d loss / d w[0] = {:.6}", grads.get(wv).unwrap().data()[0]);

    let report = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, spec)?;
            let y = t.sigmoid(y);
            Ok(t.sum(y))
        },
        &[x, w],
        1e-4,
    )?;
    println!(
        "finite differences over {} elements: max relative error {:.2e}",
        report.checked, report.max_rel_error
    );
    Ok(())
}
