//! A dilated 3x3 kernel covers the same window as a dense 5x5 kernel with
//! zeros between the taps.

use foci::rng::SplitMix64;
use foci::tensor::kernels::conv2d;
use foci::tensor::{ConvSpec, Shape, Tensor};

fn main() -> foci::Result<()> {
    let mut rng = SplitMix64::new(2);
    let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 9, 9), |_| rng.uniform(-1.0, 1.0));
    let atrous = ConvSpec::new(1, 1, 3).dilation(2).same();
    let w = Tensor::<f64>::from_fn(atrous.weight_shape(), |_| rng.uniform(-1.0, 1.0));
    let dense_w = Tensor::from_fn(Shape::new(1, 1, 5, 5), |[_, _, y, x]| {
        if y % 2 == 0 && x % 2 == 0 {
            w.at(0, 0, y / 2, x / 2)
        } else {
            0.0
        }
    });
    let dense = ConvSpec::new(1, 1, 5).same();
    let a = conv2d(&x, &w, None, &atrous)?;
    let b = conv2d(&x, &dense_w, None, &dense)?;
    println!(
        "receptive field {} vs {}, output {}, max difference {:.1e}",
        atrous.receptive_field(),
        dense.receptive_field(),
        a.shape(),
        a.max_abs_diff(&b)
    );
    let strided = ConvSpec::new(1, 4, 3).stride(2).same();
    let w4 = Tensor::<f64>::zeros(strided.weight_shape());
    println!(
        "stride 2: {} -> {}",
        x.shape(),
        conv2d(&x, &w4, None, &strided)?.shape()
    );
    Ok(())
}
