//! Minimises a quadratic with bias-corrected Adam.

use foci::params::{ParamKind, ParamStore};
use foci::tensor::{Shape, Tensor};
use foci::train::{adam_step, AdamState, TrainConfig};

fn main() -> foci::Result<()> {
    let target = [3.0, -2.0];
    let mut store = ParamStore::<f64>::new();
    let id = store.add(
        "theta",
        Tensor::new(Shape::new(2, 1, 1, 1), vec![0.0, 0.0])?,
        ParamKind::Trainable,
    );
    let cfg = TrainConfig {
        learning_rate: 0.1,
        ..TrainConfig::desk()
    };
    let mut state = AdamState::new(&store);
    for step in 0..200 {
        let theta = store.value(id).data().to_vec();
        let grad: Vec<f64> = theta
            .iter()
            .zip(target)
            .map(|(t, c)| 2.0 * (t - c))
            .collect();
        adam_step(
            &mut store,
            &[(id, Tensor::new(Shape::new(2, 1, 1, 1), grad)?)],
            &mut state,
            &cfg,
        )?;
        if step % 50 == 0 {
            println!("step {step:>3}: theta = {:?}", store.value(id).data());
        }
    }
    println!("final theta = {:?}", store.value(id).data());
    Ok(())
}
