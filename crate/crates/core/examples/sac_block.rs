//! Switchable atrous convolution: a per-pixel switch blends a 3x3 branch
//! with a dilated 5x5 branch.

use foci::params::{Mode, ParamStore, Session};
use foci::rng::SplitMix64;
use foci::sac::Sac;
use foci::tensor::{Shape, Tensor};

fn main() -> foci::Result<()> {
    let mut rng = SplitMix64::new(3);
    let mut store = ParamStore::<f64>::new();
    let sac = Sac::build(&mut store, "sac", 4, &mut rng)?;
    let x = Tensor::from_fn(Shape::new(1, 4, 8, 8), |_| rng.uniform(-1.0, 1.0));
    let mut sess = Session::new(&mut store, Mode::Eval);
    let xv = sess.tape.constant(x);
    let parts = sac.forward_parts(&mut sess, xv)?;
    let t = &sess.tape;
    let s = t.value(parts.switch).data();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    println!("switch mean {mean:.3} over {} pixels", s.len());
    let (y, a, b) = (
        t.value(parts.output),
        t.value(parts.branch_a),
        t.value(parts.branch_b),
    );
    let inside = y
        .data()
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .filter(|(&y, (&a, &b))| y >= a.min(b) - 1e-12 && y <= a.max(b) + 1e-12)
        .count();
    println!("{inside} of {} outputs lie between the branches", y.numel());
    Ok(())
}
