//! Runs the desk backbone and pyramid on a blank image and prints every
//! intermediate shape down to the detection grid.

use foci::config::NetworkConfig;
use foci::model::Detector;
use foci::params::{Mode, Session};
use foci::tensor::{Shape, Tensor};

fn main() -> foci::Result<()> {
    let cfg = NetworkConfig::desk();
    let mut det = Detector::<f32>::new(cfg.clone(), 0)?;
    let arch = det.arch.clone();
    let mut sess = Session::new(&mut det.store, Mode::Eval);
    let res = cfg.input_resolution;
    let x = sess
        .tape
        .constant(Tensor::zeros(Shape::new(1, 1, res, res)));
    let out = arch.backbone.forward(&mut sess, x)?;
    for (i, &tap) in out.taps.iter().enumerate() {
        println!("tap {i}: {}", sess.tape.shape(tap));
    }
    let levels = arch.fpn.build_pyramid(&mut sess, &out.taps)?;
    for (i, &p) in levels.iter().enumerate() {
        println!("P{}: {}", i + 2, sess.tape.shape(p));
    }
    let fused = arch.fpn.fuse_pyramid(&mut sess, &levels, cfg.grid)?;
    println!("fused: {}", sess.tape.shape(fused));
    let raw = arch.head.forward(&mut sess, fused)?;
    println!("head: {}", sess.tape.shape(raw));
    Ok(())
}
