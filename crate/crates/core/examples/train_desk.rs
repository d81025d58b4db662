//! Trains the desk preset on seeded synthetic images and reports held-out
//! average precision.
//!
//! cargo run --release --example train_desk -- [epochs] [train images]

use foci::config::NetworkConfig;
use foci::model::Detector;
use foci::pipeline::{evaluate_detector, EvalConfig};
use foci::synth::{synth_dataset, SynthConfig};
use foci::train::{train_loop, TrainConfig, TrainState};

fn main() -> foci::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(10, |e| e.parse().expect("epochs"));
    let images = args.next().map_or(200, |n| n.parse().expect("images"));
    let synth = SynthConfig::desk();
    let train = synth_dataset(&synth, 0, images);
    let held = synth_dataset(&synth, 100_000, 50);
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::desk()
    };
    let mut det = Detector::<f32>::new(NetworkConfig::desk(), cfg.seed)?;
    println!("{} parameters", det.parameter_count());
    let mut state = TrainState::new(&det);
    train_loop(&mut det, &train, &cfg, &mut state, |e| {
        println!("epoch {:>2} loss {:.4} {:?}", e.epoch, e.mean_loss, e.terms);
        Ok(())
    })?;
    let report = evaluate_detector(&mut det, &held, &EvalConfig::default())?;
    println!(
        "held-out mAP@0.25 {:.4}, max recall {:.4}",
        report.map.unwrap_or(0.0),
        report.max_recall
    );
    Ok(())
}
