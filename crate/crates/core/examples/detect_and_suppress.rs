//! Decodes raw head output into boxes, then applies non-maximum suppression
//! and counts foci the way `foci infer` reports them.

use foci::boxes::{BBox, Detection};
use foci::config::NetworkConfig;
use foci::eval::{count_foci, nms};
use foci::model::Detector;
use foci::synth::{generate_image, SynthConfig};

fn main() -> foci::Result<()> {
    let mut det = Detector::<f32>::new(NetworkConfig::desk(), 0)?;
    let img = generate_image(&SynthConfig::desk(), 0);
    let dets = det.detect(&img.image.to_tensor(), 0.0, 0.45)?;
    println!(
        "untrained network: {} boxes survive NMS at confidence 0",
        dets[0].len()
    );

    let d = |cx, score, index| Detection {
        bbox: BBox::new(cx, 0.5, 0.2, 0.2),
        class_id: 0,
        score,
        index,
    };
    let candidates = [
        d(0.30, 0.9, 1),
        d(0.32, 0.8, 2),
        d(0.70, 0.6, 3),
        d(0.72, 0.2, 4),
    ];
    let kept = nms(&candidates, 0.45);
    let count = count_foci(&kept, 0.25);
    println!(
        "{} of {} candidates kept, {} counted",
        kept.len(),
        candidates.len(),
        count.count
    );
    for label in &count.labels {
        println!("{label}");
    }
    Ok(())
}
