//! Clusters ground-truth box shapes of a synthetic dataset into anchor priors
//! with the 1 - IoU distance.

use foci::head::AnchorSet;
use foci::synth::{synth_dataset, SynthConfig};

fn main() -> foci::Result<()> {
    let data = synth_dataset(&SynthConfig::desk(), 0, 200);
    for k in [1, 3, 5] {
        let anchors = AnchorSet::from_ground_truth(&data.ground_truth, 4, k, 0)?;
        let priors: Vec<String> = anchors
            .priors()
            .iter()
            .map(|(w, h)| format!("{w:.2}x{h:.2}"))
            .collect();
        println!("k={k}: {}", priors.join(" "));
    }
    Ok(())
}
