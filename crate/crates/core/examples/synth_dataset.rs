//! Writes a small synthetic foci dataset: PGM images, a JSON-lines annotation
//! file and a manifest that regenerates it.
//!
//! cargo run --example synth_dataset -- <out dir> [count]

use foci::synth::{generate_dataset, generate_image, SynthConfig};

fn main() -> foci::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "synth-foci".into());
    let count = args.next().map_or(8, |c| c.parse().expect("count"));
    let cfg = SynthConfig::desk();
    let manifest = generate_dataset(&cfg, count, &out, true)?;
    println!("wrote {} images to {out}", manifest.count);
    let img = generate_image(&cfg, 0);
    for (gt, blob) in img.ground_truth.iter().zip(&img.blobs) {
        println!(
            "image 0: focus at ({:.1}, {:.1}) px, radius {:.1}, box w {:.3}",
            blob.x, blob.y, blob.radius, gt.bbox.w
        );
    }
    Ok(())
}
