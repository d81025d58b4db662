//! Saves a detector to the binary weight format, reloads it, and round-trips
//! a training checkpoint with its optimizer state.

use foci::config::NetworkConfig;
use foci::io::WeightFile;
use foci::model::Detector;
use foci::train::{checkpoint, restore, TrainState};

fn main() -> foci::Result<()> {
    let det = Detector::<f32>::new(NetworkConfig::desk(), 1)?;
    let bytes = WeightFile::from_store(&det.store).encode();
    println!("{} tensors, {} bytes", det.store.len(), bytes.len());

    let mut other = Detector::<f32>::new(NetworkConfig::desk(), 2)?;
    other
        .store
        .load_values(WeightFile::decode(&bytes)?.params)?;
    println!(
        "reloaded weights identical: {}",
        WeightFile::from_store(&other.store).encode() == bytes
    );

    let ckpt = checkpoint(&det, &TrainState::new(&det)).encode();
    let state = restore(&mut other, WeightFile::decode(&ckpt)?)?;
    println!(
        "checkpoint {} bytes, epoch {}, adam step {}",
        ckpt.len(),
        state.epoch,
        state.adam.step
    );

    match WeightFile::decode(&bytes[..bytes.len() / 2]) {
        Err(e) => println!("truncated file: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
