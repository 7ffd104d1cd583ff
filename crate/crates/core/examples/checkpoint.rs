//! Save a trained model, load it back, and show that a corrupted or
//! newer-format file is refused.

use noprop::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, VERSION};
use noprop::config::{Method, TrainConfig};
use noprop::data::synth_blobs;
use noprop::trainer::{train, ModelBundle, TrainHooks};

fn main() -> noprop::Result<()> {
    let data = synth_blobs(50, 2, 10.0, 1.0, 1)?;
    let mut cfg = TrainConfig::toy(Method::Ct);
    cfg.epochs = 3;
    let mut bundle = ModelBundle::new(&cfg, &data)?;
    train(&mut bundle, &data, TrainHooks::default())?;

    let path = std::env::temp_dir().join("noprop-example.nprp");
    save_checkpoint(&bundle, &path)?;
    let back = load_checkpoint(&path)?;
    println!("{} bytes, round trip exact: {}", std::fs::metadata(&path)?.len(), back == bundle);

    let mut bytes = to_bytes(&bundle, &[]);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    println!("flipped byte: {}", from_bytes(&bytes).unwrap_err());

    let mut bytes = to_bytes(&bundle, &[]);
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    println!("newer file: {}", from_bytes(&bytes).unwrap_err());
    std::fs::remove_file(path)?;
    Ok(())
}
