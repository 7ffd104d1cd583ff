//! Flow matching: the block learns a vector field carrying noise to the
//! class embedding; prediction integrates it with Euler steps and picks the
//! nearest embedding.

use noprop::config::{Method, TrainConfig};
use noprop::data::synth_blobs;
use noprop::embedding::EmbeddingMode;
use noprop::inference::infer_fm;
use noprop::trainer::{train_noprop_fm, ModelBundle, TrainHooks};
use noprop::RngStream;

fn main() -> noprop::Result<()> {
    let data = synth_blobs(100, 2, 10.0, 1.0, 1)?;
    for embedding in [EmbeddingMode::OneHot, EmbeddingMode::Learned] {
        let mut cfg = TrainConfig::toy(Method::Fm);
        cfg.embedding = embedding;
        cfg.embed_dim = 4;
        let mut bundle = ModelBundle::new(&cfg, &data)?;
        let report = train_noprop_fm(&mut bundle, &data, TrainHooks::default())?;
        let last = report.rows.last().expect("rows");
        println!(
            "{embedding}: flow loss {:.4}, anchor {:?}, train accuracy {:.3}",
            last.l2.unwrap_or(f64::NAN),
            last.ce,
            last.train_acc.unwrap_or(f64::NAN)
        );
        let (x, y) = data.batch(&[0, 1]);
        let p = infer_fm(&bundle, &x, 50, &mut RngStream::new(3, &[1]))?;
        println!("  labels {y:?} -> {:?}, endpoints {:?}", p.classes, p.latents.row(0));
    }
    Ok(())
}
