//! The three class-embedding modes: fixed one-hot, learned (orthogonal
//! init) and prototype (a real example per class).

use noprop::data::synth_blobs;
use noprop::embedding::{prototype_indices, EmbeddingMatrix};
use noprop::RngStream;

fn main() -> noprop::Result<()> {
    let one_hot = EmbeddingMatrix::one_hot(3);
    println!("one-hot rows {:?}", one_hot.rows().data());

    let learned = EmbeddingMatrix::learned(3, 5, &mut RngStream::new(0, &[1]))?;
    let w = learned.rows();
    let gram = w.matmul(&w.transpose()?)?;
    println!("learned W W^T (should be I):");
    for r in 0..3 {
        println!("  {:?}", gram.row(r).iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }

    let data = synth_blobs(20, 3, 10.0, 1.0, 4)?;
    let idx = prototype_indices(data.images(), data.labels(), 3)?;
    let proto = EmbeddingMatrix::prototype(data.images(), data.labels(), 3)?;
    for (k, i) in idx.iter().enumerate() {
        println!("class {k}: prototype is example {i} at {:?}", proto.rows().row(k));
    }
    println!("min pairwise distance {:.3}", proto.min_pairwise_distance());
    Ok(())
}
