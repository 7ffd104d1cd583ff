//! Blocks trained on separate workers give the same parameters as the
//! sequential loop. A failing job is reported by name.

use std::time::Instant;

use noprop::config::{Method, TrainConfig};
use noprop::data::synth_blobs;
use noprop::trainer::{parallel_train_dt, train_noprop_dt, ModelBundle, ParallelOptions, TrainHooks};

fn main() -> noprop::Result<()> {
    let data = synth_blobs(100, 2, 10.0, 1.0, 1)?;
    let mut cfg = TrainConfig::toy(Method::Dt);
    cfg.steps = 4;
    let fresh = ModelBundle::new(&cfg, &data)?;

    let mut seq = fresh.clone();
    let t = Instant::now();
    train_noprop_dt(&mut seq, &data, TrainHooks::default())?;
    let seq_time = t.elapsed();

    let mut par = fresh.clone();
    let opts = ParallelOptions {
        workers: 4,
        ..Default::default()
    };
    let t = Instant::now();
    parallel_train_dt(&mut par, &data, TrainHooks::default(), &opts)?;
    let par_time = t.elapsed();

    let same = seq.blocks.iter().zip(&par.blocks).all(|(a, b)| a.store() == b.store());
    println!("identical blocks: {same}");
    println!("sequential {seq_time:?}, parallel {par_time:?} on {} core(s)", std::thread::available_parallelism().map_or(1, |n| n.get()));

    // The injected failure is a panic; keep its default report off stderr.
    std::panic::set_hook(Box::new(|_| {}));
    let mut broken = fresh;
    let opts = ParallelOptions {
        workers: 2,
        fail_block: Some(3),
    };
    match parallel_train_dt(&mut broken, &data, TrainHooks::default(), &opts) {
        Err(e) => println!("failure surfaced as: {e}"),
        Ok(_) => println!("unexpected success"),
    }
    Ok(())
}
