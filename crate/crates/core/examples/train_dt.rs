//! Discrete-time training on two Gaussian blobs. Each block is trained on
//! its own denoising loss; inference runs the whole chain from noise.

use noprop::config::{Method, TrainConfig};
use noprop::data::synth_blobs;
use noprop::inference::infer_dt;
use noprop::trainer::{train_noprop_dt, ModelBundle, TrainHooks};
use noprop::RngStream;

fn main() -> noprop::Result<()> {
    let data = synth_blobs(100, 2, 10.0, 1.0, 1)?;
    let test = synth_blobs(50, 2, 10.0, 1.0, 2)?;
    let cfg = TrainConfig::toy(Method::Dt);
    let mut bundle = ModelBundle::new(&cfg, &data)?;

    let mut print = |row: &noprop::metrics::MetricsRow| -> noprop::Result<()> {
        if row.epoch + 1 == cfg.epochs {
            println!("{}", row.to_csv(false));
        }
        Ok(())
    };
    let hooks = TrainHooks {
        test: Some(&test),
        on_row: Some(&mut print),
    };
    let report = train_noprop_dt(&mut bundle, &data, hooks)?;
    println!("peak graph size: {} nodes", report.peak_nodes);

    let (x, y) = test.batch(&[0, 1, 2, 3]);
    let p = infer_dt(&bundle, &x, &mut RngStream::new(9, &[1]))?;
    println!("labels {y:?} predicted {:?}", p.classes);
    Ok(())
}
