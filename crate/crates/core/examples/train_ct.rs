//! Continuous-time training with a learned noise schedule, then inference
//! on grids of different resolution.

use noprop::config::{Method, TrainConfig};
use noprop::data::synth_blobs;
use noprop::inference::{accuracy, InferenceConfig};
use noprop::trainer::{train_noprop_ct, ModelBundle, TrainHooks};

fn main() -> noprop::Result<()> {
    let data = synth_blobs(100, 2, 10.0, 1.0, 1)?;
    let cfg = TrainConfig::toy(Method::Ct);
    let mut bundle = ModelBundle::new(&cfg, &data)?;
    let report = train_noprop_ct(&mut bundle, &data, TrainHooks::default())?;
    let last = report.rows.last().expect("one row per epoch");
    println!("final epoch: ce {:?} kl {:?} l2 {:?}", last.ce, last.kl, last.l2);

    let g = bundle.gamma()?;
    println!("learned gamma(0) = {:.3}, gamma(1) = {:.3}", g.gamma(0.0), g.gamma(1.0));
    for steps in [5, 20, 100] {
        let cfg = InferenceConfig {
            steps,
            ..InferenceConfig::for_bundle(&bundle)
        };
        println!("{steps:4} steps: train accuracy {:.3}", accuracy(&bundle, &data, &cfg)?);
    }
    Ok(())
}
