//! The same blocks chained end to end and trained with one loss, for
//! comparison with block-local training.

use noprop::config::{Method, TrainConfig};
use noprop::data::synth_blobs;
use noprop::trainer::{baseline_name, train_backprop_baseline, ModelBundle, TrainHooks};

fn main() -> noprop::Result<()> {
    let data = synth_blobs(100, 2, 10.0, 1.0, 1)?;
    let mut cfg = TrainConfig::toy(Method::Backprop);
    cfg.epochs = 10;
    let mut bundle = ModelBundle::new(&cfg, &data)?;
    let report = train_backprop_baseline(&mut bundle, &data, TrainHooks::default())?;
    let last = report.rows.last().expect("rows");
    println!("train accuracy {:?}, peak graph {} nodes", last.train_acc, report.peak_nodes);
    let w = bundle.baseline.as_ref().expect("baseline weights");
    for t in 1..=cfg.steps {
        let a = w.get(&baseline_name(t))?.item().tanh();
        println!("alpha_{t} = {a:.4}");
    }
    Ok(())
}
