use noprop::autodiff::{ComputeGraph, Mode};
use noprop::checkpoint::{load_checkpoint, save_checkpoint};
use noprop::config::{Method, TrainConfig};
use noprop::data::synth_blobs;
use noprop::embedding::EmbeddingMode;
use noprop::optim::optimizer_step;
use noprop::trainer::{noprop_dt_loss, train, ModelBundle, TrainHooks};
use noprop::RngStream;

/// One more DT update on block `t`, head and embedding; returns the loss
/// before and after.
fn next_step(b: &mut ModelBundle, t: usize, x: &noprop::Tensor, y: &[usize]) -> (f64, f64) {
    let loss = |b: &ModelBundle| {
        let mut g = ComputeGraph::new(Mode::Train);
        let l = noprop_dt_loss(
            &mut g,
            b,
            t,
            x,
            y,
            &mut RngStream::new(5, &[1]),
            &mut RngStream::new(5, &[2]),
        )
        .unwrap();
        let grads = g.backward(l.loss).unwrap();
        (g.value(l.loss).item(), grads)
    };
    let (before, grads) = loss(b);
    let opt = b.config.optimizer.clone();
    for name in [b.blocks[t - 1].prefix().to_string(), "head".into(), "embed".into()] {
        let store = b.store_mut(&name).unwrap();
        let mine = store.select(&grads);
        optimizer_step(store, &mine, &opt).unwrap();
    }
    (before, loss(b).0)
}

#[test]
fn resumed_model_takes_the_same_next_step() {
    let data = synth_blobs(30, 2, 10.0, 1.0, 11).unwrap();
    let mut cfg = TrainConfig::toy(Method::Dt);
    cfg.steps = 3;
    cfg.epochs = 2;
    cfg.embedding = EmbeddingMode::Learned;
    cfg.embed_dim = 3;
    let mut live = ModelBundle::new(&cfg, &data).unwrap();
    train(&mut live, &data, TrainHooks::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nprp");
    save_checkpoint(&live, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();

    let (x, y) = data.batch(&(0..20).collect::<Vec<_>>());
    let a = next_step(&mut live, 2, &x, &y);
    let b = next_step(&mut resumed, 2, &x, &y);
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.to_bits(), b.1.to_bits());
    assert_eq!(live, resumed);
}
