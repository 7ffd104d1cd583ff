use crate::autodiff::{ComputeGraph, Mode};
use crate::config::Method;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{domain, RngStream};

use super::{apply_update, batches, epoch_order, noprop_dt_loss, EpochStats, ModelBundle, RowBuilder, TrainHooks, TrainReport};

/// Stream for block `t`'s noise at global step `step`.
pub(crate) fn block_stream(seed: u64, t: usize, step: usize) -> RngStream {
    RngStream::new(seed, &[domain::BLOCK, t as u64, step as u64])
}

/// Stream for the head's `z_T` sample at `(t, step)`.
pub(crate) fn head_stream(seed: u64, t: usize, step: usize) -> RngStream {
    RngStream::new(seed, &[domain::HEAD, t as u64, step as u64])
}

pub(crate) fn expect_method(bundle: &ModelBundle, m: Method) -> Result<()> {
    if bundle.method() != m {
        return Err(Error::Config(format!(
            "{m} trainer called on a {} model",
            bundle.method()
        )));
    }
    Ok(())
}

/// Blocks are trained one after another: for `t = 1..T`, `epochs` passes
/// over the data, each mini-batch updating block `t`, the head and (when
/// trainable) the embedding table. Nothing else is touched.
pub fn train_noprop_dt(bundle: &mut ModelBundle, data: &Dataset, mut hooks: TrainHooks<'_>) -> Result<TrainReport> {
    expect_method(bundle, Method::Dt)?;
    let cfg = bundle.config.clone();
    let steps = cfg.steps;
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut rows = RowBuilder::new(&mut hooks);
    for t in 1..=steps {
        for epoch in 0..cfg.epochs {
            let order = epoch_order(cfg.seed, epoch, n);
            let mut stats = EpochStats::default();
            for (bi, idx) in batches(&order, cfg.batch_size).enumerate() {
                let step = epoch * per_epoch + bi;
                let (x, y) = data.batch(idx);
                let mut g = ComputeGraph::new(Mode::Train);
                let l = noprop_dt_loss(
                    &mut g,
                    bundle,
                    t,
                    &x,
                    &y,
                    &mut block_stream(cfg.seed, t, step),
                    &mut head_stream(cfg.seed, t, step),
                )?;
                let grads = g.backward(l.loss)?;
                stats.add(g.value(l.ce).item(), g.value(l.kl).item(), g.value(l.l2).item(), g.len());
                let block = &mut bundle.blocks[t - 1];
                apply_update(block.store_mut(), &grads, &cfg.optimizer)?;
                block.update_running_stats(&g, &l.block, cfg.bn_momentum)?;
                apply_update(bundle.head.store_mut(), &grads, &cfg.optimizer)?;
                if bundle.embedding.trainable() {
                    apply_update(bundle.embedding.store_mut(), &grads, &cfg.optimizer)?;
                }
            }
            let last = t == steps && epoch + 1 == cfg.epochs;
            rows.emit(bundle, data, Some(t), epoch, &stats, [true, true, true], last)?;
        }
    }
    bundle.trained = true;
    Ok(rows.finish())
}
