use crate::autodiff::{ComputeGraph, Mode};
use crate::config::Method;
use crate::data::Dataset;
use crate::error::Result;

use super::dt::{block_stream, expect_method};
use super::{apply_update, batches, epoch_order, fm_loss, EpochStats, ModelBundle, RowBuilder, TrainHooks, TrainReport};

/// Flow-matching training of the shared vector-field block. The head and a
/// learned embedding table are only updated through the anchor term, which
/// exists for trainable embeddings.
pub fn train_noprop_fm(bundle: &mut ModelBundle, data: &Dataset, mut hooks: TrainHooks<'_>) -> Result<TrainReport> {
    expect_method(bundle, Method::Fm)?;
    let cfg = bundle.config.clone();
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut rows = RowBuilder::new(&mut hooks);
    let anchored = bundle.embedding.trainable();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, n);
        let mut stats = EpochStats::default();
        for (bi, idx) in batches(&order, cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + bi;
            let (x, y) = data.batch(idx);
            let mut g = ComputeGraph::new(Mode::Train);
            let l = fm_loss(&mut g, bundle, &x, &y, &mut block_stream(cfg.seed, 0, step))?;
            let grads = g.backward(l.loss)?;
            let ce = l.anchor.map_or(0.0, |a| g.value(a).item());
            stats.add(ce, 0.0, g.value(l.base).item(), g.len());
            apply_update(bundle.blocks[0].store_mut(), &grads, &cfg.optimizer)?;
            if let Some(out) = &l.block {
                bundle.blocks[0].update_running_stats(&g, out, cfg.bn_momentum)?;
            }
            if anchored {
                apply_update(bundle.head.store_mut(), &grads, &cfg.optimizer)?;
                apply_update(bundle.embedding.store_mut(), &grads, &cfg.optimizer)?;
            }
        }
        let last = epoch + 1 == cfg.epochs;
        rows.emit(bundle, data, None, epoch, &stats, [anchored, false, true], last)?;
    }
    bundle.trained = true;
    Ok(rows.finish())
}
