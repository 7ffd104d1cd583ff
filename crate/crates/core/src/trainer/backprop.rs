use crate::autodiff::{ComputeGraph, Mode};
use crate::config::Method;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::dt::{block_stream, expect_method};
use super::{
    apply_update, baseline_name, batches, embed_node, epoch_order, EpochStats, ModelBundle, RowBuilder, TrainHooks,
    TrainReport,
};

/// End-to-end training of the same blocks chained as
/// `z_t = (1 - a_t) z_{t-1} + a_t u_hat_t`, `a_t = tanh(w_t)`, with a single
/// cross-entropy at the head. The whole chain lives in one graph.
pub fn train_backprop_baseline(
    bundle: &mut ModelBundle,
    data: &Dataset,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainReport> {
    expect_method(bundle, Method::Backprop)?;
    let cfg = bundle.config.clone();
    let n = data.len();
    let d = bundle.embedding.dim();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut rows = RowBuilder::new(&mut hooks);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, n);
        let mut stats = EpochStats::default();
        for (bi, idx) in batches(&order, cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + bi;
            let (x, y) = data.batch(idx);
            let mut s = block_stream(cfg.seed, 0, step);
            let mut g = ComputeGraph::new(Mode::Train);
            let embed = embed_node(&mut g, &bundle.embedding);
            let xn = g.constant(x);
            let mut z = g.constant(Tensor::randn(&[y.len(), d], &mut s));
            let weights = bundle
                .baseline
                .as_ref()
                .ok_or_else(|| Error::State("backprop model has no mixing weights".into()))?;
            let mut outs = Vec::with_capacity(bundle.blocks.len());
            for (i, blk) in bundle.blocks.iter().enumerate() {
                let name = baseline_name(i + 1);
                let w = g.param(&name, weights.get(&name)?);
                let alpha = g.tanh(w)?;
                let out = blk.forward(&mut g, xn, z, None, embed, Some(&mut s))?;
                let keep = g.scale(alpha, -1.0)?;
                let keep = g.offset(keep, 1.0)?;
                let a = g.mul(z, keep)?;
                let b = g.mul(out.out, alpha)?;
                z = g.add(a, b)?;
                outs.push(out);
            }
            let ce = bundle.head.loss(&mut g, z, embed, &y)?;
            let grads = g.backward(ce)?;
            stats.add(g.value(ce).item(), 0.0, 0.0, g.len());
            for (blk, out) in bundle.blocks.iter_mut().zip(&outs) {
                apply_update(blk.store_mut(), &grads, &cfg.optimizer)?;
                blk.update_running_stats(&g, out, cfg.bn_momentum)?;
            }
            apply_update(bundle.head.store_mut(), &grads, &cfg.optimizer)?;
            if let Some(w) = bundle.baseline.as_mut() {
                apply_update(w, &grads, &cfg.optimizer)?;
            }
            if bundle.embedding.trainable() {
                apply_update(bundle.embedding.store_mut(), &grads, &cfg.optimizer)?;
            }
        }
        let last = epoch + 1 == cfg.epochs;
        rows.emit(bundle, data, None, epoch, &stats, [true, false, false], last)?;
    }
    bundle.trained = true;
    Ok(rows.finish())
}
