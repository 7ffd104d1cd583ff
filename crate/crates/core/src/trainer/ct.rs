use crate::autodiff::{ComputeGraph, Mode, NodeId};
use crate::config::Method;
use crate::data::Dataset;
use crate::error::Result;
use crate::tensor::Tensor;

use super::dt::{block_stream, expect_method, head_stream};
use super::{apply_update, batches, embed_node, epoch_order, label_rows, EpochStats, ModelBundle, RowBuilder, TrainHooks, TrainReport};

/// `[B, 1]` to `[B, d]` by repeating the column.
fn widen(g: &mut ComputeGraph, col: NodeId, d: usize) -> Result<NodeId> {
    let ones = g.constant(Tensor::ones(&[1, d]));
    g.linear(col, ones, None)
}

/// Continuous-time training of the shared block together with the noise
/// schedule `gamma`. Each example gets its own `t ~ U(0, 1)`.
pub fn train_noprop_ct(bundle: &mut ModelBundle, data: &Dataset, mut hooks: TrainHooks<'_>) -> Result<TrainReport> {
    expect_method(bundle, Method::Ct)?;
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
            let b = y.len();
            let mut s = block_stream(cfg.seed, 0, step);
            let mut hs = head_stream(cfg.seed, 0, step);
            let times: Vec<f64> = (0..b).map(|_| s.uniform()).collect();
            let eps = Tensor::randn(&[b, d], &mut s);

            let mut g = ComputeGraph::new(Mode::Train);
            let gn = bundle.gamma()?.graph_nodes(&mut g, &times)?;
            let embed = embed_node(&mut g, &bundle.embedding);
            let u = label_rows(&mut g, embed, &y, bundle.classes)?;

            // z_t = sqrt(ab) u + sqrt(1 - ab) eps with ab = sigmoid(-gamma).
            let neg = g.scale(gn.gamma, -1.0)?;
            let ab = g.sigmoid(neg)?;
            let rest = g.sigmoid(gn.gamma)?;
            let sab = g.sqrt(ab)?;
            let srest = g.sqrt(rest)?;
            let sab = widen(&mut g, sab, d)?;
            let srest = widen(&mut g, srest, d)?;
            let su = g.mul(sab, u)?;
            let en = g.constant(eps);
            let se = g.mul(srest, en)?;
            let z = g.add(su, se)?;

            let xn = g.constant(x);
            let tn = g.constant(Tensor::matrix(b, 1, times)?);
            let out = bundle.blocks[0].forward(&mut g, xn, z, Some(tn), embed, Some(&mut s))?;
            let diff = g.sub(out.out, u)?;
            let sq = g.squared_l2(diff)?;
            // SNR'(t) = -gamma'(t) exp(-gamma(t)).
            let e = g.exp(neg)?;
            let sp = g.mul(gn.gamma_prime, e)?;
            let sp = g.scale(sp, -1.0)?;
            let sp = g.reshape(sp, &[b])?;
            let w = g.mul(sp, sq)?;
            let w = g.mean(w)?;
            let l2 = g.scale(w, 0.5 * cfg.eta)?;

            // Cross-entropy on z_1.
            let neg1 = g.scale(gn.gamma_at_1, -1.0)?;
            let ab1 = g.sigmoid(neg1)?;
            let rest1 = g.sigmoid(gn.gamma_at_1)?;
            let sab1 = g.sqrt(ab1)?;
            let srest1 = g.sqrt(rest1)?;
            let eps1 = g.constant(Tensor::randn(&[b, d], &mut hs));
            let a = g.mul(u, sab1)?;
            let c = g.mul(eps1, srest1)?;
            let z1 = g.add(a, c)?;
            let ce = bundle.head.loss(&mut g, z1, embed, &y)?;

            // KL of q(z_0 | y) to N(0, I), closed form in gamma(0).
            let neg0 = g.scale(gn.gamma_at_0, -1.0)?;
            let ab0 = g.sigmoid(neg0)?;
            let usq = g.squared_l2(u)?;
            let usq = g.mean(usq)?;
            let centred = g.offset(usq, -(d as f64))?;
            let first = g.mul(ab0, centred)?;
            let sp0 = g.softplus(neg0)?;
            let second = g.scale(sp0, d as f64)?;
            let kl = g.add(first, second)?;
            let kl = g.scale(kl, 0.5)?;

            let head_terms = g.add(ce, kl)?;
            let loss = g.add(head_terms, l2)?;
            let grads = g.backward(loss)?;
            stats.add(g.value(ce).item(), g.value(kl).item(), g.value(l2).item(), g.len());
            apply_update(bundle.blocks[0].store_mut(), &grads, &cfg.optimizer)?;
            bundle.blocks[0].update_running_stats(&g, &out, cfg.bn_momentum)?;
            apply_update(bundle.head.store_mut(), &grads, &cfg.optimizer)?;
            if cfg.train_gamma {
                if let Some(gm) = bundle.gamma.as_mut() {
                    apply_update(gm.store_mut(), &grads, &cfg.optimizer)?;
                }
            }
            if bundle.embedding.trainable() {
                apply_update(bundle.embedding.store_mut(), &grads, &cfg.optimizer)?;
            }
        }
        let last = epoch + 1 == cfg.epochs;
        rows.emit(bundle, data, None, epoch, &stats, [true, true, true], last)?;
    }
    bundle.trained = true;
    Ok(rows.finish())
}
