use crate::autodiff::{ComputeGraph, NodeId};
use crate::blocks::{Block, BlockOutput};
use crate::embedding::{EmbeddingMatrix, EMBED};
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::rng::RngStream;
use crate::schedule::DiscreteSchedule;
use crate::tensor::Tensor;

use super::ModelBundle;

/// The embedding table as a graph leaf: trainable tables become parameters,
/// fixed ones constants.
pub fn embed_node(g: &mut ComputeGraph, emb: &EmbeddingMatrix) -> NodeId {
    if emb.trainable() {
        g.param(EMBED, emb.rows())
    } else {
        g.constant(emb.rows().clone())
    }
}

/// `u_y` for every label, `[B, d]`, as `onehot(labels) @ W_Embed` so that
/// gradients reach a trainable table.
pub fn label_rows(g: &mut ComputeGraph, embed: NodeId, labels: &[usize], classes: usize) -> Result<NodeId> {
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::range("class", y, format!("[0, {classes})")));
    }
    let oh = g.constant(Tensor::one_hot(labels, classes));
    g.linear(oh, embed, None)
}

/// Batch mean of `KL(N(sqrt(ab0) u, (1 - ab0) I) || N(0, I))`.
pub fn kl_to_standard_node(g: &mut ComputeGraph, u: NodeId, alpha_bar0: f64) -> Result<NodeId> {
    let d = g.value(u).row_len() as f64;
    let sq = g.squared_l2(u)?;
    let m = g.mean(sq)?;
    let scaled = g.scale(m, 0.5 * alpha_bar0)?;
    let rest = 0.5 * (d * (1.0 - alpha_bar0) - d - d * (1.0 - alpha_bar0).ln());
    g.offset(scaled, rest)
}

/// `(T / 2) eta (SNR(t) - SNR(t-1))`, the weight of the step-`t` squared
/// error when `t` is drawn uniformly.
pub fn dt_loss_weight(sched: &DiscreteSchedule, t: usize, eta: f64) -> Result<f64> {
    Ok(0.5 * sched.steps() as f64 * eta * sched.snr_diff(t)?)
}

/// `sqrt(ab) u + sqrt(1 - ab) eps` with fresh noise from `stream`.
fn noised(g: &mut ComputeGraph, u: NodeId, alpha_bar: f64, stream: &mut RngStream) -> Result<NodeId> {
    let shape = g.value(u).shape().to_vec();
    let eps = Tensor::randn(&shape, stream).scale((1.0 - alpha_bar).sqrt());
    let s = g.scale(u, alpha_bar.sqrt())?;
    let e = g.constant(eps);
    g.add(s, e)
}

/// The block-`t` term: `z_{t-1} ~ q(z_{t-1} | y)`, then the weighted mean
/// squared error between `u_hat_t(z_{t-1}, x)` and `u_y`.
#[allow(clippy::too_many_arguments)]
pub fn dt_denoise_term(
    g: &mut ComputeGraph,
    block: &Block,
    sched: &DiscreteSchedule,
    t: usize,
    eta: f64,
    x: NodeId,
    u: NodeId,
    embed: NodeId,
    stream: &mut RngStream,
) -> Result<(NodeId, BlockOutput)> {
    let weight = dt_loss_weight(sched, t, eta)?;
    let z = noised(g, u, sched.alpha_bar(t - 1)?, stream)?;
    let out = block.forward(g, x, z, None, embed, Some(stream))?;
    let diff = g.sub(out.out, u)?;
    let sq = g.squared_l2(diff)?;
    let m = g.mean(sq)?;
    Ok((g.scale(m, weight)?, out))
}

/// Head cross-entropy on a fresh `z_T ~ q(z_T | y)` and the KL of
/// `q(z_0 | y)` to the standard normal.
pub fn dt_head_terms(
    g: &mut ComputeGraph,
    head: &Head,
    sched: &DiscreteSchedule,
    embed: NodeId,
    u: NodeId,
    labels: &[usize],
    stream: &mut RngStream,
) -> Result<(NodeId, NodeId)> {
    let z_t = noised(g, u, sched.alpha_bar(sched.steps())?, stream)?;
    let ce = head.loss(g, z_t, embed, labels)?;
    let kl = kl_to_standard_node(g, u, sched.alpha_bar(0)?)?;
    Ok((ce, kl))
}

#[derive(Debug, Clone)]
pub struct DtLoss {
    pub loss: NodeId,
    pub ce: NodeId,
    pub kl: NodeId,
    pub l2: NodeId,
    pub block: BlockOutput,
}

/// The full per-step DT objective `CE + KL + L2_t` for one mini-batch.
/// Block noise comes from `block_stream`, the head's `z_T` from
/// `head_stream`.
pub fn noprop_dt_loss(
    g: &mut ComputeGraph,
    bundle: &ModelBundle,
    t: usize,
    x: &Tensor,
    labels: &[usize],
    block_stream: &mut RngStream,
    head_stream: &mut RngStream,
) -> Result<DtLoss> {
    let sched = bundle.schedule()?;
    let block = bundle.block(t)?;
    let embed = embed_node(g, &bundle.embedding);
    let u = label_rows(g, embed, labels, bundle.classes)?;
    let xn = g.constant(x.clone());
    let (l2, out) = dt_denoise_term(g, block, sched, t, bundle.config.eta, xn, u, embed, block_stream)?;
    let (ce, kl) = dt_head_terms(g, &bundle.head, sched, embed, u, labels, head_stream)?;
    let s = g.add(ce, kl)?;
    let loss = g.add(s, l2)?;
    Ok(DtLoss {
        loss,
        ce,
        kl,
        l2,
        block: out,
    })
}

#[derive(Debug, Clone)]
pub struct FmLoss {
    pub loss: NodeId,
    /// `mean |v - (z_1 - z_0)|^2`.
    pub base: NodeId,
    /// Cross-entropy on the extrapolated `z~_1`, present for trainable
    /// embeddings.
    pub anchor: Option<NodeId>,
    /// Present when the field is the model's block.
    pub block: Option<BlockOutput>,
}

/// Graph nodes a vector field is evaluated at.
#[derive(Debug, Clone, Copy)]
pub struct FmPoint {
    pub x: NodeId,
    pub z_t: NodeId,
    /// `[B, 1]` times.
    pub t: NodeId,
    pub z0: NodeId,
    pub z1: NodeId,
    pub embed: NodeId,
}

/// Flow-matching objective for one batch with the model's block as the
/// field. `t ~ U(0, 1)` per example, `z_0 ~ N(0, I)`, `z_1 = u_y`,
/// `z_t ~ N(t z_1 + (1 - t) z_0, sigma^2)`.
pub fn fm_loss(
    g: &mut ComputeGraph,
    bundle: &ModelBundle,
    x: &Tensor,
    labels: &[usize],
    stream: &mut RngStream,
) -> Result<FmLoss> {
    let block = &bundle.blocks[0];
    let mut out = None;
    let mut l = fm_loss_with(g, bundle, x, labels, stream, |g, p, s| {
        let o = block.forward(g, p.x, p.z_t, Some(p.t), p.embed, Some(s))?;
        let v = o.out;
        out = Some(o);
        Ok(v)
    })?;
    l.block = out;
    Ok(l)
}

/// [`fm_loss`] with an arbitrary field `v(point, stream)`.
pub fn fm_loss_with(
    g: &mut ComputeGraph,
    bundle: &ModelBundle,
    x: &Tensor,
    labels: &[usize],
    stream: &mut RngStream,
    field: impl FnOnce(&mut ComputeGraph, &FmPoint, &mut RngStream) -> Result<NodeId>,
) -> Result<FmLoss> {
    let sigma = bundle.config.fm_sigma;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("fm_sigma must be positive, got {sigma}")));
    }
    let b = labels.len();
    let d = bundle.embedding.dim();
    let times: Vec<f64> = (0..b).map(|_| stream.uniform()).collect();
    let z0 = Tensor::randn(&[b, d], stream);
    let eps = Tensor::randn(&[b, d], stream);

    let embed = embed_node(g, &bundle.embedding);
    let z1 = label_rows(g, embed, labels, bundle.classes)?;
    let per_row = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        Tensor::new(&[b, d], times.iter().flat_map(|&t| std::iter::repeat_n(f(t), d)).collect())
    };
    let tmat = g.constant(per_row(&|t| t)?);
    let rest: Vec<f64> = (0..b * d)
        .map(|i| (1.0 - times[i / d]) * z0.data()[i] + sigma * eps.data()[i])
        .collect();
    let tz1 = g.mul(tmat, z1)?;
    let rest = g.constant(Tensor::new(&[b, d], rest)?);
    let zt = g.add(tz1, rest)?;

    let point = FmPoint {
        x: g.constant(x.clone()),
        z_t: zt,
        t: g.constant(Tensor::matrix(b, 1, times.clone())?),
        z0: g.constant(z0),
        z1,
        embed,
    };
    let v = field(g, &point, stream)?;
    let target = g.sub(z1, point.z0)?;
    let diff = g.sub(v, target)?;
    let sq = g.squared_l2(diff)?;
    let base = g.mean(sq)?;

    if !bundle.embedding.trainable() {
        return Ok(FmLoss {
            loss: base,
            base,
            anchor: None,
            block: None,
        });
    }
    let omt = g.constant(per_row(&|t| 1.0 - t)?);
    let step = g.mul(omt, v)?;
    let z1_hat = g.add(zt, step)?;
    let ce = bundle.head.loss(g, z1_hat, embed, labels)?;
    let loss = g.add(base, ce)?;
    Ok(FmLoss {
        loss,
        base,
        anchor: Some(ce),
        block: None,
    })
}
