//! Denoising blocks.
//!
//! Every block maps `(x, z[, t])` to class logits through three fused
//! pathways (image, label, optional time) and returns a combination of the
//! embedding rows weighted by those logits:
//!
//! ```text
//! x ──image──┐
//! z ──label──┼─ concat ─ fc ─ logits ─ softmax ─ @ W_Embed ─> u_hat   (DT, CT)
//! t ──time───┘                      └───────────── @ W_Embed ─> v       (flow)
//! ```

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ComputeGraph, Mode, NodeId, Primitive};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
/// Scale applied to `t` in `[0, 1]` before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Discrete-time denoiser; may use batchnorm.
    Dt,
    /// Continuous-time denoiser with a time pathway and no batchnorm.
    Ct,
    /// Flow field: unnormalized logits times the embedding rows.
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Flatten the image and use fully connected layers throughout.
    Mlp,
    /// Two 3x3 conv/pool stages on the image.
    Conv,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Conv => "conv",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "conv" => Ok(Arch::Conv),
            _ => Err(Error::Config(format!("unknown block architecture `{s}`"))),
        }
    }
}

/// Structure of one block. Two blocks with equal specs have identical
/// parameter layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub arch: Arch,
    /// Image extents `(h, w, c)`.
    pub input: [usize; 3],
    pub classes: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Output channels of the two conv stages.
    pub channels: (usize, usize),
    /// Width of the sinusoidal time embedding (even).
    pub time_dim: usize,
    pub batchnorm: bool,
    /// Dropout keep probability after the fused layer; `None` disables it.
    pub keep_prob: Option<f64>,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.input;
        if h * w * c == 0 || self.classes == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate block spec {self:?}")));
        }
        if self.arch == Arch::Conv && (h < 4 || w < 4 || self.channels.0 == 0 || self.channels.1 == 0) {
            return Err(Error::Config(format!(
                "conv blocks need images of at least 4x4 and nonzero channels, got {:?}",
                self.input
            )));
        }
        if self.kind != BlockKind::Dt && (self.time_dim == 0 || self.time_dim % 2 != 0) {
            return Err(Error::Config(format!("time_dim must be even and positive, got {}", self.time_dim)));
        }
        if self.batchnorm && self.kind != BlockKind::Dt {
            return Err(Error::Config("batchnorm is only used by discrete-time blocks".into()));
        }
        if let Some(p) = self.keep_prob {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("keep_prob {p} not in (0, 1]")));
            }
        }
        Ok(())
    }

    fn image_size(&self) -> usize {
        self.input.iter().product()
    }

    fn conv_label_path(&self) -> bool {
        self.arch == Arch::Conv && self.embed_dim == self.image_size()
    }

    fn timed(&self) -> bool {
        self.kind != BlockKind::Dt
    }

    fn pathways(&self) -> usize {
        if self.timed() {
            3
        } else {
            2
        }
    }
}

/// Nodes produced by one block forward.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// `u_hat` (DT/CT) or `v` (flow), `[B, d]`.
    pub out: NodeId,
    pub logits: NodeId,
    /// Batchnorm nodes by layer name, for running-statistics updates.
    pub batchnorm: Vec<(String, NodeId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    spec: BlockSpec,
    prefix: String,
    store: ParamStore,
}

struct Init<'a> {
    store: ParamStore,
    prefix: &'a str,
    stream: &'a mut RngStream,
}

impl Init<'_> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<()> {
        let w = Tensor::randn(shape, self.stream).scale((gain / fan_in as f64).sqrt());
        self.store.insert(&format!("{}.{name}", self.prefix), w)
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize, gain: f64) -> Result<()> {
        self.weight(&format!("{name}.w"), &[fan_in, out], fan_in, gain)?;
        self.store.insert(&format!("{}.{name}.b", self.prefix), Tensor::zeros(&[out]))
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<()> {
        self.weight(&format!("{name}.w"), &[3, 3, c_in, c_out], 9 * c_in, 2.0)?;
        self.store.insert(&format!("{}.{name}.b", self.prefix), Tensor::zeros(&[c_out]))
    }

    fn batchnorm(&mut self, name: &str, width: usize) -> Result<()> {
        let p = self.prefix;
        self.store.insert(&format!("{p}.{name}.g"), Tensor::ones(&[width]))?;
        self.store.insert(&format!("{p}.{name}.b"), Tensor::zeros(&[width]))?;
        self.store.insert_buffer(&format!("{p}.{name}.mean"), Tensor::zeros(&[width]))?;
        self.store.insert_buffer(&format!("{p}.{name}.var"), Tensor::ones(&[width]))
    }
}

impl Block {
    /// Fresh block with parameters named `{prefix}.*`.
    pub fn new(spec: BlockSpec, prefix: &str, stream: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut init = Init {
            store: ParamStore::new(),
            prefix,
            stream,
        };
        let [h, w, c] = spec.input;
        let hid = spec.hidden;
        let bn = spec.batchnorm;
        match spec.arch {
            Arch::Mlp => {
                init.linear("img.fc1", h * w * c, hid, 2.0)?;
                if bn {
                    init.batchnorm("img.bn1", hid)?;
                }
                init.linear("img.fc2", hid, hid, 2.0)?;
            }
            Arch::Conv => {
                let (c1, c2) = spec.channels;
                init.conv("img.conv1", c, c1)?;
                init.conv("img.conv2", c1, c2)?;
                if bn {
                    init.batchnorm("img.bn1", c1)?;
                    init.batchnorm("img.bn2", c2)?;
                }
                init.linear("img.fc", (h / 4) * (w / 4) * c2, hid, 2.0)?;
            }
        }
        if spec.conv_label_path() {
            init.conv("lab.conv", c, spec.channels.0)?;
            init.linear("lab.fc", (h / 2) * (w / 2) * spec.channels.0, hid, 2.0)?;
        } else {
            init.linear("lab.fc1", spec.embed_dim, hid, 2.0)?;
            init.linear("lab.fc2", hid, hid, 2.0)?;
        }
        if spec.timed() {
            init.linear("time.fc", spec.time_dim, hid, 2.0)?;
        }
        init.linear("fuse.fc", spec.pathways() * hid, hid, 2.0)?;
        if bn {
            init.batchnorm("fuse.bn", hid)?;
        }
        init.linear("fuse.out", hid, spec.classes, 1.0)?;
        Ok(Self {
            spec,
            prefix: prefix.to_string(),
            store: init.store,
        })
    }

    pub fn from_store(spec: BlockSpec, prefix: &str, store: ParamStore) -> Result<Self> {
        let mut s = RngStream::new(0, &[0]);
        let template = Self::new(spec, prefix, &mut s)?;
        for (name, t) in template.store.params().chain(template.store.buffers()) {
            let have = store
                .get(name)
                .or_else(|_| store.buffer(name))
                .map_err(|_| Error::Name(format!("block parameter `{name}` missing")))?;
            if have.shape() != t.shape() {
                return Err(Error::shape("block parameter", have.shape(), t.shape()));
            }
        }
        Ok(Self {
            spec: template.spec,
            prefix: prefix.to_string(),
            store,
        })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Records the block on `g`. `x` is `[B, h, w, c]` (or any shape with
    /// `B` rows for MLP blocks), `z` is `[B, d]`, `t` is `[B, 1]` for timed
    /// blocks, `embed` is the `[m, d]` table. `stream` feeds dropout.
    pub fn forward(
        &self,
        g: &mut ComputeGraph,
        x: NodeId,
        z: NodeId,
        t: Option<NodeId>,
        embed: NodeId,
        stream: Option<&mut RngStream>,
    ) -> Result<BlockOutput> {
        let spec = &self.spec;
        if spec.timed() != t.is_some() {
            return Err(Error::Contract(format!(
                "{:?} block {} a time input",
                spec.kind,
                if spec.timed() { "needs" } else { "takes no" }
            )));
        }
        let mut f = Fwd {
            g,
            block: self,
            bn: Vec::new(),
        };
        let hx = f.image_path(x)?;
        let hz = f.label_path(z)?;
        let mut parts = vec![hx, hz];
        if let Some(t) = t {
            let te = f.g.time_embedding(t, spec.time_dim, TIME_SCALE)?;
            let ht = f.linear("time.fc", te)?;
            parts.push(f.g.relu(ht)?);
        }
        let h = f.g.concat(&parts, 1)?;
        let h = f.linear("fuse.fc", h)?;
        let h = f.maybe_bn("fuse.bn", h)?;
        let mut h = f.g.relu(h)?;
        if let Some(keep) = spec.keep_prob {
            match (f.g.mode(), stream) {
                (Mode::Eval, _) => {}
                (Mode::Train, Some(s)) => h = f.g.dropout(h, keep, s)?,
                (Mode::Train, None) => {
                    return Err(Error::Contract("dropout in train mode needs a stream".into()))
                }
            }
        }
        let logits = f.linear("fuse.out", h)?;
        let out = match spec.kind {
            BlockKind::Dt | BlockKind::Ct => {
                let p = f.g.softmax(logits)?;
                f.g.linear(p, embed, None)?
            }
            BlockKind::Flow => f.g.linear(logits, embed, None)?,
        };
        Ok(BlockOutput {
            out,
            logits,
            batchnorm: f.bn,
        })
    }

    /// Eval-mode forward on plain tensors.
    pub fn eval(&self, x: &Tensor, z: &Tensor, t: Option<&[f64]>, embed: &Tensor) -> Result<Tensor> {
        let mut g = ComputeGraph::new(Mode::Eval);
        let xn = g.constant(x.clone());
        let zn = g.constant(z.clone());
        let tn = match t {
            Some(ts) => Some(g.constant(Tensor::matrix(ts.len(), 1, ts.to_vec())?)),
            None => None,
        };
        let en = g.constant(embed.clone());
        let out = self.forward(&mut g, xn, zn, tn, en, None)?;
        Ok(g.value(out.out).clone())
    }

    /// Exponential moving average of the batch statistics recorded by a
    /// train-mode forward.
    pub fn update_running_stats(&mut self, g: &ComputeGraph, out: &BlockOutput, momentum: f64) -> Result<()> {
        for (name, id) in &out.batchnorm {
            let Some((mean, var)) = g.batch_stats(*id) else {
                continue;
            };
            for (suffix, batch) in [("mean", mean), ("var", var)] {
                let key = format!("{}.{name}.{suffix}", self.prefix);
                let old = self.store.buffer(&key)?;
                let new = old.zip_with(&batch, |o, b| (1.0 - momentum) * o + momentum * b)?;
                self.store.set_buffer(&key, new)?;
            }
        }
        Ok(())
    }
}

struct Fwd<'g, 'b> {
    g: &'g mut ComputeGraph,
    block: &'b Block,
    bn: Vec<(String, NodeId)>,
}

impl Fwd<'_, '_> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        let key = format!("{}.{name}", self.block.prefix);
        Ok(self.g.param(&key, self.block.store.get(&key)?))
    }

    fn linear(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.g.linear(x, w, Some(b))
    }

    fn conv(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.g.conv2d(x, w, b, 1, 1)
    }

    fn maybe_bn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        if !self.block.spec.batchnorm {
            return Ok(x);
        }
        let gamma = self.param(&format!("{name}.g"))?;
        let beta = self.param(&format!("{name}.b"))?;
        let p = &self.block.prefix;
        let rm = self.block.store.buffer(&format!("{p}.{name}.mean"))?.clone();
        let rv = self.block.store.buffer(&format!("{p}.{name}.var"))?.clone();
        let rm = self.g.constant(rm);
        let rv = self.g.constant(rv);
        let y = self
            .g
            .apply(Primitive::BatchNorm { eps: BN_EPS }, &[x, gamma, beta, rm, rv])?;
        self.bn.push((name.to_string(), y));
        Ok(y)
    }

    fn image_path(&mut self, x: NodeId) -> Result<NodeId> {
        let [h, w, c] = self.block.spec.input;
        let rows = self.g.value(x).rows();
        match self.block.spec.arch {
            Arch::Mlp => {
                let x = self.g.reshape(x, &[rows, h * w * c])?;
                let a = self.linear("img.fc1", x)?;
                let a = self.maybe_bn("img.bn1", a)?;
                let a = self.g.relu(a)?;
                let a = self.linear("img.fc2", a)?;
                self.g.relu(a)
            }
            Arch::Conv => {
                let x = self.g.reshape(x, &[rows, h, w, c])?;
                let a = self.conv("img.conv1", x)?;
                let a = self.maybe_bn("img.bn1", a)?;
                let a = self.g.relu(a)?;
                let a = self.g.max_pool2d(a, 2)?;
                let a = self.conv("img.conv2", a)?;
                let a = self.maybe_bn("img.bn2", a)?;
                let a = self.g.relu(a)?;
                let a = self.g.max_pool2d(a, 2)?;
                let a = self.g.flatten(a)?;
                let a = self.linear("img.fc", a)?;
                self.g.relu(a)
            }
        }
    }

    fn label_path(&mut self, z: NodeId) -> Result<NodeId> {
        let spec = &self.block.spec;
        if spec.conv_label_path() {
            let [h, w, c] = spec.input;
            let rows = self.g.value(z).rows();
            let a = self.g.reshape(z, &[rows, h, w, c])?;
            let a = self.conv("lab.conv", a)?;
            let a = self.g.relu(a)?;
            let a = self.g.max_pool2d(a, 2)?;
            let a = self.g.flatten(a)?;
            let a = self.linear("lab.fc", a)?;
            self.g.relu(a)
        } else {
            let a = self.linear("lab.fc1", z)?;
            let a = self.g.relu(a)?;
            let b = self.linear("lab.fc2", a)?;
            let b = self.g.relu(b)?;
            self.g.add(a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, ParamValues};

    fn spec(kind: BlockKind, arch: Arch) -> BlockSpec {
        BlockSpec {
            kind,
            arch,
            input: if arch == Arch::Conv { [4, 4, 1] } else { [1, 1, 2] },
            classes: 3,
            embed_dim: 3,
            hidden: 6,
            channels: (2, 3),
            time_dim: 4,
            batchnorm: kind == BlockKind::Dt,
            keep_prob: None,
        }
    }

    fn inputs(spec: &BlockSpec, b: usize, s: &mut RngStream) -> (Tensor, Tensor) {
        let [h, w, c] = spec.input;
        (Tensor::randn(&[b, h, w, c], s), Tensor::randn(&[b, spec.embed_dim], s))
    }

    #[test]
    fn one_hot_output_is_a_distribution() {
        let mut s = RngStream::new(1, &[1]);
        for arch in [Arch::Mlp, Arch::Conv] {
            let sp = spec(BlockKind::Dt, arch);
            let blk = Block::new(sp.clone(), "blk1", &mut s).unwrap();
            let (x, z) = inputs(&sp, 5, &mut s);
            let u = blk.eval(&x, &z, None, &Tensor::eye(3)).unwrap();
            for r in 0..5 {
                assert!((u.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(u.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            let again = blk.eval(&x, &z, None, &Tensor::eye(3)).unwrap();
            assert_eq!(u, again);
        }
    }

    #[test]
    fn time_changes_the_output() {
        let mut s = RngStream::new(2, &[1]);
        let sp = spec(BlockKind::Ct, Arch::Mlp);
        let blk = Block::new(sp.clone(), "ct", &mut s).unwrap();
        let (x, z) = inputs(&sp, 1, &mut s);
        let a = blk.eval(&x, &z, Some(&[0.0]), &Tensor::eye(3)).unwrap();
        let b = blk.eval(&x, &z, Some(&[1.0]), &Tensor::eye(3)).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
        assert!((b.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flow_block_is_linear_in_logits() {
        let mut s = RngStream::new(3, &[1]);
        let sp = spec(BlockKind::Flow, Arch::Mlp);
        let mut blk = Block::new(sp.clone(), "fm", &mut s).unwrap();
        // Zero the output layer: logits vanish, so v must vanish.
        let w = blk.store().get("fm.fuse.out.w").unwrap().shape().to_vec();
        *blk.store_mut().get_mut("fm.fuse.out.w").unwrap() = Tensor::zeros(&w);
        let (x, z) = inputs(&sp, 2, &mut s);
        let embed = Tensor::randn(&[3, 3], &mut s);
        let v = blk.eval(&x, &z, Some(&[0.3, 0.6]), &embed).unwrap();
        assert!(v.data().iter().all(|&a| a == 0.0));

        // Bias e_k selects row k; doubling it doubles v.
        *blk.store_mut().get_mut("fm.fuse.out.b").unwrap() = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let v = blk.eval(&x, &z, Some(&[0.3, 0.6]), &embed).unwrap();
        assert_eq!(v.row(0), embed.row(1));
        *blk.store_mut().get_mut("fm.fuse.out.b").unwrap() = Tensor::vector(vec![0.0, 2.0, 0.0]);
        let v2 = blk.eval(&x, &z, Some(&[0.3, 0.6]), &embed).unwrap();
        assert!(v2.max_abs_diff(&v.scale(2.0)) < 1e-15);
    }

    #[test]
    fn separate_blocks_do_not_share_parameters() {
        let mut s = RngStream::new(4, &[1]);
        let sp = spec(BlockKind::Dt, Arch::Mlp);
        let b1 = Block::new(sp.clone(), "blk1", &mut s).unwrap();
        let mut b2 = Block::new(sp.clone(), "blk2", &mut s).unwrap();
        let (x, z) = inputs(&sp, 3, &mut s);
        let before = b1.eval(&x, &z, None, &Tensor::eye(3)).unwrap();
        for v in b2.store_mut().get_mut("blk2.fuse.out.w").unwrap().data_mut() {
            *v += 1.0;
        }
        assert_eq!(b1.eval(&x, &z, None, &Tensor::eye(3)).unwrap(), before);
        assert!(b1.store().params().all(|(k, _)| k.starts_with("blk1.")));
    }

    fn check_block(kind: BlockKind, arch: Arch, mode: Mode) {
        let mut s = RngStream::new(5, &[kind as u64, arch as u64]);
        let sp = spec(kind, arch);
        let blk = Block::new(sp.clone(), "b", &mut s).unwrap();
        let (x, z) = inputs(&sp, 4, &mut s);
        let embed = Tensor::randn(&[3, 3], &mut s);
        let target = Tensor::randn(&[4, 3], &mut s);
        let params: ParamValues = blk
            .store()
            .params()
            .map(|(k, v)| (k.clone(), v.map(|a| a + 0.1 * s.normal())))
            .collect();
        let report = grad_check(
            &params,
            mode,
            |g, p| {
                let mut store = blk.store().clone();
                for (k, v) in p {
                    *store.get_mut(k)? = v.clone();
                }
                let b = Block::from_store(sp.clone(), "b", store)?;
                let xn = g.constant(x.clone());
                let zn = g.constant(z.clone());
                let tn = match kind {
                    BlockKind::Dt => None,
                    _ => Some(g.constant(Tensor::matrix(4, 1, vec![0.1, 0.4, 0.5, 0.9])?)),
                };
                let en = g.constant(embed.clone());
                let out = b.forward(g, xn, zn, tn, en, None)?;
                let tg = g.constant(target.clone());
                let d = g.sub(out.out, tg)?;
                let l = g.squared_l2(d)?;
                g.sum(l)
            },
            1e-5,
        );
        assert!(report.passed(), "{kind:?} {arch:?} {mode:?}: {report:?}");
    }

    #[test]
    fn dt_block_gradients_match_finite_differences() {
        check_block(BlockKind::Dt, Arch::Mlp, Mode::Train);
        check_block(BlockKind::Dt, Arch::Mlp, Mode::Eval);
        check_block(BlockKind::Dt, Arch::Conv, Mode::Train);
    }

    #[test]
    fn ct_and_flow_block_gradients_match_finite_differences() {
        check_block(BlockKind::Ct, Arch::Mlp, Mode::Train);
        check_block(BlockKind::Ct, Arch::Conv, Mode::Train);
        check_block(BlockKind::Flow, Arch::Mlp, Mode::Train);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut s = RngStream::new(6, &[1]);
        let sp = spec(BlockKind::Dt, Arch::Mlp);
        let mut blk = Block::new(sp.clone(), "b", &mut s).unwrap();
        let (x, z) = inputs(&sp, 8, &mut s);
        let mut g = ComputeGraph::new(Mode::Train);
        let (xn, zn, en) = (g.constant(x), g.constant(z), g.constant(Tensor::eye(3)));
        let out = blk.forward(&mut g, xn, zn, None, en, None).unwrap();
        assert_eq!(out.batchnorm.len(), 2);
        blk.update_running_stats(&g, &out, 0.1).unwrap();
        let (m, _) = g.batch_stats(out.batchnorm[0].1).unwrap();
        let rm = blk.store().buffer("b.img.bn1.mean").unwrap();
        assert!(rm.max_abs_diff(&m.scale(0.1)) < 1e-15);
    }

    #[test]
    fn conv_label_pathway_when_embedding_is_image_sized() {
        let mut s = RngStream::new(7, &[1]);
        let mut sp = spec(BlockKind::Dt, Arch::Conv);
        sp.embed_dim = 16;
        let blk = Block::new(sp.clone(), "p", &mut s).unwrap();
        assert!(blk.store().contains("p.lab.conv.w"));
        let embed = Tensor::randn(&[3, 16], &mut s);
        let (x, z) = inputs(&sp, 2, &mut s);
        assert_eq!(blk.eval(&x, &z, None, &embed).unwrap().shape(), &[2, 16]);
    }

    #[test]
    fn invalid_specs() {
        let mut sp = spec(BlockKind::Ct, Arch::Mlp);
        sp.time_dim = 3;
        assert!(sp.validate().is_err());
        let mut sp = spec(BlockKind::Ct, Arch::Mlp);
        sp.batchnorm = true;
        assert!(sp.validate().is_err());
    }
}
