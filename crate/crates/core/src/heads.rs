//! Class-probability heads applied to the final latent `z_T`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{stable_softmax, ComputeGraph, Mode, NodeId};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Softmax over a fully connected layer.
    Softmax,
    /// Softmax weights mix the embedding rows into `y~`; probabilities then
    /// decay with the squared distance between `y~` and each row.
    Radial,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Radial => "radial",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "radial" => Ok(HeadKind::Radial),
            _ => Err(Error::Config(format!("unknown head `{s}`"))),
        }
    }
}

/// `p = softmax(logits)`, stabilized.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    stable_softmax(logits, &mut out);
    out
}

/// Radial likelihoods from the head's raw scores `f` and the embedding rows.
pub fn radial_probs(scores: &[f64], embed: &Tensor, sigma: f64) -> Vec<f64> {
    let w = softmax_probs(scores);
    let d = embed.row_len();
    let mut y = vec![0.0; d];
    for (k, wk) in w.iter().enumerate() {
        for (yi, ui) in y.iter_mut().zip(embed.row(k)) {
            *yi += wk * ui;
        }
    }
    let neg: Vec<f64> = (0..embed.rows())
        .map(|k| {
            let d2: f64 = embed.row(k).iter().zip(&y).map(|(u, v)| (u - v) * (u - v)).sum();
            -d2 / (2.0 * sigma * sigma)
        })
        .collect();
    softmax_probs(&neg)
}

/// Head `theta_out`: a fully connected map `d -> m` plus the decision rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    kind: HeadKind,
    sigma: f64,
    store: ParamStore,
}

impl Head {
    pub fn new(kind: HeadKind, dim: usize, classes: usize, sigma: f64, stream: &mut RngStream) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("radial sigma must be positive, got {sigma}")));
        }
        let mut store = ParamStore::new();
        let s = (1.0 / dim as f64).sqrt();
        store.insert(HEAD_W, Tensor::randn(&[dim, classes], stream).scale(s))?;
        store.insert(HEAD_B, Tensor::zeros(&[classes]))?;
        Ok(Self { kind, sigma, store })
    }

    pub fn from_store(kind: HeadKind, sigma: f64, store: ParamStore) -> Result<Self> {
        store.get(HEAD_W)?;
        store.get(HEAD_B)?;
        Ok(Self { kind, sigma, store })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Logits whose softmax is the head's class distribution. `z` is
    /// `[B, d]`, `embed` the `[m, d]` table node (used by the radial head).
    pub fn logits(&self, g: &mut ComputeGraph, z: NodeId, embed: NodeId) -> Result<NodeId> {
        let w = g.param(HEAD_W, self.store.get(HEAD_W)?);
        let b = g.param(HEAD_B, self.store.get(HEAD_B)?);
        let f = g.linear(z, w, Some(b))?;
        match self.kind {
            HeadKind::Softmax => Ok(f),
            HeadKind::Radial => {
                // -|y - u_k|^2 / 2s^2 equals (2 y.u_k - |u_k|^2) / 2s^2 up to a
                // per-row constant, which softmax ignores.
                let p = g.softmax(f)?;
                let y = g.linear(p, embed, None)?;
                let et = g.transpose(embed)?;
                let dots = g.linear(y, et, None)?;
                let dots = g.scale(dots, 2.0)?;
                let norms = g.squared_l2(embed)?;
                let s = g.sub(dots, norms)?;
                g.scale(s, 1.0 / (2.0 * self.sigma * self.sigma))
            }
        }
    }

    /// Mean cross-entropy of the head on `z` against `labels`.
    pub fn loss(&self, g: &mut ComputeGraph, z: NodeId, embed: NodeId, labels: &[usize]) -> Result<NodeId> {
        let logits = self.logits(g, z, embed)?;
        let ce = g.cross_entropy(logits, labels)?;
        g.mean(ce)
    }

    /// Class probabilities `[B, m]` for a batch of latents.
    pub fn probs(&self, z: &Tensor, embed: &Tensor) -> Result<Tensor> {
        let mut g = ComputeGraph::new(Mode::Eval);
        let zn = g.constant(z.clone());
        let en = g.constant(embed.clone());
        let logits = self.logits(&mut g, zn, en)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).clone())
    }
}
