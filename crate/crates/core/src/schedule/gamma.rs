//! Learnable continuous noise schedule.
//!
//! `gamma(t) = g0 + (g1 - g0) (1 - gbar(t))` where `gbar` is a two-layer
//! network with positive weights, renormalized so that `gbar(0) = 0` and
//! `gbar(1) = 1`. Then `SNR(t) = exp(-gamma(t))` and
//! `alpha_bar(t) = sigmoid(-gamma(t))`.

use crate::autodiff::{ComputeGraph, NodeId};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const G0: &str = "gamma.g0";
pub const G1: &str = "gamma.g1";
pub const W1: &str = "gamma.w1";
pub const B1: &str = "gamma.b1";
pub const W2: &str = "gamma.w2";

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of softplus, for initializing raw weights from positive targets.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPoint {
    pub gamma: f64,
    pub alpha_bar: f64,
    pub snr: f64,
}

/// Graph nodes for `gamma(t)` and `d gamma / dt` at a batch of times, both
/// shaped `[B, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct GammaNodes {
    pub gamma: NodeId,
    pub gamma_prime: NodeId,
    /// `gamma(0)` and `gamma(1)` as `[1]` nodes.
    pub gamma_at_0: NodeId,
    pub gamma_at_1: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableGamma {
    store: ParamStore,
    hidden: usize,
}

impl TrainableGamma {
    /// Endpoints `g0 = -7`, `g1 = 7`; hidden sigmoids spread across `[0, 1]`.
    pub fn new(hidden: usize, stream: &mut RngStream) -> Result<Self> {
        Self::with_endpoints(hidden, -7.0, 7.0, stream)
    }

    pub fn with_endpoints(hidden: usize, g0: f64, g1: f64, stream: &mut RngStream) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("gamma network needs hidden units".into()));
        }
        let mut store = ParamStore::new();
        store.insert(G0, Tensor::scalar(g0))?;
        store.insert(G1, Tensor::scalar(g1))?;
        let mut w1 = Vec::with_capacity(hidden);
        let mut b1 = Vec::with_capacity(hidden);
        let mut w2 = Vec::with_capacity(hidden);
        for k in 0..hidden {
            let slope = 4.0 + stream.uniform() * 4.0;
            let center = (k as f64 + 0.5) / hidden as f64;
            w1.push(softplus_inv(slope));
            b1.push(-slope * center);
            w2.push(softplus_inv(0.5 + stream.uniform()));
        }
        store.insert(W1, Tensor::matrix(1, hidden, w1)?)?;
        store.insert(B1, Tensor::vector(b1))?;
        store.insert(W2, Tensor::matrix(hidden, 1, w2)?)?;
        Ok(Self { store, hidden })
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        for n in [G0, G1, W1, B1, W2] {
            store.get(n)?;
        }
        let hidden = store.get(B1)?.numel();
        Ok(Self { store, hidden })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn endpoints(&self) -> (f64, f64) {
        (
            self.store.get(G0).unwrap().item(),
            self.store.get(G1).unwrap().item(),
        )
    }

    /// Positive weights `(w1, b1, w2)` after the softplus map.
    fn weights(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let w1 = self.store.get(W1).unwrap().data().iter().map(|&v| softplus(v)).collect();
        let b1 = self.store.get(B1).unwrap().data().to_vec();
        let w2 = self.store.get(W2).unwrap().data().iter().map(|&v| softplus(v)).collect();
        (w1, b1, w2)
    }

    /// Unnormalized network output and its time derivative.
    fn raw(&self, t: f64) -> (f64, f64) {
        let (w1, b1, w2) = self.weights();
        let mut y = 0.0;
        let mut dy = 0.0;
        for k in 0..self.hidden {
            let s = sigmoid(w1[k] * t + b1[k]);
            y += w2[k] * s;
            dy += w2[k] * w1[k] * s * (1.0 - s);
        }
        (y, dy)
    }

    /// Normalized network `gbar(t)`.
    pub fn gamma_bar(&self, t: f64) -> f64 {
        let (y0, _) = self.raw(0.0);
        let (y1, _) = self.raw(1.0);
        (self.raw(t).0 - y0) / (y1 - y0)
    }

    pub fn gamma(&self, t: f64) -> f64 {
        let (g0, g1) = self.endpoints();
        g0 + (g1 - g0) * (1.0 - self.gamma_bar(t))
    }

    pub fn eval(&self, t: f64) -> GammaPoint {
        let gamma = self.gamma(t);
        GammaPoint {
            gamma,
            alpha_bar: sigmoid(-gamma),
            snr: (-gamma).exp(),
        }
    }

    /// `d gamma / dt`, by the chain rule through the network.
    pub fn gamma_prime(&self, t: f64) -> f64 {
        let (g0, g1) = self.endpoints();
        let (y0, _) = self.raw(0.0);
        let (y1, _) = self.raw(1.0);
        let (_, dy) = self.raw(t);
        -(g1 - g0) * dy / (y1 - y0)
    }

    /// `d SNR / dt = -gamma'(t) exp(-gamma(t))`.
    pub fn snr_prime(&self, t: f64) -> f64 {
        -self.gamma_prime(t) * (-self.gamma(t)).exp()
    }

    /// Records `gamma` and `gamma'` at `times` into `g`, with the schedule
    /// parameters registered as trainable leaves.
    pub fn graph_nodes(&self, g: &mut ComputeGraph, times: &[f64]) -> Result<GammaNodes> {
        let b = times.len();
        let w1_raw = g.param(W1, self.store.get(W1)?);
        let b1 = g.param(B1, self.store.get(B1)?);
        let w2_raw = g.param(W2, self.store.get(W2)?);
        let g0 = g.param(G0, self.store.get(G0)?);
        let g1 = g.param(G1, self.store.get(G1)?);
        let w1 = g.softplus(w1_raw)?;
        let w2 = g.softplus(w2_raw)?;

        let mut all_t = times.to_vec();
        all_t.extend([0.0, 1.0]);
        let tt = g.constant(Tensor::matrix(b + 2, 1, all_t)?);
        let pre = g.linear(tt, w1, Some(b1))?;
        let s = g.sigmoid(pre)?;
        let y = g.linear(s, w2, None)?;

        let mut pick = |rows: Vec<f64>, r: usize| -> Result<NodeId> {
            let sel = g.constant(Tensor::matrix(r, b + 2, rows)?);
            g.linear(sel, y, None)
        };
        let mut sel_t = vec![0.0; b * (b + 2)];
        for i in 0..b {
            sel_t[i * (b + 2) + i] = 1.0;
        }
        let y_t = pick(sel_t, b)?;
        let mut sel0 = vec![0.0; b + 2];
        sel0[b] = 1.0;
        let y0 = pick(sel0, 1)?;
        let mut seld = vec![0.0; b + 2];
        seld[b] = -1.0;
        seld[b + 1] = 1.0;
        let span = pick(seld, 1)?;

        let num = g.sub(y_t, y0)?;
        let gbar = g.div(num, span)?;
        let one_minus = g.scale(gbar, -1.0)?;
        let one_minus = g.offset(one_minus, 1.0)?;
        let range = g.sub(g1, g0)?;
        let scaled = g.mul(one_minus, range)?;
        let gamma = g.add(scaled, g0)?;

        // d/dt of the network at the batch times only.
        let ones = g.constant(Tensor::ones(&[1]));
        let s_t = {
            let mut sel = vec![0.0; b * (b + 2)];
            for i in 0..b {
                sel[i * (b + 2) + i] = 1.0;
            }
            let sel = g.constant(Tensor::matrix(b, b + 2, sel)?);
            g.linear(sel, s, None)?
        };
        let neg_s = g.scale(s_t, -1.0)?;
        let one_minus_s = g.add(neg_s, ones)?;
        let ds = g.mul(s_t, one_minus_s)?;
        let w1_row = g.reshape(w1, &[self.hidden])?;
        let ds = g.mul(ds, w1_row)?;
        let dy = g.linear(ds, w2, None)?;
        let dy = g.div(dy, span)?;
        let neg_range = g.scale(range, -1.0)?;
        let gamma_prime = g.mul(dy, neg_range)?;

        let gamma_at_0 = g.reshape(g1, &[1])?;
        let gamma_at_1 = g.reshape(g0, &[1])?;
        Ok(GammaNodes {
            gamma,
            gamma_prime,
            gamma_at_0,
            gamma_at_1,
        })
    }
}
