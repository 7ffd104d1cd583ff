//! Parameter stores and Adam/AdamW updates.

use std::collections::BTreeMap;

use crate::autodiff::GradMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Decoupled weight decay applied directly to the parameter.
    AdamW,
    /// Weight decay folded into the gradient as an L2 term.
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::adamw(lr, weight_decay)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First/second moment slots for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Named trainable tensors plus their optimizer state. Buffers (batchnorm
/// running statistics) live alongside but are never touched by the optimizer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    slots: BTreeMap<String, Moments>,
    buffers: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.slots.insert(
            name.to_string(),
            Moments {
                m: Tensor::zeros(value.shape()),
                v: Tensor::zeros(value.shape()),
            },
        );
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate buffer name {name:?}")));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Name(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Name(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Name(name.to_string()))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::Name(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("buffer", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.slots.get(name)
    }

    pub fn set_moments(&mut self, name: &str, moments: Moments) -> Result<()> {
        let p = self.get(name)?;
        if p.shape() != moments.m.shape() || p.shape() != moments.v.shape() {
            return Err(Error::shape("moments", p.shape(), moments.m.shape()));
        }
        self.slots.insert(name.to_string(), moments);
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// The subset of `grads` addressed to this store.
    pub fn select(&self, grads: &GradMap) -> GradMap {
        grads
            .iter()
            .filter(|(k, _)| self.params.contains_key(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect::<BTreeMap<_, _>>()
    }

    /// One Adam/AdamW step over every parameter in the store. Parameters
    /// without an entry in `grads` are treated as having a zero gradient, so
    /// decay and momentum still apply to them. The step counter advances once.
    pub fn step(&mut self, grads: &GradMap, cfg: &OptimizerConfig) -> Result<()> {
        cfg.validate()?;
        if let Some(unknown) = grads.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Name(unknown.clone()));
        }
        for (name, g) in grads {
            let p = &self.params[name];
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let slot = self.slots.get_mut(name).expect("slot per parameter");
            let grad = grads.get(name);
            let (pd, md, vd) = (p.data_mut(), slot.m.data_mut(), slot.v.data_mut());
            for i in 0..pd.len() {
                let mut gi = grad.map_or(0.0, |g| g.data()[i]);
                if cfg.kind == OptimizerKind::Adam {
                    gi += cfg.weight_decay * pd[i];
                }
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                if cfg.kind == OptimizerKind::AdamW {
                    pd[i] -= cfg.lr * cfg.weight_decay * pd[i];
                }
                pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`ParamStore::step`].
pub fn optimizer_step(store: &mut ParamStore, grads: &GradMap, cfg: &OptimizerConfig) -> Result<()> {
    store.step(grads, cfg)
}
