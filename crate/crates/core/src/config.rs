//! Training configuration and its `key = value` text form.
//!
//! Blank lines and lines starting with `#` are ignored. Every other line must
//! be `key = value` with a known key; later assignments win.

use std::fmt;
use std::str::FromStr;

use crate::blocks::Arch;
use crate::embedding::EmbeddingMode;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dt,
    Ct,
    Fm,
    Backprop,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dt => "dt",
            Method::Ct => "ct",
            Method::Fm => "fm",
            Method::Backprop => "backprop",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt" => Ok(Method::Dt),
            "ct" => Ok(Method::Ct),
            "fm" => Ok(Method::Fm),
            "backprop" => Ok(Method::Backprop),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Number of DT blocks (also the backprop chain length).
    pub steps: usize,
    pub batch_size: usize,
    /// Epochs per block for DT, total epochs otherwise.
    pub epochs: usize,
    /// Weight of the denoising term.
    pub eta: f64,
    pub optimizer: OptimizerConfig,
    pub embedding: EmbeddingMode,
    /// Embedding width for learned embeddings (ignored otherwise).
    pub embed_dim: usize,
    pub head: HeadKind,
    pub radial_sigma: f64,
    pub seed: u64,
    pub parallel: bool,
    pub workers: usize,
    /// Standard deviation of the flow-matching probability path.
    pub fm_sigma: f64,
    pub arch: Arch,
    pub hidden: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub time_dim: usize,
    pub batchnorm: bool,
    pub bn_momentum: f64,
    /// Dropout keep probability; 1 disables dropout.
    pub keep_prob: f64,
    pub gamma_hidden: usize,
    pub train_gamma: bool,
    /// Initial `w_t` of the baseline mixing weights `alpha_t = tanh(w_t)`.
    pub baseline_w_init: f64,
    /// Inference steps for CT and FM.
    pub infer_steps: usize,
    /// Examples used when reporting accuracies in the metrics (0 = all).
    pub eval_limit: usize,
}

impl TrainConfig {
    /// Defaults for `method`: AdamW and `eta = 0.1` for DT and backprop, Adam
    /// and `eta = 1` for CT and FM.
    pub fn new(method: Method) -> Self {
        let (optimizer, eta) = match method {
            Method::Dt | Method::Backprop => (OptimizerConfig::adamw(1e-3, 1e-3), 0.1),
            Method::Ct | Method::Fm => (OptimizerConfig::adam(1e-3, 1e-3), 1.0),
        };
        Self {
            method,
            steps: 10,
            batch_size: 128,
            epochs: 10,
            eta,
            optimizer,
            embedding: EmbeddingMode::OneHot,
            embed_dim: 20,
            head: HeadKind::Softmax,
            radial_sigma: 1.0,
            seed: 0,
            parallel: false,
            workers: 4,
            fm_sigma: 0.1,
            arch: Arch::Conv,
            hidden: 256,
            conv1: 32,
            conv2: 64,
            time_dim: 32,
            batchnorm: matches!(method, Method::Dt | Method::Backprop),
            bn_momentum: 0.1,
            keep_prob: 1.0,
            gamma_hidden: 16,
            train_gamma: true,
            baseline_w_init: 1.0,
            infer_steps: 1000,
            eval_limit: 1000,
        }
    }

    /// Small fully connected setup for 2-d toy data.
    pub fn toy(method: Method) -> Self {
        Self {
            steps: 5,
            batch_size: 32,
            epochs: 30,
            arch: Arch::Mlp,
            hidden: 32,
            time_dim: 16,
            infer_steps: 100,
            ..Self::new(method)
        }
    }

    /// Builds a config from `key = value` pairs. The method is resolved first
    /// so that its defaults apply underneath the other pairs.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        Self::from_pairs_with(pairs, Self::new)
    }

    /// Like [`TrainConfig::from_pairs`] with `base` supplying the defaults
    /// for the resolved method.
    pub fn from_pairs_with(pairs: &[(String, String)], base: impl Fn(Method) -> Self) -> Result<Self> {
        let method = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "method")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Method::Dt);
        let mut cfg = base(method);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
            }
        }
        let v = value.trim();
        match key {
            "method" => self.method = v.parse()?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "eta" => self.eta = num(key, v)?,
            "optimizer" => self.optimizer.kind = OptimizerKind::parse(v)?,
            "lr" => self.optimizer.lr = num(key, v)?,
            "beta1" => self.optimizer.beta1 = num(key, v)?,
            "beta2" => self.optimizer.beta2 = num(key, v)?,
            "adam_eps" => self.optimizer.eps = num(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = num(key, v)?,
            "embedding" => self.embedding = v.parse()?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "head" => self.head = v.parse()?,
            "radial_sigma" => self.radial_sigma = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "parallel" => self.parallel = flag(key, v)?,
            "workers" => self.workers = num(key, v)?,
            "fm_sigma" => self.fm_sigma = num(key, v)?,
            "arch" => self.arch = v.parse()?,
            "hidden" => self.hidden = num(key, v)?,
            "conv1" => self.conv1 = num(key, v)?,
            "conv2" => self.conv2 = num(key, v)?,
            "time_dim" => self.time_dim = num(key, v)?,
            "batchnorm" => self.batchnorm = flag(key, v)?,
            "bn_momentum" => self.bn_momentum = num(key, v)?,
            "keep_prob" => self.keep_prob = num(key, v)?,
            "gamma_hidden" => self.gamma_hidden = num(key, v)?,
            "train_gamma" => self.train_gamma = flag(key, v)?,
            "baseline_w_init" => self.baseline_w_init = num(key, v)?,
            "infer_steps" => self.infer_steps = num(key, v)?,
            "eval_limit" => self.eval_limit = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.workers == 0 || self.infer_steps == 0 {
            return bad("steps, batch_size, workers and infer_steps must be positive".into());
        }
        if matches!(self.method, Method::Dt | Method::Ct) && !(self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.method == Method::Fm && !(self.fm_sigma > 0.0) {
            return bad(format!("fm_sigma must be positive, got {}", self.fm_sigma));
        }
        if self.parallel && self.method != Method::Dt {
            return bad("parallel training is only defined for dt".into());
        }
        if self.parallel && self.embedding != EmbeddingMode::OneHot {
            return bad("parallel training needs fixed one-hot embeddings".into());
        }
        if !(self.radial_sigma > 0.0) {
            return bad(format!("radial_sigma must be positive, got {}", self.radial_sigma));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep_prob must be in (0, 1], got {}", self.keep_prob));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must be in [0, 1], got {}", self.bn_momentum));
        }
        if self.batchnorm && matches!(self.method, Method::Ct | Method::Fm) {
            return bad("batchnorm is not used by continuous-time blocks".into());
        }
        if self.gamma_hidden == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return bad("widths must be positive".into());
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let o = &self.optimizer;
        let rows: Vec<(&str, String)> = vec![
            ("method", self.method.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eta", self.eta.to_string()),
            ("optimizer", o.kind.as_str().to_string()),
            ("lr", o.lr.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("adam_eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("embedding", self.embedding.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("head", self.head.to_string()),
            ("radial_sigma", self.radial_sigma.to_string()),
            ("seed", self.seed.to_string()),
            ("parallel", self.parallel.to_string()),
            ("workers", self.workers.to_string()),
            ("fm_sigma", self.fm_sigma.to_string()),
            ("arch", self.arch.to_string()),
            ("hidden", self.hidden.to_string()),
            ("conv1", self.conv1.to_string()),
            ("conv2", self.conv2.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("batchnorm", self.batchnorm.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("keep_prob", self.keep_prob.to_string()),
            ("gamma_hidden", self.gamma_hidden.to_string()),
            ("train_gamma", self.train_gamma.to_string()),
            ("baseline_w_init", self.baseline_w_init.to_string()),
            ("infer_steps", self.infer_steps.to_string()),
            ("eval_limit", self.eval_limit.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Splits `key = value` text into pairs, rejecting malformed lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
