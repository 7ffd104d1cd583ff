use crate::blocks::{Block, BlockKind, BlockSpec};
use crate::config::{Method, TrainConfig};
use crate::data::Dataset;
use crate::embedding::{EmbeddingMatrix, EmbeddingMode};
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::optim::ParamStore;
use crate::rng::{domain, RngStream};
use crate::schedule::{DiscreteSchedule, TrainableGamma};
use crate::tensor::Tensor;

const HEAD_KEY: u64 = 1 << 20;
const EMBED_KEY: u64 = HEAD_KEY + 1;
const GAMMA_KEY: u64 = HEAD_KEY + 2;

/// Name of the baseline mixing weight for block `t`.
pub fn baseline_name(t: usize) -> String {
    format!("baseline.w{t}")
}

/// Every trainable piece of one model.
///
/// DT and backprop models hold blocks `blk1..blkT`; CT and FM models hold a
/// single shared block `blk0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: TrainConfig,
    /// Image extents `(h, w, c)`.
    pub input: [usize; 3],
    pub classes: usize,
    pub blocks: Vec<Block>,
    pub head: Head,
    pub embedding: EmbeddingMatrix,
    /// Fixed cosine schedule (DT).
    pub schedule: Option<DiscreteSchedule>,
    /// Learned schedule (CT).
    pub gamma: Option<TrainableGamma>,
    /// `w_t` of the backprop baseline.
    pub baseline: Option<ParamStore>,
    pub trained: bool,
}

impl ModelBundle {
    /// Fresh model for `data`; prototype embeddings are picked from it.
    pub fn new(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        let prototype = match cfg.embedding {
            EmbeddingMode::Prototype => Some(EmbeddingMatrix::prototype(
                data.images(),
                data.labels(),
                data.classes(),
            )?),
            _ => None,
        };
        Self::build(cfg, data.image_shape(), data.classes(), prototype)
    }

    /// Fresh model for images of shape `input`. Prototype embeddings must be
    /// supplied.
    pub fn build(
        cfg: &TrainConfig,
        input: [usize; 3],
        classes: usize,
        prototype: Option<EmbeddingMatrix>,
    ) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let init = |key: u64| RngStream::new(seed, &[domain::INIT, key]);
        let embedding = match cfg.embedding {
            EmbeddingMode::OneHot => EmbeddingMatrix::one_hot(classes),
            EmbeddingMode::Learned => EmbeddingMatrix::learned(classes, cfg.embed_dim, &mut init(EMBED_KEY))?,
            EmbeddingMode::Prototype => {
                prototype.ok_or_else(|| Error::Config("prototype embeddings need a dataset".into()))?
            }
        };
        if embedding.classes() != classes {
            return Err(Error::Config(format!(
                "embedding has {} rows for {classes} classes",
                embedding.classes()
            )));
        }
        let spec = Self::block_spec(cfg, input, classes, embedding.dim());
        let blocks = match cfg.method {
            Method::Dt | Method::Backprop => (1..=cfg.steps)
                .map(|t| Block::new(spec.clone(), &format!("blk{t}"), &mut init(t as u64)))
                .collect::<Result<Vec<_>>>()?,
            Method::Ct | Method::Fm => vec![Block::new(spec, "blk0", &mut init(0))?],
        };
        let head = Head::new(cfg.head, embedding.dim(), classes, cfg.radial_sigma, &mut init(HEAD_KEY))?;
        let schedule = match cfg.method {
            Method::Dt => Some(DiscreteSchedule::default_cosine(cfg.steps)?),
            _ => None,
        };
        let gamma = match cfg.method {
            Method::Ct => Some(TrainableGamma::new(cfg.gamma_hidden, &mut init(GAMMA_KEY))?),
            _ => None,
        };
        let baseline = match cfg.method {
            Method::Backprop => {
                let mut s = ParamStore::new();
                for t in 1..=cfg.steps {
                    s.insert(&baseline_name(t), Tensor::vector(vec![cfg.baseline_w_init]))?;
                }
                Some(s)
            }
            _ => None,
        };
        Ok(Self {
            config: cfg.clone(),
            input,
            classes,
            blocks,
            head,
            embedding,
            schedule,
            gamma,
            baseline,
            trained: false,
        })
    }

    pub fn block_spec(cfg: &TrainConfig, input: [usize; 3], classes: usize, embed_dim: usize) -> BlockSpec {
        let kind = match cfg.method {
            Method::Dt | Method::Backprop => BlockKind::Dt,
            Method::Ct => BlockKind::Ct,
            Method::Fm => BlockKind::Flow,
        };
        BlockSpec {
            kind,
            arch: cfg.arch,
            input,
            classes,
            embed_dim,
            hidden: cfg.hidden,
            channels: (cfg.conv1, cfg.conv2),
            time_dim: cfg.time_dim,
            batchnorm: cfg.batchnorm && kind == BlockKind::Dt,
            keep_prob: (cfg.keep_prob < 1.0).then_some(cfg.keep_prob),
        }
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    /// Block `t` of a DT/backprop model (1-based).
    pub fn block(&self, t: usize) -> Result<&Block> {
        self.blocks
            .get(t.wrapping_sub(1))
            .filter(|_| t >= 1)
            .ok_or_else(|| Error::range("block", t, format!("[1, {}]", self.blocks.len())))
    }

    pub fn schedule(&self) -> Result<&DiscreteSchedule> {
        self.schedule
            .as_ref()
            .ok_or_else(|| Error::State(format!("{} model has no discrete schedule", self.method())))
    }

    pub fn gamma(&self) -> Result<&TrainableGamma> {
        self.gamma
            .as_ref()
            .ok_or_else(|| Error::State(format!("{} model has no learned schedule", self.method())))
    }

    pub fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("model has not been trained".into()))
        }
    }

    /// Named parameter stores, in a fixed order.
    pub fn stores(&self) -> Vec<(String, &ParamStore)> {
        let mut v: Vec<(String, &ParamStore)> =
            self.blocks.iter().map(|b| (b.prefix().to_string(), b.store())).collect();
        v.push(("head".into(), self.head.store()));
        v.push(("embed".into(), self.embedding.store()));
        if let Some(g) = &self.gamma {
            v.push(("gamma".into(), g.store()));
        }
        if let Some(b) = &self.baseline {
            v.push(("baseline".into(), b));
        }
        v
    }

    pub fn store_mut(&mut self, name: &str) -> Result<&mut ParamStore> {
        match name {
            "head" => Ok(self.head.store_mut()),
            "embed" => Ok(self.embedding.store_mut()),
            "gamma" => self
                .gamma
                .as_mut()
                .map(|g| g.store_mut())
                .ok_or_else(|| Error::Name("no gamma store".into())),
            "baseline" => self
                .baseline
                .as_mut()
                .ok_or_else(|| Error::Name("no baseline store".into())),
            _ => self
                .blocks
                .iter_mut()
                .find(|b| b.prefix() == name)
                .map(|b| b.store_mut())
                .ok_or_else(|| Error::Name(format!("no store `{name}`"))),
        }
    }
}
