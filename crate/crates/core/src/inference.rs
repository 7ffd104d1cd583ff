//! Label prediction by running the learned denoising chain.

use crate::autodiff::{ComputeGraph, Mode};
use crate::config::Method;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{domain, RngStream};
use crate::schedule::{posterior_from_pair, PosteriorCoefficients};
use crate::tensor::Tensor;
use crate::trainer::{baseline_name, ModelBundle};

/// Rows per inference chunk, to bound memory on large evaluation sets.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Argmax of the head's class distribution on the final latent.
    HeadArgmax,
    /// Embedding row closest to the final latent.
    NearestEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    /// Grid size for CT and FM; DT always uses its own block count.
    pub steps: usize,
    /// Inject the posterior noise in DT/CT steps.
    pub stochastic: bool,
    /// `None` picks the method's rule: nearest embedding for FM, head argmax
    /// otherwise.
    pub decision: Option<Decision>,
}

impl InferenceConfig {
    pub fn for_bundle(bundle: &ModelBundle) -> Self {
        Self {
            steps: bundle.config.infer_steps,
            stochastic: true,
            decision: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    /// Head probabilities `[B, m]`, when the head was evaluated.
    pub probs: Option<Tensor>,
    /// Final latents `[B, d]`.
    pub latents: Tensor,
}

/// `z = a u_hat + b z_prev + sqrt(c) eps`; the noise is skipped when
/// `stream` is `None` or `c = 0`.
pub fn dt_forward_step(
    z_prev: &Tensor,
    u_hat: &Tensor,
    c: PosteriorCoefficients,
    stream: Option<&mut RngStream>,
) -> Result<Tensor> {
    let mean = u_hat.zip_with(z_prev, |u, z| c.a * u + c.b * z)?;
    match stream {
        Some(s) if c.c > 0.0 => {
            let sd = c.c.sqrt();
            Ok(mean.map(|m| m + sd * s.normal()))
        }
        _ => Ok(mean),
    }
}

/// Explicit Euler on `[0, 1]` with `steps` equal steps:
/// `z <- z + v(z, t_i) / steps`, `t_i = i / steps`.
pub fn euler_integrate(
    z0: &Tensor,
    steps: usize,
    mut field: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("Euler integration needs at least one step".into()));
    }
    let h = 1.0 / steps as f64;
    let mut z = z0.clone();
    for i in 0..steps {
        let v = field(&z, i as f64 * h)?;
        z = z.zip_with(&v, |a, b| a + h * b)?;
        if !z.is_finite() {
            return Err(Error::NonFinite("euler step"));
        }
    }
    Ok(z)
}

/// Closest embedding row per latent row; ties go to the lower class.
pub fn nearest_embedding(z: &Tensor, embed: &Tensor) -> Vec<usize> {
    (0..z.rows())
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for k in 0..embed.rows() {
                let d: f64 = embed.row(k).iter().zip(z.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect()
}

fn noise(rows: usize, dim: usize, stream: &mut RngStream) -> Tensor {
    Tensor::randn(&[rows, dim], stream)
}

fn decide(bundle: &ModelBundle, z: Tensor, rule: Decision) -> Result<Prediction> {
    let embed = bundle.embedding.rows();
    match rule {
        Decision::HeadArgmax => {
            let p = bundle.head.probs(&z, embed)?;
            Ok(Prediction {
                classes: p.argmax_rows(),
                probs: Some(p),
                latents: z,
            })
        }
        Decision::NearestEmbedding => Ok(Prediction {
            classes: nearest_embedding(&z, embed),
            probs: None,
            latents: z,
        }),
    }
}

fn default_rule(method: Method) -> Decision {
    match method {
        Method::Fm => Decision::NearestEmbedding,
        _ => Decision::HeadArgmax,
    }
}

fn run_dt(bundle: &ModelBundle, x: &Tensor, cfg: &InferenceConfig, stream: &mut RngStream) -> Result<Tensor> {
    let sched = bundle.schedule()?;
    let embed = bundle.embedding.rows();
    let mut z = noise(x.rows(), bundle.embedding.dim(), stream);
    for t in 1..=sched.steps() {
        let u = bundle.block(t)?.eval(x, &z, None, embed)?;
        let c = sched.posterior_coefficients(t)?;
        z = dt_forward_step(&z, &u, c, cfg.stochastic.then_some(&mut *stream))?;
    }
    Ok(z)
}

fn run_ct(bundle: &ModelBundle, x: &Tensor, cfg: &InferenceConfig, stream: &mut RngStream) -> Result<Tensor> {
    let gamma = bundle.gamma()?;
    let block = &bundle.blocks[0];
    let embed = bundle.embedding.rows();
    let n = cfg.steps;
    let grid: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let ab: Vec<f64> = grid.iter().map(|&t| gamma.eval(t).alpha_bar).collect();
    let mut z = noise(x.rows(), bundle.embedding.dim(), stream);
    for i in 1..=n {
        let times = vec![grid[i - 1]; x.rows()];
        let u = block.eval(x, &z, Some(&times), embed)?;
        let c = posterior_from_pair(ab[i], ab[i - 1]);
        // The last step lands on the clean end and adds no noise.
        let s = (cfg.stochastic && i < n).then_some(&mut *stream);
        z = dt_forward_step(&z, &u, c, s)?;
    }
    Ok(z)
}

fn run_fm(bundle: &ModelBundle, x: &Tensor, cfg: &InferenceConfig, stream: &mut RngStream) -> Result<Tensor> {
    let block = &bundle.blocks[0];
    let embed = bundle.embedding.rows();
    let z0 = noise(x.rows(), bundle.embedding.dim(), stream);
    euler_integrate(&z0, cfg.steps, |z, t| block.eval(x, z, Some(&vec![t; x.rows()]), embed))
}

fn run_backprop(bundle: &ModelBundle, x: &Tensor, stream: &mut RngStream) -> Result<Tensor> {
    let w = bundle
        .baseline
        .as_ref()
        .ok_or_else(|| Error::State("backprop model has no mixing weights".into()))?;
    let embed = bundle.embedding.rows();
    let mut z = noise(x.rows(), bundle.embedding.dim(), stream);
    for (i, blk) in bundle.blocks.iter().enumerate() {
        let alpha = w.get(&baseline_name(i + 1))?.item().tanh();
        let u = blk.eval(x, &z, None, embed)?;
        z = z.zip_with(&u, |a, b| (1.0 - alpha) * a + alpha * b)?;
    }
    Ok(z)
}

/// Prediction without the trained-flag check; used for metrics while
/// training is still under way.
pub(crate) fn predict_unchecked(
    bundle: &ModelBundle,
    x: &Tensor,
    cfg: &InferenceConfig,
    stream: &mut RngStream,
) -> Result<Prediction> {
    if cfg.steps == 0 {
        return Err(Error::Config("inference needs at least one step".into()));
    }
    let rule = cfg.decision.unwrap_or(default_rule(bundle.method()));
    let mut classes = Vec::with_capacity(x.rows());
    let mut probs = Vec::new();
    let mut latents = Vec::new();
    let mut start = 0;
    while start < x.rows() {
        let idx: Vec<usize> = (start..(start + CHUNK).min(x.rows())).collect();
        let xb = x.select_rows(&idx);
        let z = match bundle.method() {
            Method::Dt => run_dt(bundle, &xb, cfg, stream)?,
            Method::Ct => run_ct(bundle, &xb, cfg, stream)?,
            Method::Fm => run_fm(bundle, &xb, cfg, stream)?,
            Method::Backprop => run_backprop(bundle, &xb, stream)?,
        };
        let p = decide(bundle, z, rule)?;
        classes.extend(p.classes);
        if let Some(pr) = p.probs {
            probs.extend_from_slice(pr.data());
        }
        latents.extend_from_slice(p.latents.data());
        start += idx.len();
    }
    let m = bundle.classes;
    let d = bundle.embedding.dim();
    Ok(Prediction {
        probs: (!probs.is_empty()).then(|| Tensor::new(&[classes.len(), m], probs)).transpose()?,
        latents: Tensor::new(&[classes.len(), d], latents)?,
        classes,
    })
}

/// Runs the model's inference chain on `x` (`[B, h, w, c]`).
pub fn predict(bundle: &ModelBundle, x: &Tensor, cfg: &InferenceConfig, stream: &mut RngStream) -> Result<Prediction> {
    bundle.ensure_trained()?;
    predict_unchecked(bundle, x, cfg, stream)
}

pub fn infer_dt(bundle: &ModelBundle, x: &Tensor, stream: &mut RngStream) -> Result<Prediction> {
    expect(bundle, Method::Dt)?;
    predict(bundle, x, &InferenceConfig::for_bundle(bundle), stream)
}

pub fn infer_ct(bundle: &ModelBundle, x: &Tensor, steps: usize, stream: &mut RngStream) -> Result<Prediction> {
    expect(bundle, Method::Ct)?;
    let cfg = InferenceConfig {
        steps,
        ..InferenceConfig::for_bundle(bundle)
    };
    predict(bundle, x, &cfg, stream)
}

pub fn infer_fm(bundle: &ModelBundle, x: &Tensor, steps: usize, stream: &mut RngStream) -> Result<Prediction> {
    expect(bundle, Method::Fm)?;
    let cfg = InferenceConfig {
        steps,
        ..InferenceConfig::for_bundle(bundle)
    };
    predict(bundle, x, &cfg, stream)
}

fn expect(bundle: &ModelBundle, method: Method) -> Result<()> {
    if bundle.method() != method {
        return Err(Error::State(format!(
            "expected a {method} model, got {}",
            bundle.method()
        )));
    }
    Ok(())
}

/// Fraction of the first `limit` examples (all when `limit == 0`) that are
/// classified correctly. Noise comes from a fixed inference stream.
pub(crate) fn accuracy_unchecked(bundle: &ModelBundle, data: &Dataset, cfg: &InferenceConfig, limit: usize) -> Result<f64> {
    let data = if limit == 0 { data.clone() } else { data.take(limit) };
    let mut s = RngStream::new(bundle.config.seed, &[domain::INFER]);
    let p = predict_unchecked(bundle, data.images(), cfg, &mut s)?;
    let hits = p.classes.iter().zip(data.labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / data.len() as f64)
}

pub fn accuracy(bundle: &ModelBundle, data: &Dataset, cfg: &InferenceConfig) -> Result<f64> {
    bundle.ensure_trained()?;
    accuracy_unchecked(bundle, data, cfg, 0)
}

/// Loss-free forward of a single DT block, for inspection.
pub fn block_denoise(bundle: &ModelBundle, t: usize, x: &Tensor, z_prev: &Tensor) -> Result<Tensor> {
    let mut g = ComputeGraph::new(Mode::Eval);
    let blk = bundle.block(t)?;
    let (xn, zn) = (g.constant(x.clone()), g.constant(z_prev.clone()));
    let en = g.constant(bundle.embedding.rows().clone());
    let out = blk.forward(&mut g, xn, zn, None, en, None)?;
    Ok(g.value(out.out).clone())
}
