//! The oracle suite behind `noprop check`, plus the live-graph memory
//! benchmark behind `noprop bench-mem`.
//!
//! Every check compares a library computation against an independent
//! reference: central finite differences for gradients, quadrature for the
//! Gaussian posterior, Monte Carlo for the KL term, and direct summation for
//! the telescoping and unbiasedness identities.

pub mod oracles;

use std::fmt;

use crate::autodiff::{ComputeGraph, Mode, NodeId, Primitive};
use crate::blocks::{Arch, Block, BlockKind, BlockSpec};
use crate::config::{Method, TrainConfig};
use crate::data::synth_blobs;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, ParamValues};
use crate::rng::{domain, RngStream};
use crate::schedule::{gaussian_kl_to_standard, DiscreteSchedule};
use crate::tensor::Tensor;
use crate::trainer::{noprop_dt_loss, train, ModelBundle, TrainHooks};

/// Gradient tolerance (relative error) for primitives and blocks.
pub const GRAD_TOL: f64 = 1e-5;
/// Posterior coefficients against the quadrature oracle.
pub const BAYES_TOL: f64 = 1e-3;
/// Relative tolerance of the closed-form KL against Monte Carlo.
pub const KL_REL_TOL: f64 = 0.01;
pub const KL_SAMPLES: usize = 1_000_000;
/// Telescoping and unbiasedness identities.
pub const IDENTITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.passed)
    }

    /// Results whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| r.name.starts_with(prefix)).collect()
    }
}

fn from_grad(name: String, r: GradCheckReport) -> CheckResult {
    let detail = if r.errors.is_empty() {
        format!(
            "max rel err {:.2e} at {} over {} entries (tol {:.0e})",
            r.max_rel_err,
            r.worst.as_deref().unwrap_or("-"),
            r.checked,
            r.tolerance
        )
    } else {
        r.errors.join("; ")
    };
    CheckResult {
        passed: r.passed(),
        name,
        detail,
    }
}

/// Reduces an output to a scalar with fixed random weights so the upstream
/// gradient is generic.
fn project(g: &mut ComputeGraph, out: NodeId) -> Result<NodeId> {
    let w = Tensor::randn(g.value(out).shape(), &mut RngStream::new(0, &[domain::CHECK, 99]));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

type Build = Box<dyn Fn(&mut ComputeGraph, &ParamValues) -> Result<NodeId>>;

struct PrimCase {
    name: String,
    mode: Mode,
    params: ParamValues,
    build: Build,
}

fn params(items: Vec<(&str, Tensor)>) -> ParamValues {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn unary(name: &str, prim: Primitive, x: Tensor) -> PrimCase {
    PrimCase {
        name: name.to_string(),
        mode: Mode::Train,
        params: params(vec![("x", x)]),
        build: Box::new(move |g, p| {
            let x = g.param("x", &p["x"]);
            g.apply(prim.clone(), &[x])
        }),
    }
}

fn primitive_cases() -> Vec<PrimCase> {
    let mut s = RngStream::new(0, &[domain::CHECK, 1]);
    let mut r = |shape: &[usize]| Tensor::randn(shape, &mut s);
    let x = r(&[3, 4]);
    let pos = x.map(|v| v.abs() + 0.5);
    let mut cases = vec![
        PrimCase {
            name: "linear".into(),
            mode: Mode::Train,
            params: params(vec![("x", r(&[3, 4])), ("w", r(&[4, 2])), ("b", r(&[2]))]),
            build: Box::new(|g, p| {
                let x = g.param("x", &p["x"]);
                let w = g.param("w", &p["w"]);
                let b = g.param("b", &p["b"]);
                g.linear(x, w, Some(b))
            }),
        },
        PrimCase {
            name: "conv2d".into(),
            mode: Mode::Train,
            params: params(vec![("x", r(&[2, 4, 4, 2])), ("w", r(&[3, 3, 2, 3])), ("b", r(&[3]))]),
            build: Box::new(|g, p| {
                let x = g.param("x", &p["x"]);
                let w = g.param("w", &p["w"]);
                let b = g.param("b", &p["b"]);
                g.conv2d(x, w, b, 2, 1)
            }),
        },
        unary("max_pool2d", Primitive::MaxPool2d { size: 2, stride: 2 }, r(&[2, 4, 4, 2])),
    ];
    for (name, prim) in [
        ("relu", Primitive::Relu),
        ("sigmoid", Primitive::Sigmoid),
        ("tanh", Primitive::Tanh),
        ("softplus", Primitive::Softplus),
        ("exp", Primitive::Exp),
        ("softmax", Primitive::Softmax),
        ("log_softmax", Primitive::LogSoftmax),
        ("scalar_mul", Primitive::ScalarMul(-1.7)),
        ("scalar_add", Primitive::ScalarAdd(0.3)),
        ("squared_l2", Primitive::SquaredL2),
        ("transpose", Primitive::Transpose),
        ("reshape", Primitive::Reshape { shape: vec![2, 6] }),
        ("sum", Primitive::Sum { axis: None }),
        ("sum_axis", Primitive::Sum { axis: Some(0) }),
        ("mean", Primitive::Mean { axis: None }),
        ("mean_axis", Primitive::Mean { axis: Some(1) }),
        ("cross_entropy", Primitive::CrossEntropy { labels: vec![0, 3, 1] }),
    ] {
        cases.push(unary(name, prim, x.clone()));
    }
    cases.push(unary("log", Primitive::Log, pos.clone()));
    cases.push(unary("sqrt", Primitive::Sqrt, pos));
    cases.push(unary(
        "time_embedding",
        Primitive::TimeEmbedding { dim: 8, scale: 3.0 },
        Tensor::matrix(3, 1, vec![0.1, 0.5, 0.9]).expect("3 values"),
    ));
    for (name, prim) in [
        ("add", Primitive::Add),
        ("sub", Primitive::Sub),
        ("mul", Primitive::Mul),
        ("div", Primitive::Div),
    ] {
        for (sa, sb) in [(&[3usize, 4][..], &[3usize, 4][..]), (&[3, 4], &[4]), (&[2, 3], &[1])] {
            let prim = prim.clone();
            let a = r(sa);
            let b = r(sb).map(|v| v.signum() * (v.abs() + 0.5));
            cases.push(PrimCase {
                name: format!("{name} {sa:?}x{sb:?}"),
                mode: Mode::Train,
                params: params(vec![("a", a), ("b", b)]),
                build: Box::new(move |g, p| {
                    let a = g.param("a", &p["a"]);
                    let b = g.param("b", &p["b"]);
                    g.apply(prim.clone(), &[a, b])
                }),
            });
        }
    }
    for axis in 0..2 {
        let (sa, sb): (&[usize], &[usize]) = if axis == 0 { (&[2, 3], &[1, 3]) } else { (&[2, 3], &[2, 1]) };
        cases.push(PrimCase {
            name: format!("concat axis {axis}"),
            mode: Mode::Train,
            params: params(vec![("a", r(sa)), ("b", r(sb))]),
            build: Box::new(move |g, p| {
                let a = g.param("a", &p["a"]);
                let b = g.param("b", &p["b"]);
                g.concat(&[a, b], axis)
            }),
        });
    }
    for mode in [Mode::Train, Mode::Eval] {
        let rm = r(&[3]);
        let rv = r(&[3]).map(|v| v.abs() + 0.5);
        cases.push(PrimCase {
            name: format!("batchnorm {mode:?}").to_lowercase(),
            mode,
            params: params(vec![("x", r(&[4, 3])), ("gamma", r(&[3])), ("beta", r(&[3]))]),
            build: Box::new(move |g, p| {
                let x = g.param("x", &p["x"]);
                let ga = g.param("gamma", &p["gamma"]);
                let be = g.param("beta", &p["beta"]);
                let rm = g.constant(rm.clone());
                let rv = g.constant(rv.clone());
                g.apply(Primitive::BatchNorm { eps: 1e-5 }, &[x, ga, be, rm, rv])
            }),
        });
    }
    cases.push(PrimCase {
        name: "dropout".into(),
        mode: Mode::Train,
        params: params(vec![("x", r(&[3, 4]))]),
        build: Box::new(|g, p| {
            let x = g.param("x", &p["x"]);
            // A fresh stream per evaluation keeps the mask fixed.
            g.dropout(x, 0.7, &mut RngStream::new(0, &[domain::CHECK, 2]))
        }),
    });
    cases
}

/// Finite-difference checks of every primitive.
pub fn check_primitives() -> Vec<CheckResult> {
    primitive_cases()
        .into_iter()
        .map(|c| {
            let build = c.build;
            let r = grad_check(
                &c.params,
                c.mode,
                |g, p| {
                    let out = build(g, p)?;
                    project(g, out)
                },
                GRAD_TOL,
            );
            from_grad(format!("grad/{}", c.name), r)
        })
        .collect()
}

fn small_spec(kind: BlockKind, arch: Arch) -> BlockSpec {
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

/// Finite-difference check of a whole block's parameter gradients.
pub fn check_block(kind: BlockKind, arch: Arch, mode: Mode) -> CheckResult {
    let name = format!("grad/block {kind:?} {arch} {mode:?}").to_lowercase();
    let mut s = RngStream::new(0, &[domain::CHECK, 3, kind as u64, arch as u64]);
    let sp = small_spec(kind, arch);
    let blk = match Block::new(sp.clone(), "b", &mut s) {
        Ok(b) => b,
        Err(e) => {
            return CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let [h, w, c] = sp.input;
    let b = 4;
    let x = Tensor::randn(&[b, h, w, c], &mut s);
    let z = Tensor::randn(&[b, sp.embed_dim], &mut s);
    let embed = Tensor::randn(&[3, 3], &mut s);
    let target = Tensor::randn(&[b, 3], &mut s);
    // Zero-initialized biases can put a ReLU input exactly on its kink;
    // probe a generic point instead.
    let params: ParamValues = blk
        .store()
        .params()
        .map(|(k, v)| (k.clone(), v.map(|a| a + 0.1 * s.normal())))
        .collect();
    let r = grad_check(
        &params,
        mode,
        |g, p| {
            let mut store = blk.store().clone();
            for (k, v) in p {
                *store.get_mut(k)? = v.clone();
            }
            let bl = Block::from_store(sp.clone(), "b", store)?;
            let xn = g.constant(x.clone());
            let zn = g.constant(z.clone());
            let tn = match kind {
                BlockKind::Dt => None,
                _ => Some(g.constant(Tensor::matrix(b, 1, vec![0.1, 0.4, 0.5, 0.9])?)),
            };
            let en = g.constant(embed.clone());
            let out = bl.forward(g, xn, zn, tn, en, None)?;
            let tg = g.constant(target.clone());
            let d = g.sub(out.out, tg)?;
            let l = g.squared_l2(d)?;
            g.sum(l)
        },
        GRAD_TOL,
    );
    from_grad(name, r)
}

pub fn check_blocks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for arch in [Arch::Mlp, Arch::Conv] {
        out.push(check_block(BlockKind::Dt, arch, Mode::Train));
        out.push(check_block(BlockKind::Dt, arch, Mode::Eval));
        out.push(check_block(BlockKind::Ct, arch, Mode::Train));
        out.push(check_block(BlockKind::Flow, arch, Mode::Train));
    }
    out
}

/// Posterior coefficients on random `(ab_t, ab_{t-1})` pairs against
/// quadrature of the product of Gaussians.
pub fn check_bayes(pairs: usize) -> CheckResult {
    let mut s = RngStream::new(0, &[domain::CHECK, 4]);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let ab_t = 0.05 + 0.9 * s.uniform();
        let ab_prev = ab_t * (0.05 + 0.9 * s.uniform());
        let c = crate::schedule::posterior_from_pair(ab_t, ab_prev);
        let (a, b, v) = oracles::bayes_coefficients_grid(ab_t, ab_prev);
        worst = worst.max((c.a - a).abs()).max((c.b - b).abs()).max((c.c - v).abs());
    }
    CheckResult {
        name: "bayes/posterior coefficients".into(),
        passed: worst < BAYES_TOL,
        detail: format!("{pairs} pairs, max abs err {worst:.2e} (tol {BAYES_TOL:.0e})"),
    }
}

/// Closed-form KL against a Monte-Carlo estimate.
pub fn check_kl(samples: usize) -> CheckResult {
    let u = [1.0, -0.5, 2.0];
    let ab0 = 0.5;
    let closed = gaussian_kl_to_standard(&u, ab0);
    let mc = oracles::monte_carlo_kl(&u, ab0, samples, &mut RngStream::new(0, &[domain::CHECK, 5]));
    match closed {
        Ok(k) => {
            let rel = (k - mc).abs() / k.abs();
            CheckResult {
                name: "kl/monte carlo".into(),
                passed: rel < KL_REL_TOL,
                detail: format!("closed {k:.6}, MC {mc:.6} ({samples} samples), rel err {rel:.2e}"),
            }
        }
        Err(e) => CheckResult {
            name: "kl/monte carlo".into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// `sum_t (SNR(t) - SNR(t-1)) = SNR(T) - SNR(0)` for several depths.
pub fn check_telescoping() -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut err = None;
    for steps in [1, 2, 5, 10, 50, 100] {
        let r = (|| -> Result<f64> {
            let s = DiscreteSchedule::default_cosine(steps)?;
            let sum: f64 = (1..=steps).map(|t| s.snr_diff(t)).sum::<Result<f64>>()?;
            Ok((sum - (s.snr(steps)? - s.snr(0)?)).abs())
        })();
        match r {
            Ok(e) => worst = worst.max(e),
            Err(e) => err = Some(e.to_string()),
        }
    }
    CheckResult {
        name: "schedule/telescoping".into(),
        passed: err.is_none() && worst < IDENTITY_TOL,
        detail: err.unwrap_or_else(|| format!("max abs err {worst:.2e} (tol {IDENTITY_TOL:.0e})")),
    }
}

/// On a fixed tiny model and batch, averaging the sampled-`t` DT loss over
/// every `t` must equal `CE + KL + (eta / 2) sum_t dSNR(t) mse_t` assembled
/// directly from the same noise.
pub fn unbiasedness_gap(steps: usize) -> Result<f64> {
    let data = synth_blobs(4, 2, 4.0, 1.0, 0)?;
    let mut cfg = TrainConfig::toy(Method::Dt);
    cfg.steps = steps;
    cfg.hidden = 8;
    cfg.seed = 17;
    let bundle = ModelBundle::new(&cfg, &data)?;
    let sched = bundle.schedule()?;
    let (x, y) = data.batch(&(0..data.len()).collect::<Vec<_>>());
    let head_key = [domain::CHECK, 6, 0];
    let block_key = |t: usize| [domain::CHECK, 6, t as u64];

    let mut sampled = 0.0;
    for t in 1..=steps {
        let mut g = ComputeGraph::new(Mode::Train);
        let l = noprop_dt_loss(
            &mut g,
            &bundle,
            t,
            &x,
            &y,
            &mut RngStream::new(cfg.seed, &block_key(t)),
            &mut RngStream::new(cfg.seed, &head_key),
        )?;
        sampled += g.value(l.loss).item();
    }
    sampled /= steps as f64;

    let embed = bundle.embedding.rows();
    let u = bundle.embedding.embed_batch(&y)?;
    let (b, d) = (u.rows(), u.row_len());
    let noised = |ab: f64, stream: &mut RngStream| {
        let eps = Tensor::randn(&[b, d], stream);
        u.zip_with(&eps, |a, e| ab.sqrt() * a + (1.0 - ab).sqrt() * e)
    };
    let z_top = noised(sched.alpha_bar(steps)?, &mut RngStream::new(cfg.seed, &head_key))?;
    let probs = bundle.head.probs(&z_top, embed)?;
    let ce = (0..b).map(|r| -probs.row(r)[y[r]].ln()).sum::<f64>() / b as f64;
    let ab0 = sched.alpha_bar(0)?;
    let kl = (0..b)
        .map(|r| gaussian_kl_to_standard(u.row(r), ab0))
        .sum::<Result<f64>>()?
        / b as f64;
    let mut weighted = 0.0;
    for t in 1..=steps {
        let z = noised(sched.alpha_bar(t - 1)?, &mut RngStream::new(cfg.seed, &block_key(t)))?;
        let mut g = ComputeGraph::new(Mode::Train);
        let (xn, zn, en) = (g.constant(x.clone()), g.constant(z), g.constant(embed.clone()));
        let out = bundle.block(t)?.forward(&mut g, xn, zn, None, en, None)?;
        let u_hat = g.value(out.out);
        let mse = (0..b)
            .map(|r| u_hat.row(r).iter().zip(u.row(r)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .sum::<f64>()
            / b as f64;
        weighted += sched.snr_diff(t)? * mse;
    }
    let full = ce + kl + 0.5 * cfg.eta * weighted;
    Ok((sampled - full).abs())
}

pub fn check_unbiasedness() -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut err = None;
    for steps in [2, 5, 10] {
        match unbiasedness_gap(steps) {
            Ok(g) => worst = worst.max(g),
            Err(e) => err = Some(e.to_string()),
        }
    }
    CheckResult {
        name: "dt/unbiased estimator".into(),
        passed: err.is_none() && worst < IDENTITY_TOL,
        detail: err.unwrap_or_else(|| format!("max gap {worst:.2e} (tol {IDENTITY_TOL:.0e})")),
    }
}

/// The full suite.
pub fn run_suite() -> SuiteReport {
    let mut results = check_primitives();
    results.extend(check_blocks());
    results.push(check_bayes(100));
    results.push(check_kl(KL_SAMPLES));
    results.push(check_telescoping());
    results.push(check_unbiasedness());
    SuiteReport { results }
}

/// Peak live-graph nodes for DT and the backprop baseline at two depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemBench {
    pub shallow: usize,
    pub deep: usize,
    pub dt: (usize, usize),
    pub backprop: (usize, usize),
}

impl MemBench {
    pub fn dt_ratio(&self) -> f64 {
        self.dt.1 as f64 / self.dt.0 as f64
    }

    pub fn backprop_ratio(&self) -> f64 {
        self.backprop.1 as f64 / self.backprop.0 as f64
    }
}

/// One epoch on blobs with MLP blocks, recording the largest graph built for
/// a single update.
pub fn bench_mem(shallow: usize, deep: usize) -> Result<MemBench> {
    let data = synth_blobs(32, 2, 10.0, 1.0, 0)?;
    let peak = |method: Method, steps: usize| -> Result<usize> {
        let mut cfg = TrainConfig::toy(method);
        cfg.steps = steps;
        cfg.epochs = 1;
        cfg.infer_steps = 1;
        cfg.eval_limit = 1;
        let mut b = ModelBundle::new(&cfg, &data)?;
        Ok(train(&mut b, &data, TrainHooks::default())?.peak_nodes)
    };
    Ok(MemBench {
        shallow,
        deep,
        dt: (peak(Method::Dt, shallow)?, peak(Method::Dt, deep)?),
        backprop: (peak(Method::Backprop, shallow)?, peak(Method::Backprop, deep)?),
    })
}
