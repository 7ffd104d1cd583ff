use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;

use crate::autodiff::{ComputeGraph, Mode};
use crate::blocks::Block;
use crate::config::Method;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::Head;

use super::dt::{block_stream, expect_method, head_stream};
use super::{
    apply_update, batches, dt_denoise_term, dt_head_terms, embed_node, epoch_order, label_rows, EpochStats,
    ModelBundle, RowBuilder, TrainHooks, TrainReport,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelOptions {
    pub workers: usize,
    /// Makes the job for this block panic; for exercising failure handling.
    #[doc(hidden)]
    pub fail_block: Option<usize>,
}

impl Default for ParallelOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            fail_block: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Block(usize),
    Head,
}

impl Job {
    fn name(self) -> String {
        match self {
            Job::Block(t) => format!("block {t}"),
            Job::Head => "head".into(),
        }
    }
}

enum Output {
    Block {
        t: usize,
        block: Block,
        stats: Vec<EpochStats>,
        /// Block state after each epoch, kept for the last block only.
        snapshots: Vec<Block>,
    },
    Head {
        head: Head,
        /// `[t - 1][epoch]`.
        stats: Vec<Vec<EpochStats>>,
        /// Head state after each epoch of the last block.
        snapshots: Vec<Head>,
    },
}

fn run_block(bundle: &ModelBundle, data: &Dataset, t: usize, opts: &ParallelOptions) -> Result<Output> {
    if opts.fail_block == Some(t) {
        panic!("injected failure in block {t}");
    }
    let cfg = &bundle.config;
    let sched = bundle.schedule()?;
    let mut block = bundle.block(t)?.clone();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut st = EpochStats::default();
        for (bi, idx) in batches(&order, cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + bi;
            let (x, y) = data.batch(idx);
            let mut g = ComputeGraph::new(Mode::Train);
            let embed = embed_node(&mut g, &bundle.embedding);
            let u = label_rows(&mut g, embed, &y, bundle.classes)?;
            let xn = g.constant(x);
            let mut s = block_stream(cfg.seed, t, step);
            let (term, out) = dt_denoise_term(&mut g, &block, sched, t, cfg.eta, xn, u, embed, &mut s)?;
            let grads = g.backward(term)?;
            st.add(0.0, 0.0, g.value(term).item(), g.len());
            apply_update(block.store_mut(), &grads, &cfg.optimizer)?;
            block.update_running_stats(&g, &out, cfg.bn_momentum)?;
        }
        stats.push(st);
        if t == cfg.steps {
            snapshots.push(block.clone());
        }
    }
    Ok(Output::Block {
        t,
        block,
        stats,
        snapshots,
    })
}

fn run_head(bundle: &ModelBundle, data: &Dataset) -> Result<Output> {
    let cfg = &bundle.config;
    let sched = bundle.schedule()?;
    let mut head = bundle.head.clone();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut stats = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    for t in 1..=cfg.steps {
        let mut per_t = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let order = epoch_order(cfg.seed, epoch, data.len());
            let mut st = EpochStats::default();
            for (bi, idx) in batches(&order, cfg.batch_size).enumerate() {
                let step = epoch * per_epoch + bi;
                let (_, y) = data.batch(idx);
                let mut g = ComputeGraph::new(Mode::Train);
                let embed = embed_node(&mut g, &bundle.embedding);
                let u = label_rows(&mut g, embed, &y, bundle.classes)?;
                let mut s = head_stream(cfg.seed, t, step);
                let (ce, kl) = dt_head_terms(&mut g, &head, sched, embed, u, &y, &mut s)?;
                let loss = g.add(ce, kl)?;
                let grads = g.backward(loss)?;
                st.add(g.value(ce).item(), g.value(kl).item(), 0.0, g.len());
                apply_update(head.store_mut(), &grads, &cfg.optimizer)?;
            }
            per_t.push(st);
            if t == cfg.steps {
                snapshots.push(head.clone());
            }
        }
        stats.push(per_t);
    }
    Ok(Output::Head {
        head,
        stats,
        snapshots,
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "worker panicked".into())
}

/// DT training with one job per block plus one for the head, run on a pool
/// of `opts.workers` threads.
///
/// With a fixed embedding table the block and head updates do not interact,
/// so every job replays exactly the updates of the sequential trainer (same
/// batch order, same per-step streams) and the results match it bit for bit.
/// A failed job is reported as [`Error::Job`]; the results of the jobs that
/// succeeded are still written back into `bundle`.
pub fn parallel_train_dt(
    bundle: &mut ModelBundle,
    data: &Dataset,
    mut hooks: TrainHooks<'_>,
    opts: &ParallelOptions,
) -> Result<TrainReport> {
    expect_method(bundle, Method::Dt)?;
    if bundle.embedding.trainable() {
        return Err(Error::Config(
            "parallel training couples blocks through a trainable embedding; use one-hot".into(),
        ));
    }
    if opts.workers == 0 {
        return Err(Error::Config("parallel training needs at least one worker".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let steps = bundle.config.steps;
    let jobs: Vec<Job> = (1..=steps).map(Job::Block).chain([Job::Head]).collect();
    let shared: &ModelBundle = bundle;
    let results: Vec<(Job, Result<Output>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&job| {
                let r = catch_unwind(AssertUnwindSafe(|| match job {
                    Job::Block(t) => run_block(shared, data, t, opts),
                    Job::Head => run_head(shared, data),
                }));
                let r = r.unwrap_or_else(|p| {
                    Err(Error::Job {
                        job: job.name(),
                        message: panic_message(p),
                    })
                });
                (job, r)
            })
            .collect()
    });

    let mut block_stats = vec![Vec::new(); steps];
    let mut head_stats = Vec::new();
    let mut last_blocks = Vec::new();
    let mut last_heads = Vec::new();
    let mut failure = None;
    for (job, r) in results {
        match r {
            Ok(Output::Block {
                t,
                block,
                stats,
                snapshots,
            }) => {
                bundle.blocks[t - 1] = block;
                block_stats[t - 1] = stats;
                last_blocks = if t == steps { snapshots } else { last_blocks };
            }
            Ok(Output::Head { head, stats, snapshots }) => {
                bundle.head = head;
                head_stats = stats;
                last_heads = snapshots;
            }
            Err(e) => {
                let e = match e {
                    Error::Job { .. } => e,
                    other => Error::Job {
                        job: job.name(),
                        message: other.to_string(),
                    },
                };
                failure.get_or_insert(e);
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }

    let epochs = bundle.config.epochs;
    let mut rows = RowBuilder::new(&mut hooks);
    for t in 1..=steps {
        for epoch in 0..epochs {
            let (b, h) = (&block_stats[t - 1][epoch], &head_stats[t - 1][epoch]);
            let merged = b.merge_with_head(h);
            let last = t == steps && epoch + 1 == epochs;
            if last {
                let view = ModelBundle {
                    blocks: {
                        let mut v = bundle.blocks.clone();
                        v[steps - 1] = last_blocks[epoch].clone();
                        v
                    },
                    head: last_heads[epoch].clone(),
                    ..bundle.clone()
                };
                rows.emit(&view, data, Some(t), epoch, &merged, [true, true, true], true)?;
            } else {
                rows.emit(bundle, data, Some(t), epoch, &merged, [true, true, true], false)?;
            }
        }
    }
    bundle.trained = true;
    Ok(rows.finish())
}
