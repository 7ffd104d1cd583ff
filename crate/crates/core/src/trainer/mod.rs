//! Training procedures.
//!
//! DT trains each block in turn on its own local loss; CT and FM train one
//! shared block against a continuous noise level; the backprop baseline
//! chains all blocks into a single graph.

mod backprop;
mod bundle;
mod ct;
mod dt;
mod fm;
mod losses;
mod parallel;

pub use backprop::train_backprop_baseline;
pub use bundle::{baseline_name, ModelBundle};
pub use ct::train_noprop_ct;
pub use dt::train_noprop_dt;
pub use fm::train_noprop_fm;
pub use losses::{
    dt_denoise_term, dt_head_terms, dt_loss_weight, embed_node, fm_loss, fm_loss_with, kl_to_standard_node, label_rows,
    noprop_dt_loss, DtLoss, FmLoss, FmPoint,
};
pub use parallel::{parallel_train_dt, ParallelOptions};

use std::time::Instant;

use crate::config::Method;
use crate::data::Dataset;
use crate::error::Result;
use crate::inference::{accuracy_unchecked, InferenceConfig};
use crate::metrics::MetricsRow;
use crate::optim::{OptimizerConfig, ParamStore};
use crate::rng::{domain, RngStream};
use crate::autodiff::GradMap;

/// Optional extras for a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Held-out data for the `test_acc` column.
    pub test: Option<&'a Dataset>,
    /// Called with every metrics row as soon as it is complete.
    pub on_row: Option<&'a mut dyn FnMut(&MetricsRow) -> Result<()>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    /// Largest graph (in nodes) recorded for a single update.
    pub peak_nodes: usize,
}

/// Dispatches on `bundle.config.method` (and `parallel` for DT).
pub fn train(bundle: &mut ModelBundle, data: &Dataset, hooks: TrainHooks<'_>) -> Result<TrainReport> {
    match bundle.method() {
        Method::Dt if bundle.config.parallel => {
            let opts = ParallelOptions {
                workers: bundle.config.workers,
                ..ParallelOptions::default()
            };
            parallel_train_dt(bundle, data, hooks, &opts)
        }
        Method::Dt => train_noprop_dt(bundle, data, hooks),
        Method::Ct => train_noprop_ct(bundle, data, hooks),
        Method::Fm => train_noprop_fm(bundle, data, hooks),
        Method::Backprop => train_backprop_baseline(bundle, data, hooks),
    }
}

/// Example order for one epoch; identical for every block and worker.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed, &[domain::SHUFFLE, epoch as u64]).shuffle(&mut idx);
    idx
}

pub(crate) fn apply_update(store: &mut ParamStore, grads: &GradMap, cfg: &OptimizerConfig) -> Result<()> {
    let mine = store.select(grads);
    store.step(&mine, cfg)
}

/// Running means of the loss terms over one epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct EpochStats {
    ce: f64,
    kl: f64,
    l2: f64,
    batches: usize,
    peak: usize,
}

impl EpochStats {
    pub(crate) fn add(&mut self, ce: f64, kl: f64, l2: f64, nodes: usize) {
        self.ce += ce;
        self.kl += kl;
        self.l2 += l2;
        self.batches += 1;
        self.peak = self.peak.max(nodes);
    }

    /// Block-job statistics with the head job's `ce`/`kl` for the same
    /// `(t, epoch)`.
    pub(crate) fn merge_with_head(&self, head: &EpochStats) -> EpochStats {
        EpochStats {
            ce: head.ce,
            kl: head.kl,
            l2: self.l2,
            batches: self.batches,
            peak: self.peak.max(head.peak),
        }
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.batches.max(1) as f64
    }
}

pub(crate) struct RowBuilder<'h, 'a> {
    hooks: &'h mut TrainHooks<'a>,
    rows: Vec<MetricsRow>,
    start: Instant,
    peak: usize,
}

impl<'h, 'a> RowBuilder<'h, 'a> {
    pub(crate) fn new(hooks: &'h mut TrainHooks<'a>) -> Self {
        Self {
            hooks,
            rows: Vec::new(),
            start: Instant::now(),
            peak: 0,
        }
    }

    /// Emits one row. Accuracies are measured when `with_acc` is set.
    pub(crate) fn emit(
        &mut self,
        bundle: &ModelBundle,
        data: &Dataset,
        block: Option<usize>,
        epoch: usize,
        stats: &EpochStats,
        terms: [bool; 3],
        with_acc: bool,
    ) -> Result<()> {
        let pick = |on: bool, v: f64| on.then(|| stats.mean(v));
        let (train_acc, test_acc) = if with_acc {
            let cfg = InferenceConfig::for_bundle(bundle);
            let lim = bundle.config.eval_limit;
            let tr = accuracy_unchecked(bundle, data, &cfg, lim)?;
            let te = match self.hooks.test {
                Some(t) => Some(accuracy_unchecked(bundle, t, &cfg, lim)?),
                None => None,
            };
            (Some(tr), te)
        } else {
            (None, None)
        };
        self.peak = self.peak.max(stats.peak);
        let row = MetricsRow {
            method: bundle.method(),
            block,
            epoch,
            ce: pick(terms[0], stats.ce),
            kl: pick(terms[1], stats.kl),
            l2: pick(terms[2], stats.l2),
            train_acc,
            test_acc,
            peak_nodes: stats.peak,
            wall_clock: self.start.elapsed().as_secs_f64(),
        };
        if let Some(f) = self.hooks.on_row.as_mut() {
            f(&row)?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub(crate) fn finish(self) -> TrainReport {
        TrainReport {
            rows: self.rows,
            peak_nodes: self.peak,
        }
    }
}

/// Index chunks of one epoch.
pub(crate) fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

