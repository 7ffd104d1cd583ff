//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error
//! (unknown flag or subcommand, malformed value).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::check::{bench_mem, run_suite};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_pairs, Method, TrainConfig};
use crate::data::{load_mnist, synth_blobs, Dataset};
use crate::error::{Error, Result};
use crate::inference::{accuracy, predict, InferenceConfig};
use crate::metrics::MetricsWriter;
use crate::rng::{domain, RngStream};
use crate::tensor::Tensor;
use crate::trainer::{train, ModelBundle, TrainHooks};

/// Blob points per class for the built-in synthetic dataset.
pub const BLOBS_PER_CLASS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetName {
    Mnist,
    Blobs,
}

#[derive(Debug, Parser)]
#[command(name = "noprop", version, about = "Train and evaluate block-local denoising classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and optionally save it.
    Train {
        /// dt, ct, fm or backprop (default dt).
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long, value_enum, default_value = "blobs")]
        dataset: DatasetName,
        /// Plain `key = value` config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train DT blocks concurrently.
        #[arg(long)]
        parallel: bool,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// CSV file receiving one row per block/epoch.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Add a wall-clock column to the metrics.
        #[arg(long)]
        wall_clock: bool,
        /// Directory holding the MNIST IDX files.
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
    },
    /// Report accuracy of a saved model on a dataset's test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "blobs")]
        dataset: DatasetName,
        /// Inference steps for CT/FM (defaults to the trained config's).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
    },
    /// Classify one image file (PNG or PGM/PPM).
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Run the oracle/property suite.
    Check,
    /// Compare peak live-graph nodes of DT and backprop at two depths.
    BenchMem {
        #[arg(long, default_value_t = 2)]
        shallow: usize,
        #[arg(long, default_value_t = 10)]
        deep: usize,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

/// Blobs for `split`; the test split uses a different data seed.
pub fn blobs(seed: u64, split: &str) -> Result<Dataset> {
    let data_seed = match split {
        "test" => seed.wrapping_add(0x7E57),
        _ => seed,
    };
    synth_blobs(BLOBS_PER_CLASS, 2, 10.0, 1.0, data_seed)
}

fn load(dataset: DatasetName, split: &str, seed: u64, dir: &Path) -> Result<Dataset> {
    match dataset {
        DatasetName::Blobs => blobs(seed, split),
        DatasetName::Mnist => load_mnist(dir, split),
    }
}

/// Config from an optional file with flag overrides on top. Blobs start
/// from the small fully connected defaults.
pub fn resolve_config(
    file: Option<&Path>,
    dataset: DatasetName,
    method: Option<Method>,
    seed: Option<u64>,
    parallel: bool,
) -> Result<TrainConfig> {
    let mut pairs = match file {
        Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    if let Some(m) = method {
        pairs.push(("method".into(), m.to_string()));
    }
    if let Some(s) = seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if parallel {
        pairs.push(("parallel".into(), "true".into()));
    }
    match dataset {
        DatasetName::Blobs => TrainConfig::from_pairs_with(&pairs, TrainConfig::toy),
        DatasetName::Mnist => TrainConfig::from_pairs(&pairs),
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<bool> {
    match cmd {
        Command::Train {
            method,
            dataset,
            config,
            out: ckpt,
            parallel,
            seed,
            metrics,
            wall_clock,
            data_dir,
        } => {
            let cfg = resolve_config(config.as_deref(), dataset, method, seed, parallel)?;
            let train_set = load(dataset, "train", cfg.seed, &data_dir)?;
            let test_set = load(dataset, "test", cfg.seed, &data_dir)?;
            let mut bundle = ModelBundle::new(&cfg, &train_set)?;
            let mut writer = match &metrics {
                Some(p) => Some(MetricsWriter::create(p, wall_clock)?),
                None => None,
            };
            let mut sink = |row: &crate::metrics::MetricsRow| -> Result<()> {
                match writer.as_mut() {
                    Some(w) => w.write(row),
                    None => Ok(()),
                }
            };
            let hooks = TrainHooks {
                test: Some(&test_set),
                on_row: Some(&mut sink),
            };
            let report = train(&mut bundle, &train_set, hooks)?;
            if let Some(last) = report.rows.last() {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{:.4}", a));
                writeln!(
                    out,
                    "trained {} (T={}, {} epochs): train acc {}, test acc {}, peak nodes {}",
                    cfg.method,
                    cfg.steps,
                    cfg.epochs,
                    fmt(last.train_acc),
                    fmt(last.test_acc),
                    report.peak_nodes
                )?;
            }
            if let Some(p) = ckpt {
                save_checkpoint(&bundle, &p)?;
                writeln!(out, "saved {}", p.display())?;
            }
            Ok(true)
        }
        Command::Eval {
            ckpt,
            dataset,
            steps,
            data_dir,
        } => {
            let bundle = load_checkpoint(&ckpt)?;
            let data = load(dataset, "test", bundle.config.seed, &data_dir)?;
            let mut icfg = InferenceConfig::for_bundle(&bundle);
            if let Some(s) = steps {
                icfg.steps = s;
            }
            let acc = accuracy(&bundle, &data, &icfg)?;
            writeln!(out, "{} test accuracy {:.4} on {} examples", bundle.method(), acc, data.len())?;
            Ok(true)
        }
        Command::Predict { ckpt, image } => {
            let bundle = load_checkpoint(&ckpt)?;
            let x = read_image(&image, bundle.input)?;
            let icfg = InferenceConfig::for_bundle(&bundle);
            let p = predict(&bundle, &x, &icfg, &mut RngStream::new(bundle.config.seed, &[domain::INFER]))?;
            write!(out, "class {}", p.classes[0])?;
            if let Some(probs) = p.probs {
                let s: Vec<String> = probs.row(0).iter().map(|v| format!("{v:.4}")).collect();
                write!(out, " probs [{}]", s.join(", "))?;
            }
            writeln!(out)?;
            Ok(true)
        }
        Command::Check => {
            let report = run_suite();
            for r in &report.results {
                writeln!(out, "{r}")?;
            }
            let failed = report.results.iter().filter(|r| !r.passed).count();
            writeln!(out, "{} checks, {} failed", report.results.len(), failed)?;
            Ok(report.passed())
        }
        Command::BenchMem { shallow, deep } => {
            if shallow == 0 || deep == 0 {
                return Err(Error::Config("depths must be positive".into()));
            }
            let b = bench_mem(shallow, deep)?;
            writeln!(out, "method,T={shallow},T={deep},ratio")?;
            writeln!(out, "dt,{},{},{:.3}", b.dt.0, b.dt.1, b.dt_ratio())?;
            writeln!(out, "backprop,{},{},{:.3}", b.backprop.0, b.backprop.1, b.backprop_ratio())?;
            Ok(true)
        }
    }
}

/// Reads an image file into a `[1, h, w, c]` tensor scaled to `[0, 1]`.
pub fn read_image(path: &Path, input: [usize; 3]) -> Result<Tensor> {
    let [h, w, c] = input;
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(Error::Data(format!(
            "image is {}x{}, model expects {h}x{w}",
            img.height(),
            img.width()
        )));
    }
    let data: Vec<f64> = match c {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        _ => return Err(Error::Data(format!("cannot read images into {c} channels"))),
    };
    Tensor::new(&[1, h, w, c], data)
}
