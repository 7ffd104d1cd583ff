//! Metrics rows and their CSV form.
//!
//! Columns, in order:
//! `method,block,epoch,ce,kl,l2,train_acc,test_acc,peak_nodes` and, when
//! enabled, a trailing `wall_clock`. Missing values are empty fields. Wall
//! clock is opt-in so that repeated runs produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::Method;
use crate::error::Result;

pub const HEADER: &str = "method,block,epoch,ce,kl,l2,train_acc,test_acc,peak_nodes";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: Method,
    /// Block index for DT rows, `None` for rows covering the whole model.
    pub block: Option<usize>,
    pub epoch: usize,
    pub ce: Option<f64>,
    pub kl: Option<f64>,
    /// Denoising term for DT/CT, flow-matching loss for FM.
    pub l2: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub peak_nodes: usize,
    pub wall_clock: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self, wall_clock: bool) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.block.map_or_else(|| "all".to_string(), |b| b.to_string()),
            self.epoch,
            opt(self.ce),
            opt(self.kl),
            opt(self.l2),
            opt(self.train_acc),
            opt(self.test_acc),
            self.peak_nodes
        );
        if wall_clock {
            s.push_str(&format!(",{:.3}", self.wall_clock));
        }
        s
    }
}

/// Appends rows to a CSV file, flushing after each one so that an
/// interrupted run leaves a valid prefix.
pub struct MetricsWriter {
    out: BufWriter<File>,
    wall_clock: bool,
}

impl MetricsWriter {
    pub fn create(path: &Path, wall_clock: bool) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "{HEADER}")?;
        if wall_clock {
            write!(out, ",wall_clock")?;
        }
        writeln!(out)?;
        out.flush()?;
        Ok(Self { out, wall_clock })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv(self.wall_clock))?;
        self.out.flush()?;
        Ok(())
    }
}
