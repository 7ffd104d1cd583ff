//! Datasets: IDX (MNIST) and CIFAR binary loaders plus synthetic blobs.

mod cifar;
mod idx;

pub use cifar::load_cifar10_bin;
pub use idx::{load_idx, load_mnist, parse_idx_images, parse_idx_labels};

use crate::error::{Error, Result};
use crate::rng::{domain, RngStream};
use crate::tensor::Tensor;

/// Labelled images, channel-last `[N, H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: &str) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Data(format!("images must be [N, H, W, C], got {:?}", images.shape())));
        }
        if images.rows() == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if images.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(h, w, c)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` examples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Self {
            images,
            labels,
            classes: self.classes,
            split: self.split.clone(),
        }
    }
}

/// Gaussian blobs in the plane with centers evenly spaced on a circle so that
/// neighbouring centers are `separation` apart. Labels cycle `0, 1, .., m-1`.
/// Images are `[N, 1, 1, 2]`.
pub fn synth_blobs(per_class: usize, classes: usize, separation: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    if per_class == 0 || classes < 2 {
        return Err(Error::Config("blobs need at least two classes and one point per class".into()));
    }
    let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
    let mut s = RngStream::new(seed, &[domain::DATA]);
    let n = per_class * classes;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let angle = 2.0 * std::f64::consts::PI * y as f64 / classes as f64;
        data.push(radius * angle.cos() + sigma * s.normal());
        data.push(radius * angle.sin() + sigma * s.normal());
        labels.push(y);
    }
    Dataset::new(Tensor::new(&[n, 1, 1, 2], data)?, labels, classes, "train")
}
