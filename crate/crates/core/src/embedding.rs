//! The class-embedding table `W_Embed` (one row per class).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Parameter name of the embedding table inside its store.
pub const EMBED: &str = "embed.w";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// `d = m`, identity rows, never trained.
    OneHot,
    /// Trainable `m x d` table, orthogonal rows when `d >= m`.
    Learned,
    /// Trainable rows initialized to one representative image per class.
    Prototype,
}

impl EmbeddingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingMode::OneHot => "one-hot",
            EmbeddingMode::Learned => "learned",
            EmbeddingMode::Prototype => "prototype",
        }
    }
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-hot" | "onehot" => Ok(EmbeddingMode::OneHot),
            "learned" => Ok(EmbeddingMode::Learned),
            "prototype" => Ok(EmbeddingMode::Prototype),
            _ => Err(Error::Config(format!("unknown embedding mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    mode: EmbeddingMode,
    classes: usize,
    dim: usize,
    store: ParamStore,
}

impl EmbeddingMatrix {
    pub fn one_hot(classes: usize) -> Self {
        Self::with_rows(EmbeddingMode::OneHot, Tensor::eye(classes))
    }

    /// Orthogonal rows (`W W^T = I`) via QR of a Gaussian matrix when
    /// `dim >= classes`, otherwise Gaussian entries scaled by `1/sqrt(dim)`.
    pub fn learned(classes: usize, dim: usize, stream: &mut RngStream) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::Config("embedding needs at least one class and one dimension".into()));
        }
        let rows = if dim >= classes {
            orthogonal_rows(classes, dim, stream)
        } else {
            let s = 1.0 / (dim as f64).sqrt();
            Tensor::randn(&[classes, dim], stream).scale(s)
        };
        Ok(Self::with_rows(EmbeddingMode::Learned, rows))
    }

    /// Prototype table from flattened images `[N, ...]`; see [`init_prototype`].
    pub fn prototype(images: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        Ok(Self::with_rows(EmbeddingMode::Prototype, init_prototype(images, labels, classes)?))
    }

    /// Wraps existing rows, e.g. when restoring a checkpoint.
    pub fn with_rows(mode: EmbeddingMode, rows: Tensor) -> Self {
        let (classes, dim) = (rows.rows(), rows.row_len());
        let mut store = ParamStore::new();
        store.insert(EMBED, rows).expect("fresh store");
        Self {
            mode,
            classes,
            dim,
            store,
        }
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.mode
    }

    pub fn trainable(&self) -> bool {
        self.mode != EmbeddingMode::OneHot
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &Tensor {
        self.store.get(EMBED).expect("embedding table present")
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `u_y`, row `y` of the table.
    pub fn embed(&self, y: usize) -> Result<Tensor> {
        if y >= self.classes {
            return Err(Error::range("class", y as f64, format!("[0, {})", self.classes)));
        }
        Ok(Tensor::vector(self.rows().row(y).to_vec()))
    }

    /// Rows for a batch of labels, `[B, d]`.
    pub fn embed_batch(&self, labels: &[usize]) -> Result<Tensor> {
        if let Some(&y) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::range("class", y as f64, format!("[0, {})", self.classes)));
        }
        Ok(self.rows().select_rows(labels))
    }

    /// Smallest Euclidean distance between two distinct rows.
    pub fn min_pairwise_distance(&self) -> f64 {
        let w = self.rows();
        let mut best = f64::INFINITY;
        for i in 0..self.classes {
            for j in i + 1..self.classes {
                best = best.min(euclidean(w.row(i), w.row(j)));
            }
        }
        best
    }

    /// Index of the row nearest to `z`; ties go to the lower index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let w = self.rows();
        let mut best = (0, f64::INFINITY);
        for k in 0..self.classes {
            let d: f64 = w.row(k).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

fn orthogonal_rows(classes: usize, dim: usize, stream: &mut RngStream) -> Tensor {
    let g = Tensor::randn(&[dim, classes], stream);
    let qr = DMatrix::from_row_slice(dim, classes, g.data()).qr();
    let (q, r) = (qr.q(), qr.r());
    let mut rows = vec![0.0; classes * dim];
    for k in 0..classes {
        // Fix the column signs so the draw does not depend on QR conventions.
        let sign = if r[(k, k)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            rows[k * dim + i] = sign * q[(i, k)];
        }
    }
    Tensor::from_parts(vec![classes, dim], rows)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Dataset index of each class's prototype: the member with the smallest
/// median distance to the other members of its class. Ties go to the lower
/// dataset index.
pub fn prototype_indices(images: &Tensor, labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    if images.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    let mut members = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        members[y].push(i);
    }
    members
        .iter()
        .enumerate()
        .map(|(c, idx)| {
            if idx.is_empty() {
                return Err(Error::Data(format!("class {c} has no examples")));
            }
            let mut best = (idx[0], f64::INFINITY);
            let mut dists = Vec::with_capacity(idx.len());
            for &i in idx {
                dists.clear();
                dists.extend(
                    idx.iter()
                        .filter(|&&j| j != i)
                        .map(|&j| euclidean(images.row(i), images.row(j))),
                );
                let m = median(&mut dists);
                if m < best.1 {
                    best = (i, m);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// Prototype rows `[m, D]` where `D` is the flattened image size.
pub fn init_prototype(images: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let idx = prototype_indices(images, labels, classes)?;
    let flat = images.reshape(&[images.rows(), images.row_len()])?;
    Ok(flat.select_rows(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rows() {
        let e = EmbeddingMatrix::one_hot(3);
        assert_eq!(e.embed(1).unwrap().data(), &[0.0, 1.0, 0.0]);
        assert!(!e.trainable());
        assert!(matches!(e.embed(3), Err(Error::Range { .. })));
    }

    #[test]
    fn learned_shape_and_orthogonality() {
        let mut s = RngStream::new(1, &[1]);
        let e = EmbeddingMatrix::learned(10, 20, &mut s).unwrap();
        assert_eq!(e.embed(4).unwrap().numel(), 20);
        let w = e.rows();
        let gram = w.matmul(&w.transpose().unwrap()).unwrap();
        assert!(gram.max_abs_diff(&Tensor::eye(10)) < 1e-10);

        let narrow = EmbeddingMatrix::learned(10, 4, &mut s).unwrap();
        assert_eq!(narrow.rows().shape(), &[10, 4]);
    }

    fn brute_force_prototype(xs: &[f64]) -> usize {
        // Enumerate every candidate and its median distance directly.
        let n = xs.len();
        let mut scores = Vec::new();
        for i in 0..n {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| (xs[i] - xs[j]).abs()).collect();
            d.sort_by(f64::total_cmp);
            let med = if d.is_empty() {
                0.0
            } else if d.len() % 2 == 1 {
                d[d.len() / 2]
            } else {
                (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0
            };
            scores.push(med);
        }
        let best = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        scores.iter().position(|&s| s == best).unwrap()
    }

    #[test]
    fn prototype_examples() {
        let x = Tensor::matrix(3, 1, vec![0.0, 1.0, 10.0]).unwrap();
        let idx = prototype_indices(&x, &[0, 0, 0], 1).unwrap();
        assert_eq!(idx, vec![brute_force_prototype(&[0.0, 1.0, 10.0])]);
        assert_eq!(idx, vec![1]);

        let single = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(init_prototype(&single, &[0], 1).unwrap().data(), &[3.0, 4.0]);

        let pair = Tensor::matrix(2, 1, vec![5.0, 2.0]).unwrap();
        assert_eq!(prototype_indices(&pair, &[0, 0], 1).unwrap(), vec![0]);

        assert!(matches!(prototype_indices(&pair, &[0, 0], 2), Err(Error::Data(_))));
    }

    #[test]
    fn prototype_matches_brute_force_on_random_classes() {
        let mut s = RngStream::new(2, &[1]);
        for _ in 0..20 {
            let n = 1 + s.below(9);
            let xs: Vec<f64> = (0..n).map(|_| (s.below(7)) as f64).collect();
            let t = Tensor::matrix(n, 1, xs.clone()).unwrap();
            assert_eq!(prototype_indices(&t, &vec![0; n], 1).unwrap()[0], brute_force_prototype(&xs));
        }
    }

    #[test]
    fn prototype_row_is_a_training_image() {
        let mut s = RngStream::new(3, &[1]);
        let imgs = Tensor::randn(&[12, 2, 2, 1], &mut s);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let e = EmbeddingMatrix::prototype(&imgs, &labels, 3).unwrap();
        assert_eq!(e.dim(), 4);
        for c in 0..3 {
            let row = e.rows().row(c);
            assert!((0..12).any(|i| labels[i] == c && imgs.row(i) == row));
        }
    }

    #[test]
    fn nearest_ties_go_low() {
        let e = EmbeddingMatrix::one_hot(3);
        assert_eq!(e.nearest(&[0.0, 1.0, 0.0]), 1);
        assert_eq!(e.nearest(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(e.nearest(&[0.0, 0.5, 0.5]), 1);
    }
}
