//! CIFAR-10 binary batches: 1 label byte then 3072 planar RGB bytes per record.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const RECORD: usize = 1 + 3 * SIDE * SIDE;

/// Concatenates the given batch files into one `[N, 32, 32, 3]` dataset.
pub fn load_cifar10_bin(files: &[&Path], split: &str) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = std::fs::read(f)?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a multiple of {RECORD}",
                f.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(RECORD) {
            labels.push(rec[0] as usize);
            let px = &rec[1..];
            for i in 0..SIDE * SIDE {
                for c in 0..3 {
                    images.push(px[c * SIDE * SIDE + i] as f64 / 255.0);
                }
            }
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, SIDE, SIDE, 3], images)?, labels, 10, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_to_channel_last() {
        let mut rec = vec![7u8];
        rec.extend((0..3 * SIDE * SIDE).map(|i| (i / (SIDE * SIDE)) as u8 * 100));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        std::fs::write(&p, &rec).unwrap();
        let d = load_cifar10_bin(&[&p], "train").unwrap();
        assert_eq!(d.labels(), &[7]);
        assert_eq!(&d.images().data()[..3], &[0.0, 100.0 / 255.0, 200.0 / 255.0]);
        std::fs::write(&p, &rec[..10]).unwrap();
        assert!(matches!(load_cifar10_bin(&[&p], "x"), Err(Error::Format(_))));
    }
}
