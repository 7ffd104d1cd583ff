//! Big-endian IDX files (the MNIST distribution format).

use std::io;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("IDX {what} truncated"),
    ))
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(what))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = read_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "IDX {what}: magic {magic}, expected {expected}"
        )));
    }
    Ok(())
}

/// Images as `[N, H, W, 1]`, scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IMAGES_MAGIC, "images")?;
    let n = read_u32(bytes, 4, "images")? as usize;
    let h = read_u32(bytes, 8, "images")? as usize;
    let w = read_u32(bytes, 12, "images")? as usize;
    let body = bytes
        .get(16..16 + n * h * w)
        .ok_or_else(|| truncated("images"))?;
    Tensor::new(&[n, h, w, 1], body.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC, "labels")?;
    let n = read_u32(bytes, 4, "labels")? as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| truncated("labels"))?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an image file and a label file; the class count is one more than
/// the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = parse_idx_images(&std::fs::read(images)?)?;
    let labs = parse_idx_labels(&std::fs::read(labels)?)?;
    if imgs.rows() != labs.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            imgs.rows(),
            labs.len()
        )));
    }
    let classes = labs.iter().max().map_or(0, |m| m + 1);
    let split = images.file_name().and_then(|s| s.to_str()).unwrap_or("idx");
    Dataset::new(imgs, labs, classes.max(10), split)
}

/// `train` or `test` split from a directory holding the four MNIST files
/// under their usual names.
pub fn load_mnist(dir: &Path, split: &str) -> Result<Dataset> {
    let prefix = match split {
        "train" => "train",
        "test" => "t10k",
        _ => return Err(Error::Config(format!("unknown MNIST split `{split}`"))),
    };
    let mut d = load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    d.split = split.to_string();
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_file(n: u32, h: u32, w: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, n, h, w] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n * h * w).map(|i| (i % 256) as u8));
        b
    }

    fn labels_file(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(LABELS_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn parses_images_and_labels() {
        let t = parse_idx_images(&images_file(2, 3, 2)).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 1]);
        assert_eq!(t.data()[5], 5.0 / 255.0);
        assert_eq!(parse_idx_labels(&labels_file(&[3, 1])).unwrap(), vec![3, 1]);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let err = parse_idx_labels(&images_file(1, 1, 1)).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn empty_and_truncated_are_io_errors() {
        assert!(matches!(parse_idx_images(&[]), Err(Error::Io(_))));
        let mut f = images_file(2, 2, 2);
        f.pop();
        assert!(matches!(parse_idx_images(&f), Err(Error::Io(_))));
    }

    #[test]
    fn count_mismatch_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, images_file(3, 2, 2)).unwrap();
        std::fs::write(&lp, labels_file(&[0, 1])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Data(_))));
        std::fs::write(&lp, labels_file(&[0, 1, 9])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!((d.len(), d.classes()), (3, 10));
    }
}
