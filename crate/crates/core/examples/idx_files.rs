//! Write a tiny dataset in the IDX format and load it back. Point
//! `NOPROP_MNIST_DIR` at the four MNIST files to load those instead.

use noprop::data::{load_idx, load_mnist};

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend(d.to_be_bytes());
    }
    b.extend(payload);
    b
}

fn main() -> noprop::Result<()> {
    if let Some(dir) = std::env::var_os("NOPROP_MNIST_DIR") {
        for split in ["train", "test"] {
            let d = load_mnist(dir.as_ref(), split)?;
            println!("{split}: {} images of {:?}, {} classes", d.len(), d.image_shape(), d.classes());
        }
        return Ok(());
    }
    let dir = std::env::temp_dir().join("noprop-idx-example");
    std::fs::create_dir_all(&dir)?;
    let pixels: Vec<u8> = (0..3 * 2 * 2).map(|i| (i * 20) as u8).collect();
    std::fs::write(dir.join("img"), idx(2051, &[3, 2, 2], &pixels))?;
    std::fs::write(dir.join("lab"), idx(2049, &[3], &[7, 0, 3]))?;
    let d = load_idx(&dir.join("img"), &dir.join("lab"))?;
    println!("{} images of {:?}, labels {:?}", d.len(), d.image_shape(), d.labels());
    println!("first image scaled to [0, 1]: {:?}", &d.images().data()[..4]);
    std::fs::remove_dir_all(dir)?;
    Ok(())
}
