#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbar_snn::harness::{DatasetName, DatasetSource};

/// The real MNIST files fetched by `scripts/fetch-mnist.sh`.
pub fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn mnist_available() -> bool {
    let d = mnist_dir();
    [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    .iter()
    .all(|f| d.join(f).is_file())
}

pub fn mnist(train_n: usize, test_n: usize) -> DatasetSource {
    DatasetSource {
        name: DatasetName::Mnist,
        path: mnist_dir(),
        train_n: Some(train_n),
        test_n: Some(test_n),
        subset_seed: 0,
    }
}

pub fn idx_images(images: &[Vec<u8>], side: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0803u32.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(side as u32).to_be_bytes());
    out.extend_from_slice(&(side as u32).to_be_bytes());
    for im in images {
        out.extend_from_slice(im);
    }
    out
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes a small learnable MNIST look-alike: `side x side` images where
/// class `c` lights a bar at row `c` (mod side) plus background noise.
pub fn write_toy_mnist(dir: &Path, train: usize, test: usize, side: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize, images: &str, labels: &str| {
        let mut ims = Vec::with_capacity(n);
        let mut lbs = Vec::with_capacity(n);
        for k in 0..n {
            let c = (k % 10) as u8;
            let mut im: Vec<u8> = (0..side * side).map(|_| rng.random_range(0..60)).collect();
            let r = c as usize % side;
            let half = if c as usize >= side { side / 2 } else { 0 };
            for j in half..(half + side / 2).min(side) {
                im[r * side + j] = rng.random_range(200..=255);
            }
            ims.push(im);
            lbs.push(c);
        }
        fs::write(dir.join(images), idx_images(&ims, side)).unwrap();
        fs::write(dir.join(labels), idx_labels(&lbs)).unwrap();
    };
    split(train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte");
    split(test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
}

pub fn toy_source(dir: &Path) -> DatasetSource {
    DatasetSource {
        name: DatasetName::Mnist,
        path: dir.to_path_buf(),
        train_n: None,
        test_n: None,
        subset_seed: 0,
    }
}

pub fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}
