//! MNIST (IDX) and CIFAR-10 (binary batch) readers and the in-memory
//! dataset type used by training and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Purpose, RandomStream, Tensor};

/// Images `[N, C, H, W]` in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: &str, images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.dim0() != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} outside [0, {classes})")));
        }
        Ok(Dataset {
            name: name.to_string(),
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn per_image(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Images and labels at `indices`, as a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.image_shape();
        let images = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("gathered size");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            name: self.name.clone(),
            images,
            labels,
            classes: self.classes,
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Deterministic choice of `n` of `total` indices (ascending).
pub fn subset_indices(total: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= total {
        return (0..total).collect();
    }
    let mut idx: Vec<usize> = (0..total).collect();
    RandomStream::new(seed, Purpose::Shuffle, u64::MAX).shuffle(&mut idx);
    let mut chosen = idx[..n].to_vec();
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }

    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetName::Mnist => [1, 28, 28],
            DatasetName::Cifar10 => [3, 32, 32],
        }
    }
}

/// Where a dataset lives and how much of it to use. Pixels are scaled to
/// `[0, 1]`, which rate coding requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub name: DatasetName,
    /// Directory holding the raw files.
    pub path: PathBuf,
    #[serde(default)]
    pub train_n: Option<usize>,
    #[serde(default)]
    pub test_n: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
}

impl DatasetSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.name {
            DatasetName::Mnist => load_mnist(self),
            DatasetName::Cifar10 => load_cifar10(self),
        }
    }
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            parse_err(
                path,
                bytes.len(),
                format!("file ends before header field at byte {offset}"),
            )
        })
}

/// Parsed IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0803 {
        return Err(parse_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected 0x00000803"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows == 0 || cols == 0 || rows > 4096 || cols > 4096 {
        return Err(parse_err(path, 8, format!("implausible image size {rows}x{cols}")));
    }
    let want = n
        .checked_mul(rows * cols)
        .and_then(|p| p.checked_add(16))
        .ok_or_else(|| parse_err(path, 4, "image count overflows"))?;
    if bytes.len() != want {
        return Err(parse_err(
            path,
            bytes.len().min(want),
            format!("expected {want} bytes for {n} images, file has {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, &bytes[16..]))
}

/// Parsed IDX label file.
pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path, classes: usize) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0801 {
        return Err(parse_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected 0x00000801"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let want = n
        .checked_add(8)
        .ok_or_else(|| parse_err(path, 4, "label count overflows"))?;
    if bytes.len() != want {
        return Err(parse_err(
            path,
            bytes.len().min(want),
            format!("expected {want} bytes for {n} labels, file has {}", bytes.len()),
        ));
    }
    let labels = &bytes[8..];
    if let Some(k) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(parse_err(
            path,
            8 + k,
            format!("label {} outside [0, {classes})", labels[k]),
        ));
    }
    Ok(labels)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn to_dataset(
    name: &str,
    pixels: &[u8],
    labels: &[u8],
    shape: [usize; 3],
    pick: &[usize],
    classes: usize,
) -> Result<Dataset> {
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(pick.len() * per);
    for &i in pick {
        data.extend(pixels[i * per..(i + 1) * per].iter().map(|&p| f64::from(p) / 255.0));
    }
    let images = Tensor::from_vec(&[pick.len(), shape[0], shape[1], shape[2]], data)?;
    Dataset::new(
        name,
        images,
        pick.iter().map(|&i| labels[i] as usize).collect(),
        classes,
    )
}

fn load_idx_split(dir: &Path, images: &str, labels: &str, n: Option<usize>, seed: u64) -> Result<Dataset> {
    let ipath = dir.join(images);
    let lpath = dir.join(labels);
    let ibytes = read(&ipath)?;
    let lbytes = read(&lpath)?;
    let (count, rows, cols, pixels) = parse_idx_images(&ibytes, &ipath)?;
    let labels = parse_idx_labels(&lbytes, &lpath, 10)?;
    if labels.len() != count {
        return Err(parse_err(
            &lpath,
            4,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    let pick = subset_indices(count, n.unwrap_or(count), seed);
    to_dataset("mnist", pixels, labels, [1, rows, cols], &pick, 10)
}

/// Reads the four standard MNIST IDX files from `source.path` and returns
/// `(train, test)`, optionally subset deterministically by `subset_seed`.
pub fn load_mnist(source: &DatasetSource) -> Result<(Dataset, Dataset)> {
    let train = load_idx_split(
        &source.path,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        source.train_n,
        source.subset_seed,
    )?;
    let test = load_idx_split(
        &source.path,
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        source.test_n,
        source.subset_seed.wrapping_add(1),
    )?;
    Ok((train, test))
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;

/// Parses one CIFAR-10 binary batch into `(labels, pixels)`.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path, records: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(parse_err(
            path,
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!(
                "length {} is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    if bytes.len() / CIFAR_RECORD != records {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("expected {records} records, found {}", bytes.len() / CIFAR_RECORD),
        ));
    }
    let mut labels = Vec::with_capacity(records);
    let mut pixels = Vec::with_capacity(records * (CIFAR_RECORD - 1));
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(parse_err(path, k * CIFAR_RECORD, format!("label byte {} > 9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from `source.path`.
pub fn load_cifar10(source: &DatasetSource) -> Result<(Dataset, Dataset)> {
    let load = |files: &[String], n: Option<usize>, seed: u64| -> Result<Dataset> {
        let mut labels = Vec::new();
        let mut pixels = Vec::new();
        for f in files {
            let p = source.path.join(f);
            let (l, px) = parse_cifar_batch(&read(&p)?, &p, CIFAR_BATCH_RECORDS)?;
            labels.extend(l);
            pixels.extend(px);
        }
        let pick = subset_indices(labels.len(), n.unwrap_or(labels.len()), seed);
        to_dataset("cifar10", &pixels, &labels, [3, 32, 32], &pick, 10)
    };
    let train_files: Vec<String> = (1..=5).map(|k| format!("data_batch_{k}.bin")).collect();
    let train = load(&train_files, source.train_n, source.subset_seed)?;
    let test = load(
        &["test_batch.bin".to_string()],
        source.test_n,
        source.subset_seed.wrapping_add(1),
    )?;
    Ok((train, test))
}
