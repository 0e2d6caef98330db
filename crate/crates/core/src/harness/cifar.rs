//! CIFAR-10 binary version: records of one label byte and 3072 pixel bytes
//! (red, green, blue planes of 32x32, row-major).

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Dataset;

pub const RECORD_LEN: usize = 3073;
pub const PIXELS: usize = 3072;
pub const SHAPE: [usize; 3] = [3, 32, 32];
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Raw records: labels and pixel bytes, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawRecords {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Re-encodes the records into the on-disk byte layout.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_LEN);
        for (l, px) in self.labels.iter().zip(self.pixels.chunks_exact(PIXELS)) {
            out.push(*l);
            out.extend_from_slice(px);
        }
        out
    }

    fn to_dataset(&self, start: usize, end: usize, mean: [f64; 3]) -> Result<Dataset> {
        let images = self.pixels[start * PIXELS..end * PIXELS]
            .iter()
            .enumerate()
            .map(|(i, &b)| b as f64 / 255.0 - mean[(i % PIXELS) / 1024])
            .collect();
        Dataset::new(SHAPE, CLASSES, images, self.labels[start..end].to_vec())
    }
}

pub fn parse_records(bytes: &[u8]) -> Result<RawRecords> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a multiple of {RECORD_LEN}",
            bytes.len()
        )));
    }
    let mut raw = RawRecords::default();
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(Error::Format(format!("record {i}: label {} is outside 0..=9", rec[0])));
        }
        raw.labels.push(rec[0]);
        raw.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(raw)
}

pub fn read_records(path: &Path) -> Result<RawRecords> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Training, validation and test splits with shared normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    /// Per-channel mean of the training split after scaling to `[0, 1]`.
    pub mean: [f64; 3],
}

/// Builds splits from raw training and test records: the last `validation`
/// training records form the validation split, pixels are scaled to `[0, 1]`
/// and the training split's per-channel mean is subtracted everywhere.
pub fn split_records(train: &RawRecords, test: &RawRecords, validation: usize) -> Result<Splits> {
    if validation >= train.len() {
        return Err(Error::Config(format!(
            "validation size {validation} leaves no training records out of {}",
            train.len()
        )));
    }
    let n_train = train.len() - validation;
    let mut sums = [0u64; 3];
    for img in train.pixels[..n_train * PIXELS].chunks_exact(PIXELS) {
        for (c, plane) in img.chunks_exact(1024).enumerate() {
            sums[c] += plane.iter().map(|&b| b as u64).sum::<u64>();
        }
    }
    let mean = sums.map(|s| s as f64 / (255.0 * 1024.0 * n_train as f64));
    Ok(Splits {
        train: train.to_dataset(0, n_train, mean)?,
        validation: train.to_dataset(n_train, train.len(), mean)?,
        test: if test.is_empty() {
            Dataset::new(SHAPE, CLASSES, Vec::new(), Vec::new())?
        } else {
            test.to_dataset(0, test.len(), mean)?
        },
        mean,
    })
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path, validation: usize) -> Result<Splits> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "CIFAR-10 directory {} does not exist; pass --data-dir pointing at the extracted cifar-10-batches-bin",
            dir.display()
        )));
    }
    let mut train = RawRecords::default();
    for f in TRAIN_FILES {
        let r = read_records(&dir.join(f))?;
        train.labels.extend(r.labels);
        train.pixels.extend(r.pixels);
    }
    let test = read_records(&dir.join(TEST_FILE))?;
    split_records(&train, &test, validation)
}
