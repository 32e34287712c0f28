use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CifarVariant {
    #[serde(rename = "cifar10")]
    Cifar10,
    #[serde(rename = "cifar100")]
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn files(self, split: Split) -> (Vec<&'static str>, usize) {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => (
                vec!["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
                50_000,
            ),
            (CifarVariant::Cifar10, Split::Test) => (vec!["test_batch.bin"], 10_000),
            (CifarVariant::Cifar100, Split::Train) => (vec!["train.bin"], 50_000),
            (CifarVariant::Cifar100, Split::Test) => (vec!["test.bin"], 10_000),
        }
    }
}

fn dataset_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), msg: msg.into() }
}

/// Decodes concatenated binary records. CIFAR-100 uses the fine label.
pub fn decode_cifar(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<Dataset> {
    decode(bytes, variant, split, Path::new("<memory>"))
}

fn decode(bytes: &[u8], variant: CifarVariant, split: Split, path: &Path) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(dataset_error(
            path,
            format!("{} bytes is not a whole number of {rec}-byte records (truncated file?)", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let classes = variant.classes();
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::new();
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= classes {
            return Err(dataset_error(path, format!("record {i} has label {label}, expected < {classes}")));
        }
        if variant == CifarVariant::Cifar100 {
            coarse.push(r[0] as usize);
        }
        labels.push(label);
        pixels.extend(r[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset {
        pixels,
        shape: [3, 32, 32],
        labels,
        classes,
        split,
        coarse_labels: (variant == CifarVariant::Cifar100).then_some(coarse),
    })
}

/// Inverse of [`decode_cifar`] for 32x32 RGB data.
pub fn encode_cifar(data: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if data.image_shape() != [3, 32, 32] {
        return Err(Error::invalid("encode_cifar", format!("images are {:?}, expected [3, 32, 32]", data.image_shape())));
    }
    let mut out = Vec::with_capacity(data.len() * variant.record_len());
    for i in 0..data.len() {
        if variant == CifarVariant::Cifar100 {
            let coarse = data.coarse_labels.as_ref().map_or(0, |c| c[i]);
            out.push(coarse as u8);
        }
        out.push(data.labels[i] as u8);
        out.extend(data.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

/// Reads one batch file, whatever its record count.
pub fn load_cifar_file(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| dataset_error(path, e.to_string()))?;
    decode(&bytes, variant, split, path)
}

/// Reads a standard split from the extracted binary distribution directory.
pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let (files, expected) = variant.files(split);
    let mut bytes = Vec::new();
    for f in &files {
        let path: PathBuf = dir.join(f);
        bytes.extend(fs::read(&path).map_err(|e| dataset_error(&path, e.to_string()))?);
    }
    let data = decode(&bytes, variant, split, dir)?;
    if data.len() != expected {
        return Err(dataset_error(dir, format!("expected {expected} records, found {}", data.len())));
    }
    Ok(data)
}
