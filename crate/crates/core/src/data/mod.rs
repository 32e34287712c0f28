//! Datasets: the CIFAR binary batch format, synthetic blob images and
//! per-pixel statistics.
//!
//! Binary files from <https://www.cs.toronto.edu/~kriz/cifar.html>.

mod cifar;
mod synthetic;

pub use cifar::{decode_cifar, encode_cifar, load_cifar, load_cifar_file, CifarVariant};
pub use synthetic::{synthetic_dataset, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]`, stored `[N, C, H, W]` row-major, with labels in
/// `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pixels: Vec<f32>,
    /// `[C, H, W]` of one image.
    pub shape: [usize; 3],
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// CIFAR-100 superclass labels, kept so the binary form can be rebuilt.
    pub coarse_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(pixels: Vec<f32>, shape: [usize; 3], labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let d = Dataset { pixels, shape, labels, classes, split, coarse_labels: None };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Dataset { path: "<memory>".into(), msg });
        let n: usize = self.shape.iter().product();
        if n == 0 || self.pixels.len() != n * self.labels.len() {
            return bad(format!("{} pixels do not hold {} images of {:?}", self.pixels.len(), self.labels.len(), self.shape));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return bad(format!("label {l} outside [0, {})", self.classes));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n: usize = self.image_shape().iter().product();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n: usize = self.shape.iter().product();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            shape: self.shape,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            coarse_labels: self.coarse_labels.as_ref().map(|cl| indices.iter().map(|&i| cl[i]).collect()),
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

/// Element-wise mean image, `[C, H, W]`.
pub fn pixel_mean(data: &Dataset) -> Result<Tensor<f32>> {
    if data.is_empty() {
        return Err(Error::Dataset { path: "<memory>".into(), msg: "pixel mean of an empty dataset".into() });
    }
    let shape = data.image_shape();
    let n: usize = shape.iter().product();
    let mut acc = vec![0f64; n];
    for i in 0..data.len() {
        for (a, &v) in acc.iter_mut().zip(data.image(i)) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / data.len() as f64;
    Tensor::new(&shape, acc.into_iter().map(|a| (a * inv) as f32).collect())
}

/// `image - mean`, written into `out`.
pub fn subtract_mean(image: &[f32], mean: &Tensor<f32>, out: &mut [f32]) {
    for ((o, &v), &m) in out.iter_mut().zip(image).zip(mean.data()) {
        *o = v - m;
    }
}
