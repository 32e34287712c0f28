use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

const BLOBS_PER_CLASS: usize = 3;
const AMPLITUDE: f64 = 0.3;

/// Class-conditional Gaussian-blob images.
///
/// Each class owns a fixed pattern of a few coloured Gaussian blobs (drawn
/// from `seed`); samples add i.i.d. pixel noise with standard deviation
/// `0.3 / separability` and clamp to `[0, 1]`. Train and test splits share
/// the class patterns but draw independent samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples: usize,
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
    pub separability: f64,
}

impl SyntheticConfig {
    pub fn cifar_like(samples: usize, seed: u64) -> Self {
        SyntheticConfig { classes: 10, samples, channels: 3, size: 32, seed, separability: 2.0 }
    }
}

fn class_patterns(cfg: &SyntheticConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.size as f64;
    let plane = cfg.size * cfg.size;
    (0..cfg.classes)
        .map(|_| {
            let mut p = vec![0f64; cfg.channels * plane];
            for _ in 0..BLOBS_PER_CLASS {
                let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let sigma = s * rng.gen_range(0.1..0.25);
                let colour: Vec<f64> = (0..cfg.channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for y in 0..cfg.size {
                    for x in 0..cfg.size {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let g = (-d2 / (2.0 * sigma * sigma)).exp();
                        for (c, &col) in colour.iter().enumerate() {
                            p[c * plane + y * cfg.size + x] += col * g;
                        }
                    }
                }
            }
            let peak = p.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
            p.iter_mut().for_each(|v| *v /= peak);
            p
        })
        .collect()
}

pub fn synthetic_dataset(cfg: &SyntheticConfig, split: Split) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.channels == 0 || cfg.size == 0 || !(cfg.separability > 0.0) {
        return Err(Error::Config(format!("invalid synthetic dataset config {cfg:?}")));
    }
    let patterns = class_patterns(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let noise = AMPLITUDE / cfg.separability;
    let n = cfg.channels * cfg.size * cfg.size;
    let mut labels = Vec::with_capacity(cfg.samples);
    let mut pixels = Vec::with_capacity(cfg.samples * n);
    for _ in 0..cfg.samples {
        let label = rng.gen_range(0..cfg.classes);
        labels.push(label);
        for &p in &patterns[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            pixels.push((0.5 + AMPLITUDE * p + noise * z).clamp(0.0, 1.0) as f32);
        }
    }
    Dataset::new(pixels, [cfg.channels, cfg.size, cfg.size], labels, cfg.classes, split)
}
