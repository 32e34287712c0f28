//! `--data` sources.
//!
//! * `synthetic[:key=value,...]` with keys `samples`, `seed`, `size`,
//!   `classes`, `channels`, `separability`;
//! * a directory holding the CIFAR-10 (`data_batch_*.bin`, `test_batch.bin`)
//!   or CIFAR-100 (`train.bin`, `test.bin`) binary distribution;
//! * a single CIFAR-10 batch file, or `cifar100:<file>`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use resattn::data::{load_cifar, load_cifar_file, synthetic_dataset, CifarVariant, Dataset, Split, SyntheticConfig};

/// Geometry the synthetic generator falls back to when the source leaves it open.
#[derive(Clone, Copy, Debug)]
pub struct Defaults {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
}

pub fn load(source: &str, split: Split, defaults: Defaults, subset: Option<usize>) -> Result<Dataset> {
    let data = if let Some(rest) = source.strip_prefix("synthetic") {
        synthetic(rest, split, defaults)?
    } else if let Some(file) = source.strip_prefix("cifar100:") {
        load_path(Path::new(file), CifarVariant::Cifar100, split)?
    } else {
        let path = Path::new(source);
        let variant = if path.join("train.bin").exists() { CifarVariant::Cifar100 } else { CifarVariant::Cifar10 };
        load_path(path, variant, split)?
    };
    Ok(match subset {
        Some(n) if n < data.len() => data.take(n),
        _ => data,
    })
}

fn load_path(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    if path.is_dir() {
        Ok(load_cifar(path, variant, split)?)
    } else if path.is_file() {
        Ok(load_cifar_file(path, variant, split)?)
    } else {
        bail!("data source `{}` is neither `synthetic[:...]` nor an existing file or directory", path.display())
    }
}

fn synthetic(rest: &str, split: Split, d: Defaults) -> Result<Dataset> {
    let mut cfg = SyntheticConfig { classes: d.classes, channels: d.channels, size: d.size, ..SyntheticConfig::cifar_like(500, 0) };
    let opts = match rest {
        "" => "",
        r => r.strip_prefix(':').with_context(|| format!("expected `synthetic:key=value,...`, got `synthetic{r}`"))?,
    };
    for kv in opts.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').with_context(|| format!("expected key=value, got `{kv}`"))?;
        let bad = || format!("invalid value `{v}` for `{k}`");
        match k.trim() {
            "samples" => cfg.samples = v.parse().with_context(bad)?,
            "seed" => cfg.seed = v.parse().with_context(bad)?,
            "size" => cfg.size = v.parse().with_context(bad)?,
            "classes" => cfg.classes = v.parse().with_context(bad)?,
            "channels" => cfg.channels = v.parse().with_context(bad)?,
            "separability" => cfg.separability = v.parse().with_context(bad)?,
            other => bail!("unknown synthetic option `{other}`"),
        }
    }
    Ok(synthetic_dataset(&cfg, split)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const D: Defaults = Defaults { classes: 10, channels: 3, size: 32 };

    #[test]
    fn synthetic_options() {
        let d = load("synthetic:samples=12,size=16,classes=4", Split::Train, D, None).unwrap();
        assert_eq!((d.len(), d.image_shape(), d.classes), (12, [3, 16, 16], 4));
        assert_eq!(load("synthetic", Split::Test, D, Some(7)).unwrap().len(), 7);
    }

    #[test]
    fn rejects_unknown_sources() {
        assert!(load("synthetic:colour=red", Split::Train, D, None).is_err());
        assert!(load("synthetic-ish", Split::Train, D, None).is_err());
        assert!(load("/no/such/path", Split::Train, D, None).is_err());
    }
}
