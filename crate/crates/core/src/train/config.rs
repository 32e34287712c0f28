use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::spec::parse_error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    /// Mean subtraction only.
    None,
    /// Zero-pad by 4, random 32x32 crop, random horizontal flip, mean subtraction.
    Cifar,
    /// Random scale/aspect crop resized to the input size, horizontal flip,
    /// per-channel intensity jitter, mean subtraction.
    Imagenet,
}

/// The `[train]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    /// Iterations at which the rate is multiplied by `lr_drop_factor`.
    pub lr_drop_iters: Vec<u64>,
    pub lr_drop_factor: f64,
    pub total_iters: u64,
    pub seed: u64,
    /// Clean-label ratio `r` of the uniform label-noise matrix; 1 disables noise.
    pub noise_clean_ratio: f64,
    pub augmentation: Augmentation,
    /// Metric-log interval.
    pub log_every: u64,
    /// Evaluation and checkpoint interval; 0 means only at the end.
    pub checkpoint_every: u64,
    /// Response-probe interval; 0 disables the probe.
    pub probe_every: u64,
    pub deterministic: bool,
}

/// Whole-file view: `[network]` and `[attention]` may share the file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    train: toml::Table,
    #[serde(default)]
    #[allow(dead_code)]
    network: Option<toml::Table>,
    #[serde(default)]
    #[allow(dead_code)]
    attention: Option<toml::Table>,
}

#[derive(Serialize)]
struct ConfigFileOut<'a> {
    train: &'a TrainConfig,
}

impl TrainConfig {
    /// CIFAR recipe: batch 64, Nesterov SGD, lr 0.1 divided by 10 at 64k and
    /// 96k, 160k iterations, weight decay 1e-4, momentum 0.9.
    pub fn cifar() -> Self {
        TrainConfig {
            batch_size: 64,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
            lr_drop_iters: vec![64_000, 96_000],
            lr_drop_factor: 0.1,
            total_iters: 160_000,
            seed: 0,
            noise_clean_ratio: 1.0,
            augmentation: Augmentation::Cifar,
            log_every: 100,
            checkpoint_every: 10_000,
            probe_every: 0,
            deterministic: true,
        }
    }

    /// ImageNet recipe: batch 256, lr 0.1 divided by 10 at 200k, 400k and
    /// 500k, 530k iterations.
    pub fn imagenet() -> Self {
        TrainConfig {
            batch_size: 256,
            lr_drop_iters: vec![200_000, 400_000, 500_000],
            total_iters: 530_000,
            augmentation: Augmentation::Imagenet,
            ..Self::cifar()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar" => Ok(Self::cifar()),
            "imagenet" => Ok(Self::imagenet()),
            other => Err(Error::Config(format!("unknown training preset `{other}` (expected cifar or imagenet)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.total_iters == 0 {
            return fail("total_iters must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.lr_drop_factor > 0.0) {
            return fail(format!("lr_drop_factor {} must be positive", self.lr_drop_factor));
        }
        if self.lr_drop_iters.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("lr_drop_iters {:?} must be strictly increasing", self.lr_drop_iters));
        }
        if self.lr_drop_iters.last().is_some_and(|&l| l >= self.total_iters) {
            return fail(format!("lr_drop_iters {:?} must be below total_iters {}", self.lr_drop_iters, self.total_iters));
        }
        if !(self.noise_clean_ratio > 0.0 && self.noise_clean_ratio <= 1.0) {
            return fail(format!("noise_clean_ratio {} outside (0, 1]", self.noise_clean_ratio));
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        Ok(())
    }

    /// Parses a file whose `[train]` table holds every field, or names a
    /// `preset = "cifar" | "imagenet"` and overrides some of its fields.
    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        let mut table = file.train;
        if let Some(preset) = table.remove("preset") {
            let name = preset
                .as_str()
                .ok_or_else(|| Error::Config(format!("preset must be a string, got {preset}")))?;
            let mut base = toml::Table::try_from(Self::preset(name)?).expect("train config serializes");
            base.extend(table);
            table = base;
        }
        let cfg = TrainConfig::deserialize(table).map_err(|e| Error::Config(format!("[train]: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(&ConfigFileOut { train: self }).expect("train config serializes")
    }
}

/// Learning rate at `iter`: `base_lr * factor^(drop points <= iter)`.
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drop_iters.iter().filter(|&&d| d <= iter).count();
    cfg.base_lr * cfg.lr_drop_factor.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_schedule_points() {
        let c = TrainConfig::cifar();
        assert_eq!(lr_schedule(0, &c), 0.1);
        assert_eq!(lr_schedule(63_999, &c), 0.1);
        assert!((lr_schedule(64_000, &c) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(96_000, &c) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn round_trips_and_validates() {
        for c in [TrainConfig::cifar(), TrainConfig::imagenet()] {
            c.validate().unwrap();
            assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        }
        let mut c = TrainConfig::cifar();
        c.lr_drop_iters = vec![96_000, 64_000];
        assert!(c.validate().is_err());
        c.lr_drop_iters = vec![160_000];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::cifar();
        c.noise_clean_ratio = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn preset_with_overrides() {
        let c = TrainConfig::parse("[train]\npreset = \"cifar\"\ntotal_iters = 40\nlr_drop_iters = []\n").unwrap();
        assert_eq!(c, TrainConfig { total_iters: 40, lr_drop_iters: vec![], ..TrainConfig::cifar() });
        assert!(TrainConfig::parse("[train]\ntotal_iters = 40\n").is_err());
        assert!(TrainConfig::parse("[train]\npreset = \"mnist\"\n").is_err());
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = TrainConfig::cifar().to_text().replace("nesterov", "nesterow");
        let e = TrainConfig::parse(&text).unwrap_err();
        assert!(e.to_string().contains("nesterow"), "{e}");
    }
}
