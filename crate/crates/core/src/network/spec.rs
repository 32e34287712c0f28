//! Declarative network description and its `key = value` text form.
//!
//! ```toml
//! [network]
//! family = "cifar"            # cifar | imagenet | resnet
//! modules_per_stage = [1, 1, 1]
//! num_classes = 10
//! input_size = 32
//!
//! [attention]
//! p = 1
//! t = 2
//! r = 1
//! combine = "arl"             # arl | nal
//! activation = "mixed"        # mixed | channel | spatial
//! mask = "encdec"             # encdec | localconv | none
//! mask_levels = [3, 2, 1]
//! ```
//!
//! `resnet` networks take `depth` (164 or any `9n + 2` for 32x32 inputs;
//! 50, 101 or 152 for ImageNet) and ignore `[attention]`. A `[train]` section
//! may share the file; it is parsed separately.

use serde::{Deserialize, Serialize};

use crate::blocks::{CombineMode, MaskActivation, MaskKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Three stages at 32/16/8 with `m` modules and two extra units each.
    Cifar,
    /// Table-style ImageNet layout: four stages at 56/28/14/7.
    Imagenet,
    /// Plain pre-activation bottleneck ResNet.
    Resnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modules_per_stage: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    pub num_classes: usize,
    pub input_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSection {
    pub p: usize,
    pub t: usize,
    pub r: usize,
    pub combine: CombineMode,
    pub activation: MaskActivation,
    pub mask: MaskKind,
    /// Mask pooling levels for each attention stage.
    pub mask_levels: Vec<usize>,
}

impl Default for AttentionSection {
    fn default() -> Self {
        AttentionSection {
            p: 1,
            t: 2,
            r: 1,
            combine: CombineMode::Arl,
            activation: MaskActivation::Mixed,
            mask: MaskKind::Encdec,
            mask_levels: vec![3, 2, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub network: NetworkSection,
    #[serde(default)]
    pub attention: AttentionSection,
}

/// Whole-file view used when parsing: `[train]` is accepted and ignored here.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    network: NetworkSection,
    #[serde(default)]
    attention: AttentionSection,
    #[serde(default)]
    #[allow(dead_code)]
    train: Option<toml::Table>,
}

/// Builtin names accepted by [`NetworkSpec::builtin`].
pub const BUILTIN_NAMES: &[&str] =
    &["attention-56-imagenet", "attention-92-imagenet", "cifar-attention", "resnet-152", "resnet-164"];

impl NetworkSpec {
    /// CIFAR attention network with `m` modules per stage (trunk depth `36m + 20`).
    pub fn cifar(m: usize) -> Self {
        NetworkSpec {
            network: NetworkSection {
                family: Family::Cifar,
                name: Some(format!("attention-{}-cifar", 36 * m + 20)),
                modules_per_stage: vec![m; 3],
                depth: None,
                num_classes: 10,
                input_size: 32,
            },
            attention: AttentionSection::default(),
        }
    }

    pub fn attention56() -> Self {
        Self::imagenet("attention-56", vec![1, 1, 1])
    }

    pub fn attention92() -> Self {
        Self::imagenet("attention-92", vec![1, 2, 3])
    }

    fn imagenet(name: &str, modules: Vec<usize>) -> Self {
        NetworkSpec {
            network: NetworkSection {
                family: Family::Imagenet,
                name: Some(name.into()),
                modules_per_stage: modules,
                depth: None,
                num_classes: 1000,
                input_size: 224,
            },
            attention: AttentionSection::default(),
        }
    }

    pub fn resnet(depth: usize) -> Result<Self> {
        let (classes, size) = match depth {
            50 | 101 | 152 => (1000, 224),
            d if d >= 11 && (d - 2) % 9 == 0 => (10, 32),
            d => return Err(Error::Config(format!("unsupported ResNet depth {d}"))),
        };
        Ok(NetworkSpec {
            network: NetworkSection {
                family: Family::Resnet,
                name: Some(format!("resnet-{depth}")),
                modules_per_stage: vec![],
                depth: Some(depth),
                num_classes: classes,
                input_size: size,
            },
            attention: AttentionSection::default(),
        })
    }

    /// Looks up a builtin name; `cifar-attention` takes `m` (default 1).
    pub fn builtin(name: &str, m: Option<usize>) -> Result<Self> {
        match name {
            "attention-56-imagenet" => Ok(Self::attention56()),
            "attention-92-imagenet" => Ok(Self::attention92()),
            "cifar-attention" => {
                let m = m.unwrap_or(1);
                if m == 0 {
                    return Err(Error::Config("m must be at least 1".into()));
                }
                Ok(Self::cifar(m))
            }
            "resnet-152" => Self::resnet(152),
            "resnet-164" => Self::resnet(164),
            other => Err(Error::Config(format!(
                "unknown network `{other}` (expected one of {})",
                BUILTIN_NAMES.join(", ")
            ))),
        }
    }

    pub fn display_name(&self) -> String {
        self.network.name.clone().unwrap_or_else(|| format!("{:?}", self.network.family).to_lowercase())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: SpecFile = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        Ok(NetworkSpec { network: file.network, attention: file.attention })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }
}

pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    NetworkSpec::parse(text)
}

pub fn serialize_spec(spec: &NetworkSpec) -> String {
    spec.to_text()
}

/// Converts a TOML error into [`Error::Parse`] with a 1-based line number.
pub(crate) fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
    Error::Parse { line, msg: e.message().to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for spec in [NetworkSpec::attention92(), NetworkSpec::cifar(3), NetworkSpec::resnet(164).unwrap()] {
            let text = spec.to_text();
            assert_eq!(NetworkSpec::parse(&text).unwrap(), spec, "{text}");
        }
    }

    #[test]
    fn default_cifar_text_has_module_defaults() {
        let text = NetworkSpec::cifar(3).to_text();
        for kv in ["p = 1", "t = 2", "r = 1"] {
            assert!(text.lines().any(|l| l.trim() == kv), "missing {kv} in\n{text}");
        }
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let text = "[network]\nfamily = \"cifar\"\nnum_classes = 10\ninput_size = 32\nwidth_multiplier = 2\n";
        match NetworkSpec::parse(text).unwrap_err() {
            Error::Parse { line, msg } => {
                assert!(msg.contains("width_multiplier"), "{msg}");
                assert_eq!(line, 5);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn malformed_text_reports_line() {
        let err = NetworkSpec::parse("[network]\nfamily = \"cifar\"\nnum_classes = = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn train_section_is_tolerated() {
        let mut text = NetworkSpec::cifar(1).to_text();
        text.push_str("\n[train]\nbatch_size = 64\n");
        assert_eq!(NetworkSpec::parse(&text).unwrap(), NetworkSpec::cifar(1));
    }

    #[test]
    fn builtin_names() {
        for name in BUILTIN_NAMES {
            NetworkSpec::builtin(name, None).unwrap();
        }
        assert!(NetworkSpec::builtin("attention-128-imagenet", None).is_err());
        assert!(NetworkSpec::resnet(153).is_err());
    }
}
