//! Composite blocks: residual unit, soft mask branch, mask activations and
//! the attention module.

pub mod activation;
pub mod attention;
pub mod layers;
pub mod mask;
pub mod params;
pub mod residual;

pub use activation::{apply_activation, combine, CombineMode, MaskActivation};
pub use attention::{AttentionModule, AttentionModuleConfig};
pub use layers::{BnLayer, ConvLayer, Forward, MaskOverride, MaskOverrides, ModuleTrace, PoolGeometry};
pub use mask::{matched_bottleneck, MaskKind, SoftMaskBranch};
pub use params::{ParamId, ParamKind, ParamLayout, ParamSpec, ParamStore, Partition};
pub use residual::ResidualUnit;
