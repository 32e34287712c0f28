//! Network construction and static cost accounting.

pub mod build;
pub mod cost;
pub mod graph;
pub mod spec;

pub use build::{Network, NetworkOutput};
pub use cost::{cost_model, CostReport, StageCost};
pub use graph::{FeatureShape, LayerGraph, LayerKind, NodeId};
pub use spec::{parse_spec, serialize_spec, AttentionSection, Family, NetworkSection, NetworkSpec, BUILTIN_NAMES};
