//! Static parameter, FLOP and trunk-depth accounting over a [`LayerGraph`].
//!
//! One multiply-accumulate counts as one FLOP. Batch norm, activations,
//! pooling, upsampling, additions and combines are free.

use serde::Serialize;

use super::graph::{LayerGraph, LayerKind, LayerNode};
use crate::blocks::Partition;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub trunk_depth: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    /// Convolution and fully-connected layers on the trunk path, excluding the
    /// mask branch and projection shortcuts.
    pub trunk_depth: usize,
    pub stages: Vec<StageCost>,
}

/// Learnable scalars and FLOPs of one node.
pub fn node_cost(g: &LayerGraph, node: &LayerNode) -> (u64, u64) {
    let input = |i: usize| g.shape(node.inputs[i]);
    let out = node.output;
    match node.kind {
        LayerKind::Conv { kernel, .. } => {
            let w = (out.channels * input(0).channels * kernel * kernel) as u64;
            (w, w * (out.height * out.width) as u64)
        }
        LayerKind::FullyConnected => {
            let w = (input(0).numel() * out.channels) as u64;
            (w + out.channels as u64, w)
        }
        LayerKind::BatchNorm => (2 * out.channels as u64, 0),
        _ => (0, 0),
    }
}

fn on_trunk(node: &LayerNode) -> bool {
    node.kind.is_weighted() && node.partition != Partition::Mask && !node.shortcut
}

pub fn cost_model(g: &LayerGraph) -> CostReport {
    let mut report = CostReport::default();
    for node in g.nodes() {
        if node.kind == LayerKind::Input {
            continue;
        }
        let (params, flops) = node_cost(g, node);
        let depth = usize::from(on_trunk(node));
        if report.stages.last().map(|s| &s.name) != Some(&node.stage) {
            report.stages.push(StageCost { name: node.stage.clone(), ..Default::default() });
        }
        let stage = report.stages.last_mut().expect("stage pushed above");
        stage.params += params;
        stage.flops += flops;
        stage.trunk_depth += depth;
        report.params += params;
        report.flops += flops;
        report.trunk_depth += depth;
    }
    report
}

/// Cost of the nodes whose parameters all belong to `partition`.
pub fn partition_cost(g: &LayerGraph, partition: Partition) -> (u64, u64) {
    g.nodes()
        .iter()
        .filter(|n| n.partition == partition)
        .map(|n| node_cost(g, n))
        .fold((0, 0), |(p, f), (a, b)| (p + a, f + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{ConvLayer, ParamLayout};
    use crate::network::graph::FeatureShape;

    #[test]
    fn single_conv_flops() {
        let mut l = ParamLayout::new();
        let conv = ConvLayer::new(&mut l, "c", 64, 64, 3, 1, 1, Partition::Trunk);
        let (mut g, x) = LayerGraph::new(FeatureShape::new(64, 32, 32));
        conv.trace(&mut g, x, false).unwrap();
        let r = cost_model(&g);
        assert_eq!(r.flops, 37_748_736);
        assert_eq!(r.params, 36_864);
        assert_eq!(r.trunk_depth, 1);
    }
}
