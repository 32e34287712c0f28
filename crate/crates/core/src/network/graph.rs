//! Symbolic, batch-agnostic layer graph used for validation and cost accounting.

use crate::blocks::activation::{CombineMode, MaskActivation};
use crate::blocks::layers::{BnLayer, ConvLayer, PoolGeometry};
use crate::blocks::params::{ParamId, ParamKind, ParamLayout, Partition};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-sample feature shape `C x H x W`; vectors use `H = W = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        FeatureShape { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl std::fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    Conv { kernel: usize, stride: usize, padding: usize },
    BatchNorm,
    Relu,
    MaxPool(PoolGeometry),
    Upsample,
    Add,
    Combine(CombineMode),
    Activation(MaskActivation),
    GlobalAvgPool,
    FullyConnected,
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::FullyConnected)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNode {
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub output: FeatureShape,
    pub partition: Partition,
    /// Projection convolutions on a skip path.
    pub shortcut: bool,
    pub stage: String,
    pub params: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct LayerGraph {
    nodes: Vec<LayerNode>,
    stage: String,
}

impl LayerGraph {
    pub fn new(input: FeatureShape) -> (Self, NodeId) {
        let mut g = LayerGraph { nodes: Vec::new(), stage: "input".into() };
        let id = g.push(LayerKind::Input, vec![], input, Partition::Shared, false, vec![]);
        (g, id)
    }

    /// Subsequent nodes are attributed to this stage.
    pub fn set_stage(&mut self, name: &str) {
        self.stage = name.to_string();
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> FeatureShape {
        self.nodes[id.0].output
    }

    pub fn output(&self) -> NodeId {
        NodeId(self.nodes.len() - 1)
    }

    /// Stage names in order of first appearance.
    pub fn stages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.nodes {
            if out.last() != Some(&n.stage) && !out.contains(&n.stage) {
                out.push(n.stage.clone());
            }
        }
        out
    }

    fn push(
        &mut self,
        kind: LayerKind,
        inputs: Vec<NodeId>,
        output: FeatureShape,
        partition: Partition,
        shortcut: bool,
        params: Vec<ParamId>,
    ) -> NodeId {
        self.nodes.push(LayerNode { kind, inputs, output, partition, shortcut, stage: self.stage.clone(), params });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv(&mut self, x: NodeId, layer: &ConvLayer, shortcut: bool) -> Result<NodeId> {
        let kind = LayerKind::Conv { kernel: layer.kernel, stride: layer.stride, padding: layer.padding };
        let out = infer(&kind, &[self.shape(x)], Some(layer.out_ch))?;
        if self.shape(x).channels != layer.in_ch {
            return Err(Error::shape("conv2d", format!("layer expects {} channels, got {}", layer.in_ch, self.shape(x))));
        }
        Ok(self.push(kind, vec![x], out, layer.partition, shortcut, vec![layer.weight]))
    }

    pub fn batch_norm(&mut self, x: NodeId, bn: &BnLayer) -> Result<NodeId> {
        let s = self.shape(x);
        if s.channels != bn.channels {
            return Err(Error::shape("batch_norm", format!("layer expects {} channels, got {s}", bn.channels)));
        }
        Ok(self.push(LayerKind::BatchNorm, vec![x], s, bn.partition, false, vec![bn.gamma, bn.beta]))
    }

    pub fn relu(&mut self, x: NodeId, partition: Partition) -> NodeId {
        let s = self.shape(x);
        self.push(LayerKind::Relu, vec![x], s, partition, false, vec![])
    }

    pub fn max_pool(&mut self, x: NodeId, pool: PoolGeometry, partition: Partition) -> Result<NodeId> {
        let kind = LayerKind::MaxPool(pool);
        let out = infer(&kind, &[self.shape(x)], None)?;
        Ok(self.push(kind, vec![x], out, partition, false, vec![]))
    }

    /// Upsamples `x` to the spatial size of `like`.
    pub fn upsample(&mut self, x: NodeId, like: NodeId, partition: Partition) -> Result<NodeId> {
        let (s, t) = (self.shape(x), self.shape(like));
        if t.height < s.height || t.width < s.width {
            return Err(Error::shape("upsample", format!("cannot upsample {s} to {t}")));
        }
        let out = FeatureShape::new(s.channels, t.height, t.width);
        Ok(self.push(LayerKind::Upsample, vec![x], out, partition, false, vec![]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, partition: Partition) -> Result<NodeId> {
        let out = infer(&LayerKind::Add, &[self.shape(a), self.shape(b)], None)?;
        Ok(self.push(LayerKind::Add, vec![a, b], out, partition, false, vec![]))
    }

    pub fn combine(&mut self, mode: CombineMode, mask: NodeId, trunk: NodeId) -> Result<NodeId> {
        let kind = LayerKind::Combine(mode);
        let out = infer(&kind, &[self.shape(mask), self.shape(trunk)], None)?;
        Ok(self.push(kind, vec![mask, trunk], out, Partition::Trunk, false, vec![]))
    }

    pub fn activation(&mut self, x: NodeId, act: MaskActivation, partition: Partition) -> Result<NodeId> {
        let kind = LayerKind::Activation(act);
        let out = infer(&kind, &[self.shape(x)], None)?;
        Ok(self.push(kind, vec![x], out, partition, false, vec![]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId, partition: Partition) -> NodeId {
        let s = self.shape(x);
        self.push(LayerKind::GlobalAvgPool, vec![x], FeatureShape::new(s.channels, 1, 1), partition, false, vec![])
    }

    pub fn fully_connected(
        &mut self,
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
        out_features: usize,
        partition: Partition,
    ) -> NodeId {
        let out = FeatureShape::new(out_features, 1, 1);
        self.push(LayerKind::FullyConnected, vec![x], out, partition, false, vec![weight, bias])
    }

    /// Re-derives every node's output shape from its inputs, checks parameter
    /// shapes against the layout, and checks that every layout parameter is
    /// used by exactly one node.
    pub fn validate(&self, layout: &ParamLayout) -> Result<()> {
        let mut uses = vec![0usize; layout.params().len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<FeatureShape> = node
                .inputs
                .iter()
                .map(|&NodeId(j)| {
                    if j >= i {
                        Err(Error::Config(format!("node {i} consumes later node {j}")))
                    } else {
                        Ok(self.nodes[j].output)
                    }
                })
                .collect::<Result<_>>()?;
            let expected = match node.kind {
                LayerKind::Input => node.output,
                LayerKind::Upsample => {
                    let s = one(i, &ins)?;
                    if node.output.channels != s.channels || node.output.height < s.height || node.output.width < s.width {
                        return Err(mismatch(i, "upsample", node.output));
                    }
                    node.output
                }
                LayerKind::FullyConnected => FeatureShape::new(node.output.channels, 1, 1),
                LayerKind::Conv { .. } => infer(&node.kind, &ins, Some(node.output.channels))?,
                _ => infer(&node.kind, &ins, None)?,
            };
            if expected != node.output {
                return Err(mismatch(i, "output", node.output));
            }
            for &p in &node.params {
                let spec = layout.params().get(p.index()).ok_or_else(|| Error::Config(format!("node {i}: unknown parameter")))?;
                uses[p.index()] += 1;
                let want: Vec<usize> = match (&node.kind, spec.kind) {
                    (LayerKind::Conv { kernel, .. }, ParamKind::ConvWeight) => {
                        vec![node.output.channels, one(i, &ins)?.channels, *kernel, *kernel]
                    }
                    (LayerKind::BatchNorm, ParamKind::BnGamma | ParamKind::BnBeta) => vec![node.output.channels],
                    (LayerKind::FullyConnected, ParamKind::FcWeight) => {
                        let s = one(i, &ins)?;
                        if s.height != 1 || s.width != 1 {
                            return Err(mismatch(i, "fully-connected input", s));
                        }
                        vec![node.output.channels, s.channels]
                    }
                    (LayerKind::FullyConnected, ParamKind::FcBias) => vec![node.output.channels],
                    _ => return Err(Error::Config(format!("node {i}: parameter {} has the wrong kind", spec.name))),
                };
                if spec.shape != want {
                    return Err(Error::Config(format!(
                        "node {i}: parameter {} has shape {:?}, layer needs {want:?}",
                        spec.name, spec.shape
                    )));
                }
            }
        }
        if let Some(i) = uses.iter().position(|&u| u != 1) {
            return Err(Error::Config(format!(
                "parameter {} is used by {} layers (expected exactly 1)",
                layout.params()[i].name,
                uses[i]
            )));
        }
        Ok(())
    }
}

fn one(i: usize, ins: &[FeatureShape]) -> Result<FeatureShape> {
    match ins {
        [s] => Ok(*s),
        _ => Err(Error::Config(format!("node {i} expects one input, has {}", ins.len()))),
    }
}

fn mismatch(i: usize, what: &str, s: FeatureShape) -> Error {
    Error::Config(format!("node {i}: inconsistent {what} shape {s}"))
}

fn infer(kind: &LayerKind, ins: &[FeatureShape], out_ch: Option<usize>) -> Result<FeatureShape> {
    let single = |op: &'static str| match ins {
        [s] => Ok(*s),
        _ => Err(Error::shape(op, format!("expected one input, got {}", ins.len()))),
    };
    match kind {
        LayerKind::Conv { kernel, stride, padding } => {
            let s = single("conv2d")?;
            let out = |len: usize| {
                let padded = len + 2 * padding;
                (*stride > 0 && padded >= *kernel).then(|| (padded - kernel) / stride + 1)
            };
            match (out(s.height), out(s.width), out_ch) {
                (Some(h), Some(w), Some(c)) => Ok(FeatureShape::new(c, h, w)),
                _ => Err(Error::shape("conv2d", format!("kernel {kernel} stride {stride} does not fit {s}"))),
            }
        }
        LayerKind::MaxPool(p) => {
            let s = single("max_pool2d")?;
            match (p.out_len(s.height), p.out_len(s.width)) {
                (Some(h), Some(w)) => Ok(FeatureShape::new(s.channels, h, w)),
                _ => Err(Error::shape("max_pool2d", format!("window {} does not fit {s}", p.window))),
            }
        }
        LayerKind::Add | LayerKind::Combine(_) => match ins {
            [a, b] if a == b => Ok(*a),
            _ => Err(Error::shape("add", format!("operand shapes differ: {ins:?}"))),
        },
        LayerKind::Activation(MaskActivation::Spatial) => {
            let s = single("spatial_standardize")?;
            if s.height * s.width < 2 {
                return Err(Error::shape("spatial_standardize", format!("needs at least 2 positions, got {s}")));
            }
            Ok(s)
        }
        LayerKind::GlobalAvgPool => {
            let s = single("global_avg_pool")?;
            Ok(FeatureShape::new(s.channels, 1, 1))
        }
        LayerKind::Input | LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Activation(_) => single("layer"),
        LayerKind::Upsample | LayerKind::FullyConnected => unreachable!("shape needs the target"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_and_pool_shapes() {
        let mut layout = ParamLayout::new();
        let conv = ConvLayer::new(&mut layout, "c", 3, 64, 7, 2, 3, Partition::Shared);
        let (mut g, x) = LayerGraph::new(FeatureShape::new(3, 224, 224));
        let y = conv.trace(&mut g, x, false).unwrap();
        assert_eq!(g.shape(y), FeatureShape::new(64, 112, 112));
        let p = g.max_pool(y, PoolGeometry::IMAGENET, Partition::Shared).unwrap();
        assert_eq!(g.shape(p), FeatureShape::new(64, 56, 56));
        g.validate(&layout).unwrap();
    }

    #[test]
    fn validation_catches_unused_and_shared_params() {
        let mut layout = ParamLayout::new();
        let conv = ConvLayer::new(&mut layout, "c", 4, 4, 3, 1, 1, Partition::Trunk);
        let (mut g, x) = LayerGraph::new(FeatureShape::new(4, 8, 8));
        g.validate(&layout).unwrap_err();
        let y = conv.trace(&mut g, x, false).unwrap();
        g.validate(&layout).unwrap();
        conv.trace(&mut g, y, false).unwrap();
        assert!(g.validate(&layout).is_err());
    }

    #[test]
    fn rejects_mismatched_add_and_oversized_pool() {
        let (mut g, x) = LayerGraph::new(FeatureShape::new(4, 8, 8));
        let p = g.max_pool(x, PoolGeometry::CIFAR, Partition::Mask).unwrap();
        assert!(g.add(x, p, Partition::Mask).is_err());
        let (mut g, x) = LayerGraph::new(FeatureShape::new(4, 1, 1));
        assert!(g.max_pool(x, PoolGeometry::CIFAR, Partition::Mask).is_err());
    }
}
