use super::layers::{BnLayer, ConvLayer, Forward};
use super::params::{ParamId, ParamLayout, Partition};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::network::graph::{LayerGraph, NodeId};
use crate::tensor::Float;

/// Pre-activation bottleneck unit:
/// BN-ReLU-1x1 (b) -> BN-ReLU-3x3 (b, stride) -> BN-ReLU-1x1 (out), plus a skip.
///
/// The skip is the identity when shapes match; otherwise a strided 1x1
/// projection of the first BN-ReLU output.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub in_ch: usize,
    pub out_ch: usize,
    pub bottleneck: usize,
    pub stride: usize,
    bn1: BnLayer,
    conv1: ConvLayer,
    bn2: BnLayer,
    conv2: ConvLayer,
    bn3: BnLayer,
    conv3: ConvLayer,
    projection: Option<ConvLayer>,
}

impl ResidualUnit {
    /// Standard unit with bottleneck width `out_ch / 4`.
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        partition: Partition,
    ) -> Result<Self> {
        if out_ch == 0 || !out_ch.is_multiple_of(4) {
            return Err(Error::Config(format!("{name}: residual unit width {out_ch} is not a positive multiple of 4")));
        }
        Self::with_bottleneck(layout, name, in_ch, out_ch, out_ch / 4, stride, partition)
    }

    pub fn with_bottleneck(
        layout: &mut ParamLayout,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        bottleneck: usize,
        stride: usize,
        partition: Partition,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || bottleneck == 0 || stride == 0 {
            return Err(Error::Config(format!("{name}: widths and stride must be positive")));
        }
        let bn1 = BnLayer::new(layout, &format!("{name}.bn1"), in_ch, partition);
        let conv1 = ConvLayer::new(layout, &format!("{name}.conv1"), in_ch, bottleneck, 1, 1, 0, partition);
        let bn2 = BnLayer::new(layout, &format!("{name}.bn2"), bottleneck, partition);
        let conv2 = ConvLayer::new(layout, &format!("{name}.conv2"), bottleneck, bottleneck, 3, stride, 1, partition);
        let bn3 = BnLayer::new(layout, &format!("{name}.bn3"), bottleneck, partition);
        let conv3 = ConvLayer::new(layout, &format!("{name}.conv3"), bottleneck, out_ch, 1, 1, 0, partition);
        let projection = (in_ch != out_ch || stride != 1)
            .then(|| ConvLayer::new(layout, &format!("{name}.proj"), in_ch, out_ch, 1, stride, 0, partition));
        Ok(ResidualUnit { in_ch, out_ch, bottleneck, stride, bn1, conv1, bn2, conv2, bn3, conv3, projection })
    }

    /// Weight of the last 1x1 convolution of the residual path.
    pub fn final_conv(&self) -> ParamId {
        self.conv3.weight
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    pub fn forward<T: Float>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x).get(1).copied();
        if c != Some(self.in_ch) {
            return Err(Error::shape(
                "residual_unit",
                format!("expects {} input channels, got shape {:?}", self.in_ch, ctx.graph.shape(x)),
            ));
        }
        let a = self.bn1.forward_relu(ctx, x)?;
        let r = self.conv1.forward(ctx, a)?;
        let r = self.bn2.forward_relu(ctx, r)?;
        let r = self.conv2.forward(ctx, r)?;
        let r = self.bn3.forward_relu(ctx, r)?;
        let r = self.conv3.forward(ctx, r)?;
        let skip = match &self.projection {
            Some(p) => p.forward(ctx, a)?,
            None => x,
        };
        ctx.graph.add(skip, r)
    }

    pub fn trace(&self, lg: &mut LayerGraph, x: NodeId) -> Result<NodeId> {
        let a = self.bn1.trace_relu(lg, x)?;
        let r = self.conv1.trace(lg, a, false)?;
        let r = self.bn2.trace_relu(lg, r)?;
        let r = self.conv2.trace(lg, r, false)?;
        let r = self.bn3.trace_relu(lg, r)?;
        let r = self.conv3.trace(lg, r, false)?;
        let skip = match &self.projection {
            Some(p) => p.trace(lg, a, true)?,
            None => x,
        };
        lg.add(skip, r, self.conv3.partition)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::params::ParamStore;
    use crate::network::graph::FeatureShape;
    use crate::Tensor;
    use rand::SeedableRng;

    #[test]
    fn rejects_width_not_divisible_by_four() {
        let mut l = ParamLayout::new();
        assert!(ResidualUnit::new(&mut l, "u", 8, 10, 1, Partition::Trunk).is_err());
    }

    #[test]
    fn zero_final_conv_gives_skip_path() {
        let mut l = ParamLayout::new();
        let u = ResidualUnit::new(&mut l, "u", 8, 8, 1, Partition::Trunk).unwrap();
        let mut store = ParamStore::<f32>::init(&l, 3);
        *store.get_mut(u.final_conv()) = Tensor::zeros(&[8, 2, 1, 1]);
        let x = Tensor::randn(&[2, 8, 5, 5], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let mut ctx = Forward::train(&mut store);
        let xv = ctx.input(x.clone());
        let y = u.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.graph.value(y), &x);
    }

    #[test]
    fn imagenet_unit_shape() {
        let mut l = ParamLayout::new();
        let u = ResidualUnit::new(&mut l, "u", 256, 256, 1, Partition::Trunk).unwrap();
        assert!(!u.has_projection());
        let (mut g, x) = LayerGraph::new(FeatureShape::new(256, 56, 56));
        let y = u.trace(&mut g, x).unwrap();
        assert_eq!(g.shape(y), FeatureShape::new(256, 56, 56));
        g.validate(&l).unwrap();

        let store = ParamStore::<f32>::init(&l, 0);
        let mut ctx = Forward::eval(&store);
        let xv = ctx.input(Tensor::zeros(&[1, 256, 56, 56]));
        let y = u.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.graph.shape(y), &[1, 256, 56, 56]);
    }

    #[test]
    fn strided_unit_projects() {
        let mut l = ParamLayout::new();
        let u = ResidualUnit::new(&mut l, "u", 16, 64, 2, Partition::Trunk).unwrap();
        assert!(u.has_projection());
        let (mut g, x) = LayerGraph::new(FeatureShape::new(16, 32, 32));
        let y = u.trace(&mut g, x).unwrap();
        assert_eq!(g.shape(y), FeatureShape::new(64, 16, 16));
        g.validate(&l).unwrap();
    }
}
