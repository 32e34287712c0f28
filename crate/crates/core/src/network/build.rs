//! Assembles stem, stages of residual units and attention modules, and the
//! classifier head from a [`NetworkSpec`].

use super::graph::{FeatureShape, LayerGraph};
use super::spec::{Family, NetworkSpec};
use crate::autodiff::Var;
use crate::blocks::{
    AttentionModule, AttentionModuleConfig, BnLayer, ConvLayer, Forward, ParamId, ParamKind, ParamLayout, ParamStore,
    Partition, PoolGeometry, ResidualUnit,
};
use crate::error::{Error, Result};
use crate::tensor::Float;

const IMAGENET_WIDTHS: [usize; 4] = [256, 512, 1024, 2048];
const CIFAR_WIDTHS: [usize; 3] = [64, 128, 256];
const IMAGENET_STEM: usize = 64;
const CIFAR_STEM: usize = 16;

#[derive(Clone, Debug)]
enum Block {
    Unit(ResidualUnit),
    Attention(AttentionModule),
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Stem {
    conv: ConvLayer,
    /// ImageNet stems normalize and pool after the convolution.
    pool: Option<(BnLayer, PoolGeometry)>,
}

#[derive(Clone, Debug)]
struct Head {
    bn: BnLayer,
    fc_weight: ParamId,
    fc_bias: ParamId,
    classes: usize,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    pub logits: Var,
    /// Output feature map of each stage, in order.
    pub stages: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layout: ParamLayout,
    input: FeatureShape,
    stem: Stem,
    stages: Vec<Stage>,
    head: Head,
    modules: usize,
}

/// Running state while stages are appended.
struct Builder {
    layout: ParamLayout,
    stages: Vec<Stage>,
    channels: usize,
    hw: (usize, usize),
    modules: usize,
}

impl Builder {
    fn unit(&mut self, stage: &str, i: usize, out: usize, stride: usize) -> Result<Block> {
        let u = ResidualUnit::new(&mut self.layout, &format!("{stage}.unit{i}"), self.channels, out, stride, Partition::Trunk)?;
        self.channels = out;
        if stride > 1 {
            let down = |n: usize| (n + 2 - 3) / stride + 1;
            self.hw = (down(self.hw.0), down(self.hw.1));
        }
        Ok(Block::Unit(u))
    }

    fn module(&mut self, stage: &str, j: usize, cfg: &AttentionModuleConfig) -> Result<Block> {
        let m = AttentionModule::new(&mut self.layout, &format!("{stage}.attention{j}"), self.modules, cfg, self.hw)?;
        self.modules += 1;
        Ok(Block::Attention(m))
    }
}

impl Network {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        let net = &spec.network;
        if net.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if net.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        let att = &spec.attention;
        let mut layout = ParamLayout::new();
        let imagenet = match net.family {
            Family::Imagenet => true,
            Family::Cifar => false,
            Family::Resnet => matches!(net.depth, Some(50 | 101 | 152)),
        };
        let stem = if imagenet {
            let conv = ConvLayer::new(&mut layout, "stem.conv", 3, IMAGENET_STEM, 7, 2, 3, Partition::Shared);
            let bn = BnLayer::new(&mut layout, "stem.bn", IMAGENET_STEM, Partition::Shared);
            Stem { conv, pool: Some((bn, PoolGeometry::IMAGENET)) }
        } else {
            Stem { conv: ConvLayer::new(&mut layout, "stem.conv", 3, CIFAR_STEM, 3, 1, 1, Partition::Shared), pool: None }
        };
        let s = net.input_size;
        let hw = if imagenet {
            let after_conv = (s + 6 - 7) / 2 + 1;
            let p = PoolGeometry::IMAGENET.out_len(after_conv).ok_or_else(|| Error::Config("input too small".into()))?;
            (p, p)
        } else {
            (s, s)
        };
        let mut b = Builder {
            layout,
            stages: Vec::new(),
            channels: if imagenet { IMAGENET_STEM } else { CIFAR_STEM },
            hw,
            modules: 0,
        };

        match net.family {
            Family::Resnet => {
                let depth = net.depth.ok_or_else(|| Error::Config("resnet family needs `depth`".into()))?;
                let (counts, widths): (Vec<usize>, &[usize]) = match depth {
                    50 => (vec![3, 4, 6, 3], &IMAGENET_WIDTHS),
                    101 => (vec![3, 4, 23, 3], &IMAGENET_WIDTHS),
                    152 => (vec![3, 8, 36, 3], &IMAGENET_WIDTHS),
                    d if d >= 11 && (d - 2) % 9 == 0 => (vec![(d - 2) / 9; 3], &CIFAR_WIDTHS),
                    d => return Err(Error::Config(format!("unsupported ResNet depth {d}"))),
                };
                for (si, (&n, &w)) in counts.iter().zip(widths).enumerate() {
                    let name = format!("stage{}", si + 1);
                    let blocks = (0..n)
                        .map(|i| b.unit(&name, i, w, if si > 0 && i == 0 { 2 } else { 1 }))
                        .collect::<Result<_>>()?;
                    b.stages.push(Stage { name, blocks });
                }
            }
            Family::Imagenet | Family::Cifar => {
                let (widths, pool): (&[usize], _) =
                    if imagenet { (&IMAGENET_WIDTHS[..3], PoolGeometry::IMAGENET) } else { (&CIFAR_WIDTHS, PoolGeometry::CIFAR) };
                if net.modules_per_stage.len() != widths.len() {
                    return Err(Error::Config(format!(
                        "modules_per_stage needs {} entries, got {}",
                        widths.len(),
                        net.modules_per_stage.len()
                    )));
                }
                if att.mask_levels.len() != widths.len() {
                    return Err(Error::Config(format!("mask_levels needs {} entries", widths.len())));
                }
                if net.family == Family::Cifar && net.modules_per_stage.contains(&0) {
                    return Err(Error::Config("m must be at least 1".into()));
                }
                for (si, &w) in widths.iter().enumerate() {
                    let name = format!("stage{}", si + 1);
                    let cfg = AttentionModuleConfig {
                        p: att.p,
                        t: att.t,
                        r: att.r,
                        levels: att.mask_levels[si],
                        combine: att.combine,
                        activation: att.activation,
                        channels: w,
                        mask: att.mask,
                        pool,
                    };
                    let mut blocks = vec![b.unit(&name, 0, w, if si > 0 { 2 } else { 1 })?];
                    for j in 0..net.modules_per_stage[si] {
                        blocks.push(b.module(&name, j, &cfg)?);
                    }
                    if !imagenet {
                        blocks.push(b.unit(&name, 1, w, 1)?);
                    }
                    b.stages.push(Stage { name, blocks });
                }
                if imagenet {
                    let name = "stage4".to_string();
                    let blocks = (0..3)
                        .map(|i| b.unit(&name, i, IMAGENET_WIDTHS[3], if i == 0 { 2 } else { 1 }))
                        .collect::<Result<_>>()?;
                    b.stages.push(Stage { name, blocks });
                }
            }
        }

        let c = b.channels;
        let bn = BnLayer::new(&mut b.layout, "head.bn", c, Partition::Shared);
        let fc_weight = b.layout.add_param("head.fc.weight", &[net.num_classes, c], ParamKind::FcWeight, Partition::Shared);
        let fc_bias = b.layout.add_param("head.fc.bias", &[net.num_classes], ParamKind::FcBias, Partition::Shared);
        let network = Network {
            spec: spec.clone(),
            layout: b.layout,
            input: FeatureShape::new(3, s, s),
            stem,
            stages: b.stages,
            head: Head { bn, fc_weight, fc_bias, classes: net.num_classes },
            modules: b.modules,
        };
        network.layer_graph()?.validate(&network.layout)?;
        Ok(network)
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes
    }

    pub fn stage_names(&self) -> Vec<String> {
        self.stages.iter().map(|s| s.name.clone()).collect()
    }

    /// Number of attention modules (their indices run `0..n` in forward order).
    pub fn num_modules(&self) -> usize {
        self.modules
    }

    /// Module indices per stage.
    pub fn modules_by_stage(&self) -> Vec<Vec<usize>> {
        self.stages
            .iter()
            .map(|s| {
                s.blocks
                    .iter()
                    .filter_map(|b| match b {
                        Block::Attention(m) => Some(m.index),
                        Block::Unit(_) => None,
                    })
                    .collect()
            })
            .collect()
    }

    pub fn init_params<T: Float>(&self, seed: u64) -> ParamStore<T> {
        ParamStore::init(&self.layout, seed)
    }

    pub fn layer_graph(&self) -> Result<LayerGraph> {
        let (mut g, x) = LayerGraph::new(self.input);
        g.set_stage("stem");
        let mut y = self.stem.conv.trace(&mut g, x, false)?;
        if let Some((bn, pool)) = &self.stem.pool {
            y = bn.trace_relu(&mut g, y)?;
            y = g.max_pool(y, *pool, Partition::Shared)?;
        }
        for stage in &self.stages {
            g.set_stage(&stage.name);
            for block in &stage.blocks {
                y = match block {
                    Block::Unit(u) => u.trace(&mut g, y)?,
                    Block::Attention(m) => m.trace(&mut g, y)?,
                };
            }
        }
        g.set_stage("head");
        let y = self.head.bn.trace_relu(&mut g, y)?;
        let y = g.global_avg_pool(y, Partition::Shared);
        g.fully_connected(y, self.head.fc_weight, self.head.fc_bias, self.head.classes, Partition::Shared);
        Ok(g)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<NetworkOutput> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.input.channels {
            return Err(Error::shape("network", format!("expected [N, 3, H, W] input, got {shape:?}")));
        }
        let mut y = self.stem.conv.forward(ctx, x)?;
        if let Some((bn, pool)) = &self.stem.pool {
            y = bn.forward_relu(ctx, y)?;
            y = ctx.graph.max_pool2d(y, pool.window, pool.stride, pool.padding)?;
        }
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in &stage.blocks {
                y = match block {
                    Block::Unit(u) => u.forward(ctx, y)?,
                    Block::Attention(m) => m.forward(ctx, y)?,
                };
            }
            stages.push(y);
        }
        let y = self.head.bn.forward_relu(ctx, y)?;
        let y = ctx.graph.global_avg_pool(y)?;
        let w = ctx.param(self.head.fc_weight);
        let bias = ctx.param(self.head.fc_bias);
        let logits = ctx.graph.linear(y, w, bias)?;
        Ok(NetworkOutput { logits, stages })
    }
}
