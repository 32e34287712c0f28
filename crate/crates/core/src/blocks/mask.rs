//! Soft mask branch: bottom-up/top-down encoder-decoder or a stack of local
//! residual units, followed by the 1x1 convolution head and the activation.

use serde::{Deserialize, Serialize};

use super::activation::{apply_activation, MaskActivation};
use super::layers::{BnLayer, ConvLayer, Forward, PoolGeometry};
use super::params::{ParamLayout, Partition};
use super::residual::ResidualUnit;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::network::graph::{LayerGraph, NodeId};
use crate::tensor::Float;

const PART: Partition = Partition::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Max-pool / upsample hourglass with skip connections.
    Encdec,
    /// Three residual units at full resolution, FLOP-matched to `Encdec`.
    Localconv,
    /// No mask branch: the module is its trunk alone.
    None,
}

/// Spatial sizes visited by the encoder: `[input, after pool 1, ..., after pool L]`.
pub fn mask_resolutions(levels: usize, pool: PoolGeometry, hw: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let mut out = vec![hw];
    for l in 0..levels {
        let (h, w) = out[l];
        match (pool.out_len(h), pool.out_len(w)) {
            (Some(h2), Some(w2)) if h2 >= 1 && w2 >= 1 => out.push((h2, w2)),
            _ => {
                return Err(Error::Config(format!(
                    "mask pooling level {} takes {h}x{w} below 1x1 (window {}, stride {})",
                    l + 1,
                    pool.window,
                    pool.stride
                )))
            }
        }
    }
    Ok(out)
}

/// Resolution (`h * w`) of every residual unit in an encoder-decoder branch.
fn encdec_unit_areas(levels: usize, r: usize, sizes: &[(usize, usize)]) -> Vec<usize> {
    let area = |l: usize| sizes[l].0 * sizes[l].1;
    if levels == 0 {
        return vec![area(0); 2 * r];
    }
    let mut out = Vec::new();
    for l in 0..levels {
        out.extend(std::iter::repeat_n(area(l + 1), 2 * r));
        if l > 0 {
            out.push(area(l));
        }
    }
    out
}

/// Bottleneck width `b` for which three full-resolution units cost the same
/// multiply-accumulates as the encoder-decoder units they replace. A stride-1
/// unit of width `c` costs `hw * (2cb + 9b^2)`.
pub fn matched_bottleneck(channels: usize, levels: usize, r: usize, pool: PoolGeometry, hw: (usize, usize)) -> Result<usize> {
    let sizes = mask_resolutions(levels, pool, hw)?;
    let c = channels as f64;
    let b0 = (channels / 4) as f64;
    let per_area = 2.0 * c * b0 + 9.0 * b0 * b0;
    let target: f64 = encdec_unit_areas(levels, r, &sizes).iter().map(|&a| a as f64 * per_area).sum();
    let rhs = target / (3.0 * (hw.0 * hw.1) as f64);
    let b = (-2.0 * c + (4.0 * c * c + 36.0 * rhs).sqrt()) / 18.0;
    Ok((b.round() as usize).max(1))
}

#[derive(Clone, Debug)]
struct MaskHead {
    bn1: BnLayer,
    conv1: ConvLayer,
    bn2: BnLayer,
    conv2: ConvLayer,
}

impl MaskHead {
    fn new(layout: &mut ParamLayout, name: &str, c: usize) -> Self {
        MaskHead {
            bn1: BnLayer::new(layout, &format!("{name}.head.bn1"), c, PART),
            conv1: ConvLayer::new(layout, &format!("{name}.head.conv1"), c, c, 1, 1, 0, PART),
            bn2: BnLayer::new(layout, &format!("{name}.head.bn2"), c, PART),
            conv2: ConvLayer::new(layout, &format!("{name}.head.conv2"), c, c, 1, 1, 0, PART),
        }
    }

    fn forward<T: Float>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.bn1.forward_relu(ctx, x)?;
        let y = self.conv1.forward(ctx, y)?;
        let y = self.bn2.forward_relu(ctx, y)?;
        self.conv2.forward(ctx, y)
    }

    fn trace(&self, lg: &mut LayerGraph, x: NodeId) -> Result<NodeId> {
        let y = self.bn1.trace_relu(lg, x)?;
        let y = self.conv1.trace(lg, y, false)?;
        let y = self.bn2.trace_relu(lg, y)?;
        self.conv2.trace(lg, y, false)
    }
}

#[derive(Clone, Debug)]
enum Body {
    EncoderDecoder {
        pool: PoolGeometry,
        down: Vec<Vec<ResidualUnit>>,
        up: Vec<Vec<ResidualUnit>>,
        /// `skips[l]` maps the encoder feature at resolution `l` to the decoder;
        /// the top level (`l = 0`) uses the branch input directly.
        skips: Vec<Option<ResidualUnit>>,
    },
    Flat(Vec<ResidualUnit>),
}

#[derive(Clone, Debug)]
pub struct SoftMaskBranch {
    body: Body,
    head: MaskHead,
    pub activation: MaskActivation,
    pub channels: usize,
}

fn units(layout: &mut ParamLayout, prefix: &str, n: usize, c: usize) -> Result<Vec<ResidualUnit>> {
    (0..n).map(|i| ResidualUnit::new(layout, &format!("{prefix}.unit{i}"), c, c, 1, PART)).collect()
}

fn check_activation(act: MaskActivation, hw: (usize, usize)) -> Result<()> {
    if act == MaskActivation::Spatial && hw.0 * hw.1 < 2 {
        return Err(Error::Config("spatial mask activation needs at least 2 spatial positions".into()));
    }
    Ok(())
}

impl SoftMaskBranch {
    /// `levels` pooling steps with `r` units per level on each path. With
    /// `levels = 0` this degenerates to `2r` units at full resolution.
    #[allow(clippy::too_many_arguments)]
    pub fn encoder_decoder(
        layout: &mut ParamLayout,
        name: &str,
        channels: usize,
        levels: usize,
        r: usize,
        pool: PoolGeometry,
        hw: (usize, usize),
        activation: MaskActivation,
    ) -> Result<Self> {
        if r == 0 {
            return Err(Error::Config(format!("{name}: r must be at least 1")));
        }
        check_activation(activation, hw)?;
        mask_resolutions(levels, pool, hw)?;
        let body = if levels == 0 {
            Body::Flat(units(layout, name, 2 * r, channels)?)
        } else {
            let mut down = Vec::with_capacity(levels);
            let mut skips = Vec::with_capacity(levels);
            for l in 0..levels {
                down.push(units(layout, &format!("{name}.down{l}"), r, channels)?);
                skips.push(if l == 0 {
                    None
                } else {
                    Some(ResidualUnit::new(layout, &format!("{name}.skip{l}"), channels, channels, 1, PART)?)
                });
            }
            let mut up = Vec::with_capacity(levels);
            for l in 0..levels {
                up.push(units(layout, &format!("{name}.up{l}"), r, channels)?);
            }
            Body::EncoderDecoder { pool, down, up, skips }
        };
        let head = MaskHead::new(layout, name, channels);
        Ok(SoftMaskBranch { body, head, activation, channels })
    }

    /// Three full-resolution units with the given bottleneck width.
    pub fn local_conv(
        layout: &mut ParamLayout,
        name: &str,
        channels: usize,
        bottleneck: usize,
        hw: (usize, usize),
        activation: MaskActivation,
    ) -> Result<Self> {
        check_activation(activation, hw)?;
        let units = (0..3)
            .map(|i| ResidualUnit::with_bottleneck(layout, &format!("{name}.unit{i}"), channels, channels, bottleneck, 1, PART))
            .collect::<Result<_>>()?;
        let head = MaskHead::new(layout, name, channels);
        Ok(SoftMaskBranch { body: Body::Flat(units), head, activation, channels })
    }

    /// Mask pre-activation (head output before the activation).
    pub fn forward_logits<T: Float>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = match &self.body {
            Body::Flat(units) => {
                let mut y = x;
                for u in units {
                    y = u.forward(ctx, y)?;
                }
                y
            }
            Body::EncoderDecoder { pool, down, up, skips } => {
                let mut feats = vec![x];
                let mut y = x;
                for level in down {
                    y = ctx.graph.max_pool2d(y, pool.window, pool.stride, pool.padding)?;
                    for u in level {
                        y = u.forward(ctx, y)?;
                    }
                    feats.push(y);
                }
                for l in (0..up.len()).rev() {
                    for u in &up[l] {
                        y = u.forward(ctx, y)?;
                    }
                    let target = feats[l];
                    let (th, tw) = {
                        let s = ctx.graph.shape(target);
                        (s[2], s[3])
                    };
                    y = ctx.graph.upsample_bilinear(y, th, tw)?;
                    let skip = match &skips[l] {
                        Some(u) => u.forward(ctx, target)?,
                        None => target,
                    };
                    y = ctx.graph.add(y, skip)?;
                }
                y
            }
        };
        self.head.forward(ctx, y)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let logits = self.forward_logits(ctx, x)?;
        apply_activation(&mut ctx.graph, logits, self.activation)
    }

    pub fn trace(&self, lg: &mut LayerGraph, x: NodeId) -> Result<NodeId> {
        let y = match &self.body {
            Body::Flat(units) => {
                let mut y = x;
                for u in units {
                    y = u.trace(lg, y)?;
                }
                y
            }
            Body::EncoderDecoder { pool, down, up, skips } => {
                let mut feats = vec![x];
                let mut y = x;
                for level in down {
                    y = lg.max_pool(y, *pool, PART)?;
                    for u in level {
                        y = u.trace(lg, y)?;
                    }
                    feats.push(y);
                }
                for l in (0..up.len()).rev() {
                    for u in &up[l] {
                        y = u.trace(lg, y)?;
                    }
                    y = lg.upsample(y, feats[l], PART)?;
                    let skip = match &skips[l] {
                        Some(u) => u.trace(lg, feats[l])?,
                        None => feats[l],
                    };
                    y = lg.add(y, skip, PART)?;
                }
                y
            }
        };
        let y = self.head.trace(lg, y)?;
        lg.activation(y, self.activation, PART)
    }
}
