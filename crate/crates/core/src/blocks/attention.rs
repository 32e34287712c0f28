use serde::{Deserialize, Serialize};

use super::activation::{combine, CombineMode, MaskActivation};
use super::layers::{Forward, MaskOverride, ModuleTrace, PoolGeometry};
use super::mask::{matched_bottleneck, MaskKind, SoftMaskBranch};
use super::params::{ParamLayout, Partition};
use super::residual::ResidualUnit;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::network::graph::{LayerGraph, NodeId};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionModuleConfig {
    /// Residual units before the split and again after the combine.
    pub p: usize,
    /// Trunk residual units.
    pub t: usize,
    /// Residual units between adjacent mask pooling levels.
    pub r: usize,
    /// Max-pool steps in the mask branch.
    pub levels: usize,
    pub combine: CombineMode,
    pub activation: MaskActivation,
    pub channels: usize,
    pub mask: MaskKind,
    pub pool: PoolGeometry,
}

impl AttentionModuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.t == 0 || self.r == 0 {
            return Err(Error::Config(format!("p, t, r must be at least 1 (got {}, {}, {})", self.p, self.t, self.r)));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!("channel width {} is not a positive multiple of 4", self.channels)));
        }
        Ok(())
    }
}

/// `p` pre units, then a trunk of `t` units and a soft mask branch on the same
/// input, merged by the combine rule, then `p` post units.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub index: usize,
    pub cfg: AttentionModuleConfig,
    pre: Vec<ResidualUnit>,
    trunk: Vec<ResidualUnit>,
    mask: Option<SoftMaskBranch>,
    post: Vec<ResidualUnit>,
}

fn trunk_units(layout: &mut ParamLayout, prefix: &str, n: usize, c: usize) -> Result<Vec<ResidualUnit>> {
    (0..n).map(|i| ResidualUnit::new(layout, &format!("{prefix}{i}"), c, c, 1, Partition::Trunk)).collect()
}

impl AttentionModule {
    /// `index` identifies the module for mask overrides; `hw` is the input
    /// spatial size, used to validate the mask pooling depth.
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        index: usize,
        cfg: &AttentionModuleConfig,
        hw: (usize, usize),
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let pre = trunk_units(layout, &format!("{name}.pre"), cfg.p, c)?;
        let trunk = trunk_units(layout, &format!("{name}.trunk"), cfg.t, c)?;
        let mname = format!("{name}.mask");
        let mask = match cfg.mask {
            MaskKind::Encdec => Some(SoftMaskBranch::encoder_decoder(
                layout,
                &mname,
                c,
                cfg.levels,
                cfg.r,
                cfg.pool,
                hw,
                cfg.activation,
            )?),
            MaskKind::Localconv => {
                let b = matched_bottleneck(c, cfg.levels, cfg.r, cfg.pool, hw)?;
                Some(SoftMaskBranch::local_conv(layout, &mname, c, b, hw, cfg.activation)?)
            }
            MaskKind::None => None,
        };
        let post = trunk_units(layout, &format!("{name}.post"), cfg.p, c)?;
        Ok(AttentionModule { index, cfg: cfg.clone(), pre, trunk, mask, post })
    }

    pub fn mask_branch(&self) -> Option<&SoftMaskBranch> {
        self.mask.as_ref()
    }

    pub fn forward<T: Float>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x).get(1).copied();
        if c != Some(self.cfg.channels) {
            return Err(Error::shape(
                "attention_module",
                format!("expects {} channels, got shape {:?}", self.cfg.channels, ctx.graph.shape(x)),
            ));
        }
        let mut y = x;
        for u in &self.pre {
            y = u.forward(ctx, y)?;
        }
        let mut t = y;
        for u in &self.trunk {
            t = u.forward(ctx, t)?;
        }
        let mask = match (ctx.mask_override(self.index), &self.mask) {
            (Some(MaskOverride::TrunkOnly), _) | (None, None) => None,
            (Some(MaskOverride::Constant(v)), _) => {
                let shape = ctx.graph.shape(t).to_vec();
                Some(ctx.graph.constant(Tensor::full(&shape, T::from_f64_lossy(v))))
            }
            (None, Some(branch)) => Some(branch.forward(ctx, y)?),
        };
        let combined = match mask {
            Some(m) => combine(&mut ctx.graph, self.cfg.combine, m, t)?,
            None => t,
        };
        let mut out = combined;
        for u in &self.post {
            out = u.forward(ctx, out)?;
        }
        ctx.record_module(ModuleTrace { index: self.index, trunk: t, mask, combined, output: out });
        Ok(out)
    }

    pub fn trace(&self, lg: &mut LayerGraph, x: NodeId) -> Result<NodeId> {
        let mut y = x;
        for u in &self.pre {
            y = u.trace(lg, y)?;
        }
        let mut t = y;
        for u in &self.trunk {
            t = u.trace(lg, t)?;
        }
        let mut out = match &self.mask {
            Some(branch) => {
                let m = branch.trace(lg, y)?;
                lg.combine(self.cfg.combine, m, t)?
            }
            None => t,
        };
        for u in &self.post {
            out = u.trace(lg, out)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::layers::MaskOverrides;
    use crate::blocks::params::ParamStore;
    use crate::network::graph::FeatureShape;
    use rand::SeedableRng;

    fn cfg(combine: CombineMode) -> AttentionModuleConfig {
        AttentionModuleConfig {
            p: 1,
            t: 2,
            r: 1,
            levels: 2,
            combine,
            activation: MaskActivation::Mixed,
            channels: 16,
            mask: MaskKind::Encdec,
            pool: PoolGeometry::CIFAR,
        }
    }

    fn run(m: &AttentionModule, store: &ParamStore<f32>, o: Option<MaskOverride>) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut ctx = Forward::eval(store);
        if let Some(o) = o {
            ctx.set_overrides(MaskOverrides::all(o));
        }
        let x = Tensor::randn(&[2, 16, 8, 8], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(4));
        let xv = ctx.input(x);
        m.forward(&mut ctx, xv).unwrap();
        let tr = ctx.module_traces()[0];
        (ctx.graph.value(tr.trunk).clone(), ctx.graph.value(tr.combined).clone(), ctx.graph.value(tr.output).clone())
    }

    #[test]
    fn arl_with_zero_mask_is_trunk() {
        let mut l = ParamLayout::new();
        let m = AttentionModule::new(&mut l, "a", 0, &cfg(CombineMode::Arl), (8, 8)).unwrap();
        let store = ParamStore::init(&l, 1);
        let (t, h, _) = run(&m, &store, Some(MaskOverride::Constant(0.0)));
        assert_eq!(t, h);
        let (_, _, trunk_only) = run(&m, &store, Some(MaskOverride::TrunkOnly));
        let (_, _, zero) = run(&m, &store, Some(MaskOverride::Constant(0.0)));
        assert_eq!(trunk_only, zero);
    }

    #[test]
    fn nal_with_unit_mask_is_trunk() {
        let mut l = ParamLayout::new();
        let m = AttentionModule::new(&mut l, "a", 0, &cfg(CombineMode::Nal), (8, 8)).unwrap();
        let store = ParamStore::init(&l, 1);
        let (t, h, _) = run(&m, &store, Some(MaskOverride::Constant(1.0)));
        assert_eq!(t, h);
        let (_, h0, _) = run(&m, &store, Some(MaskOverride::Constant(0.0)));
        assert!(h0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn arl_output_bounded_by_twice_trunk() {
        let mut l = ParamLayout::new();
        let m = AttentionModule::new(&mut l, "a", 0, &cfg(CombineMode::Arl), (8, 8)).unwrap();
        let store = ParamStore::init(&l, 9);
        let (t, h, _) = run(&m, &store, None);
        for (&tv, &hv) in t.data().iter().zip(h.data()) {
            assert!(hv.abs() <= 2.0 * tv.abs());
            assert!(tv == 0.0 || hv.signum() == tv.signum());
        }
    }

    #[test]
    fn imagenet_module_shape() {
        let mut c = cfg(CombineMode::Arl);
        c.channels = 256;
        c.levels = 3;
        c.pool = PoolGeometry::IMAGENET;
        let mut l = ParamLayout::new();
        let m = AttentionModule::new(&mut l, "a", 0, &c, (56, 56)).unwrap();
        let (mut g, x) = LayerGraph::new(FeatureShape::new(256, 56, 56));
        let y = m.trace(&mut g, x).unwrap();
        assert_eq!(g.shape(y), FeatureShape::new(256, 56, 56));
        g.validate(&l).unwrap();
    }

    #[test]
    fn rejects_bad_config() {
        let mut l = ParamLayout::new();
        let mut c = cfg(CombineMode::Arl);
        c.t = 0;
        assert!(AttentionModule::new(&mut l, "a", 0, &c, (8, 8)).is_err());
        let mut c = cfg(CombineMode::Arl);
        c.levels = 4;
        assert!(AttentionModule::new(&mut l, "a", 0, &c, (8, 8)).is_err());
    }
}
