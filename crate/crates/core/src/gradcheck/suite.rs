//! Named finite-difference cases for primitives, blocks and attention modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, GradcheckConfig, GradcheckReport, Stencil};
use crate::autodiff::{BnMode, Graph, RunningStats, Var};
use crate::blocks::{
    AttentionModule, AttentionModuleConfig, CombineMode, Forward, MaskActivation, MaskKind, ParamKind, ParamLayout,
    ParamStore, Partition, PoolGeometry, ResidualUnit, SoftMaskBranch,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitive,
    Block,
    Module,
}

type Runner = Box<dyn Fn(&GradcheckConfig) -> Result<GradcheckReport> + Send + Sync>;

pub struct Case {
    pub name: String,
    pub scope: Scope,
    run: Runner,
}

impl Case {
    fn new(name: impl Into<String>, scope: Scope, run: impl Fn(&GradcheckConfig) -> Result<GradcheckReport> + Send + Sync + 'static) -> Self {
        Case { name: name.into(), scope, run: Box::new(run) }
    }

    pub fn run(&self, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
        (self.run)(cfg)
    }
}

/// Coordinate budget per tensor used for block and module cases.
pub const BLOCK_COORDS: usize = 32;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Scalar readout with fixed random weights so every output element matters.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = rand_t(g.shape(y), seed ^ 0x5eed).into_data();
    g.dot(y, w)
}

fn unary(
    name: &str,
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    Case::new(name, Scope::Primitive, move |cfg| {
        gradcheck(
            |g, v| {
                let y = f(g, v)?;
                if g.value(y).len() == 1 {
                    Ok(y)
                } else {
                    readout(g, y, seed)
                }
            },
            &inputs,
            cfg,
        )
    })
}

pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    let x = rand_t(&[2, 3, 8, 8], s(1));
    let w = rand_t(&[4, 3, 3, 3], s(2));
    let mut cases = Vec::new();
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        cases.push(unary(&format!("conv2d stride {stride} pad {pad}"), s(3), vec![x.clone(), w.clone()], move |g, v| {
            g.conv2d(v[0], v[1], stride, pad)
        }));
    }
    cases.push(unary("conv2d 1x1", s(5), vec![x, rand_t(&[5, 3, 1, 1], s(4))], |g, v| g.conv2d(v[0], v[1], 1, 0)));

    let p = rand_t(&[1, 2, 8, 8], s(6));
    for (win, stride, pad) in [(3, 2, 0), (3, 2, 1), (2, 2, 0)] {
        cases.push(unary(&format!("max_pool2d {win}/{stride} pad {pad}"), s(7), vec![p.clone()], move |g, v| {
            g.max_pool2d(v[0], win, stride, pad)
        }));
    }
    cases.push(unary("bilinear_upsample 4x4 to 8x8", s(11), vec![rand_t(&[1, 2, 4, 4], s(10))], |g, v| {
        g.upsample_bilinear(v[0], 8, 8)
    }));
    cases.push(unary("bilinear_upsample 3x5 to 7x9", s(13), vec![rand_t(&[2, 1, 3, 5], s(12))], |g, v| {
        g.upsample_bilinear(v[0], 7, 9)
    }));

    let bx = rand_t(&[2, 4, 5, 5], s(20));
    let gamma = rand_t(&[4], s(21));
    let beta = rand_t(&[4], s(22));
    cases.push(unary("batch_norm train", s(23), vec![bx.clone(), gamma.clone(), beta.clone()], |g, v| {
        let mut stats = RunningStats::new(4);
        g.batch_norm(v[0], v[1], v[2], BnMode::Train(&mut stats))
    }));
    cases.push(unary("batch_norm eval", s(24), vec![bx, gamma.clone(), beta.clone()], |g, v| {
        let stats = RunningStats { mean: vec![0.1, -0.2, 0.0, 0.3], var: vec![0.5, 1.5, 1.0, 2.0] };
        g.batch_norm(v[0], v[1], v[2], BnMode::Eval(&stats))
    }));
    cases.push(unary("batch_norm train [N,C]", s(25), vec![rand_t(&[6, 4], s(26)), gamma, beta], |g, v| {
        let mut stats = RunningStats::new(4);
        g.batch_norm(v[0], v[1], v[2], BnMode::Train(&mut stats))
    }));

    let a = rand_t(&[2, 3, 4, 4], s(30));
    let b = rand_t(&[2, 3, 4, 4], s(31));
    cases.push(unary("relu", s(32), vec![a.clone()], |g, v| Ok(g.relu(v[0]))));
    cases.push(unary("sigmoid", s(33), vec![a.clone()], |g, v| Ok(g.sigmoid(v[0]))));
    cases.push(unary("add", s(34), vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])));
    cases.push(unary("mul", s(35), vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])));
    cases.push(unary("residual_attention", s(36), vec![a.clone(), b], |g, v| g.residual_attention(v[0], v[1])));
    cases.push(unary("global_avg_pool", s(37), vec![a.clone()], |g, v| g.global_avg_pool(v[0])));
    cases.push(unary("channel_l2_normalize", s(38), vec![a.clone()], |g, v| g.channel_l2_normalize(v[0])));
    cases.push(unary("spatial_standardize", s(39), vec![a], |g, v| g.spatial_standardize(v[0])));

    let fx = rand_t(&[4, 6], s(40));
    let fw = rand_t(&[3, 6], s(41));
    let fb = rand_t(&[3], s(42));
    cases.push(unary("fully_connected", s(43), vec![fx.clone(), fw.clone(), fb.clone()], |g, v| g.linear(v[0], v[1], v[2])));
    cases.push(unary("softmax_cross_entropy", s(44), vec![fx, fw, fb], |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        g.softmax_cross_entropy(y, &[0, 2, 1, 2])
    }));
    cases.push(unary("conv2d -> relu -> sum", s(45), vec![rand_t(&[2, 3, 6, 6], s(50)), rand_t(&[2, 3, 3, 3], s(51))], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 1)?;
        let r = g.relu(y);
        Ok(g.sum(r))
    }));
    cases
}

/// Parameters with generic values: He-initialized convs, BN affine drawn
/// away from the identity.
fn generic_store(layout: &ParamLayout, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::<f64>::init(layout, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb7);
    for id in layout.ids() {
        match layout.spec(id).kind {
            ParamKind::BnGamma => store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5)),
            ParamKind::BnBeta => store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5)),
            _ => {}
        }
    }
    store
}

/// Checks a parameterized block in train mode with respect to its input and
/// every parameter tensor, using the fourth-order stencil: stacked train-mode
/// batch norms make the second-order truncation error visible at `1e-4`.
fn block_case<B: Send + Sync + 'static>(
    name: String,
    scope: Scope,
    input_shape: Vec<usize>,
    seed: u64,
    build: impl FnOnce(&mut ParamLayout) -> Result<B>,
    forward: fn(&B, &mut Forward<'_, f64>, Var) -> Result<Var>,
) -> Case {
    let mut layout = ParamLayout::new();
    let built = build(&mut layout);
    Case::new(name, scope, move |cfg| {
        let block = match &built {
            Ok(b) => b,
            Err(e) => return Err(Error::Config(e.to_string())),
        };
        let store = generic_store(&layout, seed);
        let mut inputs = vec![rand_t(&input_shape, seed ^ 0x1)];
        inputs.extend(store.values().iter().cloned());
        let ids: Vec<_> = layout.ids().collect();
        let mut cfg = cfg.clone();
        cfg.max_coords_per_input = cfg.max_coords_per_input.or(Some(BLOCK_COORDS));
        cfg.stencil = Stencil::Central4;
        gradcheck(
            |g, v| {
                let mut s = store.clone();
                let mut ctx = Forward::train(&mut s).with_graph(std::mem::take(g));
                for (&id, &var) in ids.iter().zip(&v[1..]) {
                    ctx.bind(id, var);
                }
                let y = forward(block, &mut ctx, v[0])?;
                let loss = readout(&mut ctx.graph, y, seed);
                *g = ctx.into_graph();
                loss
            },
            &inputs,
            &cfg,
        )
    })
}

const C: usize = 8;
const HW: usize = 16;

pub fn block_cases(seed: u64) -> Vec<Case> {
    let mut cases = vec![
        block_case(
            "residual_unit identity skip".into(),
            Scope::Block,
            vec![2, C, 8, 8],
            seed,
            |l| ResidualUnit::new(l, "u", C, C, 1, Partition::Trunk),
            |b, ctx, x| b.forward(ctx, x),
        ),
        block_case(
            "residual_unit projection stride 2".into(),
            Scope::Block,
            vec![2, 4, 8, 8],
            seed,
            |l| ResidualUnit::new(l, "u", 4, C, 2, Partition::Trunk),
            |b, ctx, x| b.forward(ctx, x),
        ),
    ];
    for levels in 0..=3 {
        cases.push(block_case(
            format!("soft_mask_branch levels {levels}"),
            Scope::Block,
            vec![2, C, HW, HW],
            seed,
            move |l| {
                SoftMaskBranch::encoder_decoder(l, "m", C, levels, 1, PoolGeometry::CIFAR, (HW, HW), MaskActivation::Mixed)
            },
            |b, ctx, x| b.forward(ctx, x),
        ));
    }
    cases.push(block_case(
        "local_conv_mask_branch".into(),
        Scope::Block,
        vec![2, C, HW, HW],
        seed,
        |l| SoftMaskBranch::local_conv(l, "m", C, C / 4, (HW, HW), MaskActivation::Mixed),
        |b, ctx, x| b.forward(ctx, x),
    ));
    cases
}

pub fn module_config(combine: CombineMode, activation: MaskActivation) -> AttentionModuleConfig {
    AttentionModuleConfig {
        p: 1,
        t: 2,
        r: 1,
        levels: 2,
        combine,
        activation,
        channels: C,
        mask: MaskKind::Encdec,
        pool: PoolGeometry::CIFAR,
    }
}

pub fn module_cases(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    for combine in [CombineMode::Arl, CombineMode::Nal] {
        for act in [MaskActivation::Mixed, MaskActivation::Channel, MaskActivation::Spatial] {
            let cfg = module_config(combine, act);
            cases.push(block_case(
                format!("attention_module {combine} {act}"),
                Scope::Module,
                vec![2, C, HW, HW],
                seed,
                move |l| AttentionModule::new(l, "a", 0, &cfg, (HW, HW)),
                |b, ctx, x| b.forward(ctx, x),
            ));
        }
    }
    cases
}

pub fn all_cases(seed: u64) -> Vec<Case> {
    let mut cases = primitive_cases(seed);
    cases.extend(block_cases(seed));
    cases.extend(module_cases(seed));
    cases
}
