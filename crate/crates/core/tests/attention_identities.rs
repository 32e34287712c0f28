use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resattn::blocks::{
    AttentionModule, AttentionModuleConfig, CombineMode, Forward, MaskActivation, MaskKind, MaskOverride, MaskOverrides,
    ParamKind, ParamLayout, ParamStore, Partition, PoolGeometry,
};
use resattn::network::{Network, NetworkSpec};
use resattn::train::response_probe;
use resattn::{Graph, Tensor};

fn module(combine: CombineMode) -> (ParamLayout, AttentionModule) {
    let cfg = AttentionModuleConfig {
        p: 1,
        t: 2,
        r: 1,
        levels: 2,
        combine,
        activation: MaskActivation::Mixed,
        channels: 8,
        mask: MaskKind::Encdec,
        pool: PoolGeometry::CIFAR,
    };
    let mut l = ParamLayout::new();
    let m = AttentionModule::new(&mut l, "a", 0, &cfg, (8, 8)).unwrap();
    (l, m)
}

/// Initial values with batch-norm affine terms moved away from (1, 0).
fn generic_store(l: &ParamLayout, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::init(l, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for id in l.ids().collect::<Vec<_>>() {
        let (lo, hi) = match l.spec(id).kind {
            ParamKind::BnGamma => (0.5, 1.5),
            ParamKind::BnBeta => (-0.5, 0.5),
            _ => continue,
        };
        s.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    }
    s
}

/// Gradients of a fixed linear readout of the combine output, with the mask
/// clamped to `c`.
fn combine_grads(l: &ParamLayout, m: &AttentionModule, store: &ParamStore<f64>, c: f64) -> Vec<Option<Tensor<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn(&[2, 8, 8, 8], 1.0, &mut rng);
    let w: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut ctx = Forward::eval(store);
    ctx.set_overrides(MaskOverrides::all(MaskOverride::Constant(c)));
    let xv = ctx.input(x);
    m.forward(&mut ctx, xv).unwrap();
    let h = ctx.module_traces()[0].combined;
    let loss = ctx.graph.dot(h, w).unwrap();
    let grads = ctx.backward_params(loss).unwrap();
    assert_eq!(grads.len(), l.params().len());
    grads
}

#[test]
fn nal_trunk_gradients_scale_with_clamped_mask() {
    let (l, m) = module(CombineMode::Nal);
    let store = generic_store(&l, 3);
    let base = combine_grads(&l, &m, &store, 1.0);
    let trunk: Vec<usize> = l
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.partition == Partition::Trunk && (p.name.contains(".pre") || p.name.contains(".trunk")))
        .map(|(i, _)| i)
        .collect();
    assert!(!trunk.is_empty());
    for c in [0.0, 0.5] {
        let got = combine_grads(&l, &m, &store, c);
        let mut worst = 0f64;
        for &i in &trunk {
            let (g, b) = (got[i].as_ref().unwrap(), base[i].as_ref().unwrap());
            assert!(b.data().iter().any(|&v| v != 0.0), "{} has zero gradient", l.params()[i].name);
            for (&a, &bv) in g.data().iter().zip(b.data()) {
                let want = c * bv;
                if c == 0.0 {
                    assert_eq!(a, 0.0);
                }
                worst = worst.max((a - want).abs() / a.abs().max(want.abs()).max(1e-300));
            }
        }
        println!("c = {c}: worst relative deviation {worst:.3e}");
        assert!(worst <= 1e-6, "c = {c}: {worst}");
    }
}

#[test]
fn mask_zeros_block_trunk_gradient_elementwise() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m_vals: Vec<f64> = (0..32).map(|i| if i % 3 == 0 { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
    let t = g.leaf(Tensor::randn(&[2, 4, 2, 2], 1.0, &mut rng), true);
    let m = g.constant(Tensor::new(&[2, 4, 2, 2], m_vals.clone()).unwrap());
    let h = g.mul(m, t).unwrap();
    let w: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = g.dot(h, w.clone()).unwrap();
    g.backward(loss).unwrap();
    let gt = g.grad(t).unwrap();
    for i in 0..32 {
        assert_eq!(gt.data()[i], m_vals[i] * w[i]);
        if m_vals[i] == 0.0 {
            assert_eq!(gt.data()[i], 0.0);
        }
    }
}

fn probe_input(seed: u64) -> Tensor<f32> {
    Tensor::randn(&[4, 3, 32, 32], 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn arl_zero_mask_probe_equals_trunk_only_network() {
    let spec = NetworkSpec::cifar(1);
    let net = Network::build(&spec).unwrap();
    let store = net.init_params::<f32>(8);
    let mut plain = spec.clone();
    plain.attention.mask = MaskKind::None;
    let trunk_net = Network::build(&plain).unwrap();
    let mut trunk_store = trunk_net.init_params::<f32>(99);
    let copied = trunk_store.copy_matching_from(&store);
    assert_eq!(copied, trunk_net.layout.params().len() + trunk_net.layout.buffers().len());

    let x = probe_input(1);
    let zero = response_probe(&net, &store, &x, &MaskOverrides::all(MaskOverride::Constant(0.0))).unwrap();
    let trunk = response_probe(&trunk_net, &trunk_store, &x, &MaskOverrides::default()).unwrap();
    let skipped = response_probe(&net, &store, &x, &MaskOverrides::all(MaskOverride::TrunkOnly)).unwrap();
    assert_eq!(zero, trunk);
    assert_eq!(zero, skipped);
    assert_eq!(zero.len(), 3);
}

#[test]
fn nal_half_mask_halves_stage_response() {
    let mut spec = NetworkSpec::cifar(1);
    spec.attention.combine = CombineMode::Nal;
    let net = Network::build(&spec).unwrap();
    let store = net.init_params::<f32>(4);
    let x = probe_input(2);
    let ones = response_probe(&net, &store, &x, &MaskOverrides::all(MaskOverride::Constant(1.0))).unwrap();
    for (stage, modules) in net.modules_by_stage().iter().enumerate() {
        assert_eq!(modules.len(), 1);
        let mut o = MaskOverrides::all(MaskOverride::Constant(1.0));
        o.modules.insert(modules[0], MaskOverride::Constant(0.5));
        let half = response_probe(&net, &store, &x, &o).unwrap();
        let (a, b) = (half[stage].mean_abs_response, ones[stage].mean_abs_response);
        let rel = (a - 0.5 * b).abs() / (0.5 * b);
        println!("{}: {a:.6e} vs half of {b:.6e} (rel {rel:.1e})", ones[stage].stage);
        assert!(rel <= 1e-6, "stage {stage}: {rel}");
    }
    // every mask at 0.5: halving compounds stage by stage
    let all = response_probe(&net, &store, &x, &MaskOverrides::all(MaskOverride::Constant(0.5))).unwrap();
    for (s, (a, b)) in all.iter().zip(&ones).enumerate() {
        let want = b.mean_abs_response * 0.5f64.powi(s as i32 + 1);
        assert!((a.mean_abs_response - want).abs() <= 1e-6 * want);
    }
}

#[test]
fn zero_network_on_zero_input_is_silent() {
    let net = Network::build(&NetworkSpec::cifar(1)).unwrap();
    let store = ParamStore::<f32>::zeros(&net.layout);
    let r = response_probe(&net, &store, &Tensor::zeros(&[2, 3, 32, 32]), &MaskOverrides::default()).unwrap();
    assert!(r.iter().all(|s| s.mean_abs_response >= 0.0 && s.mean_abs_response < 1e-3), "{r:?}");
}
