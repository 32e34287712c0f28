use resattn::blocks::{Forward, MaskKind, Partition};
use resattn::network::cost::partition_cost;
use resattn::network::{cost_model, Network, NetworkSpec};
use resattn::Tensor;

fn report(spec: &NetworkSpec) -> resattn::network::CostReport {
    let net = Network::build(spec).unwrap();
    cost_model(&net.layer_graph().unwrap())
}

fn within(actual: u64, target: f64, rel: f64) -> bool {
    ((actual as f64 - target) / target).abs() <= rel
}

#[test]
fn print_costs() {
    for (name, spec) in [
        ("attention-56", NetworkSpec::attention56()),
        ("attention-92", NetworkSpec::attention92()),
        ("resnet-152", NetworkSpec::resnet(152).unwrap()),
        ("resnet-164", NetworkSpec::resnet(164).unwrap()),
        ("cifar m=1", NetworkSpec::cifar(1)),
        ("cifar m=2", NetworkSpec::cifar(2)),
    ] {
        let r = report(&spec);
        println!("{name:<14} params {:>11} flops {:>14} depth {}", r.params, r.flops, r.trunk_depth);
    }
}

#[test]
fn attention56_imagenet() {
    let r = report(&NetworkSpec::attention56());
    assert_eq!(r.trunk_depth, 56);
    assert!(within(r.params, 31.9e6, 0.03), "{}", r.params);
    assert!(within(r.flops, 6.2e9, 0.05), "{}", r.flops);
}

#[test]
fn attention92_imagenet() {
    let r = report(&NetworkSpec::attention92());
    assert_eq!(r.trunk_depth, 92);
    assert!(within(r.params, 51.3e6, 0.03), "{}", r.params);
    assert!(within(r.flops, 10.4e9, 0.05), "{}", r.flops);
}

#[test]
fn resnet152_calibration() {
    let r = report(&NetworkSpec::resnet(152).unwrap());
    assert!(within(r.params, 60.2e6, 0.03), "{}", r.params);
    assert!(within(r.flops, 11.3e9, 0.05), "{}", r.flops);
}

#[test]
fn resnet164_cifar_params() {
    let r = report(&NetworkSpec::resnet(164).unwrap());
    assert!(within(r.params, 1.7e6, 0.05), "{}", r.params);
    assert_eq!(r.trunk_depth, 164);
}

#[test]
fn attention92_cifar_params() {
    let r = report(&NetworkSpec::cifar(2));
    assert!(within(r.params, 1.9e6, 0.05), "{}", r.params);
}

#[test]
fn cifar_trunk_depth_formula() {
    for m in 1..=6 {
        assert_eq!(report(&NetworkSpec::cifar(m)).trunk_depth, 36 * m + 20, "m = {m}");
    }
}

#[test]
fn totals_are_stage_sums() {
    let r = report(&NetworkSpec::attention92());
    assert_eq!(r.params, r.stages.iter().map(|s| s.params).sum::<u64>());
    assert_eq!(r.flops, r.stages.iter().map(|s| s.flops).sum::<u64>());
    assert_eq!(r.trunk_depth, r.stages.iter().map(|s| s.trunk_depth).sum::<usize>());
    let names: Vec<_> = r.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["stem", "stage1", "stage2", "stage3", "stage4", "head"]);
}

#[test]
fn param_count_matches_layout() {
    for spec in [NetworkSpec::attention56(), NetworkSpec::cifar(1), NetworkSpec::resnet(164).unwrap()] {
        let net = Network::build(&spec).unwrap();
        let r = cost_model(&net.layer_graph().unwrap());
        assert_eq!(r.params as usize, net.layout.numel());
    }
}

#[test]
fn local_conv_mask_matches_encdec_flops() {
    let mut enc = NetworkSpec::attention56();
    let mut loc = enc.clone();
    loc.attention.mask = MaskKind::Localconv;
    enc.attention.mask = MaskKind::Encdec;
    let ge = Network::build(&enc).unwrap().layer_graph().unwrap();
    let gl = Network::build(&loc).unwrap().layer_graph().unwrap();
    let (_, fe) = partition_cost(&ge, Partition::Mask);
    let (_, fl) = partition_cost(&gl, Partition::Mask);
    assert!(within(fl, fe as f64, 0.10), "local {fl} vs encdec {fe}");
}

#[test]
fn every_builder_validates_and_runs() {
    let mut specs = vec![NetworkSpec::cifar(1), NetworkSpec::resnet(164).unwrap(), NetworkSpec::resnet(11).unwrap()];
    for name in ["attention-56-imagenet", "attention-92-imagenet", "resnet-152"] {
        let mut s = NetworkSpec::builtin(name, None).unwrap();
        s.network.input_size = 64;
        s.network.num_classes = 7;
        specs.push(s);
    }
    for spec in specs {
        let net = Network::build(&spec).unwrap();
        net.layer_graph().unwrap().validate(&net.layout).unwrap();
        let store = net.init_params::<f32>(3);
        let mut ctx = Forward::eval(&store);
        let s = spec.network.input_size;
        let x = ctx.input(Tensor::full(&[1, 3, s, s], 0.1));
        let out = net.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.graph.shape(out.logits), &[1, spec.network.num_classes]);
        assert!(ctx.graph.value(out.logits).data().iter().all(|v| v.is_finite()));
    }
}
