mod data;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use resattn::autodiff::OpKind;
use resattn::blocks::{CombineMode, MaskActivation, MaskKind, MaskOverride, MaskOverrides};
use resattn::data::Split;
use resattn::gradcheck::suite::{all_cases, block_cases, module_cases, primitive_cases, Case, Scope};
use resattn::gradcheck::GradcheckConfig;
use resattn::network::{cost_model, Network, NetworkSpec};
use resattn::train::checkpoint::hex;
use resattn::train::eval::stack_normalized;
use resattn::train::{evaluate, response_probe, Augmentation, Checkpoint, RunOutput, TrainConfig, Trainer, PROBE_HEADER};

#[derive(Parser)]
#[command(name = "resattn", version, about = "Residual attention networks: cost reports, gradient checks, training and probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter, FLOP and trunk-depth report.
    Summary(SummaryArgs),
    /// Finite-difference gradient checks; exits nonzero on any failure.
    Gradcheck(GradcheckArgs),
    /// Train a network, writing checkpoints and metric logs to --out.
    Train(TrainArgs),
    /// Top-1 (and top-5) error of a checkpoint.
    Eval(EvalArgs),
    /// Mean absolute response of every stage's output.
    Probe(ProbeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Combine {
    Arl,
    Nal,
}

#[derive(Clone, Copy, ValueEnum)]
enum Activation {
    Mixed,
    Channel,
    Spatial,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mask {
    Encdec,
    Localconv,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradScope {
    Primitive,
    Block,
    Module,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Conv2d,
    MaxPool,
    Upsample,
    BatchNorm,
    Relu,
    Sigmoid,
    Add,
    Mul,
    ResidualAttention,
    Linear,
    GlobalAvgPool,
    SoftmaxCrossEntropy,
    ChannelL2Norm,
    SpatialStandardize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentArg {
    None,
    Cifar,
    Imagenet,
}

#[derive(Args, Clone, Default)]
struct NetworkArgs {
    /// Builtin network name or path to a TOML spec file.
    #[arg(long)]
    spec: Option<String>,
    /// Modules per stage for `cifar-attention`.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum)]
    combine: Option<Combine>,
    #[arg(long, value_enum)]
    activation: Option<Activation>,
    #[arg(long, value_enum)]
    mask: Option<Mask>,
}

#[derive(Args)]
struct SummaryArgs {
    /// Builtin name or spec file (alternative to --spec), optionally followed by `m=N`.
    #[arg(num_args = 0..=2)]
    name: Vec<String>,
    #[command(flatten)]
    net: NetworkArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(value_enum, default_value = "all")]
    scope: GradScope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only cases whose name contains this (`attention-module`, `soft-mask-branch`, ...);
    /// under `block` the attention-module cases are searched too.
    #[arg(long)]
    block: Option<String>,
    #[arg(long, value_enum)]
    combine: Option<Combine>,
    #[arg(long, value_enum)]
    activation: Option<Activation>,
    /// Corrupt one op's backward rule; the affected checks must then fail.
    #[arg(long, value_enum)]
    inject_fault: Option<Fault>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    net: NetworkArgs,
    /// Training preset (`cifar`, `imagenet`) or TOML file with a `[train]` table.
    #[arg(long)]
    config: Option<String>,
    /// Training data (see `eval --help` for the accepted forms).
    #[arg(long)]
    data: String,
    /// Held-out data evaluated at checkpoints.
    #[arg(long)]
    eval_data: Option<String>,
    /// Keep only the first N training samples.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    noise_clean_ratio: Option<f64>,
    #[arg(long, value_enum)]
    augmentation: Option<AugmentArg>,
    /// Stop after this many iterations in total (the schedule still spans total_iters).
    #[arg(long)]
    iters: Option<u64>,
    /// Continue from a checkpoint; spec and config default to the ones stored in it.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Resume even if the network or training config differs from the checkpoint's.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DataArgs {
    /// `synthetic[:samples=N,seed=S,size=P,classes=K,channels=C,separability=X]`,
    /// a CIFAR binary directory, a batch file, or `cifar100:<file>`.
    #[arg(long)]
    data: String,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Number of leading samples in the probe batch.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Evaluate the checkpoint's weights under this combine rule.
    #[arg(long, value_enum)]
    combine: Option<Combine>,
    /// Replace every soft mask by this constant.
    #[arg(long, conflicts_with = "trunk_only")]
    mask_value: Option<f64>,
    /// Skip every mask branch and pass the trunk output through.
    #[arg(long)]
    trunk_only: bool,
    /// Per-module constant mask, `INDEX=VALUE`; overrides --mask-value for that module.
    #[arg(long = "module-mask")]
    module_mask: Vec<String>,
    #[arg(long)]
    json: bool,
}

impl From<Combine> for CombineMode {
    fn from(c: Combine) -> Self {
        match c {
            Combine::Arl => CombineMode::Arl,
            Combine::Nal => CombineMode::Nal,
        }
    }
}

impl From<Activation> for MaskActivation {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Mixed => MaskActivation::Mixed,
            Activation::Channel => MaskActivation::Channel,
            Activation::Spatial => MaskActivation::Spatial,
        }
    }
}

impl From<Fault> for OpKind {
    fn from(f: Fault) -> Self {
        match f {
            Fault::Conv2d => OpKind::Conv2d,
            Fault::MaxPool => OpKind::MaxPool2d,
            Fault::Upsample => OpKind::Upsample,
            Fault::BatchNorm => OpKind::BatchNorm,
            Fault::Relu => OpKind::Relu,
            Fault::Sigmoid => OpKind::Sigmoid,
            Fault::Add => OpKind::Add,
            Fault::Mul => OpKind::Mul,
            Fault::ResidualAttention => OpKind::ResidualAttention,
            Fault::Linear => OpKind::Linear,
            Fault::GlobalAvgPool => OpKind::GlobalAvgPool,
            Fault::SoftmaxCrossEntropy => OpKind::SoftmaxCrossEntropy,
            Fault::ChannelL2Norm => OpKind::ChannelL2Norm,
            Fault::SpatialStandardize => OpKind::SpatialStandardize,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Spec from a builtin name or file, then the command-line overrides.
fn resolve_spec(source: &str, m: Option<usize>, net: &NetworkArgs) -> Result<NetworkSpec> {
    let mut spec = if Path::new(source).is_file() {
        let text = std::fs::read_to_string(source).with_context(|| format!("reading {source}"))?;
        NetworkSpec::parse(&text).with_context(|| format!("parsing {source}"))?
    } else {
        NetworkSpec::builtin(source, m.or(net.m))?
    };
    apply_overrides(&mut spec, net);
    Ok(spec)
}

fn apply_overrides(spec: &mut NetworkSpec, net: &NetworkArgs) {
    if let Some(c) = net.combine {
        spec.attention.combine = c.into();
    }
    if let Some(a) = net.activation {
        spec.attention.activation = a.into();
    }
    match net.mask {
        Some(Mask::Encdec) => spec.attention.mask = MaskKind::Encdec,
        Some(Mask::Localconv) => spec.attention.mask = MaskKind::Localconv,
        None => {}
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn summary(args: SummaryArgs) -> Result<()> {
    let mut m = None;
    let mut source = args.net.spec.clone();
    for tok in &args.name {
        match tok.strip_prefix("m=") {
            Some(v) => m = Some(v.parse().with_context(|| format!("invalid `{tok}`"))?),
            None if source.is_none() => source = Some(tok.clone()),
            None => bail!("unexpected argument `{tok}`"),
        }
    }
    let source = source.context("give a builtin network name or --spec FILE")?;
    let spec = resolve_spec(&source, m, &args.net)?;
    let net = Network::build(&spec)?;
    let cost = cost_model(&net.layer_graph()?);
    let name = spec.display_name();
    if args.json {
        return print_json(&report::Summary::new(name, net.input_shape().to_string(), net.num_classes(), &cost));
    }
    println!("network      {name}");
    println!("input        {}", net.input_shape());
    println!("classes      {}", net.num_classes());
    println!("params       {} ({:.2}M)", cost.params, cost.params as f64 / 1e6);
    println!("flops        {} ({:.2}G, 1 multiply-add = 1)", cost.flops, cost.flops as f64 / 1e9);
    println!("trunk depth  {}", cost.trunk_depth);
    println!();
    println!("{:<8} {:>12} {:>16} {:>6}", "stage", "params", "flops", "depth");
    for s in &cost.stages {
        println!("{:<8} {:>12} {:>16} {:>6}", s.name, s.params, s.flops, s.trunk_depth);
    }
    Ok(())
}

fn scope_name(s: Scope) -> &'static str {
    match s {
        Scope::Primitive => "primitive",
        Scope::Block => "block",
        Scope::Module => "module",
    }
}

/// Returns whether every selected case passed.
fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let cases: Vec<Case> = match args.scope {
        GradScope::Primitive => primitive_cases(args.seed),
        GradScope::Block if args.block.is_some() => block_cases(args.seed).into_iter().chain(module_cases(args.seed)).collect(),
        GradScope::Block => block_cases(args.seed),
        GradScope::Module => module_cases(args.seed),
        GradScope::All => all_cases(args.seed),
    };
    let block = args.block.as_ref().map(|b| b.replace('-', "_"));
    let cases: Vec<Case> = cases
        .into_iter()
        .filter(|c| block.as_ref().is_none_or(|b| c.name.contains(b.as_str())))
        .filter(|c| args.combine.is_none_or(|m| c.scope != Scope::Module || c.name.contains(&format!(" {} ", CombineMode::from(m)))))
        .filter(|c| args.activation.is_none_or(|a| c.scope != Scope::Module || c.name.ends_with(&MaskActivation::from(a).to_string())))
        .collect();
    if cases.is_empty() {
        bail!("no gradient check matches the given filters");
    }
    let cfg = GradcheckConfig { seed: args.seed, fault: args.inject_fault.map(OpKind::from), ..Default::default() };
    let mut out = Vec::new();
    for case in &cases {
        let r = case.run(&cfg)?;
        let checked = r.inputs.iter().map(|i| i.checked).sum();
        if !args.json {
            println!("{} {:<44} max rel err {:.3e}", if r.passed() { "PASS" } else { "FAIL" }, case.name, r.max_rel_error());
        }
        out.push(report::GradcheckCase {
            name: case.name.clone(),
            scope: scope_name(case.scope),
            passed: r.passed(),
            max_rel_error: r.max_rel_error(),
            checked,
        });
    }
    let passed = out.iter().all(|c| c.passed);
    if args.json {
        print_json(&report::Gradcheck { schema: report::GRADCHECK_SCHEMA, seed: args.seed, tol: cfg.tol, passed, cases: out })?;
    } else {
        println!("{} of {} checks passed (tol {:.0e})", out.iter().filter(|c| c.passed).count(), out.len(), cfg.tol);
    }
    Ok(passed)
}

fn load_config(source: &str) -> Result<TrainConfig> {
    if Path::new(source).is_file() {
        let text = std::fs::read_to_string(source).with_context(|| format!("reading {source}"))?;
        Ok(TrainConfig::parse(&text).with_context(|| format!("parsing {source}"))?)
    } else {
        Ok(TrainConfig::preset(source)?)
    }
}

fn defaults_for(net: &Network) -> data::Defaults {
    let s = net.input_shape();
    data::Defaults { classes: net.num_classes(), channels: s.channels, size: s.height }
}

fn train(args: TrainArgs) -> Result<()> {
    let ck = args.resume.as_ref().map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))).transpose()?;
    let mut spec = match (&args.net.spec, &ck) {
        (Some(s), _) => resolve_spec(s, None, &args.net)?,
        (None, Some(ck)) => NetworkSpec::parse(&ck.spec_text)?,
        (None, None) => bail!("--spec is required when not resuming"),
    };
    apply_overrides(&mut spec, &args.net);
    let mut cfg = match (&args.config, &ck) {
        (Some(c), _) => load_config(c)?,
        (None, Some(ck)) => TrainConfig::parse(&ck.train_text)?,
        (None, None) => TrainConfig::cifar(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    if let Some(r) = args.noise_clean_ratio {
        cfg.noise_clean_ratio = r;
    }
    match args.augmentation {
        Some(AugmentArg::None) => cfg.augmentation = Augmentation::None,
        Some(AugmentArg::Cifar) => cfg.augmentation = Augmentation::Cifar,
        Some(AugmentArg::Imagenet) => cfg.augmentation = Augmentation::Imagenet,
        None => {}
    }
    cfg.validate()?;
    let shape = Network::build(&spec)?;
    let defaults = defaults_for(&shape);
    let train_data = data::load(&args.data, Split::Train, defaults, args.subset)?;
    let eval_data = args.eval_data.as_deref().map(|d| data::load(d, Split::Test, defaults, None)).transpose()?;
    let mut trainer = match ck {
        Some(ck) => Trainer::resume(ck, &spec, &cfg, train_data, eval_data, args.force)?,
        None => Trainer::new(&spec, &cfg, train_data, eval_data)?,
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let until = args.iters.unwrap_or(cfg.total_iters).min(cfg.total_iters);
    let mut last = None;
    while trainer.iteration() < until {
        let next = (trainer.iteration() / cfg.log_every + 1) * cfg.log_every;
        let out = RunOutput { dir: Some(args.out.clone()), until: Some(next.min(until)) };
        for r in trainer.run(&out)? {
            if !args.json {
                let eval = r.eval_err.map_or(String::new(), |e| format!("  eval_err {e:.4}"));
                eprintln!("iter {:>7}  lr {:.4}  loss {:.4}  acc {:.4}{eval}", r.iter, r.lr, r.train_loss, r.train_acc);
            }
            last = Some(r);
        }
    }
    let latest = args.out.join("latest.ckpt");
    trainer.checkpoint().save(&latest)?;
    let hash = hex(&trainer.config_hash());
    if args.json {
        return print_json(&report::Train {
            schema: report::TRAIN_SCHEMA,
            out: args.out.display().to_string(),
            iteration: trainer.iteration(),
            config_hash: hash,
            train_loss: last.as_ref().map(|r| r.train_loss),
            train_acc: last.as_ref().map(|r| r.train_acc),
            checkpoint: latest.display().to_string(),
        });
    }
    println!("trained to iteration {} (config {}), checkpoint {}", trainer.iteration(), &hash[..12], latest.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, NetworkSpec)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let spec = NetworkSpec::parse(&ck.spec_text)?;
    Ok((ck, spec))
}

fn eval(args: EvalArgs) -> Result<()> {
    let (ck, spec) = load_checkpoint(&args.checkpoint)?;
    let net = Network::build(&spec)?;
    let data = data::load(&args.data.data, args.data.split.into(), defaults_for(&net), args.data.subset)?;
    let report = evaluate(&net, &ck.store, &data, &ck.mean, args.batch_size)?;
    if args.json {
        return print_json(&report::Eval { schema: report::EVAL_SCHEMA, iteration: ck.iteration, report });
    }
    println!("samples      {}", report.samples);
    println!("top-1 error  {:.4}", report.top1_error);
    if let Some(t5) = report.top5_error {
        println!("top-5 error  {t5:.4}");
    }
    Ok(())
}

fn probe(args: ProbeArgs) -> Result<()> {
    let (ck, mut spec) = load_checkpoint(&args.checkpoint)?;
    if let Some(c) = args.combine {
        spec.attention.combine = c.into();
    }
    let net = Network::build(&spec)?;
    let data = data::load(&args.data.data, args.data.split.into(), defaults_for(&net), args.data.subset)?;
    if data.is_empty() {
        bail!("probe data is empty");
    }
    let mut overrides = MaskOverrides::default();
    if args.trunk_only {
        overrides.all = Some(MaskOverride::TrunkOnly);
    } else if let Some(v) = args.mask_value {
        overrides.all = Some(MaskOverride::Constant(v));
    }
    for spec in &args.module_mask {
        let (i, v) = spec.split_once('=').with_context(|| format!("expected INDEX=VALUE, got `{spec}`"))?;
        let i: usize = i.parse().with_context(|| format!("invalid module index `{i}`"))?;
        if i >= net.num_modules() {
            bail!("module {i} does not exist (the network has {})", net.num_modules());
        }
        overrides.modules.insert(i, MaskOverride::Constant(v.parse().with_context(|| format!("invalid mask value `{v}`"))?));
    }
    let idx: Vec<usize> = (0..data.len().min(args.samples.max(1))).collect();
    let batch = stack_normalized(&data, &idx, &ck.mean);
    let rows = response_probe(&net, &ck.store, &batch, &overrides)?;
    if args.json {
        return print_json(&report::Probe { schema: report::PROBE_SCHEMA, iteration: ck.iteration, samples: idx.len(), rows });
    }
    println!("{PROBE_HEADER}");
    println!("stage\tmean_abs_response");
    for r in rows {
        println!("{}\t{}", r.stage, r.mean_abs_response);
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RESATTN_THREADS") {
        let n: usize = v.parse().with_context(|| format!("RESATTN_THREADS=`{v}` is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Summary(a) => summary(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train(a).map(|()| true),
        Command::Eval(a) => eval(a).map(|()| true),
        Command::Probe(a) => probe(a).map(|()| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
