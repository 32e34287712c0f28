//! SGD training loop, augmentation, label noise, evaluation and the
//! per-stage response probe.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod noise;
pub mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use augment::{augment_cifar, augment_imagenet, Crop};
pub use checkpoint::{config_hash, Checkpoint};
pub use config::{lr_schedule, Augmentation, TrainConfig};
pub use eval::{evaluate, response_probe, topk_error, EvalReport, ProbeRecord, StageResponse};
pub use noise::{corrupt_labels, ConfusionMatrix};
pub use optim::{sgd_step, zero_velocity, SgdHyper};

use crate::blocks::{Forward, MaskOverrides, ParamStore};
use crate::data::{pixel_mean, Dataset};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;

const NOISE_STREAM: u64 = 7;
const PROBE_SAMPLES: usize = 64;

/// First line of every metric log.
pub const METRICS_HEADER: &str = "# resattn-metrics v1";
pub const PROBE_HEADER: &str = "# resattn-probe v1";
pub const METRICS_COLUMNS: &str = "iter\tlr\ttrain_loss\ttrain_acc\teval_err";

/// One metric-log line. `train_loss` and `train_acc` average the iterations
/// since the previous line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub iter: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_err: Option<f64>,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        let eval = self.eval_err.map_or("-".to_string(), |e| e.to_string());
        format!("{}\t{}\t{}\t{}\t{}", self.iter, self.lr, self.train_loss, self.train_acc, eval)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::Parse { line: 0, msg: format!("bad metric line `{line}`") };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(MetricRecord {
            iter: f[0].parse().map_err(|_| bad())?,
            lr: f[1].parse().map_err(|_| bad())?,
            train_loss: f[2].parse().map_err(|_| bad())?,
            train_acc: f[3].parse().map_err(|_| bad())?,
            eval_err: if f[4] == "-" { None } else { Some(f[4].parse().map_err(|_| bad())?) },
        })
    }
}

/// Reads a metric log written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        match i {
            0 if line != METRICS_HEADER => {
                return Err(Error::Parse { line: 1, msg: format!("expected `{METRICS_HEADER}`") });
            }
            0 | 1 => {}
            _ => out.push(MetricRecord::parse_line(&line).map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad metric line `{line}`"),
            })?),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f32,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// Directory for `metrics.tsv`, `probe.tsv` and checkpoints.
    pub dir: Option<PathBuf>,
    /// Stop after this many iterations in total (defaults to `total_iters`).
    pub until: Option<u64>,
}

pub struct Trainer {
    pub net: Network,
    pub cfg: TrainConfig,
    pub store: ParamStore<f32>,
    velocity: Vec<Tensor<f32>>,
    train: Dataset,
    eval: Option<Dataset>,
    mean: Tensor<f32>,
    rng: ChaCha8Rng,
    order: Vec<u32>,
    cursor: usize,
    iteration: u64,
    spec_text: String,
    train_text: String,
    window: (f64, f64, u64),
}

fn check_geometry(net: &Network, data: &Dataset) -> Result<()> {
    let s = net.input_shape();
    if data.image_shape() != [s.channels, s.height, s.width] {
        return Err(Error::Config(format!(
            "data images are {:?} but the network expects {}",
            data.image_shape(),
            s
        )));
    }
    if data.classes != net.num_classes() {
        return Err(Error::Config(format!(
            "data has {} classes but the network has {} outputs",
            data.classes,
            net.num_classes()
        )));
    }
    Ok(())
}

impl Trainer {
    /// Builds and initializes the network, computes the pixel mean of
    /// `train` and applies label noise once.
    pub fn new(spec: &NetworkSpec, cfg: &TrainConfig, mut train: Dataset, eval: Option<Dataset>) -> Result<Self> {
        cfg.validate()?;
        let net = Network::build(spec)?;
        check_geometry(&net, &train)?;
        if let Some(e) = &eval {
            check_geometry(&net, e)?;
        }
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if cfg.noise_clean_ratio < 1.0 {
            let q = ConfusionMatrix::uniform(train.classes, cfg.noise_clean_ratio)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(NOISE_STREAM);
            train.labels = corrupt_labels(&train.labels, &q, &mut rng)?;
        }
        let store = net.init_params::<f32>(cfg.seed);
        let velocity = zero_velocity(&store);
        let mean = pixel_mean(&train)?;
        Ok(Trainer {
            net,
            cfg: cfg.clone(),
            store,
            velocity,
            mean,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: Vec::new(),
            cursor: 0,
            iteration: 0,
            spec_text: spec.to_text(),
            train_text: cfg.to_text(),
            train,
            eval,
            window: (0.0, 0.0, 0),
        })
    }

    /// Restores a checkpoint written by a trainer with the same configs
    /// (unless `force`) and data.
    pub fn resume(
        ck: Checkpoint,
        spec: &NetworkSpec,
        cfg: &TrainConfig,
        train: Dataset,
        eval: Option<Dataset>,
        force: bool,
    ) -> Result<Self> {
        let mut t = Trainer::new(spec, cfg, train, eval)?;
        ck.check_hash(&t.config_hash(), force)?;
        if ck.store.layout() != &t.net.layout {
            return Err(Error::Checkpoint("checkpoint network does not match the network config".into()));
        }
        if ck.order.iter().any(|&i| i as usize >= t.train.len()) {
            return Err(Error::Checkpoint("checkpoint sample order does not fit the training set".into()));
        }
        t.store = ck.store;
        t.velocity = ck.velocity;
        t.mean = ck.mean;
        t.rng = ck.rng.restore();
        t.order = ck.order;
        t.cursor = ck.cursor as usize;
        t.iteration = ck.iteration;
        Ok(t)
    }

    pub fn config_hash(&self) -> [u8; 32] {
        config_hash(&self.spec_text, &self.train_text)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn mean(&self) -> &Tensor<f32> {
        &self.mean
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.train.labels
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            config_hash: self.config_hash(),
            spec_text: self.spec_text.clone(),
            train_text: self.train_text.clone(),
            rng: checkpoint::RngState::capture(&self.rng),
            order: self.order.clone(),
            cursor: self.cursor as u64,
            mean: self.mean.clone(),
            store: self.store.clone(),
            velocity: self.velocity.clone(),
        }
    }

    /// Next batch of sample indices; the epoch order is reshuffled whenever
    /// it runs out.
    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..self.train.len() as u32).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor] as usize);
            self.cursor += 1;
        }
        out
    }

    fn batch_input(&mut self, idx: &[usize]) -> Tensor<f32> {
        let [c, h, w] = self.train.image_shape();
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            let img = self.train.image(i);
            data.extend(match self.cfg.augmentation {
                Augmentation::None => augment::normalize(img, &self.mean),
                Augmentation::Cifar => augment_cifar(img, &self.mean, &mut self.rng),
                Augmentation::Imagenet => augment_imagenet(img, &self.mean, &mut self.rng),
            });
        }
        Tensor::new(&[idx.len(), c, h, w], data).expect("batch shape")
    }

    /// Forward, cross-entropy, backward and one optimizer step.
    pub fn step(&mut self) -> Result<StepStats> {
        let lr = lr_schedule(self.iteration, &self.cfg);
        let idx = self.next_batch();
        let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();
        let x = self.batch_input(&idx);
        let mut ctx = Forward::train(&mut self.store);
        let x = ctx.input(x);
        let out = self.net.forward(&mut ctx, x)?;
        let loss_var = ctx.graph.softmax_cross_entropy(out.logits, &labels)?;
        let loss = ctx.graph.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.iteration });
        }
        let err = topk_error(ctx.graph.value(out.logits).data(), self.net.num_classes(), &labels, 1);
        let grads = ctx.backward_params(loss_var)?;
        drop(ctx);
        let hp = SgdHyper {
            lr,
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
            nesterov: self.cfg.nesterov,
        };
        sgd_step(&mut self.store, &grads, &mut self.velocity, &hp, self.iteration)?;
        self.iteration += 1;
        Ok(StepStats { iteration: self.iteration, lr, loss, accuracy: 1.0 - err })
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        evaluate(&self.net, &self.store, data, &self.mean, self.cfg.batch_size)
    }

    /// Response probe on the first samples of the eval set (or training set).
    pub fn probe(&self) -> Result<ProbeRecord> {
        let data = self.eval.as_ref().unwrap_or(&self.train);
        let idx: Vec<usize> = (0..data.len().min(PROBE_SAMPLES)).collect();
        let batch = eval::stack_normalized(data, &idx, &self.mean);
        let stages = response_probe(&self.net, &self.store, &batch, &MaskOverrides::default())?;
        Ok(ProbeRecord { iteration: self.iteration, stages })
    }

    /// Trains to `out.until` (or `total_iters`), appending to the metric log
    /// and writing checkpoints under `out.dir`. A non-finite loss or gradient
    /// writes `diagnostic.ckpt` (parameters as they were before the failing
    /// step) and returns the error.
    pub fn run(&mut self, out: &RunOutput) -> Result<Vec<MetricRecord>> {
        let until = out.until.unwrap_or(self.cfg.total_iters).min(self.cfg.total_iters);
        let mut metrics = match &out.dir {
            Some(dir) => Some(open_log(&dir.join("metrics.tsv"), METRICS_HEADER, METRICS_COLUMNS)?),
            None => None,
        };
        let mut probes = match (&out.dir, self.cfg.probe_every) {
            (Some(dir), p) if p > 0 => Some(open_log(&dir.join("probe.tsv"), PROBE_HEADER, "iter\tstage\tmean_abs_response")?),
            _ => None,
        };
        let mut records = Vec::new();
        while self.iteration < until {
            let s = match self.step() {
                Ok(s) => s,
                Err(e) => {
                    if let (Some(dir), Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. }) = (&out.dir, &e) {
                        self.checkpoint().save(&dir.join("diagnostic.ckpt"))?;
                    }
                    return Err(e);
                }
            };
            self.window.0 += s.loss as f64;
            self.window.1 += s.accuracy;
            self.window.2 += 1;
            let it = s.iteration;
            let last = it == self.cfg.total_iters;
            let ckpt = last || (self.cfg.checkpoint_every > 0 && it % self.cfg.checkpoint_every == 0);
            if it % self.cfg.log_every == 0 || ckpt {
                let eval_err = match (&self.eval, ckpt) {
                    (Some(e), true) => Some(self.evaluate(e)?.top1_error),
                    _ => None,
                };
                let n = self.window.2 as f64;
                let rec = MetricRecord {
                    iter: it,
                    lr: s.lr,
                    train_loss: self.window.0 / n,
                    train_acc: self.window.1 / n,
                    eval_err,
                };
                self.window = (0.0, 0.0, 0);
                if let Some(f) = metrics.as_mut() {
                    writeln!(f, "{}", rec.to_line())?;
                    f.flush()?;
                }
                records.push(rec);
            }
            if let Some(f) = probes.as_mut() {
                if it % self.cfg.probe_every == 0 {
                    for r in self.probe()?.stages {
                        writeln!(f, "{it}\t{}\t{}", r.stage, r.mean_abs_response)?;
                    }
                    f.flush()?;
                }
            }
            if let (Some(dir), true) = (&out.dir, ckpt) {
                let ck = self.checkpoint();
                ck.save(&dir.join(format!("checkpoint-{it:07}.ckpt")))?;
                ck.save(&dir.join("latest.ckpt"))?;
            }
        }
        Ok(records)
    }
}

/// Opens an append-only log, writing the header and column line if new.
fn open_log(path: &Path, header: &str, columns: &str) -> Result<File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
        writeln!(f, "{columns}")?;
    }
    Ok(f)
}

/// Runs the whole schedule. See [`Trainer::run`].
pub fn train(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    data: Dataset,
    eval: Option<Dataset>,
    out: &RunOutput,
) -> Result<(Trainer, Vec<MetricRecord>)> {
    let mut t = Trainer::new(spec, cfg, data, eval)?;
    let records = t.run(out)?;
    Ok((t, records))
}
