//! Parameter layout (names, shapes, partition tags) and parameter storage.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::RunningStats;
use crate::tensor::{Float, Tensor};

/// Which branch a parameter belongs to: mask (θ), trunk (φ) or the shared stem/head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Trunk,
    Mask,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    FcWeight,
    FcBias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Weight decay applies to conv and fully-connected weights only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::FcWeight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub partition: Partition,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferSpec {
    pub name: String,
    pub channels: usize,
}

/// Symbolic description of every learnable tensor and batch-norm buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    params: Vec<ParamSpec>,
    buffers: Vec<BufferSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind, partition: Partition) -> ParamId {
        self.params.push(ParamSpec { name: name.into(), shape: shape.to_vec(), kind, partition });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.buffers.push(BufferSpec { name: name.into(), channels });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn buffers(&self) -> &[BufferSpec] {
        &self.buffers
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total learnable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    pub fn numel_by_partition(&self) -> HashMap<Partition, usize> {
        let mut out = HashMap::new();
        for p in &self.params {
            *out.entry(p.partition).or_insert(0) += p.numel();
        }
        out
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Parameter values plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    layout: ParamLayout,
    values: Vec<Tensor<T>>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Float> ParamStore<T> {
    /// He fan-in normal init for conv weights, `N(0, 1/fan_in)` for the
    /// classifier, gamma = 1, beta = 0, zero classifier bias.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = layout
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::ConvWeight => {
                    let fan_in: usize = p.shape[1..].iter().product();
                    Tensor::randn(&p.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                }
                ParamKind::FcWeight => Tensor::randn(&p.shape, (1.0 / p.shape[1] as f64).sqrt(), &mut rng),
                ParamKind::BnGamma => Tensor::full(&p.shape, T::one()),
                ParamKind::BnBeta | ParamKind::FcBias => Tensor::zeros(&p.shape),
            })
            .collect();
        Self::with_values(layout, values)
    }

    pub fn zeros(layout: &ParamLayout) -> Self {
        let values = layout.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Self::with_values(layout, values)
    }

    fn with_values(layout: &ParamLayout, values: Vec<Tensor<T>>) -> Self {
        let stats = layout.buffers.iter().map(|b| RunningStats::new(b.channels)).collect();
        ParamStore { layout: layout.clone(), values, stats }
    }

    /// Rebuilds a store from raw parts; shapes must match the layout.
    pub fn from_parts(layout: &ParamLayout, values: Vec<Tensor<T>>, stats: Vec<RunningStats<T>>) -> crate::Result<Self> {
        let bad = values.len() != layout.params.len()
            || stats.len() != layout.buffers.len()
            || values.iter().zip(&layout.params).any(|(v, p)| v.shape() != p.shape.as_slice())
            || stats.iter().zip(&layout.buffers).any(|(s, b)| s.channels() != b.channels || s.var.len() != b.channels);
        if bad {
            return Err(crate::Error::Checkpoint("parameter shapes do not match the network layout".into()));
        }
        Ok(ParamStore { layout: layout.clone(), values, stats })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn stats(&self, id: BufferId) -> &RunningStats<T> {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: BufferId) -> &mut RunningStats<T> {
        &mut self.stats[id.0]
    }

    pub fn all_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn numel(&self) -> usize {
        self.layout.numel()
    }

    /// Copies every parameter and buffer whose name and shape match one in
    /// `other`. Returns the number of tensors copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> usize {
        let by_name: HashMap<&str, usize> =
            other.layout.params.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
        let mut copied = 0;
        for (i, p) in self.layout.params.iter().enumerate() {
            if let Some(&j) = by_name.get(p.name.as_str()) {
                if other.values[j].shape() == self.values[i].shape() {
                    self.values[i] = other.values[j].clone();
                    copied += 1;
                }
            }
        }
        let bufs: HashMap<&str, usize> =
            other.layout.buffers.iter().enumerate().map(|(i, b)| (b.name.as_str(), i)).collect();
        for (i, b) in self.layout.buffers.iter().enumerate() {
            if let Some(&j) = bufs.get(b.name.as_str()) {
                if other.stats[j].channels() == b.channels {
                    self.stats[i] = other.stats[j].clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            layout: self.layout.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                    var: s.var.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}
