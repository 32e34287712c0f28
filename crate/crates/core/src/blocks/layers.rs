//! Parameterized layers and the forward-pass context that binds parameters
//! to graph leaves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{BufferId, ParamId, ParamKind, ParamLayout, ParamStore, Partition};
use crate::autodiff::{BnMode, Graph, Var};
use crate::error::Result;
use crate::network::graph::{LayerGraph, NodeId};
use crate::tensor::{Float, Tensor};

/// Max-pool window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    /// 3x3 stride 2 padding 1: halves even extents (56 -> 28 -> 14 -> 7).
    pub const IMAGENET: PoolGeometry = PoolGeometry { window: 3, stride: 2, padding: 1 };
    /// 2x2 stride 2.
    pub const CIFAR: PoolGeometry = PoolGeometry { window: 2, stride: 2, padding: 0 };

    /// Output extent, or `None` if the window does not fit.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.window == 0 || self.stride == 0 || self.padding >= self.window || padded < self.window {
            return None;
        }
        Some((padded - self.window) / self.stride + 1)
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub partition: Partition,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        partition: Partition,
    ) -> Self {
        let weight =
            layout.add_param(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], ParamKind::ConvWeight, partition);
        ConvLayer { weight, in_ch, out_ch, kernel, stride, padding, partition }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.graph.conv2d(x, w, self.stride, self.padding)
    }

    pub fn trace(&self, lg: &mut LayerGraph, x: NodeId, shortcut: bool) -> Result<NodeId> {
        lg.conv(x, self, shortcut)
    }
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
    pub channels: usize,
    pub partition: Partition,
}

impl BnLayer {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, partition: Partition) -> Self {
        let gamma = layout.add_param(format!("{name}.gamma"), &[channels], ParamKind::BnGamma, partition);
        let beta = layout.add_param(format!("{name}.beta"), &[channels], ParamKind::BnBeta, partition);
        let stats = layout.add_buffer(format!("{name}.running"), channels);
        BnLayer { gamma, beta, stats, channels, partition }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        ctx.batch_norm(self, x)
    }

    /// BN followed by ReLU.
    pub fn forward_relu<T: Float>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.batch_norm(self, x)?;
        Ok(ctx.graph.relu(y))
    }

    pub fn trace_relu(&self, lg: &mut LayerGraph, x: NodeId) -> Result<NodeId> {
        let y = lg.batch_norm(x, self)?;
        Ok(lg.relu(y, self.partition))
    }
}

/// Replacement for a module's soft mask output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskOverride {
    /// `M` is a constant tensor of this value (no gradient to the mask branch).
    Constant(f64),
    /// The mask branch is skipped and the trunk output passes through uncombined.
    TrunkOnly,
}

/// Per-module mask overrides, keyed by the module's global index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskOverrides {
    pub all: Option<MaskOverride>,
    pub modules: BTreeMap<usize, MaskOverride>,
}

impl MaskOverrides {
    pub fn all(o: MaskOverride) -> Self {
        MaskOverrides { all: Some(o), modules: BTreeMap::new() }
    }

    pub fn get(&self, module: usize) -> Option<MaskOverride> {
        self.modules.get(&module).copied().or(self.all)
    }
}

/// Graph handles of one attention module's intermediate tensors.
#[derive(Clone, Copy, Debug)]
pub struct ModuleTrace {
    pub index: usize,
    pub trunk: Var,
    pub mask: Option<Var>,
    pub combined: Var,
    pub output: Var,
}

enum Store<'a, T: Float> {
    Shared(&'a ParamStore<T>),
    Exclusive(&'a mut ParamStore<T>),
}

impl<T: Float> Store<'_, T> {
    fn get(&self) -> &ParamStore<T> {
        match self {
            Store::Shared(s) => s,
            Store::Exclusive(s) => s,
        }
    }
}

/// State of one forward pass: the tape, the parameter store, lazily bound
/// parameter leaves, batch-norm mode and mask overrides.
pub struct Forward<'a, T: Float = f32> {
    pub graph: Graph<T>,
    store: Store<'a, T>,
    bound: Vec<Option<Var>>,
    params_require_grad: bool,
    overrides: MaskOverrides,
    traces: Vec<ModuleTrace>,
}

impl<'a, T: Float> Forward<'a, T> {
    /// Batch norm uses batch statistics and updates the running buffers.
    pub fn train(store: &'a mut ParamStore<T>) -> Self {
        let n = store.layout().params().len();
        Self::with_store(Store::Exclusive(store), n)
    }

    /// Batch norm uses the running buffers.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        let n = store.layout().params().len();
        Self::with_store(Store::Shared(store), n)
    }

    fn with_store(store: Store<'a, T>, n: usize) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            bound: vec![None; n],
            params_require_grad: true,
            overrides: MaskOverrides::default(),
            traces: Vec::new(),
        }
    }

    /// Records onto an existing tape instead of a fresh one.
    pub fn with_graph(mut self, graph: Graph<T>) -> Self {
        self.graph = graph;
        self
    }

    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }

    /// Uses `v` as the leaf for parameter `id` instead of the stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.index()] = Some(v);
    }

    pub fn is_train(&self) -> bool {
        matches!(self.store, Store::Exclusive(_))
    }

    /// Parameters bound after this call are constants (no gradient buffers).
    pub fn set_param_grads(&mut self, on: bool) {
        self.params_require_grad = on;
    }

    pub fn set_overrides(&mut self, overrides: MaskOverrides) {
        self.overrides = overrides;
    }

    pub fn mask_override(&self, module: usize) -> Option<MaskOverride> {
        self.overrides.get(module)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store.get()
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.graph.constant(x)
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let value = self.store.get().get(id).clone();
        let v = self.graph.leaf(value, self.params_require_grad);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.index()]
    }

    pub fn batch_norm(&mut self, bn: &BnLayer, x: Var) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        match &mut self.store {
            Store::Exclusive(s) => self.graph.batch_norm(x, gamma, beta, BnMode::Train(s.stats_mut(bn.stats))),
            Store::Shared(s) => self.graph.batch_norm(x, gamma, beta, BnMode::Eval(s.stats(bn.stats))),
        }
    }

    pub fn record_module(&mut self, trace: ModuleTrace) {
        self.traces.push(trace);
    }

    pub fn module_traces(&self) -> &[ModuleTrace] {
        &self.traces
    }

    /// Runs backward from `loss` and returns the gradient of every parameter
    /// (indexed by `ParamId`); unbound parameters get `None`.
    pub fn backward_params(&mut self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        self.graph.backward(loss)?;
        let n = self.bound.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(self.bound[i].and_then(|v| self.graph.grad(v)));
        }
        Ok(out)
    }
}
