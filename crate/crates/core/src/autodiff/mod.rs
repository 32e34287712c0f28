//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already a topological order. [`Graph::backward`] walks it once in
//! reverse and every rule accumulates into its inputs' gradients.

mod conv;
mod elementwise;
mod loss;
mod norm;
mod spatial;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use norm::{BnMode, RunningStats, BN_EPS, BN_MOMENTUM, CHANNEL_NORM_EPS, SPATIAL_STD_EPS};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation identifiers, used for fault injection and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2d,
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
    Sum,
    Dot,
    Reshape,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, stride: usize, padding: usize },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    Upsample { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { input: Var },
    Sigmoid { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ResidualAttention { mask: Var, features: Var },
    Linear { input: Var, weight: Var, bias: Var },
    GlobalAvgPool { input: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    ChannelL2Norm { input: Var, norms: Vec<T> },
    SpatialStandardize { input: Var, inv_std: Vec<T> },
    Sum { input: Var },
    Dot { input: Var, weights: Vec<T> },
    Reshape { input: Var },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::ResidualAttention { .. } => OpKind::ResidualAttention,
            Op::Linear { .. } => OpKind::Linear,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::ChannelL2Norm { .. } => OpKind::ChannelL2Norm,
            Op::SpatialStandardize { .. } => OpKind::SpatialStandardize,
            Op::Sum { .. } => OpKind::Sum,
            Op::Dot { .. } => OpKind::Dot,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Branch decisions recorded from one forward pass, one entry per op.
#[derive(Clone, Debug, Default)]
pub struct KinkTape(Arc<Vec<Vec<u32>>>);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
enum KinkMode {
    #[default]
    Off,
    Record,
    Replay,
}

#[derive(Debug, Default)]
struct KinkState {
    mode: KinkMode,
    tape: Arc<Vec<Vec<u32>>>,
    pos: usize,
    crossed: usize,
    mismatch: bool,
}

/// Computation tape. One graph per forward pass.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    retain_grads: bool,
    fault: Option<OpKind>,
    kinks: KinkState,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            retain_grads: false,
            fault: None,
            kinks: KinkState::default(),
        }
    }

    /// Keep gradients of intermediate nodes after backward (leaves always keep theirs).
    pub fn retain_grads(&mut self, on: bool) {
        self.retain_grads = on;
    }

    /// Debug hook: scale the upstream gradient of every `kind` node by 1.5
    /// during backward. Only useful as a negative control for gradcheck.
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    /// Record every piecewise-linear branch decision (ReLU signs, max-pool
    /// winners, norm clamps) taken from now on.
    pub fn record_kinks(&mut self) {
        self.kinks = KinkState { mode: KinkMode::Record, ..Default::default() };
    }

    /// Make subsequent ops take the decisions in `tape` instead of their own.
    /// A replaying graph cannot run backward.
    pub fn replay_kinks(&mut self, tape: KinkTape) {
        self.kinks = KinkState { mode: KinkMode::Replay, tape: tape.0, ..Default::default() };
    }

    pub fn kink_tape(&self) -> KinkTape {
        KinkTape(self.kinks.tape.clone())
    }

    /// Number of replayed decisions that differ from the ones the op would
    /// have taken on its own.
    pub fn kinks_crossed(&self) -> usize {
        self.kinks.crossed
    }

    /// Whether the replayed tape did not line up with this graph's ops.
    pub fn kink_replay_mismatch(&self) -> bool {
        self.kinks.mismatch
    }

    pub(crate) fn kinks_active(&self) -> bool {
        self.kinks.mode != KinkMode::Off
    }

    /// Returns the decisions an op must use, given the ones it would take.
    pub(crate) fn kink_decisions(&mut self, natural: Vec<u32>) -> Vec<u32> {
        let k = &mut self.kinks;
        match k.mode {
            KinkMode::Off => natural,
            KinkMode::Record => {
                Arc::make_mut(&mut k.tape).push(natural.clone());
                natural
            }
            KinkMode::Replay => match k.tape.get(k.pos) {
                Some(d) if d.len() == natural.len() => {
                    k.pos += 1;
                    k.crossed += d.iter().zip(&natural).filter(|(a, b)| a != b).count();
                    d.clone()
                }
                _ => {
                    k.mismatch = true;
                    natural
                }
            },
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape matches value"))
    }

    /// Moves the gradient out of the graph, avoiding a copy.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse pass from a one-element `root`, seeding its gradient with 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.kinks.mode == KinkMode::Replay {
            return Err(Error::invalid("backward", "graph was evaluated with replayed kink decisions"));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalar(self.nodes[root.0].value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(mut grad) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                self.nodes[i].grad = Some(grad);
                continue;
            }
            if self.fault == Some(op.kind()) {
                let k = T::from_f64_lossy(1.5);
                grad.iter_mut().for_each(|g| *g *= k);
            }
            match op {
                // pass-through rules hand the buffer on instead of copying it
                Op::Add { a, b } if !self.retain_grads => {
                    self.accumulate(b, grad.iter().copied());
                    self.accumulate_owned(a, grad);
                }
                Op::Reshape { input } if !self.retain_grads => self.accumulate_owned(input, grad),
                _ => {
                    self.backprop(Var(i), &op, &grad);
                    if self.retain_grads {
                        self.nodes[i].grad = Some(grad);
                    }
                }
            }
            self.nodes[i].op = op;
        }
        Ok(())
    }

    /// Takes `v`'s gradient buffer out of the graph (zeros if absent) so a
    /// rule can read other node values while writing it.
    fn grad_buf(&mut self, v: Var) -> Vec<T> {
        let node = &mut self.nodes[v.0];
        node.grad.take().unwrap_or_else(|| vec![T::zero(); node.value.len()])
    }

    fn put_grad(&mut self, v: Var, buf: Vec<T>) {
        self.nodes[v.0].grad = Some(buf);
    }

    /// `grad[v] += contrib` element-wise.
    fn accumulate(&mut self, v: Var, contrib: impl IntoIterator<Item = T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        add_into(&mut self.nodes[v.0].grad, contrib);
    }

    /// Like [`Graph::accumulate`], taking ownership of a full-length buffer.
    fn accumulate_owned(&mut self, v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(g, &c)| *g += c),
            slot => *slot = Some(contrib),
        }
    }

    fn backprop(&mut self, out: Var, op: &Op<T>, grad: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, stride, padding } => {
                self.conv2d_backward(*input, *weight, *stride, *padding, grad)
            }
            Op::MaxPool2d { input, argmax } => self.max_pool_backward(out, *input, argmax, grad),
            Op::Upsample { input } => self.upsample_backward(out, *input, grad),
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                self.batch_norm_backward(*input, *gamma, *beta, xhat, inv_std, *train, grad)
            }
            Op::Relu { input } => self.relu_backward(*input, grad),
            Op::Sigmoid { input } => self.sigmoid_backward(out, *input, grad),
            Op::Add { a, b } => {
                self.accumulate(*a, grad.iter().copied());
                self.accumulate(*b, grad.iter().copied());
            }
            Op::Mul { a, b } => self.mul_backward(*a, *b, grad),
            Op::ResidualAttention { mask, features } => {
                self.residual_attention_backward(*mask, *features, grad)
            }
            Op::Linear { input, weight, bias } => self.linear_backward(*input, *weight, *bias, grad),
            Op::GlobalAvgPool { input } => self.global_avg_pool_backward(*input, grad),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                self.softmax_ce_backward(*logits, labels, probs, grad)
            }
            Op::ChannelL2Norm { input, norms } => self.channel_l2_backward(out, *input, norms, grad),
            Op::SpatialStandardize { input, inv_std } => {
                self.spatial_standardize_backward(out, *input, inv_std, grad)
            }
            Op::Sum { input } => {
                let g = grad[0];
                let n = self.nodes[input.0].value.len();
                self.accumulate(*input, std::iter::repeat_n(g, n));
            }
            Op::Dot { input, weights } => {
                let g = grad[0];
                self.accumulate(*input, weights.iter().map(|&w| w * g));
            }
            Op::Reshape { input } => self.accumulate(*input, grad.iter().copied()),
        }
    }
}

/// Adds `contrib` into a gradient slot, filling an empty slot directly.
fn add_into<T: Float>(slot: &mut Option<Vec<T>>, contrib: impl IntoIterator<Item = T>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(contrib).for_each(|(g, c)| *g += c),
        None => *slot = Some(contrib.into_iter().collect()),
    }
}

pub(crate) fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("operands differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
