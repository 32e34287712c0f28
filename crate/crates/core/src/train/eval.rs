use serde::{Deserialize, Serialize};

use super::augment::normalize;
use crate::blocks::{Forward, MaskOverrides, ParamStore};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub top1_error: f64,
    /// Present when there are at least 5 classes.
    pub top5_error: Option<f64>,
}

/// Fraction of rows of `logits` (`[N, K]`, row-major) whose label is not
/// among the `k` largest entries. Ties rank by lower index first.
pub fn topk_error(logits: &[f32], classes: usize, labels: &[usize], k: usize) -> f64 {
    let wrong = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let target = row[y];
            let better = row.iter().enumerate().filter(|&(j, &v)| v > target || (v == target && j < y)).count();
            better >= k
        })
        .count();
    wrong as f64 / labels.len() as f64
}

/// Mean-subtracted images at `indices`, stacked into `[N, C, H, W]`.
pub fn stack_normalized(data: &Dataset, indices: &[usize], mean: &Tensor<f32>) -> Tensor<f32> {
    let [c, h, w] = data.image_shape();
    let mut out = Vec::with_capacity(indices.len() * c * h * w);
    for &i in indices {
        out.extend(normalize(data.image(i), mean));
    }
    Tensor::new(&[indices.len(), c, h, w], out).expect("batch shape")
}

/// Logits for every sample, eval-mode batch norm, mean subtraction only.
pub fn predict(net: &Network, store: &ParamStore<f32>, data: &Dataset, mean: &Tensor<f32>, batch: usize) -> Result<Vec<f32>> {
    let mut logits = Vec::with_capacity(data.len() * net.num_classes());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let mut ctx = Forward::eval(store);
        ctx.set_param_grads(false);
        let x = ctx.input(stack_normalized(data, chunk, mean));
        let out = net.forward(&mut ctx, x)?;
        logits.extend_from_slice(ctx.graph.value(out.logits).data());
    }
    Ok(logits)
}

pub fn evaluate(
    net: &Network,
    store: &ParamStore<f32>,
    data: &Dataset,
    mean: &Tensor<f32>,
    batch: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Dataset { path: "<memory>".into(), msg: "cannot evaluate on an empty dataset".into() });
    }
    let k = net.num_classes();
    let logits = predict(net, store, data, mean, batch)?;
    Ok(EvalReport {
        samples: data.len(),
        top1_error: topk_error(&logits, k, &data.labels, 1),
        top5_error: (k >= 5).then(|| topk_error(&logits, k, &data.labels, 5)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResponse {
    pub stage: String,
    pub mean_abs_response: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub iteration: u64,
    pub stages: Vec<StageResponse>,
}

/// Mean absolute value of each stage's output on `batch` (`[N, C, H, W]`,
/// already normalized), with eval-mode batch norm.
pub fn response_probe(
    net: &Network,
    store: &ParamStore<f32>,
    batch: &Tensor<f32>,
    overrides: &MaskOverrides,
) -> Result<Vec<StageResponse>> {
    let mut ctx = Forward::eval(store);
    ctx.set_param_grads(false);
    ctx.set_overrides(overrides.clone());
    let x = ctx.input(batch.clone());
    let out = net.forward(&mut ctx, x)?;
    Ok(net
        .stage_names()
        .into_iter()
        .zip(&out.stages)
        .map(|(stage, &v)| StageResponse { stage, mean_abs_response: ctx.graph.value(v).mean_abs() })
        .collect())
}
