use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, MatRef, Tensor};

impl<T: Float> Graph<T> {
    /// `x W^T + b` for `x: [N, D]`, `W: [Out, D]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = match *self.shape(x) {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("fully_connected", format!("input must be [N, D], got {s:?}"))),
        };
        let (out_f, wd) = match *self.shape(weight) {
            [o, wd] => (o, wd),
            ref s => return Err(Error::shape("fully_connected", format!("weight must be [Out, D], got {s:?}"))),
        };
        if wd != d {
            return Err(Error::shape("fully_connected", format!("input width {d} but weight expects {wd}")));
        }
        if self.shape(bias) != [out_f] {
            return Err(Error::shape("fully_connected", format!("bias shape {:?}, expected [{out_f}]", self.shape(bias))));
        }
        let mut out = Vec::with_capacity(n * out_f);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(
            T::one(),
            MatRef::row_major(self.value(x).data(), n, d),
            MatRef::row_major(self.value(weight).data(), out_f, d).t(),
            T::one(),
            &mut out,
        );
        let rg = self.any_requires_grad(&[x, weight, bias]);
        Ok(self.push(Tensor::new(&[n, out_f], out)?, rg, Op::Linear { input: x, weight, bias }))
    }

    pub(super) fn linear_backward(&mut self, x: Var, weight: Var, bias: Var, grad: &[T]) {
        let [n, d] = [self.shape(x)[0], self.shape(x)[1]];
        let out_f = self.shape(weight)[0];
        let dy = MatRef::row_major(grad, n, out_f);
        if self.requires_grad(x) {
            let mut gx = self.grad_buf(x);
            gemm(T::one(), dy, MatRef::row_major(self.value(weight).data(), out_f, d), T::one(), &mut gx);
            self.put_grad(x, gx);
        }
        if self.requires_grad(weight) {
            let mut gw = self.grad_buf(weight);
            gemm(T::one(), dy.t(), MatRef::row_major(self.value(x).data(), n, d), T::one(), &mut gw);
            self.put_grad(weight, gw);
        }
        let db: Vec<T> = (0..out_f).map(|j| (0..n).map(|i| grad[i * out_f + j]).sum()).collect();
        self.accumulate(bias, db);
    }

    /// Mean softmax cross-entropy over the batch, as a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            ref s => return Err(Error::shape("softmax_cross_entropy", format!("logits must be [N, K], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("softmax_cross_entropy", format!("label {bad} outside [0, {k})")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0f64;
        for (row, &label) in lv.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            loss += (z.ln() - (row[label] - max)).to_f64_lossy();
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        let loss = T::from_f64_lossy(loss / n as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    pub(super) fn softmax_ce_backward(&mut self, logits: Var, labels: &[usize], probs: &[T], grad: &[T]) {
        let k = self.shape(logits)[1];
        let scale = grad[0] / T::from_usize(labels.len()).expect("usize to float");
        let mut contrib: Vec<T> = probs.iter().map(|&p| p * scale).collect();
        for (i, &label) in labels.iter().enumerate() {
            contrib[i * k + label] -= scale;
        }
        self.accumulate(logits, contrib);
    }
}
