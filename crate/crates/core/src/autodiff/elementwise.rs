use super::{add_into, same_shape, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = if self.kinks_active() {
            let natural = self.value(x).data().iter().map(|&v| (v > T::zero()) as u32).collect();
            let keep = self.kink_decisions(natural);
            let data = self.value(x).data().iter().zip(&keep).map(|(&v, &k)| if k == 1 { v } else { T::zero() }).collect();
            Tensor::new(self.shape(x), data).expect("same shape")
        } else {
            self.value(x).map(|v| if v > T::zero() { v } else { T::zero() })
        };
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Relu { input: x })
    }

    pub(super) fn relu_backward(&mut self, x: Var, grad: &[T]) {
        if !self.requires_grad(x) {
            return;
        }
        let node = &mut self.nodes[x.0];
        add_into(&mut node.grad, grad.iter().zip(node.value.data()).map(|(&up, &v)| if v > T::zero() { up } else { T::zero() }));
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Sigmoid { input: x })
    }

    pub(super) fn sigmoid_backward(&mut self, out: Var, x: Var, grad: &[T]) {
        if !self.requires_grad(x) {
            return;
        }
        let contrib: Vec<T> =
            grad.iter().zip(self.value(out).data()).map(|(&up, &s)| up * s * (T::one() - s)).collect();
        self.accumulate_owned(x, contrib);
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub(super) fn mul_backward(&mut self, a: Var, b: Var, grad: &[T]) {
        let db: Vec<T> = grad.iter().zip(self.value(a).data()).map(|(&g, &x)| g * x).collect();
        let da: Vec<T> = grad.iter().zip(self.value(b).data()).map(|(&g, &y)| g * y).collect();
        self.accumulate_owned(a, da);
        self.accumulate_owned(b, db);
    }

    /// `(1 + mask) * features`, element-wise.
    pub fn residual_attention(&mut self, mask: Var, features: Var) -> Result<Var> {
        let (vm, vf) = (self.value(mask), self.value(features));
        same_shape("residual_attention", vm, vf)?;
        let data = vm.data().iter().zip(vf.data()).map(|(&m, &f)| (T::one() + m) * f).collect();
        let out = Tensor::new(vf.shape(), data)?;
        let rg = self.any_requires_grad(&[mask, features]);
        Ok(self.push(out, rg, Op::ResidualAttention { mask, features }))
    }

    pub(super) fn residual_attention_backward(&mut self, mask: Var, features: Var, grad: &[T]) {
        let dm: Vec<T> = grad.iter().zip(self.value(features).data()).map(|(&g, &f)| g * f).collect();
        let df: Vec<T> =
            grad.iter().zip(self.value(mask).data()).map(|(&g, &m)| g * (T::one() + m)).collect();
        self.accumulate_owned(mask, dm);
        self.accumulate_owned(features, df);
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { input: x })
    }

    /// `sum(weights * x)` with constant weights; a cheap way to get a scalar
    /// whose gradient exercises every output element.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "dot",
                format!("{} weights for {} elements", weights.len(), self.value(x).len()),
            ));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(&v, &w)| v * w).sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Dot { input: x, weights }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Reshape { input: x }))
    }
}
