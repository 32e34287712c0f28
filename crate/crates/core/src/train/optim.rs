use crate::blocks::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

/// Zeroed momentum buffers matching `store`.
pub fn zero_velocity<T: Float>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store.values().iter().map(|v| Tensor::zeros(v.shape())).collect()
}

/// One SGD update with momentum.
///
/// With `d = grad + wd * param` (weight decay only on conv and FC weights):
/// `v <- momentum * v + d`, then `param <- param - lr * (d + momentum * v)`
/// for Nesterov or `param <- param - lr * v` otherwise. Missing gradients
/// count as zero. Nothing is modified if any gradient is non-finite.
pub fn sgd_step<T: Float>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    velocity: &mut [Tensor<T>],
    hp: &SgdHyper,
    iteration: u64,
) -> Result<()> {
    let n = store.values().len();
    if grads.len() != n || velocity.len() != n {
        return Err(Error::invalid("sgd_step", format!("{} params, {} grads, {} velocities", n, grads.len(), velocity.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.as_ref().is_some_and(|g| !g.is_finite()) {
            let param = store.layout().params()[i].name.clone();
            return Err(Error::NonFiniteGradient { iteration, param });
        }
    }
    let lr = T::from_f64_lossy(hp.lr);
    let mom = T::from_f64_lossy(hp.momentum);
    let ids: Vec<_> = store.layout().ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let wd = if store.layout().spec(id).kind.decays() { T::from_f64_lossy(hp.weight_decay) } else { T::zero() };
        let p = store.get_mut(id);
        let v = velocity[i].data_mut();
        let zero = T::zero();
        let g = grads[i].as_ref().map(Tensor::data);
        for (j, (pj, vj)) in p.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
            let d = g.map_or(zero, |g| g[j]) + wd * *pj;
            *vj = mom * *vj + d;
            *pj -= if hp.nesterov { lr * (d + mom * *vj) } else { lr * *vj };
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{ParamKind, ParamLayout, Partition};

    fn single(kind: ParamKind, w: f64) -> ParamStore<f64> {
        let mut l = ParamLayout::new();
        let id = l.add_param("w", &[1], kind, Partition::Trunk);
        let mut s = ParamStore::zeros(&l);
        *s.get_mut(id) = Tensor::new(&[1], vec![w]).unwrap();
        s
    }

    fn hp(lr: f64, momentum: f64, weight_decay: f64) -> SgdHyper {
        SgdHyper { lr, momentum, weight_decay, nesterov: true }
    }

    fn value(s: &ParamStore<f64>) -> f64 {
        s.values()[0].data()[0]
    }

    #[test]
    fn plain_gradient_descent() {
        let mut s = single(ParamKind::ConvWeight, 1.0);
        let mut v = zero_velocity(&s);
        let g = Some(Tensor::new(&[1], vec![0.5]).unwrap());
        sgd_step(&mut s, &[g], &mut v, &hp(0.1, 0.0, 0.0), 0).unwrap();
        assert_eq!(value(&s), 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn nesterov_on_half_square() {
        // f(w) = w^2 / 2, grad = w. Hand recurrence from w = 1, lr 0.1, momentum 0.9:
        // step 1: d = 1, v = 1, w = 1 - 0.1 * (1 + 0.9) = 0.81
        // step 2: d = 0.81, v = 0.9 + 0.81 = 1.71, w = 0.81 - 0.1 * (0.81 + 1.539) = 0.5751
        let mut s = single(ParamKind::ConvWeight, 1.0);
        let mut v = zero_velocity(&s);
        for (it, want) in [(0, 0.81), (1, 0.5751)] {
            let g = Some(s.values()[0].clone());
            sgd_step(&mut s, &[g], &mut v, &hp(0.1, 0.9, 0.0), it).unwrap();
            assert!((value(&s) - want).abs() < 1e-12, "{} vs {want}", value(&s));
        }
    }

    #[test]
    fn weight_decay_only_is_geometric() {
        let mut s = single(ParamKind::FcWeight, 2.0);
        let mut v = zero_velocity(&s);
        for k in 1..=5 {
            sgd_step(&mut s, &[None], &mut v, &hp(0.1, 0.0, 0.01), k).unwrap();
            assert!((value(&s) - 2.0 * 0.999f64.powi(k as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn no_decay_on_bn_and_bias() {
        for kind in [ParamKind::BnGamma, ParamKind::BnBeta, ParamKind::FcBias] {
            let mut s = single(kind, 2.0);
            let mut v = zero_velocity(&s);
            sgd_step(&mut s, &[None], &mut v, &hp(0.1, 0.9, 0.5), 0).unwrap();
            assert_eq!(value(&s), 2.0);
        }
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut s = single(ParamKind::ConvWeight, 0.3);
        let before = s.clone();
        let mut v = zero_velocity(&s);
        let g = Some(Tensor::new(&[1], vec![7.0]).unwrap());
        sgd_step(&mut s, &[g], &mut v, &hp(0.0, 0.9, 1e-4), 0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = single(ParamKind::ConvWeight, 1.0);
        let before = s.clone();
        let mut v = zero_velocity(&s);
        let g = Some(Tensor::new(&[1], vec![f64::NAN]).unwrap());
        match sgd_step(&mut s, &[g], &mut v, &hp(0.1, 0.9, 0.0), 42).unwrap_err() {
            Error::NonFiniteGradient { iteration, param } => {
                assert_eq!(iteration, 42);
                assert_eq!(param, "w");
            }
            e => panic!("{e:?}"),
        }
        assert_eq!(s, before);
    }
}
