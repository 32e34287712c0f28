//! Batch normalization and the two normalizing mask activations.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Floor on the channel-vector norm in the L2 activation.
pub const CHANNEL_NORM_EPS: f64 = 1e-12;
/// Added to the variance before the square root in spatial standardization.
pub const SPATIAL_STD_EPS: f64 = 1e-12;

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub enum BnMode<'a, T> {
    /// Normalize by batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats<T>),
    /// Normalize by the running stats.
    Eval(&'a RunningStats<T>),
}

/// `(batch, channels, spatial)` view of an `[N,C]` or `[N,C,H,W]` shape.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape(op, format!("expected [N,C] or [N,C,H,W], got {shape:?}"))),
    }
}

impl<T: Float> Graph<T> {
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
        let (n, c, s) = channel_layout("batch_norm", self.shape(x))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has shape {:?}, input has {c} channels", self.shape(v)),
                ));
            }
        }
        let train = matches!(mode, BnMode::Train(_));
        let population = n * s;
        let stats_channels = match &mode {
            BnMode::Train(st) => st.channels(),
            BnMode::Eval(st) => st.channels(),
        };
        if stats_channels != c {
            return Err(Error::shape("batch_norm", format!("running stats hold {stats_channels} channels, input has {c}")));
        }
        if train && population < 2 {
            return Err(Error::invalid("batch_norm", "training mode needs at least 2 values per channel"));
        }

        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let (means, vars): (Vec<f64>, Vec<f64>) = match &mode {
            BnMode::Train(_) => {
                let mut sums = vec![0f64; c];
                for (i, plane) in xv.chunks(s).enumerate() {
                    sums[i % c] += plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                }
                let means: Vec<f64> = sums.iter().map(|v| v / population as f64).collect();
                let mut sq = vec![0f64; c];
                for (i, plane) in xv.chunks(s).enumerate() {
                    let m = means[i % c];
                    sq[i % c] += plane
                        .iter()
                        .map(|v| {
                            let d = v.to_f64_lossy() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                (means, sq.iter().map(|v| v / population as f64).collect())
            }
            BnMode::Eval(st) => {
                (st.mean.iter().map(|v| v.to_f64_lossy()).collect(), st.var.iter().map(|v| v.to_f64_lossy()).collect())
            }
        };
        let inv_std: Vec<T> = vars.iter().map(|v| T::from_f64_lossy(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean_t: Vec<T> = means.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        for (i, plane) in xv.chunks(s).enumerate() {
            let (m, inv) = (mean_t[i % c], inv_std[i % c]);
            xhat.extend(plane.iter().map(|&v| (v - m) * inv));
        }
        let mut out = Vec::with_capacity(xv.len());
        for (i, plane) in xhat.chunks(s).enumerate() {
            let (g, b) = (gv[i % c], bv[i % c]);
            out.extend(plane.iter().map(|&xh| g * xh + b));
        }
        let batch_stats: Vec<(f64, f64)> = if train { means.into_iter().zip(vars).collect() } else { Vec::new() };
        if let BnMode::Train(st) = mode {
            let keep = T::from_f64_lossy(BN_MOMENTUM);
            let take = T::from_f64_lossy(1.0 - BN_MOMENTUM);
            let unbias = population as f64 / (population - 1) as f64;
            for (ch, (m, v)) in batch_stats.into_iter().enumerate() {
                st.mean[ch] = keep * st.mean[ch] + take * T::from_f64_lossy(m);
                st.var[ch] = keep * st.var[ch] + take * T::from_f64_lossy(v * unbias);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::BatchNorm { input: x, gamma, beta, xhat, inv_std, train }))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn batch_norm_backward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        train: bool,
        grad: &[T],
    ) {
        let (n, c, s) = channel_layout("batch_norm", self.shape(x)).expect("validated");
        let m = T::from_usize(n * s).expect("usize to float");
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (i, (g, xh)) in grad.chunks(s).zip(xhat.chunks(s)).enumerate() {
            sum_dy[i % c] += g.iter().copied().sum::<T>();
            sum_dy_xhat[i % c] += g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        }
        if self.requires_grad(x) {
            let gv = self.value(gamma).data();
            let mut contrib = Vec::with_capacity(grad.len());
            for (i, (g, xh)) in grad.chunks(s).zip(xhat.chunks(s)).enumerate() {
                let ch = i % c;
                let scale = gv[ch] * inv_std[ch];
                if train {
                    let (k, sd, sdx) = (scale / m, sum_dy[ch], sum_dy_xhat[ch]);
                    contrib.extend(g.iter().zip(xh).map(|(&gi, &xi)| k * (m * gi - sd - xi * sdx)));
                } else {
                    contrib.extend(g.iter().map(|&gi| scale * gi));
                }
            }
            self.accumulate_owned(x, contrib);
        }
        self.accumulate(gamma, sum_dy_xhat);
        self.accumulate(beta, sum_dy);
    }

    /// Divides each channel vector `x[n, :, y, x]` by its L2 norm.
    pub fn channel_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let s = h * w;
        let eps = T::from_f64_lossy(CHANNEL_NORM_EPS);
        let xv = self.value(x).data();
        let mut norms = vec![T::zero(); n * s];
        for b in 0..n {
            let acc = &mut norms[b * s..(b + 1) * s];
            for plane in xv[b * c * s..(b + 1) * c * s].chunks(s) {
                acc.iter_mut().zip(plane).for_each(|(a, &v)| *a += v * v);
            }
            acc.iter_mut().for_each(|a| *a = a.sqrt());
        }
        let clamp: Option<Vec<u32>> = self.kinks_active().then(|| {
            let natural = norms.iter().map(|&v| (v <= eps) as u32).collect();
            self.kink_decisions(natural)
        });
        // A clamped position is marked by storing the floor as its norm.
        if let Some(clamp) = &clamp {
            norms.iter_mut().zip(clamp).filter(|(_, &k)| k == 1).for_each(|(v, _)| *v = eps);
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for p in 0..s {
                    out[base + p] = xv[base + p] / norms[b * s + p].max(eps);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(&[n, c, h, w], out)?, rg, Op::ChannelL2Norm { input: x, norms }))
    }

    pub(super) fn channel_l2_backward(&mut self, out: Var, x: Var, norms: &[T], grad: &[T]) {
        if !self.requires_grad(x) {
            return;
        }
        let [n, c, h, w] = self.value(x).dims4().expect("4-d");
        let s = h * w;
        let eps = T::from_f64_lossy(CHANNEL_NORM_EPS);
        let y = self.value(out).data();
        let mut dots = vec![T::zero(); n * s];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for p in 0..s {
                    dots[b * s + p] += grad[base + p] * y[base + p];
                }
            }
        }
        let mut contrib = vec![T::zero(); grad.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for p in 0..s {
                    let norm = norms[b * s + p];
                    contrib[base + p] = if norm > eps {
                        (grad[base + p] - y[base + p] * dots[b * s + p]) / norm
                    } else {
                        grad[base + p] / eps
                    };
                }
            }
        }
        self.accumulate_owned(x, contrib);
    }

    /// Standardizes every `(n, c)` spatial map to mean 0 and population std 1.
    pub fn spatial_standardize(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let s = h * w;
        if s < 2 {
            return Err(Error::invalid("spatial_standardize", "spatial maps need at least 2 positions"));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (plane, dst) in xv.chunks(s).zip(out.chunks_mut(s)) {
            let mean = plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / s as f64;
            let var = plane
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - mean;
                    d * d
                })
                .sum::<f64>()
                / s as f64;
            let inv = 1.0 / (var + SPATIAL_STD_EPS).sqrt();
            for (d, &v) in dst.iter_mut().zip(plane) {
                *d = T::from_f64_lossy((v.to_f64_lossy() - mean) * inv);
            }
            inv_std.push(T::from_f64_lossy(inv));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(&[n, c, h, w], out)?, rg, Op::SpatialStandardize { input: x, inv_std }))
    }

    pub(super) fn spatial_standardize_backward(&mut self, out: Var, x: Var, inv_std: &[T], grad: &[T]) {
        if !self.requires_grad(x) {
            return;
        }
        let [_, _, h, w] = self.value(x).dims4().expect("4-d");
        let s = h * w;
        let m = T::from_usize(s).expect("usize to float");
        let y = self.value(out).data();
        let mut contrib = vec![T::zero(); grad.len()];
        for (p, ((g, yy), dst)) in grad.chunks(s).zip(y.chunks(s)).zip(contrib.chunks_mut(s)).enumerate() {
            let sum_g: T = g.iter().copied().sum();
            let sum_gy: T = g.iter().zip(yy).map(|(&a, &b)| a * b).sum();
            let k = inv_std[p] / m;
            for ((d, &gi), &yi) in dst.iter_mut().zip(g).zip(yy) {
                *d = k * (m * gi - sum_g - yi * sum_gy);
            }
        }
        self.accumulate_owned(x, contrib);
    }
}
