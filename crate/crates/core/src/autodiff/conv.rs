//! 2-D cross-correlation via per-sample im2col + GEMM.
//!
//! Each sample's columns `[Cin*kh*kw, Hout*Wout]` go through one GEMM that
//! writes straight into its `[Cout, Hout*Wout]` output slice.

use rayon::prelude::*;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, MatRef, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a sliding window, or `None` if the window does not fit.
pub(crate) fn window_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|r| r / stride + 1)
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let [n, ci, h, wd] = dims4("conv2d", x)?;
    let [co, wci, kh, kw] = dims4("conv2d", w)?;
    if wci != ci {
        return Err(Error::shape(
            "conv2d",
            format!("input has {ci} channels but weight {w:?} expects {wci}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    let (Some(ho), Some(wo)) = (window_out(h, kh, stride, pad), window_out(wd, kw, stride, pad)) else {
        return Err(Error::shape(
            "conv2d",
            format!("{kh}x{kw} kernel larger than padded {h}x{wd} input (padding {pad})"),
        ));
    };
    Ok(ConvGeom { n, ci, h, w: wd, co, kh, kw, stride, pad, ho, wo })
}

fn dims4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("expected a 4-d shape, got {s:?}"))),
    }
}

/// Range of output columns whose input column `ox * stride + kx - pad` lies
/// inside `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Fills `cols: [Cin*kh*kw, Hout*Wout]` from one sample `x: [Cin, H, W]`,
/// writing every element.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for (r, row) in cols.chunks_mut(p).enumerate() {
        let kx = r % g.kw;
        let ky = (r / g.kw) % g.kh;
        let plane = &x[(r / (g.kw * g.kh)) * g.h * g.w..][..g.h * g.w];
        let (lo, hi) = valid_cols(g, kx);
        for (oy, dst) in row.chunks_mut(g.wo).enumerate() {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                dst.fill(T::zero());
                continue;
            }
            let src = &plane[iy as usize * g.w..][..g.w];
            dst[..lo].fill(T::zero());
            dst[hi..].fill(T::zero());
            if lo == hi {
                continue;
            }
            let first = lo * g.stride + kx - g.pad;
            if g.stride == 1 {
                dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
            } else {
                for (d, &v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                    *d = v;
                }
            }
        }
    }
}

/// Adds `cols` back into one sample's input gradient `dx: [Cin, H, W]`.
fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for (r, row) in cols.chunks(p).enumerate() {
        let kx = r % g.kw;
        let ky = (r / g.kw) % g.kh;
        let plane = &mut dx[(r / (g.kw * g.kh)) * g.h * g.w..][..g.h * g.w];
        let (lo, hi) = valid_cols(g, kx);
        if lo >= hi {
            continue;
        }
        for (oy, src) in row.chunks(g.wo).enumerate() {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let dst = &mut plane[iy as usize * g.w..][..g.w];
            let first = lo * g.stride + kx - g.pad;
            for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(&src[lo..hi]) {
                *d += v;
            }
        }
    }
}

/// Column matrix of sample `x`, borrowing it directly for 1x1 stride-1 kernels.
fn sample_columns<'a, T: Float>(x: &'a [T], g: &ConvGeom, buf: &'a mut Vec<T>) -> &'a [T] {
    if g.pointwise() {
        x
    } else {
        buf.resize(g.k() * g.p(), T::zero());
        im2col(x, g, buf);
        buf
    }
}

impl<T: Float> Graph<T> {
    /// Cross-correlation of `x: [N,Cin,H,W]` with `weight: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let g = geometry(self.shape(x), self.shape(weight), stride, padding)?;
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let (k, p, in_len) = (g.k(), g.p(), g.ci * g.h * g.w);
        let mut out = vec![T::zero(); g.n * g.co * p];
        out.par_chunks_mut(g.co * p).enumerate().for_each_init(Vec::new, |buf, (ni, dst)| {
            let cols = sample_columns(&xv[ni * in_len..][..in_len], &g, buf);
            gemm(T::one(), MatRef::row_major(wv, g.co, k), MatRef::row_major(cols, k, p), T::zero(), dst);
        });
        let out = Tensor::new(&[g.n, g.co, g.ho, g.wo], out)?;
        let rg = self.any_requires_grad(&[x, weight]);
        Ok(self.push(out, rg, Op::Conv2d { input: x, weight, stride, padding }))
    }

    pub(super) fn conv2d_backward(&mut self, x: Var, weight: Var, stride: usize, padding: usize, grad: &[T]) {
        let g = geometry(self.shape(x), self.shape(weight), stride, padding).expect("validated in forward");
        let (k, p, in_len, out_len) = (g.k(), g.p(), g.ci * g.h * g.w, g.co * g.p());

        if self.requires_grad(weight) {
            let mut gw = self.grad_buf(weight);
            let xv = self.value(x).data();
            let mut buf = Vec::new();
            // samples in order, so the sum is reproducible
            for ni in 0..g.n {
                let cols = sample_columns(&xv[ni * in_len..][..in_len], &g, &mut buf);
                let dout = MatRef::row_major(&grad[ni * out_len..][..out_len], g.co, p);
                gemm(T::one(), dout, MatRef::row_major(cols, k, p).t(), T::one(), &mut gw);
            }
            self.put_grad(weight, gw);
        }

        if self.requires_grad(x) {
            let mut gx = self.grad_buf(x);
            let wt = MatRef::row_major(self.value(weight).data(), g.co, k).t();
            gx.par_chunks_mut(in_len).enumerate().for_each_init(Vec::new, |dcols, (ni, dst)| {
                let dout = MatRef::row_major(&grad[ni * out_len..][..out_len], g.co, p);
                if g.pointwise() {
                    gemm(T::one(), wt, dout, T::one(), dst);
                } else {
                    dcols.resize(k * p, T::zero());
                    gemm(T::one(), wt, dout, T::zero(), dcols);
                    col2im(dcols, &g, dst);
                }
            });
            self.put_grad(x, gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, ci, h, wd] = x.dims4().unwrap();
        let [co, _, kh, kw] = w.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_window() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn identity_kernel_returns_input() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..16).map(|i| i as f32 * 0.37 - 2.0).collect();
        let x = g.constant(Tensor::new(&[1, 1, 4, 4], data).unwrap());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matches_naive_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(n, ci, h, co, k, s, p) in
            &[(2, 3, 7, 4, 3, 1, 1), (3, 2, 8, 5, 3, 2, 1), (2, 4, 6, 3, 1, 1, 0), (1, 3, 9, 2, 1, 2, 0), (2, 1, 10, 2, 7, 2, 3)]
        {
            let xt = Tensor::<f64>::uniform(&[n, ci, h, h], -1.0, 1.0, &mut rng);
            let wt = Tensor::<f64>::uniform(&[co, ci, k, k], -1.0, 1.0, &mut rng);
            let mut g = Graph::<f64>::new();
            let x = g.constant(xt.clone());
            let w = g.constant(wt.clone());
            let y = g.conv2d(x, w, s, p).unwrap();
            let expect = naive(&xt, &wt, s, p);
            assert_eq!(g.shape(y), expect.shape());
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = g.conv2d(x, w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let big = g.constant(Tensor::zeros(&[2, 3, 7, 7]));
        assert!(g.conv2d(x, big, 1, 1).is_err());
        let ok = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        assert!(g.conv2d(x, ok, 0, 1).is_err());
    }
}
