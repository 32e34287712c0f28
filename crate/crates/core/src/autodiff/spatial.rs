use super::conv::window_out;
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Align-corners source coordinates for one axis: `(lo, hi, frac)` per output index.
fn interp_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            let pos = if dst > 1 { o as f64 * (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

impl<T: Float> Graph<T> {
    /// Max pooling over `window x window` cells. Padding cells never win.
    /// Ties go to the first cell in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d", "window and stride must be at least 1"));
        }
        if padding >= window {
            return Err(Error::invalid("max_pool2d", format!("padding {padding} must be below window {window}")));
        }
        let (Some(ho), Some(wo)) = (window_out(h, window, stride, padding), window_out(w, window, stride, padding))
        else {
            return Err(Error::shape(
                "max_pool2d",
                format!("window {window} larger than padded {h}x{w} input"),
            ));
        };
        let input = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in input.chunks(h * w) {
            for oy in 0..ho {
                let y0 = (oy * stride) as isize - padding as isize;
                for ox in 0..wo {
                    let x0 = (ox * stride) as isize - padding as isize;
                    let mut best = T::neg_infinity();
                    let mut best_idx = u32::MAX;
                    for iy in y0.max(0)..(y0 + window as isize).min(h as isize) {
                        for ix in x0.max(0)..(x0 + window as isize).min(w as isize) {
                            let idx = iy as usize * w + ix as usize;
                            let v = plane[idx];
                            if best_idx == u32::MAX || v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        if self.kinks_active() {
            argmax = self.kink_decisions(argmax);
            let input = self.value(x).data();
            for (p, (o_plane, a_plane)) in out.chunks_mut(ho * wo).zip(argmax.chunks(ho * wo)).enumerate() {
                for (o, &a) in o_plane.iter_mut().zip(a_plane) {
                    *o = input[p * h * w + a as usize];
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::MaxPool2d { input: x, argmax }))
    }

    pub(super) fn max_pool_backward(&mut self, out: Var, x: Var, argmax: &[u32], grad: &[T]) {
        if !self.requires_grad(x) {
            return;
        }
        let [_, _, ho, wo] = self.value(out).dims4().expect("4-d");
        let [_, _, h, w] = self.value(x).dims4().expect("4-d");
        let mut gx = self.grad_buf(x);
        for (p, (g_plane, a_plane)) in grad.chunks(ho * wo).zip(argmax.chunks(ho * wo)).enumerate() {
            let dst = &mut gx[p * h * w..(p + 1) * h * w];
            for (&g, &a) in g_plane.iter().zip(a_plane) {
                dst[a as usize] += g;
            }
        }
        self.put_grad(x, gx);
    }

    /// Bilinear resize with aligned corners to `out_h x out_w`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_bilinear", "target extent must be positive"));
        }
        if out_h < h || out_w < w {
            return Err(Error::invalid(
                "upsample_bilinear",
                format!("target {out_h}x{out_w} smaller than input {h}x{w}"),
            ));
        }
        let ys = interp_axis(h, out_h);
        let xs = interp_axis(w, out_w);
        let input = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in input.chunks(h * w) {
            for &(y0, y1, fy) in &ys {
                let fy = T::from_f64_lossy(fy);
                for &(x0, x1, fx) in &xs {
                    let fx = T::from_f64_lossy(fx);
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let out = Tensor::new(&[n, c, out_h, out_w], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Upsample { input: x }))
    }

    pub(super) fn upsample_backward(&mut self, out: Var, x: Var, grad: &[T]) {
        if !self.requires_grad(x) {
            return;
        }
        let [_, _, oh, ow] = self.value(out).dims4().expect("4-d");
        let [_, _, h, w] = self.value(x).dims4().expect("4-d");
        let ys = interp_axis(h, oh);
        let xs = interp_axis(w, ow);
        let mut gx = self.grad_buf(x);
        for (p, g_plane) in grad.chunks(oh * ow).enumerate() {
            let dst = &mut gx[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let g = g_plane[oy * ow + ox];
                    let gt = g * (T::one() - fy);
                    let gb = g * fy;
                    dst[y0 * w + x0] += gt * (T::one() - fx);
                    dst[y0 * w + x1] += gt * fx;
                    dst[y1 * w + x0] += gb * (T::one() - fx);
                    dst[y1 * w + x1] += gb * fx;
                }
            }
        }
        self.put_grad(x, gx);
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let inv = T::one() / T::from_usize(h * w).expect("usize to float");
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(&[n, c], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::GlobalAvgPool { input: x }))
    }

    pub(super) fn global_avg_pool_backward(&mut self, x: Var, grad: &[T]) {
        if !self.requires_grad(x) {
            return;
        }
        let [_, _, h, w] = self.value(x).dims4().expect("4-d");
        let inv = T::one() / T::from_usize(h * w).expect("usize to float");
        let mut gx = self.grad_buf(x);
        for (plane, &g) in gx.chunks_mut(h * w).zip(grad) {
            plane.iter_mut().for_each(|v| *v += g * inv);
        }
        self.put_grad(x, gx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_two_by_two() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = g.max_pool2d(x, 2, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pool_ties_route_to_first_index() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 4, 4], 0.5), true);
        let y = g.max_pool2d(x, 2, 2, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
        let s = g.sum(y);
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        let hot: Vec<usize> = gx.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }

    #[test]
    fn padded_pool_halves_imagenet_sizes() {
        let mut g = Graph::<f32>::new();
        for (inp, expect) in [(112, 56), (56, 28), (28, 14), (14, 7)] {
            let x = g.constant(Tensor::zeros(&[1, 1, inp, inp]));
            let y = g.max_pool2d(x, 3, 2, 1).unwrap();
            assert_eq!(g.shape(y), &[1, 1, expect, expect]);
        }
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.max_pool2d(x, 3, 1, 0).is_err());
        assert!(g.max_pool2d(x, 2, 1, 2).is_err());
    }

    #[test]
    fn upsample_align_corners_hand_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = g.upsample_bilinear(x, 3, 3).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 3, 3, 5], 0.7));
        for (h, w) in [(3, 5), (7, 9), (12, 40)] {
            let y = g.upsample_bilinear(x, h, w).unwrap();
            assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }
        assert!(g.upsample_bilinear(x, 0, 5).is_err());
        assert!(g.upsample_bilinear(x, 2, 5).is_err());
    }

    #[test]
    fn single_pixel_upsample_broadcasts() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = g.upsample_bilinear(x, 4, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }
}
