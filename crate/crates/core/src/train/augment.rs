use rand::Rng;

use crate::data::subtract_mean;
use crate::tensor::Tensor;

pub const CIFAR_PAD: usize = 4;

/// Top-left corner of the crop inside the zero-padded image, plus the flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl Crop {
    /// The centre crop without flip: the identity placement.
    pub const CENTER: Crop = Crop { dy: CIFAR_PAD, dx: CIFAR_PAD, flip: false };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Crop { dy: rng.gen_range(0..=2 * CIFAR_PAD), dx: rng.gen_range(0..=2 * CIFAR_PAD), flip: rng.gen_bool(0.5) }
    }
}

/// Zero-pads a `[C, H, W]` image by 4 on each side, takes the `H x W` window
/// at `crop`, optionally mirrors it, and subtracts `mean`.
pub fn crop_and_normalize(image: &[f32], shape: [usize; 3], mean: &Tensor<f32>, crop: Crop, out: &mut [f32]) {
    let [c, h, w] = shape;
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + crop.dy) as isize - CIFAR_PAD as isize;
            for x in 0..w {
                let xx = if crop.flip { w - 1 - x } else { x };
                let sx = (xx + crop.dx) as isize - CIFAR_PAD as isize;
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                let v = if inside { image[(ch * h + sy as usize) * w + sx as usize] } else { 0.0 };
                let i = (ch * h + y) * w + x;
                out[i] = v - mean.data()[i];
            }
        }
    }
}

/// Training-time CIFAR augmentation of one `[3, 32, 32]` image.
pub fn augment_cifar<R: Rng + ?Sized>(image: &[f32], mean: &Tensor<f32>, rng: &mut R) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    let s = mean.shape();
    crop_and_normalize(image, [s[0], s[1], s[2]], mean, Crop::sample(rng), &mut out);
    out
}

/// Evaluation path: mean subtraction only.
pub fn normalize(image: &[f32], mean: &Tensor<f32>) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    subtract_mean(image, mean, &mut out);
    out
}

/// Random scale/aspect crop (8%-100% of the area, aspect 3/4-4/3) resized
/// bilinearly back to `H x W`, random flip, per-channel intensity scaling in
/// `[0.8, 1.2]`, then mean subtraction.
pub fn augment_imagenet<R: Rng + ?Sized>(image: &[f32], mean: &Tensor<f32>, rng: &mut R) -> Vec<f32> {
    let s = mean.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (mut ch, mut cw) = (h, w);
    for _ in 0..10 {
        let area = rng.gen_range(0.08..=1.0) * (h * w) as f64;
        let aspect = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln()).exp();
        let tw = (area * aspect).sqrt().round() as usize;
        let th = (area / aspect).sqrt().round() as usize;
        if (1..=w).contains(&tw) && (1..=h).contains(&th) {
            (ch, cw) = (th, tw);
            break;
        }
    }
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let flip = rng.gen_bool(0.5);
    let gains: Vec<f32> = (0..c).map(|_| rng.gen_range(0.8..=1.2)).collect();
    let coord = |o: usize, out_len: usize, in_len: usize| {
        if out_len == 1 {
            0.0
        } else {
            o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        }
    };
    let mut out = vec![0.0; image.len()];
    for k in 0..c {
        let plane = &image[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            let fy = coord(y, h, ch);
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            let iy1 = (iy + 1).min(ch - 1);
            for x in 0..w {
                let fx = coord(if flip { w - 1 - x } else { x }, w, cw);
                let (ix, tx) = (fx.floor() as usize, fx.fract());
                let ix1 = (ix + 1).min(cw - 1);
                let at = |yy: usize, xx: usize| plane[(y0 + yy) * w + x0 + xx] as f64;
                let v = (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix1))
                    + ty * ((1.0 - tx) * at(iy1, ix) + tx * at(iy1, ix1));
                let i = (k * h + y) * w + x;
                out[i] = (v as f32 * gains[k]).clamp(0.0, 1.0) - mean.data()[i];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image() -> (Vec<f32>, Tensor<f32>) {
        let img: Vec<f32> = (0..3 * 32 * 32).map(|i| (i % 97) as f32 / 97.0).collect();
        let mean = Tensor::from_fn(&[3, 32, 32], |i| (i % 13) as f32 / 50.0);
        (img, mean)
    }

    #[test]
    fn centre_crop_is_mean_subtraction() {
        let (img, mean) = image();
        let mut out = vec![0.0; img.len()];
        crop_and_normalize(&img, [3, 32, 32], &mean, Crop::CENTER, &mut out);
        assert_eq!(out, normalize(&img, &mean));
    }

    #[test]
    fn shifted_crop_moves_content_and_pads_zero() {
        let (img, _) = image();
        let mean = Tensor::zeros(&[3, 32, 32]);
        let mut out = vec![0.0; img.len()];
        crop_and_normalize(&img, [3, 32, 32], &mean, Crop { dy: 0, dx: 8, flip: false }, &mut out);
        // output (y, x) reads input (y - 4, x + 4)
        assert_eq!(out[3 * 32], 0.0);
        assert_eq!(out[4 * 32], img[4]);
        assert_eq!(out[4 * 32 + 27], img[31]);
        assert_eq!(out[4 * 32 + 28], 0.0);
    }

    #[test]
    fn flip_mirrors_rows() {
        let (img, _) = image();
        let mean = Tensor::zeros(&[3, 32, 32]);
        let mut out = vec![0.0; img.len()];
        crop_and_normalize(&img, [3, 32, 32], &mean, Crop { flip: true, ..Crop::CENTER }, &mut out);
        for x in 0..32 {
            assert_eq!(out[5 * 32 + x], img[5 * 32 + 31 - x]);
        }
    }

    #[test]
    fn imagenet_augmentation_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = vec![0.5; 3 * 16 * 16];
        let mean = Tensor::full(&[3, 16, 16], 0.5);
        for _ in 0..20 {
            let out = augment_imagenet(&img, &mean, &mut rng);
            assert_eq!(out.len(), img.len());
            assert!(out.iter().all(|v| v.abs() <= 0.1 + 1e-6));
        }
    }
}
