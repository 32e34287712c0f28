use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Float;

/// Normalization applied at the end of the soft mask branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    /// Element-wise sigmoid.
    Mixed,
    /// L2 normalization over channels at each spatial position.
    Channel,
    /// Per-channel standardization over the spatial map, then sigmoid.
    Spatial,
}

/// How mask `M` and trunk output `T` are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// Attention residual learning, `H = (1 + M) * T`.
    Arl,
    /// Naive attention learning, `H = M * T`.
    Nal,
}

impl std::fmt::Display for MaskActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskActivation::Mixed => "mixed",
            MaskActivation::Channel => "channel",
            MaskActivation::Spatial => "spatial",
        })
    }
}

impl std::fmt::Display for CombineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CombineMode::Arl => "arl",
            CombineMode::Nal => "nal",
        })
    }
}

pub fn apply_activation<T: Float>(g: &mut Graph<T>, x: Var, kind: MaskActivation) -> Result<Var> {
    match kind {
        MaskActivation::Mixed => Ok(g.sigmoid(x)),
        MaskActivation::Channel => g.channel_l2_normalize(x),
        MaskActivation::Spatial => {
            let s = g.spatial_standardize(x)?;
            Ok(g.sigmoid(s))
        }
    }
}

pub fn combine<T: Float>(g: &mut Graph<T>, mode: CombineMode, mask: Var, trunk: Var) -> Result<Var> {
    match mode {
        CombineMode::Arl => g.residual_attention(mask, trunk),
        CombineMode::Nal => g.mul(mask, trunk),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn run(kind: MaskActivation, shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(shape, data).unwrap());
        let y = apply_activation(&mut g, x, kind).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn mixed_on_zero_is_half() {
        let y = run(MaskActivation::Mixed, &[1, 2, 2, 2], vec![0.0; 8]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_on_three_four() {
        let y = run(MaskActivation::Channel, &[1, 2, 1, 1], vec![3.0, 4.0]);
        assert!((y.data()[0] - 0.6).abs() < 1e-12 && (y.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spatial_on_standard_map() {
        let y = run(MaskActivation::Spatial, &[1, 1, 2, 2], vec![-1.0, 1.0, -1.0, 1.0]);
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        for (got, want) in y.data().iter().zip([s(-1.0), s(1.0), s(-1.0), s(1.0)]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn spatial_rejects_single_pixel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(apply_activation(&mut g, x, MaskActivation::Spatial).is_err());
    }

    #[test]
    fn combine_identities_are_exact() {
        let mut g = Graph::<f32>::new();
        let t = g.constant(Tensor::new(&[1, 1, 1, 4], vec![0.1, -3.7, 1e-30, 7.25e6]).unwrap());
        let zero = g.constant(Tensor::zeros(&[1, 1, 1, 4]));
        let one = g.constant(Tensor::full(&[1, 1, 1, 4], 1.0));
        let arl = combine(&mut g, CombineMode::Arl, zero, t).unwrap();
        let nal1 = combine(&mut g, CombineMode::Nal, one, t).unwrap();
        let nal0 = combine(&mut g, CombineMode::Nal, zero, t).unwrap();
        assert_eq!(g.value(arl), g.value(t));
        assert_eq!(g.value(nal1), g.value(t));
        assert!(g.value(nal0).data().iter().all(|&v| v == 0.0));
    }
}
