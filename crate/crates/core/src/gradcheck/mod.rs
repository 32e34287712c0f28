//! Central finite-difference oracle for the analytic gradients.
//!
//! Runs in `f64`. A `±step` perturbation can flip a piecewise-linear branch
//! (ReLU sign, pooling winner, norm clamp) somewhere downstream, where the
//! central difference no longer measures the local derivative. By default the
//! perturbed passes replay the branch decisions of the unperturbed pass, so
//! they evaluate the smooth piece the analytic gradient belongs to; crossings
//! are counted. [`KinkPolicy::Skip`] instead drops every coordinate whose
//! perturbation crosses a branch.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, KinkTape, OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KinkPolicy {
    /// Replay the unperturbed pass's branch decisions.
    Freeze,
    /// Skip coordinates whose perturbation changes any branch decision.
    Skip,
}

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    Central2,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error `O(h^4)`.
    Central4,
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so that components that are
    /// zero up to rounding do not divide by zero.
    pub abs_floor: f64,
    /// Check a seeded random subset of at most this many coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Corrupt this op's backward rule (negative control).
    pub fault: Option<OpKind>,
    pub kinks: KinkPolicy,
    pub stencil: Stencil,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-3,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_input: None,
            seed: 0,
            fault: None,
            kinks: KinkPolicy::Freeze,
            stencil: Stencil::Central2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub shape: Vec<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Checked coordinates whose perturbation crossed a branch that was frozen.
    pub frozen_crossings: usize,
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.checked > 0 && r.max_rel_error < self.tol)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in &self.inputs {
            writeln!(
                f,
                "  input {:>2}: checked {:>5}, kinks skipped {:>3}, frozen {:>3}, max rel err {:.3e}",
                r.input, r.checked, r.skipped_kinks, r.frozen_crossings, r.max_rel_error
            )?;
        }
        write!(f, "  {} (tol {:.0e})", if self.passed() { "PASS" } else { "FAIL" }, self.tol)
    }
}

struct Eval {
    value: f64,
    crossed: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], replay: &KinkTape) -> Result<Eval>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.replay_kinks(replay.clone());
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalar(v.shape().to_vec()));
    }
    if g.kink_replay_mismatch() {
        return Err(Error::invalid("gradcheck", "function is not structurally deterministic"));
    }
    Ok(Eval { value: v.item(), crossed: g.kinks_crossed() })
}

/// Compares `f`'s backward-pass gradients with central differences for every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::invalid("gradcheck", "step must be positive"));
    }
    let mut g = Graph::new();
    g.inject_backward_fault(cfg.fault);
    g.record_kinks();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let tape = g.kink_tape();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let len = inputs[i].len();
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut report = InputReport {
            input: i,
            shape: inputs[i].shape().to_vec(),
            checked: 0,
            skipped_kinks: 0,
            frozen_crossings: 0,
            max_rel_error: 0.0,
            worst_coord: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for j in coords {
            let orig = work[i].data()[j];
            let offsets: &[(f64, f64)] = match cfg.stencil {
                Stencil::Central2 => &[(1.0, 0.5), (-1.0, -0.5)],
                Stencil::Central4 => &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)],
            };
            let mut numeric = 0.0;
            let mut crossed = false;
            for &(k, weight) in offsets {
                work[i].data_mut()[j] = orig + k * cfg.step;
                let e = evaluate(&f, &work, &tape)?;
                numeric += weight * e.value;
                crossed |= e.crossed > 0;
            }
            work[i].data_mut()[j] = orig;
            if crossed && cfg.kinks == KinkPolicy::Skip {
                report.skipped_kinks += 1;
                continue;
            }
            report.frozen_crossings += crossed as usize;
            let numeric = numeric / cfg.step;
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if report.worst_coord.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_coord = Some(j);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradcheckReport { inputs: reports, tol: cfg.tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.1, -0.4, 0.9, 0.3, -0.7, 0.0]).unwrap();
        let report = gradcheck(|g, v| Ok(g.sum(v[0])), &[x], &GradcheckConfig::default()).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-10, "{}", report.max_rel_error());
    }

    #[test]
    fn rejects_non_scalar_functions() {
        let x = Tensor::<f64>::zeros(&[2]);
        let err = gradcheck(|g, v| g.relu(v[0]).pipe_ok(), &[x], &GradcheckConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonScalar(_)));
    }

    #[test]
    fn corrupted_rule_fails() {
        let x = Tensor::new(&[3], vec![0.5, -0.2, 0.8]).unwrap();
        let cfg = GradcheckConfig { fault: Some(OpKind::Mul), ..Default::default() };
        let report = gradcheck(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            },
            &[x],
            &cfg,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn kinks_are_frozen_or_skipped() {
        let x = Tensor::new(&[3], vec![1e-4, -0.5, 0.7]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.relu(v[0]);
            Ok(g.sum(y))
        };
        let frozen = gradcheck(f, std::slice::from_ref(&x), &GradcheckConfig::default()).unwrap();
        assert!(frozen.passed());
        assert_eq!((frozen.inputs[0].checked, frozen.inputs[0].frozen_crossings), (3, 1));
        let cfg = GradcheckConfig { kinks: KinkPolicy::Skip, ..Default::default() };
        let skipped = gradcheck(f, &[x], &cfg).unwrap();
        assert_eq!((skipped.inputs[0].checked, skipped.inputs[0].skipped_kinks), (2, 1));
    }

    trait PipeOk: Sized {
        fn pipe_ok(self) -> Result<Self> {
            Ok(self)
        }
    }
    impl PipeOk for Var {}
}
