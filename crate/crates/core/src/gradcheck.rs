//! Finite-difference verification of analytic gradients (64-bit only).

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// How a non-scalar op output is reduced to the scalar being checked.
#[derive(Clone, Debug)]
pub enum Reduction {
    Sum,
    /// Fixed projection `Σ w ⊙ y`; random weights avoid the cancellations
    /// a plain sum hides (softmax outputs sum to a constant, for example).
    Weighted(Tensor<f64>),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error per input.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub checked: usize,
    /// Entries skipped because both gradients were below the exclusion floor.
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Entries where `max(|analytic|, |numeric|)` falls below this are skipped.
pub const EXCLUSION_FLOOR: f64 = 1e-6;

fn scalar_output<'g>(out: Var<'g, f64>, reduction: Option<&Reduction>) -> Result<Var<'g, f64>> {
    let n = out.value().len();
    match reduction {
        None => {
            contract!(
                n == 1,
                "op output has shape {:?}; supply a reduction to grad-check it",
                out.shape()
            );
            Ok(out)
        }
        Some(Reduction::Sum) => Ok(out.sum()),
        Some(Reduction::Weighted(w)) => out.weighted_sum(w),
    }
}

/// Compares the tape's gradients of `op(inputs)` against central finite
/// differences for every entry of every input.
pub fn grad_check<F>(
    op: F,
    inputs: &[Tensor<f64>],
    reduction: Option<&Reduction>,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = scalar_output(op(&g, &vars)?, reduction)?;
        let v = out.value().data()[0];
        Ok(v)
    };

    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = scalar_output(op(&g, &vars)?, reduction)?;
        let mut grads = g.backward(out)?;
        vars.iter().map(|&v| grads.take_or_zeros(v)).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: vec![0.0; inputs.len()],
        tolerance,
        checked: 0,
        excluded: 0,
    };
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            let scale = a.abs().max(numeric.abs());
            if scale < EXCLUSION_FLOOR {
                report.excluded += 1;
                continue;
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / scale;
            report.max_rel_error[i] = report.max_rel_error[i].max(rel);
        }
    }
    Ok(report)
}
