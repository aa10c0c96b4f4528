//! Central finite-difference verification of tape gradients (64-bit).

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Floor of the relative-error denominator.
    pub eps_div: f64,
    /// One-sided slopes disagreeing by more than this (relative) mark a kink.
    pub kink_threshold: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            eps_div: 1e-6,
            kink_threshold: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crosses a nondifferentiable point.
    pub excluded: usize,
}

/// Compares the tape gradient of a scalar-valued `graph` with central differences.
///
/// Relative error per coordinate is
/// `|analytic − central| / max(|analytic|, |central|, eps_div)`; the report
/// carries the maximum over all coordinates of all inputs.
pub fn finite_diff_check<F>(graph: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars = xs
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = graph(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = graph(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    let grads = tape.backward(out)?;

    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[idx].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = inputs[idx].data()[k];
            work[idx].data_mut()[k] = orig + h;
            let fp = eval(&work)?;
            work[idx].data_mut()[k] = orig - h;
            let fm = eval(&work)?;
            work[idx].data_mut()[k] = orig;

            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            let slope_scale = fwd.abs().max(bwd.abs()).max(opts.eps_div);
            if (fwd - bwd).abs() / slope_scale > opts.kink_threshold
                && (fwd - bwd).abs() > 1e3 * h * slope_scale.max(1.0)
            {
                report.excluded += 1;
                continue;
            }
            let central = (fp - fm) / (2.0 * h);
            let denom = a.abs().max(central.abs()).max(opts.eps_div);
            let rel = (a - central).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
