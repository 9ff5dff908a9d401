//! Central finite-difference check of the generator objective's gradient.

use serde::Serialize;

use crate::error::Result;
use crate::losses::{AdversarialVariant, LossWeights};
use crate::models::{Generator, LevelDiscriminators};
use crate::pyramid::LaplacianPyramid;
use crate::trainer::generator_objective;

/// Gradients below this magnitude are compared in absolute terms.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the generator objective with
/// `(f(w + h) - f(w - h)) / 2h` for every generator weight.
#[allow(clippy::too_many_arguments)]
pub fn check_generator_gradients(
    generator: &Generator<f64>,
    discriminators: &LevelDiscriminators<f64>,
    input: &LaplacianPyramid<f64>,
    target: &LaplacianPyramid<f64>,
    weights: &LossWeights,
    variant: AdversarialVariant,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = generator_objective(generator, discriminators, input, target, weights, variant, true)?;
    let grads = grads.expect("gradients requested");
    let mut probe = generator.clone();
    let eval = |probe: &Generator<f64>| -> Result<f64> {
        Ok(generator_objective(probe, discriminators, input, target, weights, variant, false)?.0.total)
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (p, grad) in grads.iter().enumerate() {
        for i in 0..generator.params().tensors()[p].numel() {
            let w0 = generator.params().tensors()[p].data()[i];
            probe.params_mut().tensors_mut()[p].data_mut()[i] = w0 + h;
            let up = eval(&probe)?;
            probe.params_mut().tensors_mut()[p].data_mut()[i] = w0 - h;
            let down = eval(&probe)?;
            probe.params_mut().tensors_mut()[p].data_mut()[i] = w0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[i];
            let rel = relative_error(analytic, numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(GradMismatch {
                    param: generator.params().names()[p].clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
