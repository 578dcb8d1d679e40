//! Central finite-difference gradient checking.

use crate::error::Result;

use super::model::MlpModel;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub n_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `f` at `x` against central
/// differences of its loss, coordinate by coordinate.
pub fn grad_check_vec<F>(x: &[f64], f: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(x)?;
    let mut probe = x.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let (up, _) = f(&probe)?;
        probe[i] = x[i] - FD_STEP;
        let (down, _) = f(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        n_checked: x.len(),
        tolerance,
        passed: worst.0 < tolerance,
    })
}

/// Gradient check over every parameter of `model`. `loss` returns the loss
/// and its gradient in the model's parameter layout.
pub fn grad_check<F>(model: &MlpModel, loss: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&MlpModel) -> Result<(f64, Vec<f64>)>,
{
    let sizes = model.sizes().to_vec();
    grad_check_vec(
        model.params(),
        |p| {
            let m = MlpModel::from_params(&sizes, p.to_vec())?;
            loss(&m)
        },
        tolerance,
    )
}
