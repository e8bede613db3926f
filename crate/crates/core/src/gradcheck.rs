//! Central finite-difference gradient checking.
//!
//! For every scalar `θ_i` of the checked variables the analytic gradient from
//! backprop is compared with `(f(θ + ε e_i) - f(θ - ε e_i)) / 2ε`. The
//! relative error of one component is
//!
//! ```text
//! |g_a - g_n| / max(|g_a|, |g_n|, floor)
//! ```
//!
//! so components much smaller than `floor` are judged on absolute error
//! `floor * tolerance` instead of blowing up on cancellation noise.

use candle_core::{DType, Tensor, Var};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-3, floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Checks every element of every variable in `vars` (all must be f64).
/// `f` must evaluate the same scalar function on each call.
pub fn check_gradients<F>(f: F, vars: &[(String, Var)], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    if vars.iter().any(|(_, v)| v.dtype() != DType::F64) {
        return Err(contract!("finite-difference checks need f64 variables"));
    }
    let grads = f()?.backward()?;
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for (name, var) in vars {
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let mut work = base.clone();
        for i in 0..base.len() {
            work[i] = base[i] + cfg.eps;
            var.set(&Tensor::from_vec(work.clone(), shape.clone(), var.device())?)?;
            let plus = scalar(&f()?)?;
            work[i] = base[i] - cfg.eps;
            var.set(&Tensor::from_vec(work.clone(), shape.clone(), var.device())?)?;
            let minus = scalar(&f()?)?;
            work[i] = base[i];
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let err = relative_error(analytic[i], numeric, cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst =
                    Some(Mismatch { name: name.clone(), index: i, analytic: analytic[i], numeric, rel_error: err });
            }
        }
        var.set(&Tensor::from_vec(base, shape, var.device())?)?;
    }
    Ok(report)
}
