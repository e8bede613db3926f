//! Per-iteration schedules. "Iteration" counts optimizer steps.

use crate::error::{contract, Result};

fn progress(it: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(contract!("schedule needs a positive iteration count"));
    }
    if it > total {
        return Err(contract!("iteration {it} is past the end of a {total}-step schedule"));
    }
    Ok(it as f64 / total as f64)
}

/// Context-loss weight `(1 - it/total)^2`.
pub fn alpha_schedule(it: u64, total: u64) -> Result<f64> {
    let rest = 1.0 - progress(it, total)?;
    Ok(rest * rest)
}

/// Polynomial decay `base * (1 - it/total)^power`.
pub fn lr_schedule(it: u64, total: u64, base: f64, power: f64) -> Result<f64> {
    Ok(base * (1.0 - progress(it, total)?).powf(power))
}
