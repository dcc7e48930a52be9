//! Central finite-difference h-sweeps for verifying directional derivatives.

use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub steps: Vec<f64>,
    /// Relative error |fd - exact| / |exact| at each step.
    pub errors: Vec<f64>,
    /// log2 of successive error ratios (steps halve).
    pub orders: Vec<f64>,
    /// Median order over the pairs before the roundoff plateau.
    pub observed_order: f64,
    pub best: f64,
}

impl FdReport {
    pub fn passes(&self, order_tol: f64, best_tol: f64) -> bool {
        (self.observed_order - 2.0).abs() <= order_tol && self.best <= best_tol
    }
}

/// Central differences (f(h) - f(-h)) / 2h for h = h0, h0/2, ... compared
/// with `exact`, the claimed derivative at 0.
pub fn central_sweep(f: &dyn Fn(f64) -> Result<f64>, exact: f64, h0: f64, count: usize) -> Result<FdReport> {
    let scale = exact.abs().max(f64::MIN_POSITIVE);
    let mut steps = Vec::with_capacity(count);
    let mut errors = Vec::with_capacity(count);
    let mut h = h0;
    for _ in 0..count {
        let fd = (f(h)? - f(-h)?) / (2.0 * h);
        steps.push(h);
        errors.push((fd - exact).abs() / scale);
        h *= 0.5;
    }
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    // Truncation-dominated pairs: the error still falls by more than 2x.
    let mut asymptotic: Vec<f64> = orders.iter().copied().take_while(|o| *o > 1.0).collect();
    asymptotic.sort_by(f64::total_cmp);
    let observed_order = if asymptotic.is_empty() { f64::NAN } else { asymptotic[asymptotic.len() / 2] };
    let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(FdReport { steps, errors, orders, observed_order, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_shows_second_order() {
        let f = |h: f64| Ok((1.0 + h).exp());
        let r = central_sweep(&f, 1f64.exp(), 1e-1, 8).unwrap();
        assert!(r.passes(0.1, 1e-6), "{r:?}");
    }

    #[test]
    fn wrong_derivative_fails() {
        let f = |h: f64| Ok((1.0 + h).exp());
        let r = central_sweep(&f, 1.01 * 1f64.exp(), 1e-1, 8).unwrap();
        assert!(!r.passes(0.2, 1e-5));
    }
}
