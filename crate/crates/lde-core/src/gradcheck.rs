//! Central-difference gradient verification.

use crate::error::{LdeError, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep over every probed coordinate.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (parameter index, coordinate) of the worst relative error.
    pub worst: (usize, usize),
    pub coords_checked: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of `f` at `params` against central
/// differences (f(θ+h) − f(θ−h)) / 2h, coordinate by coordinate.
///
/// `eval` returns the scalar value only; `grad` returns one gradient tensor
/// per parameter (same order and shapes). The relative error denominator is
/// floored at 1e-2 so that pure finite-difference noise on vanishing
/// gradients does not register, while any genuinely wrong gradient — off by
/// orders of magnitude, not ulps — still lands far above `tol`.
pub fn finite_diff_check(
    eval: impl Fn(&[Tensor]) -> Result<f64>,
    grad: impl Fn(&[Tensor]) -> Result<Vec<Tensor>>,
    params: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    finite_diff_check_probed(eval, grad, params, h, tol, None)
}

/// As `finite_diff_check`, but probing at most `max_coords` evenly spread
/// coordinates per parameter when set — for parameter counts where a full
/// sweep is prohibitive.
pub fn finite_diff_check_probed(
    eval: impl Fn(&[Tensor]) -> Result<f64>,
    grad: impl Fn(&[Tensor]) -> Result<Vec<Tensor>>,
    params: &[Tensor],
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<FdReport> {
    if h <= 0.0 {
        return Err(LdeError::numeric(format!("finite_diff_check: h must be > 0, got {h}")));
    }
    let analytic = grad(params)?;
    if analytic.len() != params.len() {
        return Err(LdeError::shape(format!(
            "finite_diff_check: {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = (0, 0);
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        if analytic[pi].shape() != p.shape() {
            return Err(LdeError::shape(format!(
                "finite_diff_check: gradient {pi} shape {:?} vs parameter {:?}",
                analytic[pi].shape(),
                p.shape()
            )));
        }
        let n = p.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut ci = 0;
        while ci < n {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(LdeError::numeric(format!(
                    "finite_diff_check: non-finite value at parameter {pi} coordinate {ci}"
                )));
            }
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[pi].data()[ci];
            let abs = (fd - an).abs();
            let rel = abs / (an.abs() + fd.abs()).max(1e-2);
            if rel > max_rel {
                max_rel = rel;
                worst = (pi, ci);
            }
            max_abs = max_abs.max(abs);
            checked += 1;
            ci += stride;
        }
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        worst,
        coords_checked: checked,
        passed: max_rel < tol,
    })
}
