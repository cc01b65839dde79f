//! Small dense optimizers: damped least squares (Levenberg–Marquardt with
//! Marquardt diagonal scaling) and a bracketed golden-section search.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the relative step `‖δ‖/(‖x‖+ε)` falls below this.
    pub step_tolerance: f64,
    /// Stop when the relative decrease of the cost falls below this.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
    /// Relative finite-difference step for numerical Jacobians.
    pub fd_step: f64,
    /// Upper bound on the Euclidean length of a single step.
    pub max_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            step_tolerance: 1e-12,
            cost_tolerance: 1e-16,
            initial_damping: 1e-3,
            fd_step: 1e-6,
            max_step: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: DVector<f64>,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// Sum of squared residuals at the optimum.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `‖r(x)‖²` starting from `x0`.
///
/// `jacobian` may be `None`, in which case forward differences with a
/// relative step `fd_step` are used.
pub fn levenberg_marquardt<R, J>(
    mut residual: R,
    mut jacobian: Option<J>,
    x0: DVector<f64>,
    opts: &LmOptions,
) -> Result<LmResult>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    J: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let mut x = x0;
    let mut r = residual(&x)?;
    let mut cost = r.norm_squared();
    let mut mu = opts.initial_damping;
    let mut jac = match jacobian.as_mut() {
        Some(j) => j(&x)?,
        None => forward_jacobian(&mut residual, &x, &r, opts.fd_step)?,
    };
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                // Marquardt scaling with a floor so zero columns stay solvable.
                let d = jtj[(i, i)].max(1e-300);
                a[(i, i)] += mu * d;
            }
            let mut step = match a.clone().cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    mu *= 10.0;
                    continue;
                }
            };
            let len = step.norm();
            if len > opts.max_step {
                step *= opts.max_step / len;
            }
            let trial = &x + &step;
            let r_trial = match residual(&trial) {
                Ok(v) => v,
                Err(_) => {
                    mu *= 10.0;
                    continue;
                }
            };
            let c_trial = r_trial.norm_squared();
            if c_trial.is_finite() && c_trial <= cost {
                let rel_step = step.norm() / (x.norm() + 1e-30);
                let rel_drop = (cost - c_trial) / cost.max(1e-300);
                x = trial;
                r = r_trial;
                cost = c_trial;
                mu = (mu / 3.0).max(1e-15);
                accepted = true;
                if rel_step < opts.step_tolerance || rel_drop < opts.cost_tolerance || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        jac = match jacobian.as_mut() {
            Some(j) => j(&x)?,
            None => forward_jacobian(&mut residual, &x, &r, opts.fd_step)?,
        };
        if !accepted {
            // No downhill step at any damping: we are at the optimum to
            // working precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Ok(LmResult {
        params: x,
        residuals: r,
        jacobian: jac,
        cost,
        iterations,
        converged,
    })
}

fn forward_jacobian<R>(
    residual: &mut R,
    x: &DVector<f64>,
    r0: &DVector<f64>,
    rel: f64,
) -> Result<DMatrix<f64>>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    for k in 0..x.len() {
        let h = rel * x[k].abs().max(1e-3);
        let mut xp = x.clone();
        xp[k] += h;
        let rp = residual(&xp)?;
        if rp.len() != r0.len() {
            return Err(Error::DimensionMismatch {
                expected: r0.len(),
                got: rp.len(),
            });
        }
        jac.set_column(k, &((rp - r0) / h));
    }
    Ok(jac)
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
///
/// Returns the abscissa and value of the best point seen.
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64, max_iter: usize) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..max_iter {
        if (b - a).abs() < tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc < fd { (c, fc) } else { (d, fd) })
}
