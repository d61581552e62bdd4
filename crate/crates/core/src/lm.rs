//! Small dense Levenberg-Marquardt solver for square nonlinear systems with
//! box constraints handled by projection. Used by the equilibrium solver,
//! which provides analytic Jacobians.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("residual evaluation failed at the initial point")]
    BadInitialPoint,
    #[error("iterate diverged to non-finite values")]
    Diverged,
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iters: usize,
    /// Convergence threshold on the residual 2-norm.
    pub tol_residual: f64,
    pub damping_init: f64,
    pub damping_max: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iters: 200, tol_residual: 1e-10, damping_init: 1e-3, damping_max: 1e10 }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult<const N: usize> {
    pub x: SVector<f64, N>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn clamp<const N: usize>(
    mut x: SVector<f64, N>,
    lo: &SVector<f64, N>,
    hi: &SVector<f64, N>,
) -> SVector<f64, N> {
    for i in 0..N {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
    x
}

/// Minimise `||f(x)||` over the box `[lo, hi]` starting from `x0`.
///
/// `f` returns the stacked residual and its Jacobian, or `None` where the
/// model is undefined (treated as a rejected step). The damping is scaled by
/// the diagonal of the Gauss-Newton matrix, so badly scaled variables such as
/// drive torque need no manual conditioning.
pub fn solve_box<const N: usize>(
    mut f: impl FnMut(&SVector<f64, N>) -> Option<(SVector<f64, N>, SMatrix<f64, N, N>)>,
    x0: SVector<f64, N>,
    lo: SVector<f64, N>,
    hi: SVector<f64, N>,
    opts: &LmOptions,
) -> Result<LmResult<N>, LmError> {
    let mut x = clamp(x0, &lo, &hi);
    let (mut res, mut jac) = f(&x).ok_or(LmError::BadInitialPoint)?;
    if !res.iter().all(|v| v.is_finite()) {
        return Err(LmError::BadInitialPoint);
    }
    let mut cost = res.norm();
    let mut lambda = opts.damping_init;

    for iter in 0..opts.max_iters {
        if cost < opts.tol_residual {
            return Ok(LmResult { x, residual_norm: cost, iterations: iter, converged: true });
        }
        let jtj = jac.transpose() * jac;
        let jtr = jac.transpose() * res;
        let mut stepped = false;
        while lambda <= opts.damping_max {
            let mut h = jtj;
            for i in 0..N {
                h[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = h.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let p = chol.solve(&(-jtr));
            let x_new = clamp(x + p, &lo, &hi);
            if let Some((res_new, jac_new)) = f(&x_new) {
                if !res_new.iter().all(|v| v.is_finite()) {
                    return Err(LmError::Diverged);
                }
                let cost_new = res_new.norm();
                if cost_new < cost {
                    x = x_new;
                    res = res_new;
                    jac = jac_new;
                    cost = cost_new;
                    lambda = (lambda / 3.0).max(1e-12);
                    stepped = true;
                    break;
                }
            }
            lambda *= 3.0;
        }
        if !stepped {
            break;
        }
    }
    Ok(LmResult {
        x,
        residual_norm: cost,
        iterations: opts.max_iters,
        converged: cost < opts.tol_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_a_square_nonlinear_system() {
        // x^2 + y - 11 = 0, x + y^2 - 7 = 0 (a Himmelblau root).
        let f = |x: &SVector<f64, 2>| {
            let (a, b) = (x[0], x[1]);
            let res = SVector::<f64, 2>::new(a * a + b - 11.0, a + b * b - 7.0);
            let jac = SMatrix::<f64, 2, 2>::new(2.0 * a, 1.0, 1.0, 2.0 * b);
            Some((res, jac))
        };
        let sol = solve_box(
            f,
            SVector::<f64, 2>::new(1.0, 1.0),
            SVector::<f64, 2>::new(-10.0, -10.0),
            SVector::<f64, 2>::new(10.0, 10.0),
            &LmOptions::default(),
        )
        .unwrap();
        assert!(sol.converged);
        assert!(sol.residual_norm < 1e-10);
        assert!((sol.x[0] - 3.0).abs() < 1e-8);
        assert!((sol.x[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn respects_box_constraints() {
        // Unconstrained root at x = 4; box caps it at 2, so the solver stops
        // on the bound without converging.
        let f = |x: &SVector<f64, 1>| {
            Some((SVector::<f64, 1>::new(x[0] - 4.0), SMatrix::<f64, 1, 1>::new(1.0)))
        };
        let sol = solve_box(
            f,
            SVector::<f64, 1>::new(0.0),
            SVector::<f64, 1>::new(-2.0),
            SVector::<f64, 1>::new(2.0),
            &LmOptions::default(),
        )
        .unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.x[0], 2.0);
    }

    #[test]
    fn badly_scaled_variables_converge() {
        // One variable lives at 1e3 scale, the other at 1e-2.
        let f = |x: &SVector<f64, 2>| {
            let res = SVector::<f64, 2>::new((x[0] - 2000.0) * 1e-3, (x[1] - 0.03) * 1e2);
            let jac = SMatrix::<f64, 2, 2>::new(1e-3, 0.0, 0.0, 1e2);
            Some((res, jac))
        };
        let sol = solve_box(
            f,
            SVector::<f64, 2>::new(100.0, -0.5),
            SVector::<f64, 2>::new(0.0, -1.0),
            SVector::<f64, 2>::new(5000.0, 1.0),
            &LmOptions::default(),
        )
        .unwrap();
        assert!(sol.converged, "residual {}", sol.residual_norm);
    }
}
