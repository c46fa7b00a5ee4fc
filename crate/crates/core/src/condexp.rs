//! Least-squares projection of conditional expectations on a polynomial
//! basis of the current state.
//!
//! The backward schemes need conditional expectations given the simulated
//! state at each step. The Euler chain is Markov, so those expectations are
//! functions of the current state alone, and we estimate them by regressing
//! Monte Carlo targets on centered polynomials of the state. This regression
//! layer is the only approximation between the discrete scheme and something
//! computable from samples; quadrature mode (see the oracle module) removes
//! it entirely.

use crate::error::{Error, Result};
use crate::parallel::chunked_accumulate;

/// Polynomial basis with affine centering fitted from sample moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    pub degree: usize,
    pub shift: f64,
    pub scale: f64,
}

impl Basis {
    /// Center and scale from the sample mean and standard deviation. A
    /// degenerate sample (all states equal) gets unit scale so the basis
    /// stays well defined; the ridge handles the singular design.
    pub fn fit(degree: usize, states: &[f64]) -> Basis {
        let n = states.len() as f64;
        let sums = chunked_accumulate(states.len(), 2, |i, acc| {
            acc[0] += states[i];
            acc[1] += states[i] * states[i];
        });
        let mean = sums[0] / n;
        let var = (sums[1] / n - mean * mean).max(0.0);
        let sd = var.sqrt();
        let scale = if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 };
        Basis { degree, shift: mean, scale }
    }

    #[inline]
    pub fn centered(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }
}

/// An affine combination of basis functions; the realized form of a
/// conditional expectation x -> E[target | state = x].
#[derive(Debug, Clone, PartialEq)]
pub struct FittedFunction {
    pub basis: Basis,
    pub coeffs: Vec<f64>,
}

impl FittedFunction {
    /// Constant function, used for exact terminal layers and trivial fits.
    pub fn constant(c: f64) -> FittedFunction {
        FittedFunction {
            basis: Basis { degree: 0, shift: 0.0, scale: 1.0 },
            coeffs: vec![c],
        }
    }

    /// Evaluate by Horner's rule on the centered variable.
    #[inline]
    pub fn evaluate(&self, x: f64) -> f64 {
        let u = self.basis.centered(x);
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * u + c;
        }
        acc
    }
}

/// Solve the ridge-regularized normal equations for the projection of
/// `targets` on the basis evaluated at `states`.
///
/// Minimizes `sum_m (targets_m - sum_k c_k phi_k(states_m))^2 + ridge |c|^2`.
/// The Gram matrix is assembled from power sums of the centered states and
/// factored by Cholesky; a failure even with the ridge reports the diagonal
/// condition estimate.
pub fn fit_least_squares(
    basis: &Basis,
    states: &[f64],
    targets: &[f64],
    ridge: f64,
) -> Result<FittedFunction> {
    let m = states.len();
    let k = basis.degree + 1;
    if targets.len() != m {
        return Err(Error::config(
            "condexp.fit_least_squares",
            "states and targets must have equal length",
        ));
    }
    if m <= basis.degree + 1 {
        return Err(Error::config(
            "condexp.fit_least_squares",
            format!("need more than degree+1={} samples, got {m}", basis.degree + 1),
        ));
    }
    if ridge < 0.0 {
        return Err(Error::config("condexp.fit_least_squares", "ridge must be nonnegative"));
    }

    // Power sums p_s = sum u^s for s = 0..2d and moment vector b_a = sum u^a t.
    let n_pows = 2 * basis.degree + 1;
    let sums = chunked_accumulate(m, n_pows + k, |i, acc| {
        let u = basis.centered(states[i]);
        let t = targets[i];
        let mut pw = 1.0;
        for s in 0..n_pows {
            acc[s] += pw;
            if s < k {
                acc[n_pows + s] += pw * t;
            }
            pw *= u;
        }
    });

    let mut gram = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            gram[a * k + b] = sums[a + b];
        }
        gram[a * k + a] += ridge;
    }
    let rhs: Vec<f64> = sums[n_pows..n_pows + k].to_vec();

    let coeffs = cholesky_solve(&gram, &rhs, k).ok_or_else(|| {
        let mut dmin = f64::INFINITY;
        let mut dmax = 0.0f64;
        for a in 0..k {
            dmin = dmin.min(gram[a * k + a].abs());
            dmax = dmax.max(gram[a * k + a].abs());
        }
        Error::estimator(
            "condexp.fit_least_squares",
            format!(
                "Gram matrix numerically singular with ridge {ridge:e}; diagonal condition estimate {:.3e}",
                dmax / dmin.max(f64::MIN_POSITIVE)
            ),
        )
    })?;
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::estimator(
            "condexp.fit_least_squares",
            "non-finite regression coefficients",
        ));
    }
    Ok(FittedFunction { basis: basis.clone(), coeffs })
}

/// Two fits sharing one pass over the states: the Gram power sums are
/// accumulated once and reused for both right-hand sides, so each result is
/// bit-identical to a standalone [`fit_least_squares`] call on the same
/// data. The second target is produced per index, which lets callers avoid
/// materializing increment-weighted targets.
pub fn fit_least_squares_pair<F>(
    basis: &Basis,
    states: &[f64],
    targets_a: &[f64],
    target_b: F,
    ridge: f64,
) -> Result<(FittedFunction, FittedFunction)>
where
    F: Fn(usize) -> f64 + Sync,
{
    let m = states.len();
    let k = basis.degree + 1;
    if targets_a.len() != m {
        return Err(Error::config(
            "condexp.fit_least_squares",
            "states and targets must have equal length",
        ));
    }
    if m <= basis.degree + 1 {
        return Err(Error::config(
            "condexp.fit_least_squares",
            format!("need more than degree+1={} samples, got {m}", basis.degree + 1),
        ));
    }
    if ridge < 0.0 {
        return Err(Error::config("condexp.fit_least_squares", "ridge must be nonnegative"));
    }
    let n_pows = 2 * basis.degree + 1;
    let sums = chunked_accumulate(m, n_pows + 2 * k, |i, acc| {
        let u = basis.centered(states[i]);
        let ta = targets_a[i];
        let tb = target_b(i);
        let mut pw = 1.0;
        for s in 0..n_pows {
            acc[s] += pw;
            if s < k {
                acc[n_pows + s] += pw * ta;
                acc[n_pows + k + s] += pw * tb;
            }
            pw *= u;
        }
    });
    let solve_one = |rhs: &[f64]| -> Result<FittedFunction> {
        let mut gram = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                gram[a * k + b] = sums[a + b];
            }
            gram[a * k + a] += ridge;
        }
        let coeffs = cholesky_solve(&gram, rhs, k).ok_or_else(|| {
            Error::estimator(
                "condexp.fit_least_squares",
                format!("Gram matrix numerically singular with ridge {ridge:e}"),
            )
        })?;
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::estimator(
                "condexp.fit_least_squares",
                "non-finite regression coefficients",
            ));
        }
        Ok(FittedFunction { basis: basis.clone(), coeffs })
    };
    let fa = solve_one(&sums[n_pows..n_pows + k])?;
    let fb = solve_one(&sums[n_pows + k..n_pows + 2 * k])?;
    Ok((fa, fb))
}

/// Dense SPD solve; returns None if a pivot is non-positive.
fn cholesky_solve(a: &[f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    let mut y = vec![0.0; k];
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * k + p] * y[p];
        }
        y[i] = s / l[i * k + i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for p in i + 1..k {
            s -= l[p * k + i] * x[p];
        }
        x[i] = s / l[i * k + i];
    }
    Some(x)
}
