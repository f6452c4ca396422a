//! Binomial logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};

use super::{check_full_rank, scale_columns, AnalysisDataset, Method, TestResult, SEPARATION_BOUND, TREATMENT_COLUMN};
use crate::error::{Error, Result};
use crate::special::{expit, ln_gamma};

pub const IRLS_MAX_ITER: usize = 50;
pub const IRLS_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GlmFit {
    /// Coefficients on the caller's column scale.
    pub coef: Vec<f64>,
    /// `(X'WX)⁻¹` on the caller's column scale (dispersion not applied).
    pub cov_unscaled: DMatrix<f64>,
    /// Pearson χ² / (n − p); NaN when there are no residual degrees of freedom.
    pub dispersion: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl GlmFit {
    pub fn model_se(&self, j: usize) -> f64 {
        self.cov_unscaled[(j, j)].sqrt()
    }
}

/// Binomial log-likelihood including the binomial coefficient.
pub fn binomial_loglik(x: &DMatrix<f64>, y: &[f64], m: &[f64], beta: &[f64]) -> f64 {
    let eta = x * DVector::from_column_slice(beta);
    eta.iter()
        .zip(y.iter().zip(m))
        .map(|(&e, (&yi, &mi))| {
            let log_norm = ln_gamma(mi + 1.0) - ln_gamma(yi + 1.0) - ln_gamma(mi - yi + 1.0);
            // y·η − m·log(1 + e^η), written stably
            log_norm + yi * e - mi * softplus(e)
        })
        .sum()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic regression of `y` successes out of `m` trials on `x` (which must
/// contain any intercept the caller wants). Step-halving keeps the
/// log-likelihood from decreasing.
pub fn fit_binomial_irls(x: &DMatrix<f64>, y: &[f64], m: &[f64]) -> Result<GlmFit> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n || m.len() != n {
        return Err(Error::invalid("response length does not match design"));
    }
    check_full_rank(x)?;
    let (xs, factors) = scale_columns(x);

    // Start from a weighted least-squares fit of the smoothed empirical logits.
    let mut eta0 = DVector::zeros(n);
    for i in 0..n {
        let mu = (y[i] + 0.5) / (m[i] + 1.0);
        eta0[i] = (mu / (1.0 - mu)).ln();
    }
    let w0 = DVector::from_iterator(n, m.iter().map(|&mi| mi.max(1e-8)));
    let mut beta = weighted_solve(&xs, &w0, &eta0).ok_or(Error::SingularDesign { column: p - 1 })?;
    let mut ll = binomial_loglik(&xs, y, m, beta.as_slice());

    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::zeros(p, p);
    for it in 1..=IRLS_MAX_ITER {
        iterations = it;
        let eta = &xs * &beta;
        let mut w = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let mu = expit(eta[i]);
            let v = (mu * (1.0 - mu)).max(1e-12);
            w[i] = m[i] * v;
            z[i] = eta[i] + (y[i] - m[i] * mu) / (m[i] * v).max(1e-300);
        }
        let Some(target) = weighted_solve(&xs, &w, &z) else { break };
        let step = &target - &beta;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let cll = binomial_loglik(&xs, y, m, cand.as_slice());
            if cll.is_finite() && cll >= ll - 1e-10 * ll.abs().max(1.0) {
                accepted = Some((cand, cll));
                break;
            }
            t *= 0.5;
        }
        let Some((next, next_ll)) = accepted else { break };
        let delta = (&next - &beta).amax();
        beta = next;
        ll = next_ll;
        if !beta.iter().all(|b| b.is_finite()) {
            break;
        }
        if delta < IRLS_TOLERANCE {
            converged = true;
            break;
        }
    }

    let eta = &xs * &beta;
    let mut pearson = 0.0;
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let mu = expit(eta[i]);
        let v = mu * (1.0 - mu);
        w[i] = m[i] * v;
        if w[i] > 0.0 {
            pearson += (y[i] - m[i] * mu).powi(2) / w[i];
        }
    }
    for a in 0..p {
        for b in 0..=a {
            let s: f64 = (0..n).map(|i| w[i] * xs[(i, a)] * xs[(i, b)]).sum();
            info[(a, b)] = s;
            info[(b, a)] = s;
        }
    }
    let cov_scaled = info.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let coef: Vec<f64> = beta.iter().zip(&factors).map(|(b, f)| b / f).collect();
    let cov_unscaled = DMatrix::from_fn(p, p, |a, b| cov_scaled[(a, b)] / (factors[a] * factors[b]));
    let dispersion = if n > p { pearson / (n - p) as f64 } else { f64::NAN };
    Ok(GlmFit { coef, cov_unscaled, dispersion, loglik: ll, iterations, converged })
}

/// Solves `(X'WX) b = X'Wz` by Cholesky.
fn weighted_solve(x: &DMatrix<f64>, w: &DVector<f64>, z: &DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwz = DVector::zeros(p);
    for i in 0..x.nrows() {
        let wi = w[i];
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            xtwz[a] += xa * z[i];
            for b in 0..=a {
                xtwx[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(b, a)] = xtwx[(a, b)];
        }
    }
    xtwx.cholesky().map(|c| c.solve(&xtwz))
}

/// Quasi-binomial fit on the six-column adjustment design, prior weights `m¹`.
pub fn quasibinomial_fit(data: &AnalysisDataset) -> Result<GlmFit> {
    fit_binomial_irls(&data.design_matrix(), &data.successes(), &data.trials())
}

/// One-sided Wald test on the treatment coefficient with the model SE
/// inflated by `sqrt(φ̂)`.
pub fn fit_quasibinomial(data: &AnalysisDataset, critical_z: f64) -> Result<TestResult> {
    let fit = quasibinomial_fit(data)?;
    let estimate = fit.coef[TREATMENT_COLUMN];
    let se = fit.model_se(TREATMENT_COLUMN) * fit.dispersion.sqrt();
    let converged = fit.converged && estimate.abs() <= SEPARATION_BOUND && se.is_finite();
    Ok(TestResult::decide(Method::Quasibinomial, estimate, se, converged, critical_z))
}
