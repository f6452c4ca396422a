//! Beta regression with logit mean link and a scalar log-link precision.
//!
//! Parameters are `θ = (β, γ)` with `μ_i = expit(x_i'β)` and `φ = exp(γ)`;
//! `y_i ~ Beta(μ_i φ, (1 − μ_i) φ)`.

use nalgebra::{DMatrix, DVector};

use super::{check_full_rank, scale_columns, AnalysisDataset, Method, TestResult, SEPARATION_BOUND, TREATMENT_COLUMN};
use crate::error::{Error, Result};
use crate::special::{digamma, expit, ln_gamma, trigamma};

pub const BETA_MAX_ITER: usize = 200;
pub const BETA_TOLERANCE: f64 = 1e-10;

/// Smithson–Verkuilen squeeze `(r·(n − 1) + 0.5)/n` into the open unit interval.
pub fn boundary_transform(r: f64, n_obs: usize) -> f64 {
    let n = n_obs as f64;
    (r * (n - 1.0) + 0.5) / n
}

#[derive(Debug, Clone)]
pub struct BetaFit {
    /// Mean-model coefficients followed by `γ = ln φ`, on the caller's column scale.
    pub theta: Vec<f64>,
    /// Inverse observed information on the caller's column scale.
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl BetaFit {
    pub fn precision(&self) -> f64 {
        self.theta.last().copied().unwrap_or(f64::NAN).exp()
    }

    pub fn se(&self, j: usize) -> f64 {
        self.cov[(j, j)].sqrt()
    }
}

struct Terms {
    mu: f64,
    phi: f64,
    a: f64,
    b: f64,
    ystar_resid: f64,
    log1m_y: f64,
}

fn terms(x: &DMatrix<f64>, i: usize, theta: &[f64]) -> Terms {
    let p = x.ncols();
    let eta: f64 = (0..p).map(|j| x[(i, j)] * theta[j]).sum();
    let mu = expit(eta);
    let phi = theta[p].exp();
    let a = mu * phi;
    let b = (1.0 - mu) * phi;
    Terms { mu, phi, a, b, ystar_resid: f64::NAN, log1m_y: f64::NAN }
}

fn with_response(mut t: Terms, y: f64) -> Terms {
    let ystar = (y / (1.0 - y)).ln();
    t.ystar_resid = ystar - (digamma(t.a) - digamma(t.b));
    t.log1m_y = (1.0 - y).ln();
    t
}

pub fn beta_loglik(x: &DMatrix<f64>, y: &[f64], theta: &[f64]) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let t = terms(x, i, theta);
            ln_gamma(t.phi) - ln_gamma(t.a) - ln_gamma(t.b) + (t.a - 1.0) * y[i].ln() + (t.b - 1.0) * (1.0 - y[i]).ln()
        })
        .sum()
}

pub fn beta_score(x: &DMatrix<f64>, y: &[f64], theta: &[f64]) -> DVector<f64> {
    let p = x.ncols();
    let mut u = DVector::zeros(p + 1);
    for i in 0..x.nrows() {
        let t = with_response(terms(x, i, theta), y[i]);
        let g = t.mu * (1.0 - t.mu);
        let d_eta = t.phi * t.ystar_resid * g;
        for j in 0..p {
            u[j] += d_eta * x[(i, j)];
        }
        let d_phi = digamma(t.phi) + t.mu * t.ystar_resid + t.log1m_y - digamma(t.b);
        u[p] += t.phi * d_phi;
    }
    u
}

/// Negative Hessian of the log-likelihood.
pub fn beta_observed_information(x: &DMatrix<f64>, y: &[f64], theta: &[f64]) -> DMatrix<f64> {
    information(x, Some(y), theta)
}

/// Fisher information (expectation of the observed information).
pub fn beta_expected_information(x: &DMatrix<f64>, theta: &[f64]) -> DMatrix<f64> {
    information(x, None, theta)
}

fn information(x: &DMatrix<f64>, y: Option<&[f64]>, theta: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut h = DMatrix::zeros(p + 1, p + 1);
    for i in 0..x.nrows() {
        let t = terms(x, i, theta);
        let (resid, score_phi) = match y {
            Some(y) => {
                let t = with_response(terms(x, i, theta), y[i]);
                let s = digamma(t.phi) + t.mu * t.ystar_resid + t.log1m_y - digamma(t.b);
                (t.ystar_resid, s)
            }
            None => (0.0, 0.0),
        };
        let (mu, phi) = (t.mu, t.phi);
        let g = mu * (1.0 - mu);
        let dg = g * (1.0 - 2.0 * mu);
        let (ta, tb) = (trigamma(t.a), trigamma(t.b));
        // second derivatives of ℓ_i in (η, φ), then chained to γ = ln φ
        let h_ee = -phi * phi * (ta + tb) * g * g + phi * resid * dg;
        let h_ep = g * (resid - phi * (mu * ta - (1.0 - mu) * tb));
        let h_pp = trigamma(phi) - mu * mu * ta - (1.0 - mu) * (1.0 - mu) * tb;
        let h_eg = phi * h_ep;
        let h_gg = phi * score_phi + phi * phi * h_pp;
        for a in 0..p {
            let xa = x[(i, a)];
            for b in 0..=a {
                h[(a, b)] -= h_ee * xa * x[(i, b)];
            }
            h[(p, a)] -= h_eg * xa;
        }
        h[(p, p)] -= h_gg;
    }
    for a in 0..=p {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    h
}

/// Maximizes the beta log-likelihood of `y ∈ (0,1)` on design `x`. Newton
/// steps on the observed information when it is positive definite, Fisher
/// scoring otherwise, with step halving on the log-likelihood.
pub fn fit_beta(x: &DMatrix<f64>, y: &[f64]) -> Result<BetaFit> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(Error::invalid("response length does not match design"));
    }
    if let Some(bad) = y.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::invalid(format!("beta response {bad} outside (0, 1)")));
    }
    check_full_rank(x)?;
    let (xs, factors) = scale_columns(x);

    // Least-squares start on the logit scale; precision from the moment estimate.
    let z = DVector::from_iterator(n, y.iter().map(|&v| (v / (1.0 - v)).ln()));
    let xtx = xs.transpose() * &xs;
    let beta0 = xtx
        .cholesky()
        .map(|c| c.solve(&(xs.transpose() * &z)))
        .ok_or(Error::SingularDesign { column: p - 1 })?;
    let fitted = &xs * &beta0;
    let resid = &z - &fitted;
    let df = (n as f64 - p as f64).max(1.0);
    let phi0 = {
        let s2: f64 = resid.norm_squared() / df;
        let est: f64 = fitted
            .iter()
            .map(|&e| {
                let mu = expit(e);
                let g = mu * (1.0 - mu);
                g / (s2 * g * g).max(1e-12) - 1.0
            })
            .sum::<f64>()
            / n as f64;
        est.clamp(1.0, 1e6)
    };
    let mut theta: Vec<f64> = beta0.iter().copied().chain(std::iter::once(phi0.ln())).collect();
    let mut ll = beta_loglik(&xs, y, &theta);

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=BETA_MAX_ITER {
        iterations = it;
        let u = beta_score(&xs, y, &theta);
        let step = beta_observed_information(&xs, y, &theta)
            .cholesky()
            .map(|c| c.solve(&u))
            .or_else(|| beta_expected_information(&xs, &theta).cholesky().map(|c| c.solve(&u)));
        let Some(step) = step else { break };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let cll = beta_loglik(&xs, y, &cand);
            if cll.is_finite() && cll >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some((cand, cll));
                break;
            }
            t *= 0.5;
        }
        let Some((next, next_ll)) = accepted else { break };
        let delta = next.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        theta = next;
        ll = next_ll;
        if delta < BETA_TOLERANCE {
            converged = true;
            break;
        }
    }

    let info = beta_observed_information(&xs, y, &theta);
    let cov_s = info.try_inverse().unwrap_or_else(|| DMatrix::from_element(p + 1, p + 1, f64::NAN));
    let scale = |j: usize| if j < p { factors[j] } else { 1.0 };
    let theta_raw: Vec<f64> = theta.iter().enumerate().map(|(j, v)| v / scale(j)).collect();
    let cov = DMatrix::from_fn(p + 1, p + 1, |a, b| cov_s[(a, b)] / (scale(a) * scale(b)));
    Ok(BetaFit { theta: theta_raw, cov, loglik: ll, iterations, converged })
}

/// Beta regression of the squeezed village proportions on the six-column design.
pub fn fit_beta_regression(data: &AnalysisDataset, critical_z: f64) -> Result<TestResult> {
    let n = data.len();
    let y: Vec<f64> = data.rows().iter().map(|r| boundary_transform(r.proportion(), n)).collect();
    debug_assert!(y.iter().all(|v| *v > 0.0 && *v < 1.0));
    let fit = fit_beta(&data.design_matrix(), &y)?;
    let estimate = fit.theta[TREATMENT_COLUMN];
    let se = fit.se(TREATMENT_COLUMN);
    let converged = fit.converged && estimate.abs() <= SEPARATION_BOUND && se.is_finite();
    Ok(TestResult::decide(Method::Beta, estimate, se, converged, critical_z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_transform_values() {
        assert!((boundary_transform(1.0, 120) - 119.5 / 120.0).abs() < 1e-15);
        assert!((boundary_transform(0.0, 120) - 0.5 / 120.0).abs() < 1e-15);
        for n in 1..50 {
            assert_eq!(boundary_transform(0.5, n), 0.5);
        }
    }

    #[test]
    fn symmetric_responses_give_zero_intercept() {
        let x = DMatrix::from_element(6, 1, 1.0);
        let y = [0.5, 0.5, 0.5, 0.5, 0.4, 0.6];
        let fit = fit_beta(&x, &y).unwrap();
        assert!(fit.converged);
        assert!(fit.theta[0].abs() < 1e-10);
    }

    #[test]
    fn mirrored_responses_negate_mean_coefficients() {
        let x = DMatrix::from_row_slice(8, 2, &[1.0, 0.1, 1.0, 0.5, 1.0, 0.9, 1.0, 1.3, 1.0, 2.0, 1.0, 2.2, 1.0, 3.1, 1.0, 4.0]);
        let y = [0.2, 0.35, 0.3, 0.5, 0.55, 0.7, 0.62, 0.8];
        let ym: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let a = fit_beta(&x, &y).unwrap();
        let b = fit_beta(&x, &ym).unwrap();
        assert!((a.theta[0] + b.theta[0]).abs() < 1e-8);
        assert!((a.theta[1] + b.theta[1]).abs() < 1e-8);
        assert!((a.theta[2] - b.theta[2]).abs() < 1e-8);
    }

    #[test]
    fn responses_outside_unit_interval_are_rejected() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(fit_beta(&x, &[0.2, 1.0, 0.4]).is_err());
    }
}
