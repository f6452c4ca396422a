//! Random-intercept logistic models for baseline ICC estimation.
//!
//! `Y_j ~ Bin(m_j, expit(x_j'η + τ·z_c))`, `z_c ~ N(0, 1)` shared within
//! cluster `c` (a village, or a health area). Each cluster's integral over
//! `z_c` is computed by adaptive Gauss–Hermite quadrature centred at the
//! conditional mode, and `(η, τ)` is maximized by BFGS with a monotone line
//! search. Working with `τ` rather than `log τ` lets the variance reach the
//! `τ = 0` boundary; the likelihood is even in `τ`, so `τ̂²` is reported.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::census::Census;
use crate::error::{Error, Result};
use crate::estimators::fit_binomial_irls;
use crate::quadrature::GaussHermite;
use crate::special::{expit, ln_gamma, mean_sd};

pub const GRADIENT_TOLERANCE: f64 = 1e-6;
const MAX_ITER: usize = 500;
/// `τ̂` below this is reported as a zero variance on the boundary.
const BOUNDARY_TAU: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Village,
    HealthZone,
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "village" => Ok(Level::Village),
            "health_zone" | "health-zone" | "zone" => Ok(Level::HealthZone),
            _ => Err(Error::invalid(format!("unknown level {s}; use village or health_zone"))),
        }
    }
}

/// Latent-scale ICC `τ²/(π²/3 + τ²)`.
pub fn icc_from_tau2(tau2: f64) -> Result<f64> {
    if !(tau2 >= 0.0) {
        return Err(Error::Domain(format!("tau2 must be >= 0, got {tau2}")));
    }
    Ok(tau2 / (PI * PI / 3.0 + tau2))
}

/// `(p_j − mean)/sd` with the n − 1 SD.
pub fn standardize_population(census: &Census) -> Result<Vec<f64>> {
    let pop: Vec<f64> = census.villages().iter().map(|v| f64::from(v.population)).collect();
    if pop.len() < 2 {
        return Err(Error::DegenerateCovariate("need at least two villages to standardize population".into()));
    }
    let (mean, sd) = mean_sd(&pop);
    if sd == 0.0 {
        return Err(Error::DegenerateCovariate("population is constant across villages".into()));
    }
    Ok(pop.iter().map(|p| (p - mean) / sd).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedLogisticFit {
    /// Intercept, per-person population effect, per-km distance effect.
    pub eta: [f64; 3],
    pub se: [f64; 3],
    pub ci_low: [f64; 3],
    pub ci_high: [f64; 3],
    pub loglik: f64,
    pub converged: bool,
}

/// Binomial logistic MLE of baseline coverage on population and distance,
/// with Wald 95% intervals. Zero-variance covariates are dropped (their
/// coefficient is reported as 0 with zero-width interval).
pub fn fit_fixed_logistic(census: &Census) -> Result<FixedLogisticFit> {
    let vs = census.villages();
    let cols: [fn(&crate::census::Village) -> f64; 2] = [|v| f64::from(v.population), |v| v.distance_km];
    let mut kept = vec![0usize];
    for (k, f) in cols.iter().enumerate() {
        let first = f(&vs[0]);
        if vs.iter().any(|v| f(v) != first) {
            kept.push(k + 1);
        }
    }
    let x = DMatrix::from_fn(vs.len(), kept.len(), |i, j| match kept[j] {
        0 => 1.0,
        k => cols[k - 1](&vs[i]),
    });
    let y: Vec<f64> = vs.iter().map(|v| f64::from(v.n_mcv1)).collect();
    let m: Vec<f64> = vs.iter().map(|v| f64::from(v.n_children)).collect();
    let fit = fit_binomial_irls(&x, &y, &m)?;
    let mut eta = [0.0; 3];
    let mut se = [0.0; 3];
    for (j, &k) in kept.iter().enumerate() {
        eta[k] = fit.coef[j];
        se[k] = fit.model_se(j);
    }
    let z = 1.96;
    Ok(FixedLogisticFit {
        eta,
        se,
        ci_low: [eta[0] - z * se[0], eta[1] - z * se[1], eta[2] - z * se[2]],
        ci_high: [eta[0] + z * se[0], eta[1] + z * se[1], eta[2] + z * se[2]],
        loglik: fit.loglik,
        converged: fit.converged,
    })
}

/// Clustered binomial data for a random-intercept fit.
#[derive(Debug, Clone)]
pub struct ClusteredData {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub m: Vec<f64>,
    /// Row indices of each cluster.
    pub clusters: Vec<Vec<usize>>,
}

impl ClusteredData {
    /// Design (1, standardized population, distance) on the census villages.
    pub fn from_census(census: &Census, level: Level) -> Result<Self> {
        let ptilde = standardize_population(census)?;
        let vs = census.villages();
        let x = DMatrix::from_fn(vs.len(), 3, |i, j| match j {
            0 => 1.0,
            1 => ptilde[i],
            _ => vs[i].distance_km,
        });
        let clusters = match level {
            Level::Village => (0..vs.len()).map(|i| vec![i]).collect(),
            Level::HealthZone => census.areas().iter().map(|a| a.villages.clone()).collect(),
        };
        Ok(ClusteredData {
            x,
            y: vs.iter().map(|v| f64::from(v.n_mcv1)).collect(),
            m: vs.iter().map(|v| f64::from(v.n_children)).collect(),
            clusters,
        })
    }

    fn log_binom_const(&self) -> f64 {
        self.y
            .iter()
            .zip(&self.m)
            .map(|(&y, &m)| ln_gamma(m + 1.0) - ln_gamma(y + 1.0) - ln_gamma(m - y + 1.0))
            .sum()
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log of the integrand over `z` for one cluster, without binomial constants.
fn cluster_log_joint(rows: &[usize], lin: &[f64], y: &[f64], m: &[f64], tau: f64, z: f64) -> f64 {
    let mut s = -0.5 * z * z;
    for &j in rows {
        let e = lin[j] + tau * z;
        s += y[j] * e - m[j] * softplus(e);
    }
    s
}

/// Mode and curvature scale of the cluster's conditional density in `z`.
fn cluster_mode(rows: &[usize], lin: &[f64], y: &[f64], m: &[f64], tau: f64) -> (f64, f64) {
    let mut z = 0.0;
    for _ in 0..100 {
        let mut grad = -z;
        let mut info = 1.0;
        for &j in rows {
            let pi = expit(lin[j] + tau * z);
            grad += tau * (y[j] - m[j] * pi);
            info += tau * tau * m[j] * pi * (1.0 - pi);
        }
        let step = grad / info;
        // strictly concave; cap steps to stay in range
        let step = step.clamp(-5.0, 5.0);
        z += step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    let mut curv = 1.0;
    for &j in rows {
        let pi = expit(lin[j] + tau * z);
        curv += tau * tau * m[j] * pi * (1.0 - pi);
    }
    (z, 1.0 / curv.sqrt())
}

/// Marginal log-likelihood and its gradient in `(η, τ)`.
fn loglik_and_grad(data: &ClusteredData, gh: &GaussHermite, params: &[f64], want_grad: bool) -> (f64, DVector<f64>) {
    let p = data.x.ncols();
    let tau = params[p];
    let beta = DVector::from_column_slice(&params[..p]);
    let lin_v = &data.x * beta;
    let lin = lin_v.as_slice();
    let mut ll = data.log_binom_const();
    let mut grad = DVector::zeros(p + 1);
    let log_norm = -0.5 * (2.0 * PI).ln();
    let mut logw = vec![0.0; gh.len()];
    for rows in &data.clusters {
        let (zhat, s) = cluster_mode(rows, lin, &data.y, &data.m, tau);
        let scale = std::f64::consts::SQRT_2 * s;
        for (k, (&xk, &wk)) in gh.nodes.iter().zip(&gh.weights).enumerate() {
            let z = zhat + scale * xk;
            logw[k] = wk.ln() + xk * xk + cluster_log_joint(rows, lin, &data.y, &data.m, tau, z);
        }
        let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logw.iter().map(|l| (l - mx).exp()).sum();
        ll += mx + sum.ln() + scale.ln() + log_norm;
        if want_grad {
            for (k, &xk) in gh.nodes.iter().enumerate() {
                let wk = (logw[k] - mx).exp() / sum;
                if wk == 0.0 {
                    continue;
                }
                let z = zhat + scale * xk;
                let mut dz = 0.0;
                for &j in rows {
                    let r = data.y[j] - data.m[j] * expit(lin[j] + tau * z);
                    for a in 0..p {
                        grad[a] += wk * r * data.x[(j, a)];
                    }
                    dz += r;
                }
                grad[p] += wk * dz * z;
            }
        }
    }
    (ll, grad)
}

/// Marginal log-likelihood at fixed `(η, τ)` (includes binomial coefficients).
pub fn marginal_loglik(data: &ClusteredData, eta: &[f64], tau: f64, n_quad: usize) -> f64 {
    let gh = GaussHermite::new(n_quad);
    let params: Vec<f64> = eta.iter().copied().chain(std::iter::once(tau)).collect();
    loglik_and_grad(data, &gh, &params, false).0
}

/// Gradient of [`marginal_loglik`] in `(η, τ)`.
pub fn marginal_gradient(data: &ClusteredData, eta: &[f64], tau: f64, n_quad: usize) -> Vec<f64> {
    let gh = GaussHermite::new(n_quad);
    let params: Vec<f64> = eta.iter().copied().chain(std::iter::once(tau)).collect();
    loglik_and_grad(data, &gh, &params, true).1.iter().copied().collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmmFit {
    pub level: Level,
    /// Intercept, standardized-population effect, per-km distance effect.
    pub eta: Vec<f64>,
    pub tau2: f64,
    pub icc: f64,
    pub loglik: f64,
    pub converged: bool,
    pub n_quad: usize,
    #[serde(skip)]
    pub boundary: bool,
    #[serde(skip)]
    pub iterations: usize,
    #[serde(skip)]
    pub loglik_trace: Vec<f64>,
}

/// `H⁻¹g` with `H` the central-difference Jacobian of the gradient.
fn newton_step(
    f: &impl Fn(&DVector<f64>) -> (f64, DVector<f64>),
    theta: &DVector<f64>,
    g: &DVector<f64>,
) -> Option<DVector<f64>> {
    let k = theta.len();
    let mut hess = DMatrix::zeros(k, k);
    for j in 0..k {
        let h = 1e-5 * theta[j].abs().max(1.0);
        let mut up = theta.clone();
        up[j] += h;
        let mut dn = theta.clone();
        dn[j] -= h;
        let col = (f(&up).1 - f(&dn).1) / (2.0 * h);
        hess.set_column(j, &col);
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    // -H must be positive definite at a maximum
    (-sym).cholesky().map(|c| -c.solve(g))
}

/// Maximizes the adaptive-quadrature marginal likelihood.
pub fn fit_clustered(data: &ClusteredData, level: Level, n_quad: usize) -> Result<GlmmFit> {
    if n_quad < 9 {
        return Err(Error::invalid(format!("n_quad must be >= 9, got {n_quad}")));
    }
    let gh = GaussHermite::new(n_quad);
    let p = data.x.ncols();
    let start = fit_binomial_irls(&data.x, &data.y, &data.m)?;
    let mut theta = DVector::from_iterator(p + 1, start.coef.iter().copied().chain(std::iter::once(0.5)));
    let f = |t: &DVector<f64>| loglik_and_grad(data, &gh, t.as_slice(), true);
    let (mut ll, mut g) = f(&theta);
    let mut trace = vec![ll];
    // Inverse Hessian approximation of the negative log-likelihood.
    let mut h = DMatrix::<f64>::identity(p + 1, p + 1) * 0.01;
    let mut converged = g.amax() < GRADIENT_TOLERANCE;
    let mut iterations = 0;
    let mut resets = 0;
    while !converged && iterations < MAX_ITER {
        iterations += 1;
        let mut dir = &h * &g;
        if dir.dot(&g) <= 0.0 {
            h = DMatrix::identity(p + 1, p + 1) * (0.01 / g.amax().max(1.0));
            dir = &h * &g;
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &theta + &dir * step;
            let (cll, cg) = f(&cand);
            if cll.is_finite() && cll >= ll + 1e-4 * step * slope {
                accepted = Some((cand, cll, cg));
                break;
            }
            step *= 0.5;
        }
        let Some((next, next_ll, next_g)) = accepted else {
            if resets < 1 {
                resets += 1;
                h = DMatrix::identity(p + 1, p + 1) * (0.01 / g.amax().max(1.0));
                continue;
            }
            break;
        };
        let s = &next - &theta;
        // BFGS on -ℓ: y = ∇(-ℓ)_new − ∇(-ℓ)_old
        let yv = &g - &next_g;
        let sy = s.dot(&yv);
        if sy > 1e-14 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(p + 1, p + 1);
            let a = &i - &s * yv.transpose() * rho;
            let b = &i - &yv * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        theta = next;
        ll = next_ll;
        g = next_g;
        trace.push(ll);
        converged = g.amax() < GRADIENT_TOLERANCE;
        if g.amax() < 1e-3 {
            break;
        }
    }
    // Newton polish on the gradient: near the optimum the log-likelihood
    // gains fall below its rounding resolution, so BFGS line searches stall.
    let mut polish = 0;
    while !converged && polish < 30 {
        polish += 1;
        let Some(step) = newton_step(&f, &theta, &g) else { break };
        let cand = &theta - &step;
        let (cll, cg) = f(&cand);
        if !(cll.is_finite() && cg.amax() < g.amax() && cll >= ll - 1e-12 * ll.abs()) {
            break;
        }
        theta = cand;
        ll = cll.max(ll);
        g = cg;
        trace.push(ll);
        converged = g.amax() < GRADIENT_TOLERANCE;
    }
    let tau = theta[p].abs();
    let boundary = tau < BOUNDARY_TAU;
    let tau2 = if boundary { 0.0 } else { tau * tau };
    Ok(GlmmFit {
        level,
        eta: theta.iter().take(p).copied().collect(),
        tau2,
        icc: icc_from_tau2(tau2)?,
        loglik: ll,
        converged,
        n_quad,
        boundary,
        iterations,
        loglik_trace: trace,
    })
}

pub fn fit_random_intercept(census: &Census, level: Level, n_quad: usize) -> Result<GlmmFit> {
    let data = ClusteredData::from_census(census, level)?;
    fit_clustered(&data, level, n_quad)
}
