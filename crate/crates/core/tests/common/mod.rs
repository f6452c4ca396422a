//! Shared test helpers: random datasets and a derivative-free reference
//! maximizer that shares no code with the fitters under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use statrs::function::gamma::ln_gamma;

use crtsim::estimators::{AnalysisDataset, AnalysisRow};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random small trial: 8–20 villages, both arms represented, every
/// follow-up proportion strictly inside (0, 1).
pub fn random_dataset(seed: u64) -> AnalysisDataset {
    let mut r = rng(seed);
    let n = r.gen_range(8..=20);
    let rows: Vec<AnalysisRow> = (0..n)
        .map(|i| {
            let m1 = r.gen_range(6..=40u32);
            let p: f64 = r.gen_range(0.2..0.85);
            let y1 = ((p * m1 as f64).round() as u32 + r.gen_range(0..3)).clamp(1, m1 - 1);
            AnalysisRow {
                y1,
                m1,
                treated: i % 2 == 0,
                baseline_rate: r.gen_range(0.1..0.95),
                population: r.gen_range(20.0..1200.0f64).round(),
                distance_km: r.gen_range(0.2..14.0),
            }
        })
        .collect();
    AnalysisDataset::new(rows).unwrap()
}

/// Columns rescaled to unit max-abs, returned with the factors.
pub fn scaled(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut xs = x.clone();
    let mut f = vec![1.0; x.ncols()];
    for j in 0..x.ncols() {
        let m = x.column(j).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        f[j] = m;
        for i in 0..x.nrows() {
            xs[(i, j)] /= m;
        }
    }
    (xs, f)
}

pub fn reference_binomial_loglik(x: &DMatrix<f64>, y: &[f64], m: &[f64], b: &[f64]) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let eta: f64 = (0..x.ncols()).map(|j| x[(i, j)] * b[j]).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            y[i] * p.ln() + (m[i] - y[i]) * (1.0 - p).ln()
        })
        .sum()
}

/// Beta log-likelihood; the last parameter is log precision.
pub fn reference_beta_loglik(x: &DMatrix<f64>, y: &[f64], t: &[f64]) -> f64 {
    let k = x.ncols();
    let phi = t[k].exp();
    (0..x.nrows())
        .map(|i| {
            let eta: f64 = (0..k).map(|j| x[(i, j)] * t[j]).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let (a, b) = (mu * phi, (1.0 - mu) * phi);
            ln_gamma(phi) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * y[i].ln() + (b - 1.0) * (1.0 - y[i]).ln()
        })
        .sum()
}

pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, t: &[f64], h: f64) -> Vec<f64> {
    (0..t.len())
        .map(|j| {
            let mut up = t.to_vec();
            let mut dn = t.to_vec();
            up[j] += h;
            dn[j] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, t: &[f64], h: f64) -> DMatrix<f64> {
    let k = t.len();
    let f0 = f(t);
    let mut hm = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v = if a == b {
                let mut up = t.to_vec();
                let mut dn = t.to_vec();
                up[a] += h;
                dn[a] -= h;
                (f(&up) - 2.0 * f0 + f(&dn)) / (h * h)
            } else {
                let at = |sa: f64, sb: f64| {
                    let mut p = t.to_vec();
                    p[a] += sa * h;
                    p[b] += sb * h;
                    f(&p)
                };
                (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h)
            };
            hm[(a, b)] = v;
            hm[(b, a)] = v;
        }
    }
    hm
}

/// Damped Newton ascent using only function values (finite-difference
/// gradient and Hessian), with a Levenberg shift when the Hessian is not
/// negative definite.
pub fn brute_force_maximize(f: &dyn Fn(&[f64]) -> f64, start: &[f64]) -> Vec<f64> {
    let mut t = start.to_vec();
    let mut ft = f(&t);
    for _ in 0..500 {
        let g = DVector::from_vec(fd_gradient(f, &t, 1e-5));
        let h = fd_hessian(f, &t, 1e-4);
        let mut lambda = 0.0;
        let step = loop {
            let shifted = -&h + DMatrix::identity(t.len(), t.len()) * lambda;
            if let Some(c) = shifted.cholesky() {
                break c.solve(&g);
            }
            lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
        };
        let mut s = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = t.iter().zip(step.iter()).map(|(a, d)| a + s * d).collect();
            let fc = f(&cand);
            if fc.is_finite() && fc >= ft {
                let size = step.amax() * s;
                t = cand;
                ft = fc;
                moved = size > 1e-12;
                break;
            }
            s *= 0.5;
        }
        if !moved {
            break;
        }
    }
    t
}

/// `|a − b| <= tol · max(|b|, 1)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
