mod common;

use crtsim::census::{default_profiles, empirical_logit, generate_synthetic_census, Census, Village};
use crtsim::dgm::{tau2_from_icc, CoefficientSet, OutcomeModel};
use crtsim::glmm::{
    fit_clustered, fit_fixed_logistic, fit_random_intercept, icc_from_tau2, marginal_loglik, ClusteredData, Level,
};
use crtsim::randomization::{build_pool, sample_from_pool, Arm};
use crtsim::rng::StreamKey;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn calibrated_control_rate_matches_monte_carlo() {
    let census = generate_synthetic_census(&default_profiles(), 42).unwrap();
    let coef = CoefficientSet::builtin(2).unwrap();
    let model = OutcomeModel::new(&census, coef, 0.24).unwrap();
    let calib = model.calibrate(0.70, 0.15).unwrap();

    let tau = tau2_from_icc(0.24).unwrap().sqrt();
    let normal = Normal::new(0.0, tau).unwrap();
    let mut rng = common::rng(2024);
    let vs = census.villages();
    let draws = 1_000_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let v = &vs[rng.gen_range(0..vs.len())];
        let offset = empirical_logit(v.n_mcv1, v.n_children).unwrap()
            + coef.beta_pop * f64::from(v.population)
            + coef.beta_dist * v.distance_km;
        total += expit(calib.beta0 + offset + normal.sample(&mut rng));
    }
    let rate = total / draws as f64;
    assert!((rate - 0.70).abs() <= 0.001, "{rate}");
}

fn arm_mean(villages: &[crtsim::dgm::SimulatedVillage], arm: Arm) -> f64 {
    let r: Vec<f64> = villages.iter().filter(|v| v.arm == arm).map(|v| f64::from(v.y1) / f64::from(v.m1)).collect();
    r.iter().sum::<f64>() / r.len() as f64
}

/// Mean and MC standard error of per-replicate statistics.
fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn simulated_control_rate_recovers_the_target() {
    let census = generate_synthetic_census(&default_profiles(), 42).unwrap();
    for (set, icc, cer, n) in [(2u8, 0.24, 0.70, 60usize), (1, 1.0 / 3.0, 0.55, 90), (3, 0.24, 0.75, 70)] {
        let model = OutcomeModel::new(&census, CoefficientSet::builtin(set).unwrap(), icc).unwrap();
        let calib = model.calibrate(cer, 0.10).unwrap();
        let pool = build_pool(&census, n, 20_000, 0.20, 8).unwrap();
        let control: Vec<f64> = (0..2000)
            .map(|rep| {
                let key = StreamKey::root(17).child(rep);
                let draw = sample_from_pool(&pool, &mut key.child(0).stream()).unwrap();
                arm_mean(&model.simulate(draw, &calib, &mut key.child(1).stream()), Arm::Control)
            })
            .collect();
        let (m, se) = mean_se(&control);
        assert!((m - cer).abs() <= 3.0 * se, "set {set}: {m} vs {cer} (se {se})");
    }
}

#[test]
fn simulated_arm_difference_recovers_the_effect() {
    let census = generate_synthetic_census(&default_profiles(), 42).unwrap();
    let model = OutcomeModel::new(&census, CoefficientSet::builtin(2).unwrap(), 0.24).unwrap();
    let calib = model.calibrate(0.70, 0.15).unwrap();
    let pool = build_pool(&census, 60, 20_000, 0.20, 8).unwrap();
    let diffs: Vec<f64> = (0..10_000)
        .map(|rep| {
            let key = StreamKey::root(23).child(rep);
            let draw = sample_from_pool(&pool, &mut key.child(0).stream()).unwrap();
            let v = model.simulate(draw, &calib, &mut key.child(1).stream());
            arm_mean(&v, Arm::Treatment) - arm_mean(&v, Arm::Control)
        })
        .collect();
    let (m, se) = mean_se(&diffs);
    assert!((m - 0.15).abs() <= 3.0 * se, "{m} (se {se})");
}

#[test]
fn simulation_is_reproducible_and_bounded() {
    let census = generate_synthetic_census(&default_profiles(), 42).unwrap();
    let model = OutcomeModel::new(&census, CoefficientSet::builtin(3).unwrap(), 1.0 / 3.0).unwrap();
    let calib = model.calibrate(0.65, 0.2).unwrap();
    let pool = build_pool(&census, 90, 5_000, 0.20, 1).unwrap();
    let draw = &pool.draws[0];
    let a = model.simulate(draw, &calib, &mut StreamKey::root(5).stream());
    let b = model.simulate(draw, &calib, &mut StreamKey::root(5).stream());
    assert_eq!(a, b);
    assert_eq!(a.len(), 180);
    for v in &a {
        assert!(v.y1 <= v.m1);
        assert_eq!(v.m1, census.villages()[v.village as usize].n_children);
    }
}

/// Five clusters of two to four villages.
fn toy_data() -> ClusteredData {
    let sizes = [2, 3, 4, 2, 3];
    let mut rows = Vec::new();
    let mut clusters = Vec::new();
    let mut r = common::rng(3);
    for &s in &sizes {
        let start = rows.len();
        for _ in 0..s {
            let m: f64 = r.gen_range(5..25) as f64;
            rows.push((r.gen_range(-1.5..1.5), r.gen_range(0.5..9.0), m, (m * r.gen_range(0.3..0.9f64)).round()));
        }
        clusters.push((start..rows.len()).collect());
    }
    ClusteredData {
        x: DMatrix::from_fn(rows.len(), 3, |i, j| [1.0, rows[i].0, rows[i].1][j]),
        m: rows.iter().map(|r| r.2).collect(),
        y: rows.iter().map(|r| r.3).collect(),
        clusters,
    }
}

/// Marginal log-likelihood by the trapezoid rule on the random effect.
fn trapezoid_loglik(data: &ClusteredData, eta: &[f64], tau: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let n_pts = 100_000;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / n_pts as f64;
    let mut ll = 0.0;
    for rows in &data.clusters {
        let log_f = |b: f64| -> f64 {
            let mut s = -0.5 * (b / tau).powi(2) - (tau * (2.0 * std::f64::consts::PI).sqrt()).ln();
            for &j in rows {
                let e = (0..3).map(|k| data.x[(j, k)] * eta[k]).sum::<f64>() + b;
                let p = expit(e);
                s += ln_gamma(data.m[j] + 1.0) - ln_gamma(data.y[j] + 1.0) - ln_gamma(data.m[j] - data.y[j] + 1.0)
                    + data.y[j] * p.ln()
                    + (data.m[j] - data.y[j]) * (1.0 - p).ln();
            }
            s
        };
        let vals: Vec<f64> = (0..=n_pts).map(|k| log_f(lo * tau.abs() + k as f64 * h * tau.abs())).collect();
        let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = vals
            .iter()
            .enumerate()
            .map(|(k, v)| if k == 0 || k == n_pts { 0.5 } else { 1.0 } * (v - mx).exp())
            .sum();
        ll += mx + (sum * h * tau.abs()).ln();
    }
    ll
}

#[test]
fn adaptive_quadrature_matches_trapezoid_oracle() {
    let data = toy_data();
    for (eta, tau) in [([0.3, 0.2, -0.05], 0.8), ([1.0, -0.4, 0.1], 1.5), ([-0.2, 0.0, 0.02], 0.3)] {
        let agq = marginal_loglik(&data, &eta, tau, 21);
        let trap = trapezoid_loglik(&data, &eta, tau);
        assert!((agq - trap).abs() <= 1e-6 * trap.abs(), "{agq} vs {trap}");
    }
}

fn census_with_outcomes(base: &Census, y: &[u32]) -> Census {
    Census::from_villages(
        base.villages().iter().zip(y).map(|(v, &y)| Village { n_mcv1: y, ..v.clone() }).collect(),
    )
    .unwrap()
}

/// Village-level random-intercept data on the census covariates.
fn simulate_village_level(census: &Census, tau2: f64, seed: u64) -> Census {
    let mut rng = common::rng(seed);
    let normal = Normal::new(0.0, tau2.sqrt().max(1e-300)).unwrap();
    let pops: Vec<f64> = census.villages().iter().map(|v| f64::from(v.population)).collect();
    let mean = pops.iter().sum::<f64>() / pops.len() as f64;
    let sd = (pops.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (pops.len() - 1) as f64).sqrt();
    let y: Vec<u32> = census
        .villages()
        .iter()
        .map(|v| {
            let alpha = if tau2 > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            let p = expit(1.0 + 0.1 * (f64::from(v.population) - mean) / sd - 0.05 * v.distance_km + alpha);
            Binomial::new(u64::from(v.n_children), p).unwrap().sample(&mut rng) as u32
        })
        .collect();
    census_with_outcomes(census, &y)
}

#[test]
fn zero_tau_likelihood_equals_fixed_effects_likelihood() {
    let census = generate_synthetic_census(&default_profiles(), 42).unwrap();
    let fixed = fit_fixed_logistic(&census).unwrap();
    let data = ClusteredData::from_census(&census, Level::Village).unwrap();
    // map the raw-population fit onto the standardized design
    let pops: Vec<f64> = census.villages().iter().map(|v| f64::from(v.population)).collect();
    let mean = pops.iter().sum::<f64>() / pops.len() as f64;
    let sd = (pops.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (pops.len() - 1) as f64).sqrt();
    let eta = [fixed.eta[0] + fixed.eta[1] * mean, fixed.eta[1] * sd, fixed.eta[2]];
    let ll = marginal_loglik(&data, &eta, 0.0, 21);
    assert!((ll - fixed.loglik).abs() <= 1e-8 * fixed.loglik.abs(), "{ll} vs {}", fixed.loglik);
}

#[test]
fn quadrature_order_barely_moves_the_estimate() {
    let census = generate_synthetic_census(&default_profiles(), 42).unwrap();
    let sim = simulate_village_level(&census, 1.0389, 7);
    let a = fit_random_intercept(&sim, Level::Village, 21).unwrap();
    let b = fit_random_intercept(&sim, Level::Village, 41).unwrap();
    assert!(a.converged && b.converged);
    assert!((a.tau2 - b.tau2).abs() < 1e-4, "{} vs {}", a.tau2, b.tau2);
    for w in a.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "trace decreased: {w:?}");
    }
}

#[test]
fn no_clustering_gives_near_zero_variance() {
    let census = generate_synthetic_census(&default_profiles(), 42).unwrap();
    let (mut small, mut boundary) = (0, 0);
    for seed in 0..10 {
        let sim = simulate_village_level(&census, 0.0, 100 + seed);
        let fit = fit_random_intercept(&sim, Level::Village, 21).unwrap();
        assert!(fit.converged);
        assert!(fit.tau2 < 0.1, "seed {seed}: {}", fit.tau2);
        small += usize::from(fit.tau2 < 0.01);
        boundary += usize::from(fit.boundary);
    }
    assert!(small >= 6 && boundary >= 6, "tau2 < 0.01 in {small}/10, boundary in {boundary}/10");
}

#[test]
fn health_zone_fit_uses_twelve_clusters() {
    let census = generate_synthetic_census(&default_profiles(), 42).unwrap();
    let data = ClusteredData::from_census(&census, Level::HealthZone).unwrap();
    assert_eq!(data.clusters.len(), 12);
    let fit = fit_clustered(&data, Level::HealthZone, 21).unwrap();
    assert!(fit.converged);
    assert!((fit.icc - icc_from_tau2(fit.tau2).unwrap()).abs() < 1e-15);
}
