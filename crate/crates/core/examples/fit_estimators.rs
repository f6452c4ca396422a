//! Simulates one trial and runs the three analyses on it.

use crtsim::census::{default_profiles, generate_synthetic_census};
use crtsim::dgm::{CoefficientSet, OutcomeModel};
use crtsim::engine::default_critical_z;
use crtsim::estimators::{boundary_transform, fit_beta, fit_binomial_irls, run_all, AnalysisDataset};
use crtsim::randomization::{build_pool, sample_from_pool};
use crtsim::rng::StreamKey;

fn main() -> crtsim::Result<()> {
    let census = generate_synthetic_census(&default_profiles(), 42)?;
    let model = OutcomeModel::new(&census, CoefficientSet::builtin(2)?, 0.24)?;
    let calib = model.calibrate(0.70, 0.10)?;
    let pool = build_pool(&census, 80, 20_000, 0.20, 5)?;
    let draw = sample_from_pool(&pool, &mut StreamKey::root(9).stream())?;
    let villages = model.simulate(draw, &calib, &mut StreamKey::root(10).stream());
    let data = AnalysisDataset::from_simulated(&villages)?;

    let critical_z = default_critical_z();
    println!("{} villages, critical z {critical_z:.3}", data.len());
    println!("{:<14} {:>9} {:>8} {:>7} {:>7}", "method", "estimate", "se", "z", "reject");
    for r in run_all(&data, critical_z) {
        println!("{:<14} {:>9.4} {:>8.4} {:>7.3} {:>7}", r.method.as_str(), r.estimate, r.se, r.z, r.reject);
    }

    let x = data.design_matrix();
    let glm = fit_binomial_irls(&x, &data.successes(), &data.trials())?;
    println!("\nbinomial GLM: {} IRLS iterations, coefficients {:.4?}", glm.iterations, glm.coef.as_slice());
    let n = data.len();
    let r: Vec<f64> = data.rows().iter().map(|row| boundary_transform(row.proportion(), n)).collect();
    let beta = fit_beta(&x, &r)?;
    println!("beta regression: {} iterations, precision {:.2}", beta.iterations, beta.precision());
    Ok(())
}
