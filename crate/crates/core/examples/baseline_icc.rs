//! Estimates the ICC of baseline coverage at village and health-area level.

use crtsim::census::{default_profiles, generate_synthetic_census};
use crtsim::glmm::{fit_fixed_logistic, fit_random_intercept, Level};

fn main() -> crtsim::Result<()> {
    let census = generate_synthetic_census(&default_profiles(), 42)?;
    let fixed = fit_fixed_logistic(&census)?;
    println!("fixed-effects logistic: eta {:.5?}, loglik {:.3}", fixed.eta, fixed.loglik);
    for level in [Level::Village, Level::HealthZone] {
        let fit = fit_random_intercept(&census, level, 21)?;
        println!(
            "{:<12} tau2 {:.4}  icc {:.4}  loglik {:.3}  converged {}",
            format!("{level:?}"),
            fit.tau2,
            fit.icc,
            fit.loglik,
            fit.converged
        );
    }
    Ok(())
}
