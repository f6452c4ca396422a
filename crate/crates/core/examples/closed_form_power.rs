//! Closed-form power by villages per arm, and its limit as clusters grow.

use crtsim::closed_form::{cluster_size, power, power_plateau_limit, PowerInputs};

fn main() -> crtsim::Result<()> {
    let base = PowerInputs { m: 1.0, c: 6, pi0: 0.70, pi1: 0.85, icc: 0.048, alpha: 0.05 };

    println!("villages/arm  children/cluster  power");
    for v in [60, 70, 80, 90] {
        let m = cluster_size(v, 14.0, 12);
        println!("{v:>12}  {m:>16}  {:.3}", power(&PowerInputs { m, ..base })?);
    }

    println!("\ncluster size sweep");
    for m in [10.0, 100.0, 1e3, 1e4, 1e5, 1e6] {
        println!("{m:>9}  {:.4}", power(&PowerInputs { m, ..base })?);
    }
    let limit = power_plateau_limit(base.c, base.pi0, base.pi1, base.icc, base.alpha)?;
    println!("limit      {:.4}", limit.power);
    Ok(())
}
