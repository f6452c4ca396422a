//! Builds a covariate-constrained randomization pool and draws one allocation.
//!
//! cargo run --release --example constrained_pool -- [n_per_arm] [attempts]

use crtsim::census::{default_profiles, generate_synthetic_census};
use crtsim::randomization::{build_pool, sample_from_pool, Arm, DEFAULT_SMD_THRESHOLD};
use crtsim::rng::StreamKey;

fn main() -> crtsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_per_arm: usize = args.next().map_or(60, |s| s.parse().expect("n_per_arm"));
    let attempts: usize = args.next().map_or(20_000, |s| s.parse().expect("attempts"));

    let census = generate_synthetic_census(&default_profiles(), 42)?;
    let pool = build_pool(&census, n_per_arm, attempts, DEFAULT_SMD_THRESHOLD, 7)?;
    println!(
        "{} of {} candidate draws accepted ({:.1}%), {} infeasible",
        pool.draws.len(),
        pool.n_attempted,
        100.0 * pool.acceptance_rate(),
        pool.n_infeasible
    );

    let mut smds: Vec<f64> = pool.draws.iter().map(|d| d.avg_smd).collect();
    smds.sort_by(f64::total_cmp);
    println!("avg |SMD| of accepted draws: min {:.4}, median {:.4}, max {:.4}", smds[0], smds[smds.len() / 2], smds[smds.len() - 1]);

    let draw = sample_from_pool(&pool, &mut StreamKey::root(1).stream())?;
    for arm in [Arm::Control, Arm::Treatment] {
        let areas: Vec<&str> = draw.allocation.areas(arm).map(|a| census.areas()[a].id.as_str()).collect();
        println!("{:<9} {} villages from {}", arm.label(), draw.selection.arm(arm).len(), areas.join(", "));
    }
    println!("SMD population {:.3}, distance {:.3}, baseline rate {:.3}", draw.smd[0], draw.smd[1], draw.smd[2]);
    Ok(())
}
