//! Generates the synthetic baseline census and prints per-area summaries.
//!
//! cargo run --example generate_census -- [seed] [out.csv]

use crtsim::census::{default_profiles, generate_synthetic_census, summarize_census};

fn main() -> crtsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(42, |s| s.parse().expect("seed must be an integer"));
    let census = generate_synthetic_census(&default_profiles(), seed)?;

    println!("{} villages in {} health areas (seed {seed})", census.villages().len(), census.n_areas());
    println!("{:<16} {:>4} {:>9} {:>9} {:>8} {:>13}", "area", "n", "children", "mcv1", "pooled", "median (IQR)");
    for s in summarize_census(&census)? {
        println!(
            "{:<16} {:>4} {:>9} {:>9} {:>8.3} {:>5.2} ({:.2}-{:.2})",
            s.health_area,
            s.profile.n_villages,
            s.total_children,
            s.total_mcv1,
            s.pooled_rate,
            s.rate_median,
            s.rate_q1,
            s.rate_q3
        );
    }
    if let Some(path) = args.next() {
        census.save(&path)?;
        println!("census written to {path}");
    }
    Ok(())
}
