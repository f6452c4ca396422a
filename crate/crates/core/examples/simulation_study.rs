//! Runs a small base-case study and writes results.csv / summary.json.
//!
//! cargo run --release --example simulation_study -- [out_dir]

use crtsim::engine::{run_study, RunOptions, StudyConfig};

const CONFIG: &str = r#"{
    "census": {"seed": 42},
    "pool": {"n_attempts": 20000},
    "cer": [0.70],
    "delta": [0, 0.15],
    "n_per_arm": [60, 90],
    "coef_sets": [2],
    "icc_v": [0.24],
    "n_reps_null": 1000,
    "n_reps_alt": 300,
    "master_seed": 2024
}"#;

fn main() -> crtsim::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/simulation_study".into());
    let study = StudyConfig::from_json(CONFIG, None)?.resolve()?;
    let census = study.census.load()?;
    let report = run_study(&study, &census, &RunOptions { workers: None, output_dir: Some(out.clone().into()) })?;

    for p in &report.pools {
        println!("pool n={}: {} of {} accepted", p.n_per_arm, p.n_accepted, p.n_attempted);
    }
    for s in &report.scenarios {
        println!("{}", s.scenario_id);
        for m in &s.methods {
            println!(
                "  {:<14} {:.4} ({:.4}, {:.4})  failed {:.4}",
                m.method.as_str(),
                m.rate,
                m.ci_low,
                m.ci_high,
                m.fail_rate
            );
        }
    }
    println!("results in {out}");
    Ok(())
}
