//! Simulated power next to the closed-form column, by villages per arm.

use crtsim::engine::{closed_form_rows, compare_report, run_study, FormulaParams, RunOptions, StudyConfig};

fn main() -> crtsim::Result<()> {
    let study = StudyConfig::from_json(
        r#"{"census": {"seed": 42}, "pool": {"n_attempts": 20000}, "cer": [0.70], "delta": [0.10],
            "n_per_arm": [60, 70, 80, 90], "coef_sets": [2], "icc_v": [0.24], "n_reps_alt": 300,
            "master_seed": 2024}"#,
        None,
    )?
    .resolve()?;
    let census = study.census.load()?;
    let report = run_study(&study, &census, &RunOptions::default())?;

    let keys: Vec<_> = report.scenarios.iter().map(|s| (s.n_per_arm, s.cer, s.delta)).collect();
    let table = compare_report(&report.scenarios, &closed_form_rows(&keys, &FormulaParams::default())?);
    table.write_csv(std::io::stdout().lock())?;
    Ok(())
}
