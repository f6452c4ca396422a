use std::path::Path;
use std::process::{Command, Output};

fn crtsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crtsim")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_census_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = crtsim(&["generate-census", "--default", "--seed", "42", "--out", p(out)]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("200 villages"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn eleven_area_profile_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let eleven: Vec<_> = crtsim::census::default_profiles().into_iter().take(11).collect();
    std::fs::write(&path, serde_json::to_string(&eleven).unwrap()).unwrap();
    let o = crtsim(&["generate-census", "--profiles", p(&path), "--seed", "1", "--out", p(&dir.path().join("c.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("11"));
}

#[test]
fn build_pool_defaults_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let census = dir.path().join("c.csv");
    assert!(crtsim(&["generate-census", "--default", "--seed", "42", "--out", p(&census)]).status.success());
    let pool = |out: &str, attempts: &str| {
        crtsim(&["build-pool", "--census", p(&census), "--n-per-arm", "60", "--attempts", attempts, "--seed", "3", "--out", out])
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert!(pool(p(&a), "3000").status.success());
    assert!(pool(p(&b), "3000").status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    let census_data = crtsim::census::load_census(&census).unwrap();
    let back = crtsim::randomization::read_pool(&census_data, text.as_bytes(), 0.2).unwrap();
    assert!(back.draws.iter().all(|d| d.avg_smd <= 0.20));
    assert_eq!(pool(p(&dir.path().join("z.csv")), "0").status.code(), Some(1));
}

#[test]
fn power_formula_prints_three_decimals() {
    let o = crtsim(&["power-formula", "--villages-per-arm", "60", "--c", "6", "--pi0", "0.70", "--pi1", "0.85", "--icc", "0.048"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.794");
    let o = crtsim(&["power-formula", "--m", "140", "--pi0", "0.7", "--pi1", "0.7", "--icc", "0.048"]);
    assert_eq!(stdout(&o).trim(), "0.050");
}

#[test]
fn power_curve_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    let o = crtsim(&["power-formula", "--m", "10", "--pi0", "0.7", "--pi1", "0.85", "--icc", "0.048", "--curve", p(&curve)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&curve).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(crtsim::closed_form::CURVE_CSV_HEADER));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert!(rows.len() > 50);
    assert_eq!(rows.last().unwrap()[0], 1e6);
    for w in rows.windows(2) {
        assert!(w[1][0] > w[0][0] && w[1][6] > w[0][6]);
        assert!(w[1][6] < 0.8393);
    }
}

#[test]
fn simulate_and_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("study.json");
    std::fs::write(
        &config,
        r#"{"census": {"seed": 42}, "pool": {"n_attempts": 3000}, "cer": [0.7], "delta": [0, 0.15],
            "n_per_arm": [60, 70], "coef_sets": [2], "icc_v": [0.24], "n_reps_null": 30, "n_reps_alt": 20,
            "master_seed": 9}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = crtsim(&["simulate", "--config", p(&config), "--out", p(&out), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(out.join("results.csv")).unwrap();
    assert!(crtsim(&["simulate", "--config", p(&config), "--out", p(&out)]).status.success());
    assert_eq!(std::fs::read(out.join("results.csv")).unwrap(), first);

    let table = dir.path().join("table.csv");
    let o = crtsim(&["compare", "--sim", p(&out.join("results.csv")), "--villages-per-arm", "60,70,80", "--out", p(&table)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_per_arm=80"));
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().next(), Some(crtsim::engine::COMPARISON_CSV_HEADER));
    assert_eq!(text.lines().count(), 5);
    let formula: Vec<f64> = text
        .lines()
        .filter(|l| l.starts_with("power"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(formula.len(), 2);
    assert!((formula[0] - 0.794).abs() < 5e-4);
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"census": {"seed": 1}, "cer": [0.7], "delta": "zero"}"#).unwrap();
    let o = crtsim(&["simulate", "--config", p(&config), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta"));
}

#[test]
fn fit_icc_emits_json() {
    let dir = tempfile::tempdir().unwrap();
    let census = dir.path().join("c.csv");
    assert!(crtsim(&["generate-census", "--default", "--seed", "42", "--out", p(&census)]).status.success());
    let o = crtsim(&["fit-icc", "--census", p(&census), "--level", "health_zone"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in ["level", "eta", "tau2", "icc", "loglik", "converged", "n_quad"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["level"], "health_zone");
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["generate-census", "build-pool", "power-formula", "simulate", "compare", "fit-icc"] {
        let o = crtsim(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("--"), "{sub}");
    }
    assert_eq!(crtsim(&["no-such-command"]).status.code(), Some(1));
}
