use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use super::config::Study;
use super::report::{read_results, MethodSummary, ScenarioSummary, RESULTS_CSV_HEADER};
use crate::census::Census;
use crate::dgm::{CalibratedIntercepts, CoefficientSet, OutcomeModel, Scenario};
use crate::error::{Error, Result};
use crate::estimators::{run_all, AnalysisDataset, Method, TestResult};
use crate::randomization::{build_pool, sample_from_pool, ConstrainedPool};
use crate::rng::{hash_bytes, tag, StreamKey};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STUDY_FILE: &str = "study.json";

/// `1`–`3` for built-in sets, `custom:<beta_pop>:<beta_dist>` otherwise.
pub fn coef_label(coef: &CoefficientSet) -> String {
    if coef.set_index == 0 {
        format!("custom:{}:{}", coef.beta_pop, coef.beta_dist)
    } else {
        coef.set_index.to_string()
    }
}

pub fn scenario_id(s: &Scenario) -> String {
    format!("cer{}_d{}_n{}_c{}_icc{}", s.cer, s.delta, s.n_per_arm, coef_label(&s.coef), s.icc_v)
}

fn coef_cmp(a: &CoefficientSet, b: &CoefficientSet) -> std::cmp::Ordering {
    // built-in sets first, in index order
    let rank = |c: &CoefficientSet| if c.set_index == 0 { u8::MAX } else { c.set_index };
    rank(a)
        .cmp(&rank(b))
        .then(a.beta_pop.total_cmp(&b.beta_pop))
        .then(a.beta_dist.total_cmp(&b.beta_dist))
}

/// Cartesian product of the study grids, deduplicated and ordered by
/// `(cer, delta, n_per_arm, coef_set, icc_v)`. Null scenarios get the null
/// replicate budget.
pub fn expand_grid(study: &Study) -> Vec<Scenario> {
    fn sorted_f64(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
    let mut n_per_arm = study.n_per_arm.clone();
    n_per_arm.sort_unstable();
    n_per_arm.dedup();
    let mut coefs = study.coef_sets.clone();
    coefs.sort_by(coef_cmp);
    coefs.dedup();

    let mut out = Vec::new();
    for &cer in &sorted_f64(&study.cer) {
        for &delta in &sorted_f64(&study.delta) {
            for &n in &n_per_arm {
                for &coef in &coefs {
                    for &icc_v in &sorted_f64(&study.icc_v) {
                        out.push(Scenario {
                            cer,
                            delta,
                            n_per_arm: n,
                            coef,
                            icc_v,
                            n_reps: if delta == 0.0 { study.n_reps_null } else { study.n_reps_alt },
                            critical_z: study.critical_z,
                            seed: study.master_seed,
                        });
                    }
                }
            }
        }
    }
    out
}

type CalibrationKey = (u64, u64, u8, u64, u64, u64);

/// Calibrated intercepts keyed by `(cer, delta, coefficient set, icc)`.
/// Villages per arm does not enter the calibration, so scenarios that differ
/// only in sample size share an entry.
#[derive(Debug, Default)]
pub struct CalibrationCache {
    entries: Mutex<HashMap<CalibrationKey, CalibratedIntercepts>>,
}

impl CalibrationCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(s: &Scenario) -> CalibrationKey {
        (
            s.cer.to_bits(),
            s.delta.to_bits(),
            s.coef.set_index,
            s.coef.beta_pop.to_bits(),
            s.coef.beta_dist.to_bits(),
            s.icc_v.to_bits(),
        )
    }

    pub fn get_or_calibrate(&self, model: &OutcomeModel<'_>, s: &Scenario) -> Result<CalibratedIntercepts> {
        let key = Self::key(s);
        if let Some(c) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(*c);
        }
        let c = model.calibrate(s.cer, s.delta)?;
        self.entries.lock().expect("cache lock").insert(key, c);
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Substream root for replicate `rep` of a scenario.
pub fn replicate_key(s: &Scenario, rep: usize) -> StreamKey {
    StreamKey::root(s.seed).path(&[hash_bytes(scenario_id(s).as_bytes()), rep as u64])
}

fn run_replicate(
    s: &Scenario,
    rep: usize,
    model: &OutcomeModel<'_>,
    pool: &ConstrainedPool,
    calib: &CalibratedIntercepts,
) -> Result<[TestResult; 3]> {
    let key = replicate_key(s, rep);
    let draw = sample_from_pool(pool, &mut key.child(tag::DRAW).stream())?;
    let villages = model.simulate(draw, calib, &mut key.child(tag::DGM).stream());
    Ok(match AnalysisDataset::from_simulated(&villages) {
        Ok(data) => run_all(&data, s.critical_z),
        Err(_) => Method::ALL.map(TestResult::failed),
    })
}

/// Runs every replicate of one scenario (in parallel on the current rayon
/// pool) and aggregates decisions per method.
pub fn run_scenario(
    scenario: &Scenario,
    census: &Census,
    pool: &ConstrainedPool,
    cache: &CalibrationCache,
) -> Result<ScenarioSummary> {
    scenario.validate()?;
    if pool.n_per_arm != scenario.n_per_arm {
        return Err(Error::invalid(format!(
            "pool was built for {} villages per arm, scenario needs {}",
            pool.n_per_arm, scenario.n_per_arm
        )));
    }
    let model = OutcomeModel::for_scenario(census, scenario)?;
    let calib = cache.get_or_calibrate(&model, scenario)?;
    let results = (0..scenario.n_reps)
        .into_par_iter()
        .map(|rep| run_replicate(scenario, rep, &model, pool, &calib))
        .collect::<Result<Vec<_>>>()?;
    let methods = Method::ALL
        .iter()
        .enumerate()
        .map(|(k, &m)| MethodSummary::from_results(m, results.iter().map(|r| r[k])))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioSummary {
        scenario_id: scenario_id(scenario),
        cer: scenario.cer,
        delta: scenario.delta,
        n_per_arm: scenario.n_per_arm,
        coef_set: coef_label(&scenario.coef),
        icc_v: scenario.icc_v,
        methods,
    })
}

/// Seed of the randomization pool for a given number of villages per arm.
pub fn pool_seed(master_seed: u64, n_per_arm: usize) -> u64 {
    StreamKey::root(master_seed).path(&[tag::POOL, n_per_arm as u64]).stream().next_u64()
}

pub fn build_pools(study: &Study, census: &Census) -> Result<BTreeMap<usize, ConstrainedPool>> {
    let mut sizes = study.n_per_arm.clone();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|n| {
            let pool = build_pool(census, n, study.pool_attempts, study.threshold, pool_seed(study.master_seed, n))?;
            Ok((n, pool))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses all available cores.
    pub workers: Option<usize>,
    /// Directory for `results.csv`, `summary.json` and `study.json`.
    /// Completed scenarios already present there are reused.
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoolStats {
    pub n_per_arm: usize,
    pub n_attempted: usize,
    pub n_accepted: usize,
    pub n_infeasible: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub master_seed: u64,
    pub critical_z: f64,
    pub pools: Vec<PoolStats>,
    pub scenarios: Vec<ScenarioSummary>,
}

fn load_resumable(dir: &Path, study: &Study) -> Result<HashMap<String, ScenarioSummary>> {
    let study_path = dir.join(STUDY_FILE);
    let results_path = dir.join(RESULTS_FILE);
    let current = serde_json::to_string_pretty(study).expect("study serializes");
    if study_path.exists() {
        let previous = std::fs::read_to_string(&study_path).map_err(|e| Error::io(&study_path, e))?;
        if previous.trim_end() != current {
            return Err(Error::invalid(format!(
                "{} holds results for a different study; use a fresh output directory",
                dir.display()
            )));
        }
    } else if results_path.exists() {
        return Err(Error::invalid(format!(
            "{} exists without {STUDY_FILE}; refusing to resume",
            results_path.display()
        )));
    }
    let mut done = HashMap::new();
    if results_path.exists() {
        let f = File::open(&results_path).map_err(|e| Error::io(&results_path, e))?;
        for s in read_results(f)? {
            done.insert(s.scenario_id.clone(), s);
        }
    }
    std::fs::write(&study_path, format!("{current}\n")).map_err(|e| Error::io(&study_path, e))?;
    Ok(done)
}

fn run_inner(study: &Study, census: &Census, output_dir: Option<&Path>) -> Result<StudyReport> {
    let scenarios = expand_grid(study);
    let mut done = match output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            load_resumable(dir, study)?
        }
        None => HashMap::new(),
    };
    let mut sink = match output_dir {
        Some(dir) => {
            let path = dir.join(RESULTS_FILE);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{RESULTS_CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((path, w))
        }
        None => None,
    };
    let pools = build_pools(study, census)?;
    let cache = CalibrationCache::new();
    let mut summaries = Vec::with_capacity(scenarios.len());
    for s in &scenarios {
        let id = scenario_id(s);
        let summary = match done.remove(&id) {
            Some(prev) if prev.methods.iter().all(|m| m.n_reps == s.n_reps) => prev,
            _ => run_scenario(s, census, &pools[&s.n_per_arm], &cache)?,
        };
        if let Some((path, w)) = sink.as_mut() {
            summary.write_rows(w).and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        summaries.push(summary);
    }
    let report = StudyReport {
        master_seed: study.master_seed,
        critical_z: study.critical_z,
        pools: pools
            .values()
            .map(|p| PoolStats {
                n_per_arm: p.n_per_arm,
                n_attempted: p.n_attempted,
                n_accepted: p.draws.len(),
                n_infeasible: p.n_infeasible,
            })
            .collect(),
        scenarios: summaries,
    };
    if let Some(dir) = output_dir {
        let path = dir.join(SUMMARY_FILE);
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, format!("{json}\n")).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// Builds the pools and runs every scenario of the study. Output is
/// identical for any worker count.
pub fn run_study(study: &Study, census: &Census, opts: &RunOptions) -> Result<StudyReport> {
    study.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.workers {
        if n == 0 {
            return Err(Error::invalid("workers must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    let threads = builder.build().map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    threads.install(|| run_inner(study, census, opts.output_dir.as_deref()))
}
