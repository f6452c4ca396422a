//! Aggregated results: Monte Carlo error, the results CSV, and the
//! closed-form comparison table.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::closed_form::{cluster_size, power, PowerInputs};
use crate::error::{Error, Result};
use crate::estimators::{Method, TestResult};

pub const RESULTS_CSV_HEADER: &str =
    "scenario_id,cer,delta,n_per_arm,coef_set,icc_v,method,n_reps,n_reject,rate,mcse,ci_low,ci_high,fail_rate";
pub const COMPARISON_CSV_HEADER: &str =
    "quantity,cer,delta,coef_set,icc_v,n_per_arm,beta,naive,quasibinomial,closed_form";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mcse {
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// `sqrt(p(1−p)/n)` with a normal-approximation 95% interval clamped to [0, 1].
pub fn mcse(rate: f64, n_reps: usize) -> Result<Mcse> {
    if n_reps == 0 {
        return Err(Error::invalid("n_reps must be >= 1"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("rate must lie in [0, 1], got {rate}")));
    }
    let se = (rate * (1.0 - rate) / n_reps as f64).sqrt();
    Ok(Mcse { se, ci_low: (rate - 1.96 * se).max(0.0), ci_high: (rate + 1.96 * se).min(1.0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_reps: usize,
    pub n_reject: usize,
    /// Replicates whose fit did not converge (counted as non-rejections).
    pub n_failed: usize,
    pub rate: f64,
    pub mcse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub fail_rate: f64,
}

impl MethodSummary {
    pub fn from_counts(method: Method, n_reps: usize, n_reject: usize, n_failed: usize) -> Result<Self> {
        if n_reject + n_failed > n_reps {
            return Err(Error::invalid(format!(
                "{n_reject} rejections + {n_failed} failures exceed {n_reps} replicates"
            )));
        }
        let rate = n_reject as f64 / n_reps as f64;
        let m = mcse(rate, n_reps)?;
        Ok(MethodSummary {
            method,
            n_reps,
            n_reject,
            n_failed,
            rate,
            mcse: m.se,
            ci_low: m.ci_low,
            ci_high: m.ci_high,
            fail_rate: n_failed as f64 / n_reps as f64,
        })
    }

    pub fn from_results(method: Method, results: impl IntoIterator<Item = TestResult>) -> Result<Self> {
        let (mut n, mut reject, mut failed) = (0, 0, 0);
        for r in results {
            n += 1;
            reject += usize::from(r.reject);
            failed += usize::from(!r.converged);
        }
        Self::from_counts(method, n, reject, failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario_id: String,
    pub cer: f64,
    pub delta: f64,
    pub n_per_arm: usize,
    pub coef_set: String,
    pub icc_v: f64,
    pub methods: Vec<MethodSummary>,
}

impl ScenarioSummary {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn write_rows<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for m in &self.methods {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.scenario_id,
                self.cer,
                self.delta,
                self.n_per_arm,
                self.coef_set,
                self.icc_v,
                m.method.as_str(),
                m.n_reps,
                m.n_reject,
                m.rate,
                m.mcse,
                m.ci_low,
                m.ci_high,
                m.fail_rate
            )?;
        }
        Ok(())
    }
}

pub fn write_results<W: Write>(summaries: &[ScenarioSummary], mut w: W) -> Result<()> {
    let io = |e| Error::io("<results csv>", e);
    writeln!(w, "{RESULTS_CSV_HEADER}").map_err(io)?;
    for s in summaries {
        s.write_rows(&mut w).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Deserialize)]
struct ResultRow {
    scenario_id: String,
    cer: f64,
    delta: f64,
    n_per_arm: usize,
    coef_set: String,
    icc_v: f64,
    method: Method,
    n_reps: usize,
    n_reject: usize,
    fail_rate: f64,
}

/// Reads a results CSV back into summaries, in file order. Scenarios missing
/// any of the three method rows (e.g. an interrupted write) are dropped, as
/// is a truncated final line.
pub fn read_results<R: Read>(reader: R) -> Result<Vec<ScenarioSummary>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RESULTS_CSV_HEADER {
        return Err(Error::Schema {
            location: "results header".into(),
            message: format!("expected `{RESULTS_CSV_HEADER}`"),
        });
    }
    let expected_len = header.len();
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, ScenarioSummary> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != expected_len {
            // only a cut-off last line is tolerated
            continue;
        }
        let row: ResultRow = rec.deserialize(Some(&csv::StringRecord::from(header.clone()))).map_err(|e| {
            Error::Schema { location: format!("results row {}", i + 1), message: e.to_string() }
        })?;
        let n_failed = (row.fail_rate * row.n_reps as f64).round() as usize;
        let m = MethodSummary::from_counts(row.method, row.n_reps, row.n_reject, n_failed)?;
        let entry = by_id.entry(row.scenario_id.clone()).or_insert_with(|| {
            order.push(row.scenario_id.clone());
            ScenarioSummary {
                scenario_id: row.scenario_id.clone(),
                cer: row.cer,
                delta: row.delta,
                n_per_arm: row.n_per_arm,
                coef_set: row.coef_set.clone(),
                icc_v: row.icc_v,
                methods: Vec::new(),
            }
        });
        if entry.method(m.method).is_none() {
            entry.methods.push(m);
        }
    }
    Ok(order
        .into_iter()
        .filter_map(|id| by_id.remove(&id))
        .filter(|s| Method::ALL.iter().all(|&m| s.method(m).is_some()))
        .map(|mut s| {
            s.methods.sort_by_key(|m| Method::ALL.iter().position(|&x| x == m.method));
            s
        })
        .collect())
}

/// Parameters of the closed-form side of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormulaParams {
    /// Health-area level ICC.
    pub icc_h: f64,
    /// Clusters per arm.
    pub c: usize,
    pub alpha: f64,
    pub children_per_village: f64,
    pub n_clusters: usize,
}

impl Default for FormulaParams {
    fn default() -> Self {
        FormulaParams {
            icc_h: 0.048,
            c: 6,
            alpha: 0.05,
            children_per_village: crate::closed_form::DEFAULT_CHILDREN_PER_VILLAGE,
            n_clusters: crate::closed_form::DEFAULT_CLUSTERS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormRow {
    pub n_per_arm: usize,
    pub cer: f64,
    pub delta: f64,
    pub power: f64,
}

/// Closed-form power for each `(n_per_arm, cer, delta)`.
pub fn closed_form_rows(keys: &[(usize, f64, f64)], params: &FormulaParams) -> Result<Vec<ClosedFormRow>> {
    keys.iter()
        .map(|&(n_per_arm, cer, delta)| {
            let inputs = PowerInputs {
                m: cluster_size(n_per_arm, params.children_per_village, params.n_clusters),
                c: params.c,
                pi0: cer,
                pi1: cer + delta,
                icc: params.icc_h,
                alpha: params.alpha,
            };
            Ok(ClosedFormRow { n_per_arm, cer, delta, power: power(&inputs)? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub cer: f64,
    pub delta: f64,
    pub coef_set: String,
    pub icc_v: f64,
    pub n_per_arm: usize,
    pub beta: f64,
    pub naive: f64,
    pub quasibinomial: f64,
    pub closed_form: f64,
}

impl ComparisonRow {
    /// Type I error for null scenarios, power otherwise.
    pub fn quantity(&self) -> &'static str {
        if self.delta == 0.0 {
            "type_i_error"
        } else {
            "power"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// Simulated scenarios with no closed-form row.
    pub unmatched_simulations: Vec<String>,
    /// Closed-form rows with no simulated scenario.
    pub unmatched_formula: Vec<(usize, f64, f64)>,
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

/// Joins simulated rejection rates with closed-form power on
/// `(n_per_arm, cer, delta)`. Rows are grouped by quantity (type I error
/// first), then by scenario, then by villages per arm.
pub fn compare_report(summaries: &[ScenarioSummary], formula: &[ClosedFormRow]) -> ComparisonTable {
    let mut table = ComparisonTable::default();
    let mut used = vec![false; formula.len()];
    for s in summaries {
        let hit = formula
            .iter()
            .position(|f| f.n_per_arm == s.n_per_arm && same(f.cer, s.cer) && same(f.delta, s.delta));
        let rate = |m| s.method(m).map_or(f64::NAN, |x| x.rate);
        match hit {
            Some(k) => {
                used[k] = true;
                table.rows.push(ComparisonRow {
                    cer: s.cer,
                    delta: s.delta,
                    coef_set: s.coef_set.clone(),
                    icc_v: s.icc_v,
                    n_per_arm: s.n_per_arm,
                    beta: rate(Method::Beta),
                    naive: rate(Method::Naive),
                    quasibinomial: rate(Method::Quasibinomial),
                    closed_form: formula[k].power,
                });
            }
            None => table.unmatched_simulations.push(s.scenario_id.clone()),
        }
    }
    table.unmatched_formula =
        formula.iter().zip(&used).filter(|(_, u)| !**u).map(|(f, _)| (f.n_per_arm, f.cer, f.delta)).collect();
    table.rows.sort_by(|a, b| {
        (a.delta != 0.0)
            .cmp(&(b.delta != 0.0))
            .then(a.cer.total_cmp(&b.cer))
            .then(a.delta.total_cmp(&b.delta))
            .then(a.coef_set.cmp(&b.coef_set))
            .then(a.icc_v.total_cmp(&b.icc_v))
            .then(a.n_per_arm.cmp(&b.n_per_arm))
    });
    table
}

impl ComparisonTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<comparison csv>", e);
        writeln!(w, "{COMPARISON_CSV_HEADER}").map_err(io)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.quantity(),
                r.cer,
                r.delta,
                r.coef_set,
                r.icc_v,
                r.n_per_arm,
                r.beta,
                r.naive,
                r.quasibinomial,
                r.closed_form
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}
