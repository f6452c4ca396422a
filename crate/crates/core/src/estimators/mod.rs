//! Candidate follow-up analyses. Each yields a one-sided Wald decision on the
//! treatment coefficient (`H₀: β = 0` vs `H₁: β > 0`).

mod beta;
mod glm;
mod naive;

pub use beta::{beta_expected_information, beta_loglik, beta_observed_information, beta_score, boundary_transform, fit_beta, fit_beta_regression, BetaFit};
pub use glm::{binomial_loglik, fit_binomial_irls, fit_quasibinomial, quasibinomial_fit, GlmFit};
pub use naive::naive_wald;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dgm::SimulatedVillage;
use crate::error::{Error, Result};
use crate::randomization::Arm;

/// Treatment coefficients beyond this many logits are treated as divergence.
pub const SEPARATION_BOUND: f64 = 15.0;
/// Column of the treatment indicator in [`AnalysisDataset::design_matrix`].
pub const TREATMENT_COLUMN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Quasibinomial,
    Beta,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Naive, Method::Quasibinomial, Method::Beta];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Quasibinomial => "quasibinomial",
            Method::Beta => "beta",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Method::Naive),
            "quasibinomial" => Ok(Method::Quasibinomial),
            "beta" => Ok(Method::Beta),
            _ => Err(Error::invalid(format!("unknown method {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub method: Method,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub reject: bool,
    pub converged: bool,
}

impl TestResult {
    pub(crate) fn decide(method: Method, estimate: f64, se: f64, converged: bool, critical_z: f64) -> Self {
        let z = estimate / se;
        TestResult { method, estimate, se, z, reject: converged && z > critical_z, converged }
    }

    pub(crate) fn failed(method: Method) -> Self {
        TestResult { method, estimate: f64::NAN, se: f64::NAN, z: f64::NAN, reject: false, converged: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisRow {
    pub y1: u32,
    pub m1: u32,
    pub treated: bool,
    pub baseline_rate: f64,
    pub population: f64,
    pub distance_km: f64,
}

impl AnalysisRow {
    pub fn proportion(&self) -> f64 {
        f64::from(self.y1) / f64::from(self.m1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisDataset {
    rows: Vec<AnalysisRow>,
}

impl AnalysisDataset {
    pub fn new(rows: Vec<AnalysisRow>) -> Result<Self> {
        let n_t = rows.iter().filter(|r| r.treated).count();
        let n_c = rows.len() - n_t;
        if n_t < 2 || n_c < 2 {
            return Err(Error::invalid(format!("need >= 2 villages per arm, got {n_t} treated / {n_c} control")));
        }
        if let Some(r) = rows.iter().find(|r| r.m1 == 0 || r.y1 > r.m1) {
            return Err(Error::invalid(format!("invalid follow-up counts y1={} m1={}", r.y1, r.m1)));
        }
        Ok(AnalysisDataset { rows })
    }

    pub fn from_simulated(villages: &[SimulatedVillage]) -> Result<Self> {
        Self::new(
            villages
                .iter()
                .map(|v| AnalysisRow {
                    y1: v.y1,
                    m1: v.m1,
                    treated: v.arm == Arm::Treatment,
                    baseline_rate: v.baseline_rate,
                    population: v.population,
                    distance_km: v.distance_km,
                })
                .collect(),
        )
    }

    pub fn rows(&self) -> &[AnalysisRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Same villages with control and treatment relabelled.
    pub fn swapped_arms(&self) -> Self {
        AnalysisDataset { rows: self.rows.iter().map(|r| AnalysisRow { treated: !r.treated, ..*r }).collect() }
    }

    /// Columns: intercept, treatment, baseline rate, population, distance, population × distance.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), 6, |i, j| {
            let r = &self.rows[i];
            match j {
                0 => 1.0,
                1 => f64::from(u8::from(r.treated)),
                2 => r.baseline_rate,
                3 => r.population,
                4 => r.distance_km,
                _ => r.population * r.distance_km,
            }
        })
    }

    pub fn successes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| f64::from(r.y1)).collect()
    }

    pub fn trials(&self) -> Vec<f64> {
        self.rows.iter().map(|r| f64::from(r.m1)).collect()
    }
}

/// Runs all three analyses. Fitting errors (e.g. a singular design from a
/// degenerate draw) are reported as non-converged, non-rejecting results.
pub fn run_all(data: &AnalysisDataset, critical_z: f64) -> [TestResult; 3] {
    [
        naive_wald(data, critical_z),
        fit_quasibinomial(data, critical_z).unwrap_or_else(|_| TestResult::failed(Method::Quasibinomial)),
        fit_beta_regression(data, critical_z).unwrap_or_else(|_| TestResult::failed(Method::Beta)),
    ]
}

/// Scales every non-constant column to unit max-abs; returns the scaled
/// matrix and the factors (`β_raw = β_scaled / factor`).
pub(crate) fn scale_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut xs = x.clone();
    let mut factors = vec![1.0; x.ncols()];
    for (j, factor) in factors.iter_mut().enumerate() {
        let m = x.column(j).amax();
        if m > 0.0 {
            *factor = m;
            xs.column_mut(j).scale_mut(1.0 / m);
        }
    }
    (xs, factors)
}

/// Gram–Schmidt rank check on unit-norm columns.
pub(crate) fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    for j in 0..x.ncols() {
        let mut v = x.column(j).into_owned();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            return Err(Error::SingularDesign { column: j });
        }
        v /= norm0;
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v.axpy(-proj, b, 1.0);
            }
        }
        let n = v.norm();
        if n < 1e-9 {
            return Err(Error::SingularDesign { column: j });
        }
        basis.push(v / n);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_column_is_singular() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0, 1.0, 1.0, 1.0]);
        assert!(matches!(check_full_rank(&x), Err(Error::SingularDesign { column: 2 })));
        let ok = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(check_full_rank(&ok).is_ok());
    }

    #[test]
    fn dataset_needs_two_villages_per_arm() {
        let row = |t| AnalysisRow { y1: 3, m1: 5, treated: t, baseline_rate: 0.5, population: 100.0, distance_km: 1.0 };
        assert!(AnalysisDataset::new(vec![row(true), row(true), row(false)]).is_err());
        assert!(AnalysisDataset::new(vec![row(true), row(true), row(false), row(false)]).is_ok());
    }
}
