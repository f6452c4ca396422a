//! Conventional closed-form power for a two-arm cluster trial comparing
//! proportions with equal cluster sizes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{norm_cdf, norm_quantile};

pub const DEFAULT_CHILDREN_PER_VILLAGE: f64 = 14.0;
pub const DEFAULT_CLUSTERS: usize = 12;
pub const CURVE_CSV_HEADER: &str = "m,c,pi0,pi1,icc,alpha,power";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerInputs {
    /// Children per cluster.
    pub m: f64,
    /// Clusters per arm.
    pub c: usize,
    pub pi0: f64,
    pub pi1: f64,
    pub icc: f64,
    /// One-sided level.
    pub alpha: f64,
}

impl PowerInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.m >= 1.0) || !self.m.is_finite() {
            return Err(Error::invalid(format!("cluster size m must be >= 1, got {}", self.m)));
        }
        if self.c < 2 {
            return Err(Error::invalid(format!("need >= 2 clusters per arm, got {}", self.c)));
        }
        for (name, p) in [("pi0", self.pi0), ("pi1", self.pi1)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.icc) {
            return Err(Error::invalid(format!("icc must lie in [0, 1), got {}", self.icc)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Average children per cluster when `villages_per_arm` villages per arm are
/// spread over `n_clusters` health areas.
pub fn cluster_size(villages_per_arm: usize, children_per_village: f64, n_clusters: usize) -> f64 {
    2.0 * villages_per_arm as f64 * children_per_village / n_clusters as f64
}

fn binomial_variance_sum(pi0: f64, pi1: f64) -> f64 {
    pi0 * (1.0 - pi0) + pi1 * (1.0 - pi1)
}

/// `Φ(sqrt(m(c−1)(π₀−π₁)² / ([π₀(1−π₀)+π₁(1−π₁)](1+(m−1)ρ))) − z_{1−α})`.
pub fn power(inputs: &PowerInputs) -> Result<f64> {
    inputs.validate()?;
    let PowerInputs { m, c, pi0, pi1, icc, alpha } = *inputs;
    let design_effect = 1.0 + (m - 1.0) * icc;
    let ncp = (m * (c as f64 - 1.0) * (pi0 - pi1).powi(2) / (binomial_variance_sum(pi0, pi1) * design_effect)).sqrt();
    Ok(norm_cdf(ncp - norm_quantile(1.0 - alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauLimit {
    pub power: f64,
    /// Set when `icc = 0`: power grows to 1 without bound on `m`.
    pub unbounded: bool,
}

/// Limit of [`power`] as the cluster size grows without bound.
pub fn power_plateau_limit(c: usize, pi0: f64, pi1: f64, icc: f64, alpha: f64) -> Result<PlateauLimit> {
    PowerInputs { m: 1.0, c, pi0, pi1, icc, alpha }.validate()?;
    if icc == 0.0 {
        return Ok(PlateauLimit { power: 1.0, unbounded: true });
    }
    let ncp = ((c as f64 - 1.0) * (pi0 - pi1).powi(2) / (binomial_variance_sum(pi0, pi1) * icc)).sqrt();
    Ok(PlateauLimit { power: norm_cdf(ncp - norm_quantile(1.0 - alpha)), unbounded: false })
}

/// Power over a sweep of cluster sizes, for plotting.
pub fn power_curve(base: &PowerInputs, sizes: &[f64]) -> Result<Vec<(f64, f64)>> {
    sizes
        .iter()
        .map(|&m| Ok((m, power(&PowerInputs { m, ..*base })?)))
        .collect()
}

pub fn write_curve_csv<W: Write>(base: &PowerInputs, curve: &[(f64, f64)], mut w: W) -> Result<()> {
    let io = |e| Error::io("<curve csv>", e);
    writeln!(w, "{CURVE_CSV_HEADER}").map_err(io)?;
    for &(m, p) in curve {
        writeln!(w, "{},{},{},{},{},{},{}", m, base.c, base.pi0, base.pi1, base.icc, base.alpha, p).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(m: f64) -> PowerInputs {
        PowerInputs { m, c: 6, pi0: 0.70, pi1: 0.85, icc: 0.048, alpha: 0.05 }
    }

    #[test]
    fn cluster_size_recipe() {
        assert_eq!(cluster_size(60, 14.0, 12), 140.0);
        assert_eq!(cluster_size(90, 14.0, 12), 210.0);
        assert_eq!(cluster_size(6, 14.0, 12), 14.0);
    }

    #[test]
    fn table_one_formula_column() {
        for (v, expected) in [(60, 0.794), (70, 0.801), (80, 0.805), (90, 0.809)] {
            let p = power(&base(cluster_size(v, 14.0, 12))).unwrap();
            assert!((p - expected).abs() <= 0.0005 + 1e-12, "{v}: {p}");
        }
    }

    #[test]
    fn null_effect_gives_alpha() {
        let p = power(&PowerInputs { pi1: 0.70, ..base(140.0) }).unwrap();
        assert!((p - 0.05).abs() < 1e-12);
    }

    #[test]
    fn plateau_limit() {
        let lim = power_plateau_limit(6, 0.70, 0.85, 0.048, 0.05).unwrap();
        assert!(!lim.unbounded);
        assert!((lim.power - 0.839).abs() < 5e-4, "{}", lim.power);
        let flat = power_plateau_limit(6, 0.70, 0.85, 0.0, 0.05).unwrap();
        assert!(flat.unbounded && flat.power == 1.0);
        for e in 1..=6 {
            assert!(power(&base(10f64.powi(e))).unwrap() < lim.power);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(power(&PowerInputs { c: 1, ..base(10.0) }).is_err());
        assert!(power(&PowerInputs { pi0: 1.0, ..base(10.0) }).is_err());
        assert!(power(&PowerInputs { m: 0.5, ..base(10.0) }).is_err());
    }
}
