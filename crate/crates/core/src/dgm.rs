//! Follow-up outcome model.
//!
//! Village `j` at follow-up has
//! `logit π_j = β₀ + δ·[treated] + α_j + elogit(Y⁰_j, m⁰_j) + β_pop·p_j + β_dist·d_j`
//! with `α_j ~ N(0, τ²)` and `Y¹_j ~ Bin(m⁰_j, π_j)`. `β₀` and `δ` are
//! calibrated so that the census-wide expected village rate equals the
//! control event rate in control and the CER plus the absolute effect in
//! treatment.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::census::{empirical_logit, Census};
use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;
use crate::randomization::{Arm, RandomizationDraw};
use crate::special::expit;

pub const CALIBRATION_NODES: usize = 41;
pub const CALIBRATION_TOLERANCE: f64 = 1e-4;
const LOGIT_BOUND: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    /// 1–3 for the built-in sets, 0 for anything user-supplied.
    pub set_index: u8,
    /// Logit change per person.
    pub beta_pop: f64,
    /// Logit change per km.
    pub beta_dist: f64,
}

impl CoefficientSet {
    /// Set 1 and 3 are the 95% CI endpoints, set 2 the point estimate.
    pub fn builtin(index: u8) -> Result<Self> {
        let (beta_pop, beta_dist) = match index {
            1 => (0.000268, -0.60630),
            2 => (0.000370, -0.0867),
            3 => (0.0004966, -0.0345),
            _ => return Err(Error::invalid(format!("coefficient set must be 1, 2 or 3, got {index}"))),
        };
        Ok(CoefficientSet { set_index: index, beta_pop, beta_dist })
    }

    pub fn custom(beta_pop: f64, beta_dist: f64) -> Self {
        CoefficientSet { set_index: 0, beta_pop, beta_dist }
    }

    pub fn zero() -> Self {
        Self::custom(0.0, 0.0)
    }
}

/// One cell of the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub cer: f64,
    pub delta: f64,
    pub n_per_arm: usize,
    pub coef: CoefficientSet,
    pub icc_v: f64,
    pub n_reps: usize,
    pub critical_z: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.cer > 0.0 && self.cer < 1.0) {
            return Err(Error::invalid(format!("cer must lie in (0, 1), got {}", self.cer)));
        }
        if !(self.delta >= 0.0) || self.cer + self.delta >= 1.0 {
            return Err(Error::invalid(format!(
                "need delta >= 0 and cer + delta < 1, got {} + {}",
                self.cer, self.delta
            )));
        }
        if !(0.0..1.0).contains(&self.icc_v) {
            return Err(Error::invalid(format!("icc_v must lie in [0, 1), got {}", self.icc_v)));
        }
        if self.n_reps == 0 {
            return Err(Error::invalid("n_reps must be >= 1"));
        }
        if !self.critical_z.is_finite() {
            return Err(Error::invalid("critical_z must be finite"));
        }
        Ok(())
    }

    pub fn tau2(&self) -> Result<f64> {
        tau2_from_icc(self.icc_v)
    }
}

/// Random-intercept variance implied by a latent-scale ICC: `icc·(π²/3)/(1 − icc)`.
pub fn tau2_from_icc(icc: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&icc) {
        return Err(Error::Domain(format!("ICC must lie in [0, 1), got {icc}")));
    }
    Ok(icc * (PI * PI / 3.0) / (1.0 - icc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedIntercepts {
    pub beta0: f64,
    pub delta_logit: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatedVillage {
    /// Index into the census villages.
    pub village: u32,
    pub arm: Arm,
    pub m1: u32,
    pub y1: u32,
    pub baseline_rate: f64,
    pub population: f64,
    pub distance_km: f64,
}

/// Census-derived fixed part of the linear predictor, per village.
#[derive(Debug, Clone)]
pub struct OutcomeModel<'a> {
    census: &'a Census,
    offsets: Vec<f64>,
    tau2: f64,
}

impl<'a> OutcomeModel<'a> {
    pub fn new(census: &'a Census, coef: CoefficientSet, icc_v: f64) -> Result<Self> {
        let tau2 = tau2_from_icc(icc_v)?;
        let offsets = census
            .villages()
            .iter()
            .map(|v| {
                Ok(empirical_logit(v.n_mcv1, v.n_children)?
                    + coef.beta_pop * f64::from(v.population)
                    + coef.beta_dist * v.distance_km)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OutcomeModel { census, offsets, tau2 })
    }

    pub fn for_scenario(census: &'a Census, scenario: &Scenario) -> Result<Self> {
        Self::new(census, scenario.coef, scenario.icc_v)
    }

    /// Drops the baseline empirical-logit term from every village.
    pub fn without_baseline_offset(mut self) -> Self {
        for (o, v) in self.offsets.iter_mut().zip(self.census.villages()) {
            *o -= empirical_logit(v.n_mcv1, v.n_children).expect("validated census");
        }
        self
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Census-average of `E_α[expit(shift + offset_j + α)]`, `α ~ N(0, τ²)`.
    pub fn marginal_rate(&self, shift: f64, gh: &GaussHermite) -> f64 {
        let sd = self.tau2.sqrt();
        let total: f64 = self
            .offsets
            .iter()
            .map(|&o| {
                if sd == 0.0 {
                    expit(shift + o)
                } else {
                    gh.expect_normal(shift + o, sd, expit)
                }
            })
            .sum();
        total / self.offsets.len() as f64
    }

    /// Solves for the control intercept, then the treatment shift.
    pub fn calibrate(&self, cer: f64, delta: f64) -> Result<CalibratedIntercepts> {
        let gh = GaussHermite::new(CALIBRATION_NODES);
        let beta0 = bisect_rate(|b| self.marginal_rate(b, &gh), cer, "control rate")?;
        let delta_logit = if delta == 0.0 {
            0.0
        } else {
            bisect_rate(|d| self.marginal_rate(beta0 + d, &gh), cer + delta, "treatment rate")?
        };
        Ok(CalibratedIntercepts { beta0, delta_logit, tau2: self.tau2 })
    }

    pub fn village_probability(&self, village: u32, arm: Arm, alpha: f64, calib: &CalibratedIntercepts) -> f64 {
        let shift = match arm {
            Arm::Control => 0.0,
            Arm::Treatment => calib.delta_logit,
        };
        expit(calib.beta0 + shift + alpha + self.offsets[village as usize])
    }

    /// One replicate of follow-up counts for the selected villages (control
    /// list first, then treatment). Denominators carry over from baseline.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        draw: &RandomizationDraw,
        calib: &CalibratedIntercepts,
        rng: &mut R,
    ) -> Vec<SimulatedVillage> {
        let sd = calib.tau2.sqrt();
        let normal = Normal::new(0.0, sd.max(f64::MIN_POSITIVE)).expect("finite sd");
        draw.selection
            .iter()
            .map(|(village, arm)| {
                let v = &self.census.villages()[village as usize];
                let alpha = if sd > 0.0 { normal.sample(rng) } else { 0.0 };
                let p = self.village_probability(village, arm, alpha, calib);
                let y1 = Binomial::new(u64::from(v.n_children), p).expect("p in [0,1]").sample(rng) as u32;
                SimulatedVillage {
                    village,
                    arm,
                    m1: v.n_children,
                    y1,
                    baseline_rate: v.baseline_rate(),
                    population: f64::from(v.population),
                    distance_km: v.distance_km,
                }
            })
            .collect()
    }
}

fn bisect_rate(rate: impl Fn(f64) -> f64, target: f64, what: &str) -> Result<f64> {
    let (mut lo, mut hi) = (-LOGIT_BOUND, LOGIT_BOUND);
    if rate(lo) > target || rate(hi) < target {
        return Err(Error::Calibration(format!(
            "{what} {target} unreachable within [{lo}, {hi}] logits"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let x = 0.5 * (lo + hi);
    if (rate(x) - target).abs() > CALIBRATION_TOLERANCE {
        return Err(Error::Calibration(format!("{what} bisection did not reach tolerance")));
    }
    Ok(x)
}

pub fn calibrate_intercepts(census: &Census, scenario: &Scenario) -> Result<CalibratedIntercepts> {
    scenario.validate()?;
    OutcomeModel::for_scenario(census, scenario)?.calibrate(scenario.cer, scenario.delta)
}

pub fn simulate_followup<R: Rng + ?Sized>(
    census: &Census,
    draw: &RandomizationDraw,
    calib: &CalibratedIntercepts,
    scenario: &Scenario,
    rng: &mut R,
) -> Result<Vec<SimulatedVillage>> {
    let model = OutcomeModel::for_scenario(census, scenario)?;
    Ok(model.simulate(draw, calib, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::census::{default_profiles, generate_synthetic_census};

    #[test]
    fn tau2_values() {
        assert_eq!(tau2_from_icc(0.0).unwrap(), 0.0);
        assert!((tau2_from_icc(1.0 / 3.0).unwrap() - PI * PI / 6.0).abs() < 1e-14);
        assert!((tau2_from_icc(0.24).unwrap() - 1.038_905_726_430_459).abs() < 1e-14);
        assert!(tau2_from_icc(1.0).is_err());
        assert!(tau2_from_icc(-0.1).is_err());
    }

    #[test]
    fn degenerate_model_gives_closed_form_intercept() {
        let census = generate_synthetic_census(&default_profiles(), 4).unwrap();
        let model = OutcomeModel::new(&census, CoefficientSet::zero(), 0.0).unwrap().without_baseline_offset();
        assert!(model.offsets().iter().all(|&o| o.abs() < 1e-12));
        let c = model.calibrate(0.70, 0.0).unwrap();
        assert!((c.beta0 - (0.7f64 / 0.3).ln()).abs() < 1e-10);
        assert!((c.beta0 - 0.8473).abs() < 1e-4);
        assert_eq!(c.delta_logit, 0.0);
    }

    #[test]
    fn calibration_is_idempotent_and_hits_targets() {
        let census = generate_synthetic_census(&default_profiles(), 4).unwrap();
        let model = OutcomeModel::new(&census, CoefficientSet::builtin(2).unwrap(), 0.24).unwrap();
        let a = model.calibrate(0.70, 0.15).unwrap();
        let b = model.calibrate(0.70, 0.15).unwrap();
        assert_eq!(a, b);
        let gh = GaussHermite::new(CALIBRATION_NODES);
        assert!((model.marginal_rate(a.beta0, &gh) - 0.70).abs() < CALIBRATION_TOLERANCE);
        assert!((model.marginal_rate(a.beta0 + a.delta_logit, &gh) - 0.85).abs() < CALIBRATION_TOLERANCE);
        assert!(a.delta_logit > 0.0);
    }

    #[test]
    fn unreachable_target_is_a_calibration_error() {
        let census = generate_synthetic_census(&default_profiles(), 4).unwrap();
        // Set 1's -0.6063 per km pushes remote villages far down, but 20 logits still suffice;
        // an effect that needs a rate of exactly 1 cannot be reached.
        let model = OutcomeModel::new(&census, CoefficientSet::builtin(1).unwrap(), 0.24).unwrap();
        assert!(matches!(model.calibrate(0.5, 0.4999999999), Err(Error::Calibration(_))));
    }

    #[test]
    fn scenario_validation() {
        let mut s = Scenario {
            cer: 0.7,
            delta: 0.15,
            n_per_arm: 60,
            coef: CoefficientSet::builtin(2).unwrap(),
            icc_v: 0.24,
            n_reps: 10,
            critical_z: 1.695,
            seed: 1,
        };
        assert!(s.validate().is_ok());
        s.delta = 0.3;
        assert!(s.validate().is_err());
        s.delta = 0.1;
        s.n_reps = 0;
        assert!(s.validate().is_err());
        assert!(CoefficientSet::builtin(4).is_err());
    }
}
