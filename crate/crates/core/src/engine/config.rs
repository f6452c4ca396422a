//! Study configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::census::{default_profiles, generate_synthetic_census, load_census, load_profiles, Census};
use crate::dgm::CoefficientSet;
use crate::error::{Error, Result};
use crate::randomization::DEFAULT_SMD_THRESHOLD;
use crate::special::norm_quantile;

/// Replication budget profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 50,000 pool attempts; 2,000 null and 500 alternative replicates.
    Desk,
    /// 10⁶ pool attempts; 10,000 null and 1,000 alternative replicates.
    #[default]
    Paper,
}

impl Scale {
    pub fn pool_attempts(self) -> usize {
        match self {
            Scale::Desk => 50_000,
            Scale::Paper => 1_000_000,
        }
    }

    pub fn n_reps_null(self) -> usize {
        match self {
            Scale::Desk => 2_000,
            Scale::Paper => 10_000,
        }
    }

    pub fn n_reps_alt(self) -> usize {
        match self {
            Scale::Desk => 500,
            Scale::Paper => 1_000,
        }
    }
}

/// Where the baseline census comes from: a CSV file, or a profile set
/// (built-in when `profiles` is absent) plus a generator seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiles: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CensusSource {
    /// The analysis census (villages with at least five children).
    pub fn load(&self) -> Result<Census> {
        let census = match (&self.file, &self.profiles, self.seed) {
            (Some(file), None, None) => load_census(file)?,
            (None, profiles, Some(seed)) => {
                let profiles = match profiles {
                    Some(p) => load_profiles(p)?,
                    None => default_profiles(),
                };
                generate_synthetic_census(&profiles, seed)?
            }
            (Some(_), _, _) => return Err(Error::invalid("census.file cannot be combined with profiles or seed")),
            (None, _, None) => return Err(Error::invalid("census needs either `file` or a generator `seed`")),
        };
        census.analysis_view()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    #[serde(default)]
    pub n_attempts: Option<usize>,
    #[serde(default)]
    pub threshold: Option<f64>,
}

/// A coefficient set in the config: either a built-in set index or explicit values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefSpec {
    Index(u8),
    Custom { beta_pop: f64, beta_dist: f64 },
}

impl CoefSpec {
    pub fn resolve(self) -> Result<CoefficientSet> {
        match self {
            CoefSpec::Index(i) => CoefficientSet::builtin(i),
            CoefSpec::Custom { beta_pop, beta_dist } => {
                if !(beta_pop.is_finite() && beta_dist.is_finite()) {
                    return Err(Error::invalid("custom coefficients must be finite"));
                }
                Ok(CoefficientSet::custom(beta_pop, beta_dist))
            }
        }
    }
}

/// The JSON study file. Optional budget fields fall back to the `scale` profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub census: CensusSource,
    #[serde(default)]
    pub pool: PoolConfig,
    pub cer: Vec<f64>,
    pub delta: Vec<f64>,
    pub n_per_arm: Vec<usize>,
    pub coef_sets: Vec<CoefSpec>,
    pub icc_v: Vec<f64>,
    #[serde(default)]
    pub n_reps_null: Option<usize>,
    #[serde(default)]
    pub n_reps_alt: Option<usize>,
    /// One-sided rejection threshold on the z statistic. Defaults to
    /// `Φ⁻¹(0.955) ≈ 1.695`, the adjusted level for the main study.
    #[serde(default)]
    pub critical_z: Option<f64>,
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub scale: Scale,
}

pub fn default_critical_z() -> f64 {
    norm_quantile(0.955)
}

/// A fully resolved study: every budget filled in and every grid validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub census: CensusSource,
    pub pool_attempts: usize,
    pub threshold: f64,
    pub cer: Vec<f64>,
    pub delta: Vec<f64>,
    pub n_per_arm: Vec<usize>,
    pub coef_sets: Vec<CoefficientSet>,
    pub icc_v: Vec<f64>,
    pub n_reps_null: usize,
    pub n_reps_alt: usize,
    pub critical_z: f64,
    pub master_seed: u64,
}

impl StudyConfig {
    /// Parses JSON, reporting the field path of the first error. Relative
    /// census paths are taken relative to `base_dir`.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: StudyConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if let Some(base) = base_dir {
            for p in [&mut cfg.census.file, &mut cfg.census.profiles, &mut cfg.output_dir].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent())
    }

    pub fn resolve(&self) -> Result<Study> {
        let scale = self.scale;
        let study = Study {
            census: self.census.clone(),
            pool_attempts: self.pool.n_attempts.unwrap_or(scale.pool_attempts()),
            threshold: self.pool.threshold.unwrap_or(DEFAULT_SMD_THRESHOLD),
            cer: self.cer.clone(),
            delta: self.delta.clone(),
            n_per_arm: self.n_per_arm.clone(),
            coef_sets: self.coef_sets.iter().map(|c| c.resolve()).collect::<Result<_>>()?,
            icc_v: self.icc_v.clone(),
            n_reps_null: self.n_reps_null.unwrap_or(scale.n_reps_null()),
            n_reps_alt: self.n_reps_alt.unwrap_or(scale.n_reps_alt()),
            critical_z: self.critical_z.unwrap_or_else(default_critical_z),
            master_seed: self.master_seed,
        };
        study.validate()?;
        Ok(study)
    }
}

impl Study {
    pub fn validate(&self) -> Result<()> {
        let grids = [
            ("cer", self.cer.len()),
            ("delta", self.delta.len()),
            ("n_per_arm", self.n_per_arm.len()),
            ("coef_sets", self.coef_sets.len()),
            ("icc_v", self.icc_v.len()),
        ];
        if let Some((name, _)) = grids.iter().find(|(_, n)| *n == 0) {
            return Err(Error::invalid(format!("grid `{name}` is empty")));
        }
        if self.n_reps_null == 0 || self.n_reps_alt == 0 {
            return Err(Error::invalid("n_reps_null and n_reps_alt must be >= 1"));
        }
        if self.pool_attempts == 0 {
            return Err(Error::invalid("pool.n_attempts must be >= 1"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::invalid(format!("pool.threshold must be > 0, got {}", self.threshold)));
        }
        if !self.critical_z.is_finite() {
            return Err(Error::invalid("critical_z must be finite"));
        }
        if let Some(&n) = self.n_per_arm.iter().find(|&&n| n < 2) {
            return Err(Error::invalid(format!("n_per_arm must be >= 2, got {n}")));
        }
        if let Some(&c) = self.cer.iter().find(|&&c| !(c > 0.0 && c < 1.0)) {
            return Err(Error::invalid(format!("cer must lie in (0, 1), got {c}")));
        }
        if let Some(&d) = self.delta.iter().find(|&&d| !(d >= 0.0)) {
            return Err(Error::invalid(format!("delta must be >= 0, got {d}")));
        }
        if let Some(&i) = self.icc_v.iter().find(|&&i| !(0.0..1.0).contains(&i)) {
            return Err(Error::invalid(format!("icc_v must lie in [0, 1), got {i}")));
        }
        let max_cer = self.cer.iter().copied().fold(f64::MIN, f64::max);
        let max_delta = self.delta.iter().copied().fold(f64::MIN, f64::max);
        if max_cer + max_delta >= 1.0 {
            return Err(Error::invalid(format!(
                "cer {max_cer} + delta {max_delta} reaches 1; every treated rate must stay below 1"
            )));
        }
        Ok(())
    }
}
