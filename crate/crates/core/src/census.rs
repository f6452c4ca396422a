//! Baseline census: villages nested in health areas.
//!
//! A census can be read from CSV or generated from per-area descriptive
//! profiles. The built-in profile set reproduces the 12 health areas of the
//! Ngouri (Chad) baseline survey, restricted to villages with at least five
//! children aged 12–24 months.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tag, StreamKey};
use crate::special::{ln_gamma, mean_sd};

pub const N_HEALTH_AREAS: usize = 12;
/// Villages below this many eligible children are excluded from analysis.
pub const MIN_ANALYSIS_CHILDREN: u32 = 5;
pub const CSV_HEADER: [&str; 6] = [
    "village_id",
    "health_area",
    "population",
    "distance_km",
    "n_children",
    "n_mcv1",
];

const MIN_DISTANCE_KM: f64 = 0.1;
const MAX_REJECTIONS: usize = 10_000;
/// Negative binomial size used when a profile's children SD is out of reach.
const OVERDISPERSED_SIZE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Village {
    pub village_id: String,
    #[serde(rename = "health_area")]
    pub health_area_id: String,
    pub population: u32,
    pub distance_km: f64,
    pub n_children: u32,
    pub n_mcv1: u32,
}

impl Village {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_mcv1 > self.n_children {
            return Err(format!(
                "n_mcv1 ({}) exceeds n_children ({})",
                self.n_mcv1, self.n_children
            ));
        }
        if !(self.distance_km >= 0.0) || !self.distance_km.is_finite() {
            return Err(format!("distance_km must be finite and >= 0, got {}", self.distance_km));
        }
        if self.population < self.n_children {
            return Err(format!(
                "population ({}) is smaller than n_children ({})",
                self.population, self.n_children
            ));
        }
        if self.village_id.is_empty() || self.health_area_id.is_empty() {
            return Err("empty identifier".into());
        }
        Ok(())
    }

    /// Baseline village MCV1 rate; 0 for a village without children.
    pub fn baseline_rate(&self) -> f64 {
        if self.n_children == 0 {
            0.0
        } else {
            f64::from(self.n_mcv1) / f64::from(self.n_children)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealthArea {
    pub id: String,
    /// Indices into [`Census::villages`].
    pub villages: Vec<usize>,
}

/// Immutable census. Health areas are kept in lexicographic order of their id.
#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    villages: Vec<Village>,
    areas: Vec<HealthArea>,
}

impl Census {
    /// Validates every village and groups them by health area.
    pub fn from_villages(villages: Vec<Village>) -> Result<Self> {
        let mut by_area: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seen = std::collections::HashSet::new();
        for (i, v) in villages.iter().enumerate() {
            v.validate().map_err(|message| Error::Schema {
                location: format!("row {} ({})", i + 1, v.village_id),
                message,
            })?;
            if !seen.insert(v.village_id.as_str()) {
                return Err(Error::Schema {
                    location: format!("row {}", i + 1),
                    message: format!("duplicate village_id {}", v.village_id),
                });
            }
            by_area.entry(v.health_area_id.clone()).or_default().push(i);
        }
        if villages.is_empty() {
            return Err(Error::invalid("census has no villages"));
        }
        let areas = by_area
            .into_iter()
            .map(|(id, villages)| HealthArea { id, villages })
            .collect();
        Ok(Census { villages, areas })
    }

    pub fn villages(&self) -> &[Village] {
        &self.villages
    }

    pub fn areas(&self) -> &[HealthArea] {
        &self.areas
    }

    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn area_index(&self, id: &str) -> Option<usize> {
        self.areas.binary_search_by(|a| a.id.as_str().cmp(id)).ok()
    }

    /// Villages with at least [`MIN_ANALYSIS_CHILDREN`] eligible children.
    pub fn analysis_view(&self) -> Result<Census> {
        let kept: Vec<Village> = self
            .villages
            .iter()
            .filter(|v| v.n_children >= MIN_ANALYSIS_CHILDREN)
            .cloned()
            .collect();
        Census::from_villages(kept)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for v in &self.villages {
            w.serialize(v)?;
        }
        w.flush().map_err(|e| Error::io("<census csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Reads a census CSV. `expected_areas` enforces the number of distinct health areas.
pub fn read_census<R: Read>(reader: R, expected_areas: Option<usize>) -> Result<Census> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let found: Vec<&str> = header.iter().collect();
    if found != CSV_HEADER {
        let missing: Vec<&str> = CSV_HEADER.iter().copied().filter(|c| !found.contains(c)).collect();
        let extra: Vec<&str> = found.iter().copied().filter(|c| !CSV_HEADER.contains(c)).collect();
        return Err(Error::Schema {
            location: "header".into(),
            message: format!(
                "expected `{}`; missing {:?}, unexpected {:?}",
                CSV_HEADER.join(","),
                missing,
                extra
            ),
        });
    }
    let mut villages = Vec::new();
    for (i, rec) in rdr.deserialize::<Village>().enumerate() {
        let v = rec.map_err(|e| Error::Schema {
            location: format!("row {}", i + 1),
            message: e.to_string(),
        })?;
        villages.push(v);
    }
    let census = Census::from_villages(villages)?;
    if let Some(n) = expected_areas {
        if census.n_areas() != n {
            return Err(Error::Schema {
                location: "health_area column".into(),
                message: format!("expected {n} health areas, found {}", census.n_areas()),
            });
        }
    }
    Ok(census)
}

/// Loads a census CSV holding exactly 12 health areas.
pub fn load_census(path: impl AsRef<Path>) -> Result<Census> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_census(std::io::BufReader::new(f), Some(N_HEALTH_AREAS))
}

/// Descriptive statistics of one health area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthAreaProfile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n_villages: usize,
    pub distance_mean: f64,
    pub distance_sd: f64,
    pub population_mean: f64,
    pub population_sd: f64,
    pub children_mean: f64,
    pub children_sd: f64,
    pub mcv1_rate_mean: f64,
    pub mcv1_rate_sd: f64,
}

impl HealthAreaProfile {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let sds = [self.distance_sd, self.population_sd, self.children_sd, self.mcv1_rate_sd];
        if sds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err("standard deviations must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.mcv1_rate_mean) {
            return Err(format!("mcv1_rate_mean {} outside [0, 1]", self.mcv1_rate_mean));
        }
        if self.n_villages == 0 {
            return Err("n_villages must be >= 1".into());
        }
        if !(self.population_mean > 0.0) || !(self.children_mean > 0.0) || !(self.distance_mean >= 0.0) {
            return Err("means must be positive".into());
        }
        Ok(())
    }

    fn label(&self, index: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("HA{:02}", index + 1))
    }
}

#[allow(clippy::too_many_arguments)]
fn profile(
    name: &str,
    n: usize,
    dist: (f64, f64),
    pop: (f64, f64),
    kids: (f64, f64),
    rate: (f64, f64),
) -> HealthAreaProfile {
    HealthAreaProfile {
        name: Some(name.to_string()),
        n_villages: n,
        distance_mean: dist.0,
        distance_sd: dist.1,
        population_mean: pop.0,
        population_sd: pop.1,
        children_mean: kids.0,
        children_sd: kids.1,
        mcv1_rate_mean: rate.0,
        mcv1_rate_sd: rate.1,
    }
}

/// The 12 Ngouri health-area profiles (villages with >= 5 eligible children).
pub fn default_profiles() -> Vec<HealthAreaProfile> {
    vec![
        profile("Amerom", 37, (6.4, 3.3), (198.5, 267.0), (18.6, 26.9), (0.73, 0.20)),
        profile("Blachidi", 28, (6.8, 4.2), (56.0, 69.8), (11.3, 7.5), (0.61, 0.23)),
        profile("Boulorom", 16, (6.3, 4.5), (292.7, 260.7), (9.7, 5.4), (0.70, 0.36)),
        profile("Hagerrom", 19, (4.6, 2.8), (276.7, 287.4), (14.2, 9.1), (0.75, 0.23)),
        profile("Kalimba", 17, (4.3, 1.7), (233.5, 189.0), (12.2, 6.8), (0.70, 0.19)),
        profile("Kindjira", 15, (2.7, 1.2), (302.8, 414.7), (11.1, 8.3), (0.87, 0.20)),
        profile("Kournotoulo", 11, (2.93, 1.41), (467.7, 217.6), (18.5, 11.2), (0.75, 0.16)),
        profile("Loulou Kamerom", 10, (3.70, 2.40), (302.9, 125.4), (11.8, 4.3), (0.74, 0.20)),
        profile("Madem", 10, (2.82, 1.94), (312.5, 291.4), (14.8, 9.5), (0.66, 0.20)),
        profile("Matoura", 14, (4.16, 2.19), (333.9, 236.1), (15.8, 11.1), (0.83, 0.19)),
        profile("Safaye", 17, (4.06, 2.49), (286.5, 278.8), (13.4, 7.2), (0.68, 0.20)),
        profile("Zingui", 6, (1.17, 0.60), (940.3, 404.7), (29.0, 17.1), (0.64, 0.16)),
    ]
}

/// Reads a JSON array of exactly 12 profiles.
pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<HealthAreaProfile>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let profiles: Vec<HealthAreaProfile> =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    if profiles.len() != N_HEALTH_AREAS {
        return Err(Error::invalid(format!(
            "profile file must hold {N_HEALTH_AREAS} health areas, found {}",
            profiles.len()
        )));
    }
    Ok(profiles)
}

/// Continuity-corrected logit `log((y + 0.5) / (m - y + 0.5))`.
pub fn empirical_logit(y: u32, m: u32) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("empirical logit needs m >= 1".into()));
    }
    if y > m {
        return Err(Error::Domain(format!("empirical logit needs y <= m, got {y} > {m}")));
    }
    Ok((f64::from(y) + 0.5).ln() - (f64::from(m - y) + 0.5).ln())
}

/// Negative binomial with mean `mu` and size `k` (variance `mu + mu²/k`).
#[derive(Debug, Clone, Copy, PartialEq)]
struct NegBinomial {
    mu: f64,
    k: f64,
}

impl NegBinomial {
    fn ln_pmf(&self, x: u32) -> f64 {
        let x = f64::from(x);
        let (mu, k) = (self.mu, self.k);
        ln_gamma(x + k) - ln_gamma(k) - ln_gamma(x + 1.0) + k * (k / (k + mu)).ln()
            + x * (mu / (k + mu)).ln()
    }

    /// Mean and variance conditional on `X >= lower`.
    fn truncated_moments(&self, lower: u32) -> (f64, f64) {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        let mut x = lower;
        loop {
            let p = self.ln_pmf(x).exp();
            let xf = f64::from(x);
            s0 += p;
            s1 += p * xf;
            s2 += p * xf * xf;
            if (xf > self.mu && p * xf * xf < 1e-17 * s2) || x >= 2_000_000 {
                break;
            }
            x += 1;
        }
        let mean = s1 / s0;
        (mean, s2 / s0 - mean * mean)
    }

    /// Finds the untruncated parameters whose `X >= lower` conditional has the
    /// target mean and SD. Newton on `(ln mu, ln k)` with a finite-difference Jacobian.
    fn fit_truncated(mean: f64, sd: f64, lower: u32) -> Option<NegBinomial> {
        let target = [mean, sd * sd];
        let resid = |t: [f64; 2]| {
            let nb = NegBinomial { mu: t[0].exp(), k: t[1].exp() };
            let (m, v) = nb.truncated_moments(lower);
            [(m - target[0]) / target[0], (v - target[1]) / target[1]]
        };
        let var = sd * sd;
        let k0 = if var > mean { mean * mean / (var - mean) } else { 50.0 };
        let mut t = [mean.ln(), k0.ln()];
        let mut r = resid(t);
        for _ in 0..200 {
            let norm = r[0].abs().max(r[1].abs());
            if norm < 1e-10 {
                return Some(NegBinomial { mu: t[0].exp(), k: t[1].exp() });
            }
            let h = 1e-6;
            let mut jac = [[0.0; 2]; 2];
            for j in 0..2 {
                let mut tp = t;
                tp[j] += h;
                let rp = resid(tp);
                jac[0][j] = (rp[0] - r[0]) / h;
                jac[1][j] = (rp[1] - r[1]) / h;
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            if det.abs() < 1e-300 {
                return None;
            }
            let step = [
                (jac[1][1] * r[0] - jac[0][1] * r[1]) / det,
                (-jac[1][0] * r[0] + jac[0][0] * r[1]) / det,
            ];
            let mut lambda = 1.0;
            loop {
                let cand = [
                    t[0] - lambda * step[0].clamp(-2.0, 2.0),
                    t[1] - lambda * step[1].clamp(-2.0, 2.0),
                ];
                let rc = resid(cand);
                if rc[0].is_finite() && rc[1].is_finite() && rc[0].abs().max(rc[1].abs()) < norm {
                    t = cand;
                    r = rc;
                    break;
                }
                lambda *= 0.5;
                if lambda < 1e-8 {
                    return None;
                }
            }
        }
        None
    }

    /// Fallback when the target SD exceeds what any conditioned negative
    /// binomial can reach at the target mean: fix a small size and match the
    /// conditional mean alone by bisection on `ln mu`.
    fn fit_truncated_mean(mean: f64, k: f64, lower: u32) -> Option<NegBinomial> {
        if mean <= f64::from(lower) {
            return None;
        }
        let (mut lo, mut hi) = (-40.0_f64, mean.ln() + 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (m, _) = NegBinomial { mu: mid.exp(), k }.truncated_moments(lower);
            if m < mean {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 {
                break;
            }
        }
        Some(NegBinomial { mu: (0.5 * (lo + hi)).exp(), k })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let lambda = Gamma::new(self.k, self.mu / self.k).expect("valid gamma").sample(rng);
        if lambda <= 0.0 {
            return 0;
        }
        Poisson::new(lambda).expect("valid poisson").sample(rng) as u32
    }
}

enum ChildrenModel {
    Constant(u32),
    Truncated(NegBinomial),
}

enum RateModel {
    Constant(f64),
    Beta(Beta<f64>),
}

fn generation_error(area: &str, message: impl Into<String>) -> Error {
    Error::Generation { area: area.to_string(), message: message.into() }
}

/// Generates villages for every profile. Per area: truncated-normal distance
/// (>= 0.1 km), moment-matched log-normal population, negative binomial
/// children count moment-matched after conditioning on >= 5, and a
/// moment-matched beta village MCV1 rate clipped to (0.01, 0.99) feeding a
/// binomial count. Population is raised to the child count when a draw falls below it.
pub fn generate_synthetic_census(profiles: &[HealthAreaProfile], seed: u64) -> Result<Census> {
    let root = StreamKey::root(seed).child(tag::CENSUS);
    let mut villages = Vec::new();
    for (ai, p) in profiles.iter().enumerate() {
        let area = p.label(ai);
        p.validate().map_err(|m| generation_error(&area, m))?;

        let children = if p.children_sd == 0.0 {
            let c = p.children_mean.round() as u32;
            if c < MIN_ANALYSIS_CHILDREN {
                return Err(generation_error(&area, "constant children count below 5"));
            }
            ChildrenModel::Constant(c)
        } else {
            let nb = NegBinomial::fit_truncated(p.children_mean, p.children_sd, MIN_ANALYSIS_CHILDREN)
                .or_else(|| NegBinomial::fit_truncated_mean(p.children_mean, OVERDISPERSED_SIZE, MIN_ANALYSIS_CHILDREN))
                .ok_or_else(|| generation_error(&area, "children mean/SD cannot be matched by a truncated negative binomial"))?;
            ChildrenModel::Truncated(nb)
        };
        let rate = if p.mcv1_rate_sd == 0.0 {
            RateModel::Constant(p.mcv1_rate_mean.clamp(0.01, 0.99))
        } else {
            let m = p.mcv1_rate_mean;
            let nu = m * (1.0 - m) / (p.mcv1_rate_sd * p.mcv1_rate_sd) - 1.0;
            if !(nu > 0.0) || m <= 0.0 || m >= 1.0 {
                return Err(generation_error(&area, "MCV1 rate SD too large for a beta distribution"));
            }
            RateModel::Beta(Beta::new(m * nu, (1.0 - m) * nu).map_err(|e| generation_error(&area, e.to_string()))?)
        };
        let population = if p.population_sd == 0.0 {
            None
        } else {
            let s2 = (1.0 + (p.population_sd / p.population_mean).powi(2)).ln();
            let mu = p.population_mean.ln() - 0.5 * s2;
            Some(LogNormal::new(mu, s2.sqrt()).expect("valid lognormal"))
        };
        let distance = if p.distance_sd == 0.0 {
            if p.distance_mean < MIN_DISTANCE_KM {
                return Err(generation_error(&area, "constant distance below 0.1 km"));
            }
            None
        } else {
            Some(Normal::new(p.distance_mean, p.distance_sd).expect("valid normal"))
        };

        let mut rng = root.child(ai as u64).stream();
        for vi in 0..p.n_villages {
            let distance_km = match &distance {
                None => p.distance_mean,
                Some(d) => {
                    let mut tries = 0;
                    loop {
                        let x = d.sample(&mut rng);
                        if x >= MIN_DISTANCE_KM {
                            break x;
                        }
                        tries += 1;
                        if tries >= MAX_REJECTIONS {
                            return Err(generation_error(&area, "distance truncation rejected every draw"));
                        }
                    }
                }
            };
            let n_children = match &children {
                ChildrenModel::Constant(c) => *c,
                ChildrenModel::Truncated(nb) => {
                    let mut tries = 0;
                    loop {
                        let x = nb.sample(&mut rng);
                        if x >= MIN_ANALYSIS_CHILDREN {
                            break x;
                        }
                        tries += 1;
                        if tries >= MAX_REJECTIONS {
                            return Err(generation_error(&area, "children conditioning rejected every draw"));
                        }
                    }
                }
            };
            let pop_draw = match &population {
                None => p.population_mean,
                Some(ln) => ln.sample(&mut rng),
            };
            let population = (pop_draw.round().max(1.0) as u32).max(n_children);
            let r = match &rate {
                RateModel::Constant(r) => *r,
                RateModel::Beta(b) => b.sample(&mut rng).clamp(0.01, 0.99),
            };
            let n_mcv1 = Binomial::new(u64::from(n_children), r).expect("valid binomial").sample(&mut rng) as u32;
            villages.push(Village {
                village_id: format!("{}-{:03}", area.replace(' ', "_"), vi + 1),
                health_area_id: area.clone(),
                population,
                distance_km: (distance_km * 1000.0).round() / 1000.0,
                n_children,
                n_mcv1,
            });
        }
    }
    Census::from_villages(villages)
}

/// Per-area descriptive statistics with totals and village-rate quartiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSummary {
    pub health_area: String,
    pub profile: HealthAreaProfile,
    pub total_children: u64,
    pub total_mcv1: u64,
    pub pooled_rate: f64,
    pub rate_median: f64,
    pub rate_q1: f64,
    pub rate_q3: f64,
}

/// Linear-interpolation quantile on sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarizes every health area. SDs of single-village areas are 0.
pub fn summarize_census(census: &Census) -> Result<Vec<AreaSummary>> {
    census
        .areas()
        .iter()
        .map(|area| {
            if area.villages.is_empty() {
                return Err(Error::EmptyArea { area: area.id.clone() });
            }
            let vs: Vec<&Village> = area.villages.iter().map(|&i| &census.villages()[i]).collect();
            let col = |f: &dyn Fn(&Village) -> f64| mean_sd(&vs.iter().map(|v| f(v)).collect::<Vec<_>>());
            let (distance_mean, distance_sd) = col(&|v| v.distance_km);
            let (population_mean, population_sd) = col(&|v| f64::from(v.population));
            let (children_mean, children_sd) = col(&|v| f64::from(v.n_children));
            let mut rates: Vec<f64> = vs.iter().map(|v| v.baseline_rate()).collect();
            let (mcv1_rate_mean, mcv1_rate_sd) = mean_sd(&rates);
            rates.sort_by(|a, b| a.total_cmp(b));
            let total_children: u64 = vs.iter().map(|v| u64::from(v.n_children)).sum();
            let total_mcv1: u64 = vs.iter().map(|v| u64::from(v.n_mcv1)).sum();
            Ok(AreaSummary {
                health_area: area.id.clone(),
                profile: HealthAreaProfile {
                    name: Some(area.id.clone()),
                    n_villages: vs.len(),
                    distance_mean,
                    distance_sd,
                    population_mean,
                    population_sd,
                    children_mean,
                    children_sd,
                    mcv1_rate_mean,
                    mcv1_rate_sd,
                },
                total_children,
                total_mcv1,
                pooled_rate: if total_children == 0 { 0.0 } else { total_mcv1 as f64 / total_children as f64 },
                rate_median: quantile_sorted(&rates, 0.5),
                rate_q1: quantile_sorted(&rates, 0.25),
                rate_q3: quantile_sorted(&rates, 0.75),
            })
        })
        .collect()
}
