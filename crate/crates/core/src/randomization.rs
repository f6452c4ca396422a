//! Covariate-constrained randomization.
//!
//! Health areas are split 1:1 between arms, villages are selected inside each
//! arm in proportion to area size, and a candidate is kept only when the mean
//! absolute SMD over population, distance and baseline MCV1 rate does not
//! exceed the threshold.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::census::Census;
use crate::error::{Error, Result};
use crate::rng::{tag, StreamKey};
use crate::special::mean_sd;

pub const DEFAULT_SMD_THRESHOLD: f64 = 0.20;
pub const POOL_CSV_HEADER: &str = "draw_id,allocation_bitmask,smd_pop,smd_dist,smd_mcv1,avg_smd,selection_blob";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Control => "control",
            Arm::Treatment => "treatment",
        }
    }
}

/// Health-area allocation as a treatment bitmask over areas in lexicographic id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Allocation {
    mask: u32,
    n_areas: u8,
}

impl Allocation {
    pub fn from_mask(mask: u32, n_areas: usize) -> Result<Self> {
        if n_areas == 0 || n_areas > 32 || !n_areas.is_multiple_of(2) {
            return Err(Error::invalid(format!("need an even number of health areas (<= 32), got {n_areas}")));
        }
        if n_areas < 32 && mask >> n_areas != 0 {
            return Err(Error::invalid(format!("mask {mask:#x} has bits beyond {n_areas} areas")));
        }
        if mask.count_ones() as usize != n_areas / 2 {
            return Err(Error::invalid(format!(
                "allocation must treat exactly {} areas, mask {mask:#x} treats {}",
                n_areas / 2,
                mask.count_ones()
            )));
        }
        Ok(Allocation { mask, n_areas: n_areas as u8 })
    }

    /// Uniform over the `C(n, n/2)` balanced allocations.
    pub fn sample<R: Rng + ?Sized>(n_areas: usize, rng: &mut R) -> Result<Self> {
        let treated = index::sample(rng, n_areas, n_areas / 2);
        let mask = treated.iter().fold(0u32, |m, i| m | (1 << i));
        Allocation::from_mask(mask, n_areas)
    }

    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn n_areas(&self) -> usize {
        usize::from(self.n_areas)
    }

    pub fn arm_of(&self, area: usize) -> Arm {
        if self.mask & (1 << area) != 0 {
            Arm::Treatment
        } else {
            Arm::Control
        }
    }

    pub fn areas(&self, arm: Arm) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_areas()).filter(move |&a| self.arm_of(a) == arm)
    }

    pub fn swapped(&self) -> Allocation {
        let full = if self.n_areas == 32 { u32::MAX } else { (1u32 << self.n_areas) - 1 };
        Allocation { mask: !self.mask & full, n_areas: self.n_areas }
    }
}

/// Selected villages (indices into the census) per arm, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VillageSelection {
    pub control: Vec<u32>,
    pub treatment: Vec<u32>,
    pub n_per_arm: usize,
}

impl VillageSelection {
    pub fn arm(&self, arm: Arm) -> &[u32] {
        match arm {
            Arm::Control => &self.control,
            Arm::Treatment => &self.treatment,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, Arm)> + '_ {
        self.control
            .iter()
            .map(|&v| (v, Arm::Control))
            .chain(self.treatment.iter().map(|&v| (v, Arm::Treatment)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomizationDraw {
    pub allocation: Allocation,
    pub selection: VillageSelection,
    /// |SMD| for population, distance, baseline MCV1 rate.
    pub smd: [f64; 3],
    pub avg_smd: f64,
}

impl RandomizationDraw {
    pub fn from_parts(census: &Census, allocation: Allocation, selection: VillageSelection) -> Result<Self> {
        let smd = balance_smds(census, &selection)?;
        Ok(RandomizationDraw { allocation, selection, smd, avg_smd: average(smd) })
    }

    /// The same draw with control and treatment relabelled.
    pub fn swapped(&self, census: &Census) -> Result<Self> {
        let selection = VillageSelection {
            control: self.selection.treatment.clone(),
            treatment: self.selection.control.clone(),
            n_per_arm: self.selection.n_per_arm,
        };
        RandomizationDraw::from_parts(census, self.allocation.swapped(), selection)
    }
}

fn average(smd: [f64; 3]) -> f64 {
    (smd[0] + smd[1] + smd[2]) / 3.0
}

/// Absolute standardized mean difference with the average-variance pooled SD
/// (sample variances). Equal means give 0; zero pooled SD with unequal means
/// gives `+inf`.
pub fn smd(values_t: &[f64], values_c: &[f64]) -> Result<f64> {
    if values_t.len() < 2 || values_c.len() < 2 {
        return Err(Error::invalid("SMD needs at least two values per group"));
    }
    let (mt, st) = mean_sd(values_t);
    let (mc, sc) = mean_sd(values_c);
    let diff = (mt - mc).abs();
    if diff == 0.0 {
        return Ok(0.0);
    }
    let pooled = ((st * st + sc * sc) / 2.0).sqrt();
    if pooled == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(diff / pooled)
}

fn balance_smds(census: &Census, sel: &VillageSelection) -> Result<[f64; 3]> {
    let vs = census.villages();
    let column = |ids: &[u32], f: fn(&crate::census::Village) -> f64| -> Vec<f64> {
        ids.iter().map(|&i| f(&vs[i as usize])).collect()
    };
    let pop = |v: &crate::census::Village| f64::from(v.population);
    let dist = |v: &crate::census::Village| v.distance_km;
    let rate = |v: &crate::census::Village| v.baseline_rate();
    Ok([
        smd(&column(&sel.treatment, pop), &column(&sel.control, pop))?,
        smd(&column(&sel.treatment, dist), &column(&sel.control, dist))?,
        smd(&column(&sel.treatment, rate), &column(&sel.control, rate))?,
    ])
}

/// Hamilton (largest-remainder) apportionment of `n` seats over `counts`,
/// capped at each count. Ties in the remainder go to the larger count, then
/// to the earlier position. Exact integer arithmetic throughout.
pub fn largest_remainder(counts: &[usize], n: usize) -> Result<Vec<usize>> {
    let total: usize = counts.iter().sum();
    if n > total {
        return Err(Error::invalid(format!("cannot place {n} in capacity {total}")));
    }
    let mut quotas = vec![0usize; counts.len()];
    let mut active: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
    let mut remaining = n;
    loop {
        let pool: usize = active.iter().map(|&i| counts[i]).sum();
        if remaining == 0 || pool == 0 {
            break;
        }
        let mut trial: Vec<(usize, usize, usize)> = active
            .iter()
            .map(|&i| {
                let num = counts[i] * remaining;
                (i, num / pool, num % pool)
            })
            .collect();
        let assigned: usize = trial.iter().map(|t| t.1).sum();
        let mut order: Vec<usize> = (0..trial.len()).collect();
        order.sort_by(|&a, &b| {
            let (ia, _, ra) = trial[a];
            let (ib, _, rb) = trial[b];
            rb.cmp(&ra).then(counts[ib].cmp(&counts[ia])).then(ia.cmp(&ib))
        });
        for &k in order.iter().take(remaining - assigned) {
            trial[k].1 += 1;
        }
        let saturated: Vec<usize> = trial.iter().filter(|t| t.1 > counts[t.0]).map(|t| t.0).collect();
        if saturated.is_empty() {
            for (i, q, _) in trial {
                quotas[i] = q;
            }
            break;
        }
        for &i in &saturated {
            quotas[i] = counts[i];
            remaining -= counts[i];
        }
        active.retain(|i| !saturated.contains(i));
    }
    Ok(quotas)
}

/// `(area index, village quota)` pairs for each arm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArmQuotas {
    pub control: Vec<(usize, usize)>,
    pub treatment: Vec<(usize, usize)>,
}

impl ArmQuotas {
    pub fn arm(&self, arm: Arm) -> &[(usize, usize)] {
        match arm {
            Arm::Control => &self.control,
            Arm::Treatment => &self.treatment,
        }
    }
}

pub fn apportion_villages(census: &Census, allocation: &Allocation, n_per_arm: usize) -> Result<ArmQuotas> {
    if allocation.n_areas() != census.n_areas() {
        return Err(Error::invalid(format!(
            "allocation covers {} areas, census has {}",
            allocation.n_areas(),
            census.n_areas()
        )));
    }
    let per_arm = |arm: Arm| -> Result<Vec<(usize, usize)>> {
        let areas: Vec<usize> = allocation.areas(arm).collect();
        let counts: Vec<usize> = areas.iter().map(|&a| census.areas()[a].villages.len()).collect();
        let available: usize = counts.iter().sum();
        if available < n_per_arm {
            return Err(Error::Capacity { arm: arm.label(), available, requested: n_per_arm });
        }
        let q = largest_remainder(&counts, n_per_arm)?;
        Ok(areas.into_iter().zip(q).collect())
    };
    Ok(ArmQuotas { control: per_arm(Arm::Control)?, treatment: per_arm(Arm::Treatment)? })
}

/// One unconstrained candidate: balanced allocation, proportional quotas,
/// villages sampled without replacement inside each area.
pub fn draw_candidate<R: Rng + ?Sized>(census: &Census, n_per_arm: usize, rng: &mut R) -> Result<RandomizationDraw> {
    let allocation = Allocation::sample(census.n_areas(), rng)?;
    let quotas = apportion_villages(census, &allocation, n_per_arm)?;
    let mut pick = |arm: Arm| -> Vec<u32> {
        let mut ids = Vec::with_capacity(n_per_arm);
        for &(area, q) in quotas.arm(arm) {
            let members = &census.areas()[area].villages;
            for k in index::sample(rng, members.len(), q) {
                ids.push(members[k] as u32);
            }
        }
        ids.sort_unstable();
        ids
    };
    let control = pick(Arm::Control);
    let treatment = pick(Arm::Treatment);
    RandomizationDraw::from_parts(census, allocation, VillageSelection { control, treatment, n_per_arm })
}

#[derive(Debug, Clone)]
pub struct ConstrainedPool {
    pub draws: Vec<RandomizationDraw>,
    pub threshold: f64,
    pub n_attempted: usize,
    /// Attempts whose allocation could not supply `n_per_arm` villages to an arm.
    pub n_infeasible: usize,
    pub n_per_arm: usize,
    pub seed: u64,
}

impl ConstrainedPool {
    pub fn acceptance_rate(&self) -> f64 {
        self.draws.len() as f64 / self.n_attempted.max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, census: &Census, mut w: W) -> Result<()> {
        let io = |e| Error::io("<pool csv>", e);
        writeln!(w, "{POOL_CSV_HEADER}").map_err(io)?;
        let ids = |list: &[u32]| -> String {
            list.iter().map(|&i| census.villages()[i as usize].village_id.as_str()).collect::<Vec<_>>().join(";")
        };
        for (k, d) in self.draws.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}|{}",
                k,
                d.allocation.mask(),
                d.smd[0],
                d.smd[1],
                d.smd[2],
                d.avg_smd,
                ids(&d.selection.control),
                ids(&d.selection.treatment)
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save(&self, census: &Census, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(census, std::io::BufWriter::new(f))
    }
}

/// Reads a pool file back against the census it was built from. Balance
/// metrics are recomputed and must match the stored values exactly.
pub fn read_pool<R: Read>(census: &Census, reader: R, threshold: f64) -> Result<ConstrainedPool> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != POOL_CSV_HEADER {
        return Err(Error::Schema { location: "pool header".into(), message: format!("expected `{POOL_CSV_HEADER}`") });
    }
    let lookup: std::collections::HashMap<&str, u32> = census
        .villages()
        .iter()
        .enumerate()
        .map(|(i, v)| (v.village_id.as_str(), i as u32))
        .collect();
    let mut draws = Vec::new();
    let mut n_per_arm = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::Schema { location: format!("pool row {}", row + 1), message: m };
        let mask: u32 = rec[1].parse().map_err(|e| bad(format!("allocation_bitmask: {e}")))?;
        let allocation = Allocation::from_mask(mask, census.n_areas())?;
        let (c, t) = rec[6].split_once('|').ok_or_else(|| bad("selection_blob lacks `|`".into()))?;
        let parse = |s: &str| -> Result<Vec<u32>> {
            let mut v = s
                .split(';')
                .filter(|x| !x.is_empty())
                .map(|id| lookup.get(id).copied().ok_or_else(|| bad(format!("unknown village {id}"))))
                .collect::<Result<Vec<u32>>>()?;
            v.sort_unstable();
            Ok(v)
        };
        let (control, treatment) = (parse(c)?, parse(t)?);
        n_per_arm = control.len();
        let draw = RandomizationDraw::from_parts(census, allocation, VillageSelection { control, treatment, n_per_arm })?;
        let recomputed = [draw.smd[0], draw.smd[1], draw.smd[2], draw.avg_smd];
        for (k, (name, value)) in ["smd_pop", "smd_dist", "smd_mcv1", "avg_smd"].iter().zip(recomputed).enumerate() {
            let stored: f64 = rec[2 + k].parse().map_err(|e| bad(format!("{name}: {e}")))?;
            if stored != value {
                return Err(bad(format!("{name} {stored} does not match recomputed {value}")));
            }
        }
        draws.push(draw);
    }
    let n = draws.len();
    Ok(ConstrainedPool { draws, threshold, n_attempted: n, n_infeasible: 0, n_per_arm, seed: 0 })
}

/// Runs `n_attempts` candidate draws (in parallel) and keeps those with
/// `avg_smd <= threshold`. Attempt `i` draws from its own substream, so the
/// pool depends only on the seed.
pub fn build_pool(census: &Census, n_per_arm: usize, n_attempts: usize, threshold: f64, seed: u64) -> Result<ConstrainedPool> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be > 0, got {threshold}")));
    }
    if n_attempts == 0 {
        return Err(Error::invalid("n_attempts must be >= 1"));
    }
    if n_per_arm < 2 {
        return Err(Error::invalid("n_per_arm must be >= 2"));
    }
    let root = StreamKey::root(seed).child(tag::ATTEMPT);
    enum Attempt {
        Accepted(RandomizationDraw),
        Rejected,
        Infeasible,
    }
    let outcomes: Vec<Result<Attempt>> = (0..n_attempts)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.child(i as u64).stream();
            match draw_candidate(census, n_per_arm, &mut rng) {
                Ok(d) if d.avg_smd <= threshold => Ok(Attempt::Accepted(d)),
                Ok(_) => Ok(Attempt::Rejected),
                Err(Error::Capacity { .. }) => Ok(Attempt::Infeasible),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut draws = Vec::new();
    let mut n_infeasible = 0;
    for o in outcomes {
        match o? {
            Attempt::Accepted(d) => draws.push(d),
            Attempt::Rejected => {}
            Attempt::Infeasible => n_infeasible += 1,
        }
    }
    if draws.is_empty() {
        return Err(Error::EmptyPool { threshold, attempts: n_attempts });
    }
    Ok(ConstrainedPool { draws, threshold, n_attempted: n_attempts, n_infeasible, n_per_arm, seed })
}

pub fn sample_from_pool<'a, R: Rng + ?Sized>(pool: &'a ConstrainedPool, rng: &mut R) -> Result<&'a RandomizationDraw> {
    if pool.draws.is_empty() {
        return Err(Error::EmptyPool { threshold: pool.threshold, attempts: pool.n_attempted });
    }
    Ok(&pool.draws[rng.gen_range(0..pool.draws.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::census::{default_profiles, generate_synthetic_census};

    #[test]
    fn smd_hand_values() {
        assert_eq!(smd(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(smd(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(smd(&[5.0, 5.0], &[7.0, 7.0]).unwrap(), f64::INFINITY);
        assert!(smd(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn largest_remainder_examples() {
        // shares 16.82, 12.73, 7.27, 8.64, 7.73, 6.82: floors sum to 56, the four
        // largest remainders (9/11, 9/11, 8/11, 8/11) go to 37, 15, 28, 17.
        let q = largest_remainder(&[37, 28, 16, 19, 17, 15], 60).unwrap();
        assert_eq!(q, vec![17, 13, 7, 8, 8, 7]);
        assert_eq!(q.iter().sum::<usize>(), 60);
        assert_eq!(largest_remainder(&[37, 28, 16, 19, 17, 15], 132).unwrap(), vec![37, 28, 16, 19, 17, 15]);
        assert_eq!(largest_remainder(&[9], 4).unwrap(), vec![4]);
        assert!(largest_remainder(&[3, 4], 8).is_err());
    }

    #[test]
    fn capacity_error_names_the_arm() {
        let census = generate_synthetic_census(&default_profiles(), 1).unwrap();
        // The six smallest areas hold 66 villages.
        let small: u32 = [5, 6, 7, 8, 9, 11].iter().fold(0, |m, &b| m | (1 << b));
        let names: Vec<_> = census.areas().iter().map(|a| a.villages.len()).collect();
        let treated: usize = (0..12).filter(|b| small & (1 << b) != 0).map(|b| names[b]).sum();
        let alloc = Allocation::from_mask(small, 12).unwrap();
        let err = apportion_villages(&census, &alloc, treated + 1).unwrap_err();
        assert!(matches!(err, Error::Capacity { arm: "treatment", .. }), "{err}");
    }

    #[test]
    fn pool_of_one_and_empty_pool() {
        let census = generate_synthetic_census(&default_profiles(), 2).unwrap();
        let mut rng = StreamKey::root(1).stream();
        let d = draw_candidate(&census, 60, &mut rng).unwrap();
        let pool = ConstrainedPool { draws: vec![d.clone()], threshold: 1.0, n_attempted: 1, n_infeasible: 0, n_per_arm: 60, seed: 0 };
        assert_eq!(sample_from_pool(&pool, &mut rng).unwrap(), &d);
        let empty = ConstrainedPool { draws: vec![], ..pool };
        assert!(matches!(sample_from_pool(&empty, &mut rng), Err(Error::EmptyPool { .. })));
    }

    #[test]
    fn tiny_threshold_yields_empty_pool_error() {
        let census = generate_synthetic_census(&default_profiles(), 2).unwrap();
        let err = build_pool(&census, 60, 200, 1e-9, 5).unwrap_err();
        assert!(matches!(err, Error::EmptyPool { .. }));
        assert!(err.to_string().contains("relax"));
        assert!(build_pool(&census, 60, 0, 0.2, 5).is_err());
        assert!(build_pool(&census, 60, 10, 0.0, 5).is_err());
    }

    #[test]
    fn unconstrained_pool_accepts_everything_feasible() {
        let census = generate_synthetic_census(&default_profiles(), 2).unwrap();
        let pool = build_pool(&census, 60, 300, f64::INFINITY, 9).unwrap();
        assert_eq!(pool.draws.len() + pool.n_infeasible, 300);
        assert_eq!(pool.n_infeasible, 0);
    }
}
