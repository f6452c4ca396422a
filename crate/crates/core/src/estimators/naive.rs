use super::{AnalysisDataset, Method, TestResult};
use crate::special::mean_sd;

/// Unadjusted difference in mean village proportions with the unequal-variance
/// standard error. Two constant arms with equal means give `z = 0`.
pub fn naive_wald(data: &AnalysisDataset, critical_z: f64) -> TestResult {
    let (treated, control): (Vec<f64>, Vec<f64>) = {
        let mut t = Vec::new();
        let mut c = Vec::new();
        for r in data.rows() {
            if r.treated { t.push(r.proportion()) } else { c.push(r.proportion()) }
        }
        (t, c)
    };
    let (mt, st) = mean_sd(&treated);
    let (mc, sc) = mean_sd(&control);
    let estimate = mt - mc;
    let se = (st * st / treated.len() as f64 + sc * sc / control.len() as f64).sqrt();
    if se == 0.0 && estimate == 0.0 {
        return TestResult { method: Method::Naive, estimate, se, z: 0.0, reject: false, converged: true };
    }
    TestResult::decide(Method::Naive, estimate, se, true, critical_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::AnalysisRow;

    fn data(t: &[(u32, u32)], c: &[(u32, u32)]) -> AnalysisDataset {
        let mk = |&(y1, m1): &(u32, u32), treated| AnalysisRow { y1, m1, treated, baseline_rate: 0.5, population: 1.0, distance_km: 1.0 };
        AnalysisDataset::new(t.iter().map(|r| mk(r, true)).chain(c.iter().map(|r| mk(r, false))).collect()).unwrap()
    }

    #[test]
    fn equal_arms_do_not_reject() {
        let r = naive_wald(&data(&[(7, 10), (14, 20)], &[(7, 10), (7, 10)]), 1.695);
        assert_eq!(r.estimate, 0.0);
        assert_eq!(r.z, 0.0);
        assert!(!r.reject);
    }

    #[test]
    fn hand_computed_example() {
        let d = data(&[(9, 10), (8, 10)], &[(6, 10), (5, 10)]);
        let r = naive_wald(&d, 1.695);
        assert!((r.estimate - 0.30).abs() < 1e-12);
        assert!((r.se - 0.005f64.sqrt()).abs() < 1e-12);
        assert!((r.z - 4.242_640_687_119_285).abs() < 1e-9);
        assert!(r.reject);
        let s = naive_wald(&d.swapped_arms(), 1.695);
        assert_eq!(s.estimate, -r.estimate);
        assert!(!s.reject);
    }
}
