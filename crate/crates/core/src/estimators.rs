//! Point estimators of the average treatment effect.

use serde::Serialize;
use thiserror::Error;

use crate::design_probability::{DesignError, DesignMoments};
use crate::population::{scale_outcomes, DesignSpec, FinitePopulation};
use crate::sampling::ObservedSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("cluster `{0}` has no sampled units")]
    EmptyCluster(String),
    #[error("no sampled units in the {0} arm")]
    NoArmData(&'static str),
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Scaled within-cluster HT total (1/N̄)·(N_c/n_c)·Σ y.
pub fn ht_cluster_total(sampled_ys: &[f64], cluster_size: usize, nbar: f64) -> Result<f64, EstimatorError> {
    if sampled_ys.is_empty() {
        return Err(EstimatorError::EmptyCluster(String::new()));
    }
    let n = sampled_ys.len() as f64;
    Ok(sampled_ys.iter().sum::<f64>() * (cluster_size as f64 / n) / nbar)
}

/// One observed cluster reduced to what the variance formulas need.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterAggregate {
    pub index: usize,
    pub id: String,
    pub treated: bool,
    /// Ŷ̃_c.
    pub total_hat: f64,
    /// Sampled outcomes divided by N̄.
    pub scaled_units: Vec<f64>,
}

pub fn cluster_aggregates(
    sample: &ObservedSample,
    design: &DesignSpec,
) -> Result<Vec<ClusterAggregate>, EstimatorError> {
    let nbar = design.nbar();
    sample
        .clusters
        .iter()
        .map(|c| {
            let ys = c.outcomes();
            let total_hat = ht_cluster_total(&ys, design.clusters[c.index].size, nbar)
                .map_err(|_| EstimatorError::EmptyCluster(c.id.clone()))?;
            Ok(ClusterAggregate {
                index: c.index,
                id: c.id.clone(),
                treated: c.treated,
                total_hat,
                scaled_units: ys.iter().map(|y| y / nbar).collect(),
            })
        })
        .collect()
}

/// HT arm means (1/C)·Σ R_c D_c Ŷ̃_c / (pq) and the control analogue, as
/// `[control, treated]`.
pub fn ht_arm_means(aggregates: &[ClusterAggregate], moments: &DesignMoments, c: usize) -> [f64; 2] {
    let mut sums = [0.0; 2];
    for a in aggregates {
        sums[a.treated as usize] += a.total_hat;
    }
    [
        sums[0] / (c as f64 * moments.joint.arm_single(false)),
        sums[1] / (c as f64 * moments.joint.arm_single(true)),
    ]
}

/// Horvitz–Thompson ATE estimate, cluster-level form.
pub fn ht_ate(sample: &ObservedSample, design: &DesignSpec) -> Result<f64, EstimatorError> {
    let moments = DesignMoments::new(design)?;
    let aggregates = cluster_aggregates(sample, design)?;
    let [m0, m1] = ht_arm_means(&aggregates, &moments, design.num_clusters);
    let estimate = m1 - m0;
    debug_assert!({
        let unit = ht_ate_unit_level(sample, design, &moments);
        (unit - estimate).abs() <= 1e-12 * estimate.abs().max(unit.abs()).max(1e-300)
            || (unit - estimate).abs() < 1e-300
    });
    Ok(estimate)
}

/// The same estimator written over units: (1/N) Σ_c Σ_i w_c R_{i|c} Y_ci / π_c.
pub fn ht_ate_unit_level(sample: &ObservedSample, design: &DesignSpec, moments: &DesignMoments) -> f64 {
    let n_total = design.total_units() as f64;
    sample
        .clusters
        .iter()
        .map(|c| {
            let pi = moments.probs.pi[c.index];
            let sign = if c.treated { 1.0 } else { -1.0 };
            let w = sign / moments.joint.arm_single(c.treated);
            c.units.iter().map(|u| w * u.y / pi).sum::<f64>()
        })
        .sum::<f64>()
        / n_total
}

/// HT estimator with the true scaled cluster totals of the realized arm.
/// `first_stage` lists `(cluster index, treated)` for the sampled clusters.
pub fn infeasible_ate(
    pop: &FinitePopulation,
    design: &DesignSpec,
    first_stage: &[(usize, bool)],
) -> Result<f64, EstimatorError> {
    let moments = DesignMoments::new(design)?;
    let scaled = scale_outcomes(pop);
    let c = pop.num_clusters() as f64;
    Ok(first_stage
        .iter()
        .map(|&(i, t)| {
            let sign = if t { 1.0 } else { -1.0 };
            sign * scaled.total(i, t) / moments.joint.arm_single(t)
        })
        .sum::<f64>()
        / c)
}

/// Difference in means over sampled units, with random arm sizes n1, n0.
pub fn diff_in_means(sample: &ObservedSample) -> Result<f64, EstimatorError> {
    let mean = |treated: bool| {
        let (sum, n) = sample
            .arm(treated)
            .flat_map(|c| c.units.iter())
            .fold((0.0, 0usize), |(s, n), u| (s + u.y, n + 1));
        (n > 0).then(|| sum / n as f64)
    };
    let m1 = mean(true).ok_or(EstimatorError::NoArmData("treated"))?;
    let m0 = mean(false).ok_or(EstimatorError::NoArmData("control"))?;
    Ok(m1 - m0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::ClusterDesign;
    use crate::sampling::{SampledCluster, SampledUnit};

    fn cluster(index: usize, treated: bool, ys: &[f64]) -> SampledCluster {
        SampledCluster {
            id: format!("c{index:03}"),
            index,
            treated,
            units: ys
                .iter()
                .enumerate()
                .map(|(i, &y)| SampledUnit {
                    unit_id: i.to_string(),
                    y,
                })
                .collect(),
        }
    }

    fn design(s: usize, s1: usize, sizes: &[(usize, usize)]) -> DesignSpec {
        DesignSpec::new(
            s,
            s1,
            sizes
                .iter()
                .enumerate()
                .map(|(i, &(size, sample))| ClusterDesign {
                    id: format!("c{i:03}"),
                    size,
                    sample,
                })
                .collect(),
        )
    }

    #[test]
    fn cluster_total_examples() {
        assert_eq!(ht_cluster_total(&[1.0, 2.0, 3.0], 3, 3.0).unwrap(), 2.0);
        assert_eq!(ht_cluster_total(&[2.0], 4, 2.0).unwrap(), 4.0);
        assert!(matches!(
            ht_cluster_total(&[], 4, 2.0),
            Err(EstimatorError::EmptyCluster(_))
        ));
    }

    #[test]
    fn cluster_total_unbiased_over_subsets() {
        use itertools::Itertools;
        let ys = [1.0, 4.0, -2.0, 7.5];
        let nbar = 2.5;
        let truth = ys.iter().sum::<f64>() / nbar;
        let subsets: Vec<Vec<f64>> = ys.iter().copied().combinations(2).collect();
        assert_eq!(subsets.len(), 6);
        let mean = subsets
            .iter()
            .map(|s| ht_cluster_total(s, 4, nbar).unwrap())
            .sum::<f64>()
            / 6.0;
        assert!((mean - truth).abs() < 1e-12);
    }

    #[test]
    fn zero_outcomes_give_zero() {
        let d = design(2, 1, &[(2, 2), (2, 2), (3, 1)]);
        let s = ObservedSample::new(vec![cluster(0, true, &[0.0, 0.0]), cluster(1, false, &[0.0, 0.0])]);
        assert_eq!(ht_ate(&s, &d).unwrap(), 0.0);
    }

    #[test]
    fn census_two_clusters() {
        // p = 1, q = 1/2, π = 1; sizes 2 and 4 so N̄ = 3.
        let d = design(2, 1, &[(2, 2), (4, 4)]);
        let s = ObservedSample::new(vec![
            cluster(0, true, &[3.0, 5.0]),
            cluster(1, false, &[1.0, 1.0, 2.0, 2.0]),
        ]);
        let y_t = 8.0 / 3.0;
        let y_u = 6.0 / 3.0;
        let expected = y_t / 0.5 / 2.0 - y_u / 0.5 / 2.0;
        assert!((ht_ate(&s, &d).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn unit_and_cluster_forms_agree() {
        let d = design(3, 2, &[(3, 2), (4, 2), (2, 1), (5, 3)]);
        let s = ObservedSample::new(vec![
            cluster(0, true, &[1.5, -2.0]),
            cluster(2, false, &[4.0]),
            cluster(3, true, &[0.5, 9.0, 3.25]),
        ]);
        let m = DesignMoments::new(&d).unwrap();
        let a = ht_ate(&s, &d).unwrap();
        let b = ht_ate_unit_level(&s, &d, &m);
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn infeasible_equals_feasible_when_census_within() {
        let pop = FinitePopulation::from_outcomes(vec![
            vec![(1.0, 2.0), (3.0, 5.0)],
            vec![(0.0, 1.0)],
            vec![(2.0, 2.0), (4.0, 9.0), (1.0, 0.0)],
        ])
        .unwrap();
        let d = DesignSpec::for_population(&pop, 2, 1, |n| n);
        for seed in 0..20 {
            let s = crate::sampling::draw_sample(&pop, &d, seed);
            let a = ht_ate(&s, &d).unwrap();
            let b = infeasible_ate(&pop, &d, &s.first_stage()).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diff_in_means_examples() {
        let s = ObservedSample::new(vec![
            cluster(0, true, &[3.0, 3.0]),
            cluster(1, false, &[1.0, 1.0]),
            cluster(2, true, &[3.0]),
        ]);
        assert_eq!(diff_in_means(&s).unwrap(), 2.0);

        // a single control cluster: n0 is its n_c
        let s = ObservedSample::new(vec![
            cluster(0, true, &[1.0, 2.0, 3.0]),
            cluster(1, false, &[0.0, 1.0, 5.0, 6.0]),
        ]);
        assert_eq!(diff_in_means(&s).unwrap(), 2.0 - 3.0);

        let s = ObservedSample::new(vec![cluster(0, true, &[1.0])]);
        assert_eq!(diff_in_means(&s), Err(EstimatorError::NoArmData("control")));
    }

    #[test]
    fn equal_sizes_census_dm_matches_ht() {
        // equal N_c, census second stage, p = 1, q = 1/2: HT and DM coincide
        let d = design(4, 2, &[(2, 2); 4]);
        let s = ObservedSample::new(vec![
            cluster(0, true, &[1.0, 2.0]),
            cluster(1, false, &[0.0, 3.0]),
            cluster(2, false, &[5.0, -1.0]),
            cluster(3, true, &[2.5, 2.5]),
        ]);
        let ht = ht_ate(&s, &d).unwrap();
        let dm = diff_in_means(&s).unwrap();
        assert!((ht - dm).abs() < 1e-12);
    }
}
