//! Finite-population data model, scaled outcomes and design validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PopulationError {
    #[error("population needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("cluster `{0}` has no units")]
    EmptyCluster(String),
    #[error("cluster id `{0}` appears more than once")]
    DuplicateCluster(String),
    #[error("non-finite outcome in cluster `{cluster}`, unit `{unit}`")]
    NonFinite { cluster: String, unit: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub unit_id: String,
    pub y0: f64,
    pub y1: f64,
}

impl Unit {
    pub fn new(unit_id: impl Into<String>, y0: f64, y1: f64) -> Self {
        Self {
            unit_id: unit_id.into(),
            y0,
            y1,
        }
    }

    pub fn outcome(&self, treated: bool) -> f64 {
        if treated {
            self.y1
        } else {
            self.y0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: String,
    pub units: Vec<Unit>,
}

impl Cluster {
    pub fn new(id: impl Into<String>, units: Vec<Unit>) -> Self {
        Self { id: id.into(), units }
    }

    pub fn size(&self) -> usize {
        self.units.len()
    }
}

/// Complete potential-outcome table. Clusters are kept sorted by id so
/// every positional index in the crate refers to the same cluster
/// regardless of input row order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinitePopulation {
    clusters: Vec<Cluster>,
}

impl FinitePopulation {
    pub fn new(mut clusters: Vec<Cluster>) -> Result<Self, PopulationError> {
        if clusters.len() < 2 {
            return Err(PopulationError::TooFewClusters(clusters.len()));
        }
        clusters.sort_by(|a, b| a.id.cmp(&b.id));
        for w in clusters.windows(2) {
            if w[0].id == w[1].id {
                return Err(PopulationError::DuplicateCluster(w[0].id.clone()));
            }
        }
        for c in &clusters {
            if c.units.is_empty() {
                return Err(PopulationError::EmptyCluster(c.id.clone()));
            }
            if let Some(u) = c.units.iter().find(|u| !u.y0.is_finite() || !u.y1.is_finite()) {
                return Err(PopulationError::NonFinite {
                    cluster: c.id.clone(),
                    unit: u.unit_id.clone(),
                });
            }
        }
        Ok(Self { clusters })
    }

    /// Builds a population from per-cluster `(y0, y1)` lists, naming
    /// clusters `c000`, `c001`, ... and units by position.
    pub fn from_outcomes(outcomes: Vec<Vec<(f64, f64)>>) -> Result<Self, PopulationError> {
        let width = outcomes.len().to_string().len().max(3);
        let clusters = outcomes
            .into_iter()
            .enumerate()
            .map(|(c, units)| {
                Cluster::new(
                    format!("c{c:0width$}"),
                    units
                        .into_iter()
                        .enumerate()
                        .map(|(i, (y0, y1))| Unit::new(i.to_string(), y0, y1))
                        .collect(),
                )
            })
            .collect();
        Self::new(clusters)
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Cluster::size).collect()
    }

    pub fn total_units(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    /// Multiplies every potential outcome by `k`.
    pub fn scaled_by(&self, k: f64) -> Self {
        let clusters = self
            .clusters
            .iter()
            .map(|c| Cluster {
                id: c.id.clone(),
                units: c
                    .units
                    .iter()
                    .map(|u| Unit::new(u.unit_id.clone(), k * u.y0, k * u.y1))
                    .collect(),
            })
            .collect();
        Self { clusters }
    }
}

/// Per-cluster design entry: population size `N_c` and second-stage sample
/// size `n_c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterDesign {
    pub id: String,
    #[serde(rename = "N")]
    pub size: usize,
    #[serde(rename = "n")]
    pub sample: usize,
}

/// The known randomization and sampling design.
///
/// JSON form: `{"C":int,"S":int,"S1":int,"clusters":[{"id":str,"N":int,"n":int},...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(rename = "C")]
    pub num_clusters: usize,
    #[serde(rename = "S")]
    pub sampled: usize,
    #[serde(rename = "S1")]
    pub treated: usize,
    pub clusters: Vec<ClusterDesign>,
}

impl DesignSpec {
    /// Builds a design and sorts the cluster entries by id.
    pub fn new(sampled: usize, treated: usize, mut clusters: Vec<ClusterDesign>) -> Self {
        clusters.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            num_clusters: clusters.len(),
            sampled,
            treated,
            clusters,
        }
    }

    /// Design matching `pop` with `n_c = sample_size(N_c)` for each cluster.
    pub fn for_population(
        pop: &FinitePopulation,
        sampled: usize,
        treated: usize,
        sample_size: impl Fn(usize) -> usize,
    ) -> Self {
        let clusters = pop
            .clusters()
            .iter()
            .map(|c| ClusterDesign {
                id: c.id.clone(),
                size: c.size(),
                sample: sample_size(c.size()),
            })
            .collect();
        Self::new(sampled, treated, clusters)
    }

    /// Restores the canonical id order after deserialization.
    pub fn canonicalize(&mut self) {
        self.clusters.sort_by(|a, b| a.id.cmp(&b.id));
    }

    pub fn control(&self) -> usize {
        self.sampled.saturating_sub(self.treated)
    }

    pub fn total_units(&self) -> usize {
        self.clusters.iter().map(|c| c.size).sum()
    }

    /// Average cluster size N̄.
    pub fn nbar(&self) -> f64 {
        self.total_units() as f64 / self.num_clusters as f64
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.clusters.binary_search_by(|c| c.id.as_str().cmp(id)).ok()
    }
}

/// A broken design invariant. Violations are reported as data.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ClusterCountMismatch {
        declared: usize,
        listed: usize,
    },
    TooFewClusters {
        clusters: usize,
    },
    SampledOutOfRange {
        sampled: usize,
        clusters: usize,
    },
    TreatmentShareDegenerate {
        treated: usize,
        sampled: usize,
    },
    ZeroSecondStage {
        cluster: String,
    },
    SampleExceedsSize {
        cluster: String,
        sample: usize,
        size: usize,
    },
    EmptyClusterSize {
        cluster: String,
    },
    DuplicateCluster {
        cluster: String,
    },
    UnknownCluster {
        cluster: String,
    },
    MissingCluster {
        cluster: String,
    },
    SizeMismatch {
        cluster: String,
        declared: usize,
        actual: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ClusterCountMismatch { declared, listed } => {
                write!(f, "C = {declared} but {listed} clusters are listed")
            }
            Violation::TooFewClusters { clusters } => {
                write!(f, "need at least 2 clusters, got {clusters}")
            }
            Violation::SampledOutOfRange { sampled, clusters } => {
                write!(f, "S = {sampled} outside [1, C = {clusters}]")
            }
            Violation::TreatmentShareDegenerate { treated, sampled } => {
                let q = if *treated == 0 { "0" } else { "1" };
                write!(
                    f,
                    "q = {q} outside (0,1): S1 = {treated} must lie in [1, S-1] with S = {sampled}"
                )
            }
            Violation::ZeroSecondStage { cluster } => {
                write!(f, "second-stage probability zero: cluster `{cluster}` has n_c = 0")
            }
            Violation::SampleExceedsSize { cluster, sample, size } => {
                write!(f, "cluster `{cluster}` samples n_c = {sample} > N_c = {size}")
            }
            Violation::EmptyClusterSize { cluster } => {
                write!(f, "cluster `{cluster}` has N_c = 0")
            }
            Violation::DuplicateCluster { cluster } => {
                write!(f, "cluster `{cluster}` listed more than once")
            }
            Violation::UnknownCluster { cluster } => {
                write!(f, "cluster `{cluster}` is not in the design")
            }
            Violation::MissingCluster { cluster } => {
                write!(f, "design cluster `{cluster}` is missing from the population")
            }
            Violation::SizeMismatch {
                cluster,
                declared,
                actual,
            } => write!(
                f,
                "cluster `{cluster}` declares N_c = {declared} but has {actual} units"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

/// Checks the design's own invariants: cluster counts, `1 ≤ S ≤ C`,
/// `1 ≤ S1 ≤ S−1` and `1 ≤ n_c ≤ N_c`.
pub fn validate_design(design: &DesignSpec) -> ValidationResult {
    let mut violations = Vec::new();
    let c = design.num_clusters;
    if c != design.clusters.len() {
        violations.push(Violation::ClusterCountMismatch {
            declared: c,
            listed: design.clusters.len(),
        });
    }
    if c < 2 {
        violations.push(Violation::TooFewClusters { clusters: c });
    }
    if design.sampled == 0 || design.sampled > c {
        violations.push(Violation::SampledOutOfRange {
            sampled: design.sampled,
            clusters: c,
        });
    }
    if design.treated == 0 || design.treated >= design.sampled {
        violations.push(Violation::TreatmentShareDegenerate {
            treated: design.treated,
            sampled: design.sampled,
        });
    }
    let mut seen = BTreeSet::new();
    for cl in &design.clusters {
        if !seen.insert(cl.id.as_str()) {
            violations.push(Violation::DuplicateCluster { cluster: cl.id.clone() });
        }
        if cl.size == 0 {
            violations.push(Violation::EmptyClusterSize { cluster: cl.id.clone() });
        }
        if cl.sample == 0 {
            violations.push(Violation::ZeroSecondStage { cluster: cl.id.clone() });
        } else if cl.sample > cl.size {
            violations.push(Violation::SampleExceedsSize {
                cluster: cl.id.clone(),
                sample: cl.sample,
                size: cl.size,
            });
        }
    }
    ValidationResult { violations }
}

/// [`validate_design`] plus agreement of cluster ids and sizes with `pop`.
pub fn validate_against_population(pop: &FinitePopulation, design: &DesignSpec) -> ValidationResult {
    let mut result = validate_design(design);
    let declared: BTreeMap<&str, usize> = design.clusters.iter().map(|c| (c.id.as_str(), c.size)).collect();
    for cl in pop.clusters() {
        match declared.get(cl.id.as_str()) {
            None => result
                .violations
                .push(Violation::UnknownCluster { cluster: cl.id.clone() }),
            Some(&n) if n != cl.size() => result.violations.push(Violation::SizeMismatch {
                cluster: cl.id.clone(),
                declared: n,
                actual: cl.size(),
            }),
            Some(_) => {}
        }
    }
    let present: BTreeSet<&str> = pop.clusters().iter().map(|c| c.id.as_str()).collect();
    for cl in &design.clusters {
        if !present.contains(cl.id.as_str()) {
            result
                .violations
                .push(Violation::MissingCluster { cluster: cl.id.clone() });
        }
    }
    result
}

/// Outcomes divided by the average cluster size N̄.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledOutcomes {
    pub nbar: f64,
    /// Ỹ_ci(d) as `[y0, y1]` per unit, per cluster.
    pub units: Vec<Vec<[f64; 2]>>,
    /// Scaled cluster totals Ỹ_c(d) as `[d=0, d=1]`.
    pub totals: Vec<[f64; 2]>,
    /// Scaled cluster means Ȳ̃_c(d).
    pub cluster_means: Vec<[f64; 2]>,
    /// Population arm means Ȳ(d) = (1/C) Σ_c Ỹ_c(d).
    pub arm_means: [f64; 2],
}

impl ScaledOutcomes {
    pub fn num_clusters(&self) -> usize {
        self.totals.len()
    }

    pub fn total(&self, c: usize, treated: bool) -> f64 {
        self.totals[c][treated as usize]
    }

    /// Cluster-level effect τ_c = Ỹ_c(1) − Ỹ_c(0).
    pub fn cluster_effect(&self, c: usize) -> f64 {
        self.totals[c][1] - self.totals[c][0]
    }

    /// Within-cluster variance s²_c(d) of the scaled unit outcomes with the
    /// 1/(N_c−1) convention, 0 for singleton clusters.
    pub fn within_variance(&self, c: usize, treated: bool) -> f64 {
        let d = treated as usize;
        let units = &self.units[c];
        if units.len() < 2 {
            return 0.0;
        }
        let mean = self.cluster_means[c][d];
        units.iter().map(|u| (u[d] - mean).powi(2)).sum::<f64>() / (units.len() - 1) as f64
    }
}

pub fn scale_outcomes(pop: &FinitePopulation) -> ScaledOutcomes {
    let c = pop.num_clusters();
    let nbar = pop.total_units() as f64 / c as f64;
    let units: Vec<Vec<[f64; 2]>> = pop
        .clusters()
        .iter()
        .map(|cl| cl.units.iter().map(|u| [u.y0 / nbar, u.y1 / nbar]).collect())
        .collect();
    let totals: Vec<[f64; 2]> = units
        .iter()
        .map(|us| us.iter().fold([0.0, 0.0], |acc, u| [acc[0] + u[0], acc[1] + u[1]]))
        .collect();
    let cluster_means = totals
        .iter()
        .zip(&units)
        .map(|(t, us)| [t[0] / us.len() as f64, t[1] / us.len() as f64])
        .collect();
    let arm_means = [
        totals.iter().map(|t| t[0]).sum::<f64>() / c as f64,
        totals.iter().map(|t| t[1]).sum::<f64>() / c as f64,
    ];
    ScaledOutcomes {
        nbar,
        units,
        totals,
        cluster_means,
        arm_means,
    }
}

/// Finite-population average treatment effect.
pub fn compute_ate(pop: &FinitePopulation) -> f64 {
    let unit_level = pop
        .clusters()
        .iter()
        .flat_map(|c| c.units.iter())
        .map(|u| u.y1 - u.y0)
        .sum::<f64>()
        / pop.total_units() as f64;
    let scaled = scale_outcomes(pop);
    let cluster_level = (0..scaled.num_clusters())
        .map(|c| scaled.cluster_effect(c))
        .sum::<f64>()
        / scaled.num_clusters() as f64;
    debug_assert!(
        (unit_level - cluster_level).abs() <= 1e-12 * unit_level.abs().max(1.0),
        "unit-level {unit_level} vs cluster-level {cluster_level}"
    );
    unit_level
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignDiagnostics {
    /// Relative cluster sizes ω_c = N_c / N̄.
    pub omega_c: Vec<f64>,
    /// ω = max_c ω_c.
    pub omega: f64,
    pub beta_hint: f64,
    /// C^{(1−2β)/3}, the advisory growth threshold for ω.
    pub omega_threshold: f64,
    pub warnings: Vec<String>,
}

/// Cluster-size heterogeneity diagnostics. `beta_hint` is the assumed rate
/// in `1/p = O(C^β)`; 0 for a fixed sampling rate.
pub fn diagnostics(design: &DesignSpec, beta_hint: f64) -> DesignDiagnostics {
    let nbar = design.nbar();
    let omega_c: Vec<f64> = design.clusters.iter().map(|c| c.size as f64 / nbar).collect();
    let omega = omega_c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = (design.num_clusters as f64).powf((1.0 - 2.0 * beta_hint) / 3.0);
    let mut warnings = Vec::new();
    if !(0.0..0.5).contains(&beta_hint) {
        warnings.push(format!(
            "beta hint {beta_hint} outside [0, 1/2); normal approximation not supported"
        ));
    }
    if omega >= threshold {
        warnings.push(format!(
            "cluster-size heterogeneity omega = {omega:.4} >= C^((1-2*beta)/3) = {threshold:.4}; \
             normal-based intervals may be unreliable"
        ));
    }
    DesignDiagnostics {
        omega_c,
        omega,
        beta_hint,
        omega_threshold: threshold,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(c: usize, s: usize, s1: usize, sizes: &[(usize, usize)]) -> DesignSpec {
        assert_eq!(c, sizes.len());
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
    fn simulation_protocol_design_is_valid() {
        let d = design(120, 80, 40, &vec![(125, 100); 120]);
        assert!(validate_design(&d).is_ok());
    }

    #[test]
    fn all_sampled_treated_is_flagged() {
        let d = design(4, 2, 2, &[(2, 1); 4]);
        let v = validate_design(&d);
        assert_eq!(v.violations.len(), 1);
        assert!(v.messages()[0].starts_with("q = 1 outside (0,1)"));
    }

    #[test]
    fn zero_second_stage_is_flagged() {
        let d = design(3, 2, 1, &[(2, 1), (2, 0), (3, 3)]);
        let v = validate_design(&d);
        assert_eq!(v.violations.len(), 1);
        assert!(v.messages()[0].contains("second-stage probability zero"));
    }

    #[test]
    fn oversized_sample_and_bad_s() {
        let d = design(3, 4, 1, &[(2, 3), (2, 1), (3, 3)]);
        let v = validate_design(&d);
        assert!(v
            .violations
            .iter()
            .any(|x| matches!(x, Violation::SampledOutOfRange { .. })));
        assert!(v
            .violations
            .iter()
            .any(|x| matches!(x, Violation::SampleExceedsSize { .. })));
    }

    #[test]
    fn population_mismatch_detected() {
        let pop = FinitePopulation::from_outcomes(vec![vec![(0.0, 1.0); 2]; 3]).unwrap();
        let d = design(3, 2, 1, &[(2, 1), (3, 1), (2, 1)]);
        let v = validate_against_population(&pop, &d);
        assert_eq!(
            v.violations,
            vec![Violation::SizeMismatch {
                cluster: "c001".into(),
                declared: 3,
                actual: 2
            }]
        );
    }

    #[test]
    fn population_rejects_bad_input() {
        assert_eq!(
            FinitePopulation::from_outcomes(vec![vec![(0.0, 0.0)]]),
            Err(PopulationError::TooFewClusters(1))
        );
        assert!(matches!(
            FinitePopulation::from_outcomes(vec![vec![(0.0, 0.0)], vec![]]),
            Err(PopulationError::EmptyCluster(_))
        ));
        assert!(matches!(
            FinitePopulation::from_outcomes(vec![vec![(f64::NAN, 0.0)], vec![(0.0, 0.0)]]),
            Err(PopulationError::NonFinite { .. })
        ));
        let dup = vec![
            Cluster::new("a", vec![Unit::new("1", 0.0, 0.0)]),
            Cluster::new("a", vec![Unit::new("1", 0.0, 0.0)]),
        ];
        assert!(matches!(
            FinitePopulation::new(dup),
            Err(PopulationError::DuplicateCluster(_))
        ));
    }

    #[test]
    fn clusters_sorted_by_id() {
        let pop = FinitePopulation::new(vec![
            Cluster::new("b", vec![Unit::new("1", 0.0, 2.0)]),
            Cluster::new("a", vec![Unit::new("1", 0.0, 1.0)]),
        ])
        .unwrap();
        assert_eq!(pop.clusters()[0].id, "a");
    }

    #[test]
    fn constant_outcomes_scale() {
        let pop = FinitePopulation::from_outcomes(vec![vec![(0.0, 1.0); 2]; 2]).unwrap();
        let s = scale_outcomes(&pop);
        assert_eq!(s.nbar, 2.0);
        assert_eq!(s.totals[0][1], 1.0);
        assert_eq!(s.totals[1][1], 1.0);
        assert_eq!(s.arm_means[1], 1.0);
    }

    #[test]
    fn unequal_sizes_scale() {
        let pop =
            FinitePopulation::from_outcomes(vec![vec![(0.0, 1.0)], vec![(0.0, 3.0), (0.0, 3.0), (0.0, 3.0)]]).unwrap();
        let s = scale_outcomes(&pop);
        assert_eq!(s.nbar, 2.0);
        assert_eq!(s.totals[1][1], 4.5);
        assert_eq!(s.cluster_means[1][1], 1.5);
    }

    #[test]
    fn ate_examples() {
        let same = FinitePopulation::from_outcomes(vec![vec![(3.0, 3.0), (1.0, 1.0)]; 2]).unwrap();
        assert_eq!(compute_ate(&same), 0.0);
        let shifted =
            FinitePopulation::from_outcomes(vec![vec![(1.0, 51.0), (-2.0, 48.0)], vec![(7.5, 57.5)]]).unwrap();
        assert!((compute_ate(&shifted) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn within_variance_singleton_is_zero() {
        let pop = FinitePopulation::from_outcomes(vec![vec![(1.0, 2.0)], vec![(0.0, 4.0), (2.0, 8.0)]]).unwrap();
        let s = scale_outcomes(&pop);
        assert_eq!(s.within_variance(0, true), 0.0);
        // nbar = 1.5; scaled y1 = 8/3, 16/3; sample variance = (8/3)^2 / 2
        let expected = (8.0f64 / 3.0).powi(2) / 2.0;
        assert!((s.within_variance(1, true) - expected).abs() < 1e-12);
    }

    #[test]
    fn omega_examples() {
        let eq = design(4, 2, 1, &[(5, 2); 4]);
        let dg = diagnostics(&eq, 0.0);
        assert_eq!(dg.omega, 1.0);
        assert!(dg.warnings.is_empty());

        let mut sizes = vec![(100, 10); 9];
        sizes.push((1000, 10));
        let d = design(10, 4, 2, &sizes);
        let dg = diagnostics(&d, 0.0);
        assert!((dg.omega - 1000.0 / 190.0).abs() < 1e-12);
    }

    #[test]
    fn omega_warning_threshold() {
        // 119 clusters of 19 units and one of 119: N̄ = 2380/120, ω = 6.
        let mut sizes = vec![(19, 1); 119];
        sizes.push((119, 1));
        let d = design(120, 80, 40, &sizes);
        let dg = diagnostics(&d, 0.0);
        assert!((dg.omega - 6.0).abs() < 1e-12);
        assert!((dg.omega_threshold - 120f64.cbrt()).abs() < 1e-12);
        assert!(dg.omega_threshold < 4.94 && dg.omega_threshold > 4.93);
        assert_eq!(dg.warnings.len(), 1);
    }
}
