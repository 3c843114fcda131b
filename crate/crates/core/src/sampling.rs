//! Realized two-stage samples: random draws and exhaustive enumeration of
//! the design measure.

use itertools::Itertools;
use serde::Serialize;
use thiserror::Error;

use crate::population::{DesignSpec, FinitePopulation};
use crate::rng::SplitMix64;

/// Enumeration guard on the number of realizations.
pub const MAX_REALIZATIONS: u128 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("design has {count} realizations, more than the limit of {limit}")]
    TooLarge { count: u128, limit: u128 },
    #[error("sample inconsistent with design: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledUnit {
    pub unit_id: String,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledCluster {
    pub id: String,
    /// Position of the cluster in the (id-sorted) design.
    pub index: usize,
    pub treated: bool,
    pub units: Vec<SampledUnit>,
}

impl SampledCluster {
    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.y).collect()
    }
}

/// Observed data: sampled clusters in design order, their assignment and
/// the outcomes of their sampled units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservedSample {
    pub clusters: Vec<SampledCluster>,
}

impl ObservedSample {
    /// Sorts clusters into design order.
    pub fn new(mut clusters: Vec<SampledCluster>) -> Self {
        clusters.sort_by_key(|c| c.index);
        Self { clusters }
    }

    pub fn num_treated(&self) -> usize {
        self.clusters.iter().filter(|c| c.treated).count()
    }

    pub fn num_control(&self) -> usize {
        self.clusters.len() - self.num_treated()
    }

    pub fn arm(&self, treated: bool) -> impl Iterator<Item = &SampledCluster> {
        self.clusters.iter().filter(move |c| c.treated == treated)
    }

    /// `(cluster index, treated)` for every sampled cluster.
    pub fn first_stage(&self) -> Vec<(usize, bool)> {
        self.clusters.iter().map(|c| (c.index, c.treated)).collect()
    }

    pub fn total_units(&self) -> usize {
        self.clusters.iter().map(|c| c.units.len()).sum()
    }

    /// Multiplies every observed outcome by `k`.
    pub fn scaled_by(&self, k: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.clusters {
            for u in &mut c.units {
                u.y *= k;
            }
        }
        out
    }

    /// Checks the fixed-margin structure: exactly S clusters, S1 treated,
    /// `n_c` units in cluster c, indices and ids matching the design.
    pub fn check_against(&self, design: &DesignSpec) -> Result<(), SampleError> {
        let bad = |m: String| Err(SampleError::Inconsistent(m));
        if self.clusters.len() != design.sampled {
            return bad(format!(
                "{} sampled clusters, design requires S = {}",
                self.clusters.len(),
                design.sampled
            ));
        }
        if self.num_treated() != design.treated {
            return bad(format!(
                "{} treated clusters, design requires S1 = {}",
                self.num_treated(),
                design.treated
            ));
        }
        for w in self.clusters.windows(2) {
            if w[0].index >= w[1].index {
                return bad(format!("cluster `{}` repeated or out of order", w[1].id));
            }
        }
        for c in &self.clusters {
            let Some(cd) = design.clusters.get(c.index) else {
                return bad(format!("cluster `{}` is not in the design", c.id));
            };
            if cd.id != c.id {
                return bad(format!("cluster `{}` does not match design entry `{}`", c.id, cd.id));
            }
            if c.units.len() != cd.sample {
                return bad(format!(
                    "cluster `{}` has {} sampled units, design requires n_c = {}",
                    c.id,
                    c.units.len(),
                    cd.sample
                ));
            }
        }
        Ok(())
    }
}

fn build_sample(pop: &FinitePopulation, first_stage: &[(usize, bool)], unit_sets: &[Vec<usize>]) -> ObservedSample {
    let clusters = first_stage
        .iter()
        .zip(unit_sets)
        .map(|(&(index, treated), units)| {
            let cl = &pop.clusters()[index];
            SampledCluster {
                id: cl.id.clone(),
                index,
                treated,
                units: units
                    .iter()
                    .map(|&i| {
                        let u = &cl.units[i];
                        SampledUnit {
                            unit_id: u.unit_id.clone(),
                            y: u.outcome(treated),
                        }
                    })
                    .collect(),
            }
        })
        .collect();
    ObservedSample::new(clusters)
}

/// First stage and assignment: S cluster indices (ascending) with their
/// treatment flags.
pub fn draw_first_stage(design: &DesignSpec, rng: &mut SplitMix64) -> Vec<(usize, bool)> {
    let sampled = rng.sample_indices(design.num_clusters, design.sampled);
    let treated = rng.sample_indices(design.sampled, design.treated);
    let mut flags = vec![false; design.sampled];
    for t in treated {
        flags[t] = true;
    }
    sampled.into_iter().zip(flags).collect()
}

/// Draws one realization of the design. The result depends only on
/// `(pop, design, seed)`.
pub fn draw_sample(pop: &FinitePopulation, design: &DesignSpec, seed: u64) -> ObservedSample {
    let mut rng = SplitMix64::new(seed);
    let first_stage = draw_first_stage(design, &mut rng);
    let unit_sets: Vec<Vec<usize>> = first_stage
        .iter()
        .map(|&(c, _)| {
            let cd = &design.clusters[c];
            rng.sample_indices(cd.size, cd.sample)
        })
        .collect();
    build_sample(pop, &first_stage, &unit_sets)
}

/// A realization where every cluster carries independent second-stage
/// subsamples for both arms. The observed sample uses the subsample of the
/// arm each sampled cluster was assigned to, so its distribution equals the
/// real design's.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoArmDraw {
    pub first_stage: Vec<(usize, bool)>,
    /// `subsets[c][d]`: sampled unit indices of cluster c for arm d.
    pub subsets: Vec<[Vec<usize>; 2]>,
}

impl TwoArmDraw {
    pub fn draw(design: &DesignSpec, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let first_stage = draw_first_stage(design, &mut rng);
        let subsets = design
            .clusters
            .iter()
            .map(|cd| {
                let s0 = rng.sample_indices(cd.size, cd.sample);
                let s1 = rng.sample_indices(cd.size, cd.sample);
                [s0, s1]
            })
            .collect();
        Self { first_stage, subsets }
    }

    pub fn observed(&self, pop: &FinitePopulation) -> ObservedSample {
        let unit_sets: Vec<Vec<usize>> = self
            .first_stage
            .iter()
            .map(|&(c, t)| self.subsets[c][t as usize].clone())
            .collect();
        build_sample(pop, &self.first_stage, &unit_sets)
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Total number of (cluster subset, assignment, unit subsets) realizations,
/// saturating at `u128::MAX`.
pub fn realization_count(design: &DesignSpec) -> u128 {
    // Elementary symmetric polynomial of the per-cluster unit-subset counts:
    // Σ over S-subsets of Π (N_c choose n_c).
    let s = design.sampled;
    let mut e = vec![0u128; s + 1];
    e[0] = 1;
    for cd in &design.clusters {
        let w = binomial(cd.size, cd.sample);
        for k in (1..=s).rev() {
            e[k] = e[k].saturating_add(e[k - 1].saturating_mul(w));
        }
    }
    e[s].saturating_mul(binomial(design.sampled, design.treated))
}

/// Every realization of the design with its exact probability.
///
/// Fails with [`SampleError::TooLarge`] when there are more than
/// [`MAX_REALIZATIONS`].
pub fn enumerate_realizations<'a>(
    pop: &'a FinitePopulation,
    design: &'a DesignSpec,
) -> Result<impl Iterator<Item = (ObservedSample, f64)> + 'a, SampleError> {
    let count = realization_count(design);
    if count > MAX_REALIZATIONS {
        return Err(SampleError::TooLarge {
            count,
            limit: MAX_REALIZATIONS,
        });
    }
    let c = design.num_clusters;
    let (s, s1) = (design.sampled, design.treated);
    let base = binomial(c, s) as f64 * binomial(s, s1) as f64;
    let iter = (0..c).combinations(s).flat_map(move |subset| {
        let units_weight: f64 = subset
            .iter()
            .map(|&i| binomial(design.clusters[i].size, design.clusters[i].sample) as f64)
            .product();
        let prob = 1.0 / (base * units_weight);
        (0..s).combinations(s1).flat_map(move |treated_pos| {
            let first_stage: Vec<(usize, bool)> = subset
                .iter()
                .enumerate()
                .map(|(k, &i)| (i, treated_pos.contains(&k)))
                .collect();
            first_stage
                .iter()
                .map(|&(i, _)| {
                    let cd = &design.clusters[i];
                    (0..cd.size).combinations(cd.sample)
                })
                .multi_cartesian_product()
                .map(move |unit_sets| (build_sample(pop, &first_stage, &unit_sets), prob))
        })
    });
    Ok(iter)
}
