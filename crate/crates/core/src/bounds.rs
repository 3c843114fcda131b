//! Feasible variance estimators: arm-level HT variance pieces, weighted
//! ECDFs of the observed aggregates, the quantile-coupling covariance bounds
//! and the conservative variance estimator.

use std::cmp::Ordering;

use serde::Serialize;
use thiserror::Error;

use crate::design_probability::{DesignError, DesignMoments};
use crate::estimators::{cluster_aggregates, ht_arm_means, ClusterAggregate, EstimatorError};
use crate::population::DesignSpec;
use crate::sampling::ObservedSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("{arm} arm has {count} sampled cluster(s); at least two are required")]
    InsufficientArm { arm: &'static str, count: usize },
    #[error("cluster `{cluster}` samples one of {size} units; within-cluster variance needs n_c >= 2 or n_c = N_c")]
    InsufficientUnits { cluster: String, size: usize },
    #[error("pq = 1 makes the conservative prefactor infinite")]
    DegeneratePrefactor,
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

fn arm_name(treated: bool) -> &'static str {
    if treated {
        "treated"
    } else {
        "control"
    }
}

fn by_value_then_id(a: &ClusterAggregate, b: &ClusterAggregate) -> Ordering {
    a.total_hat.total_cmp(&b.total_hat).then_with(|| a.id.cmp(&b.id))
}

/// Step CDF putting mass 1/S_d on each observed aggregate of one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedEcdf {
    pub treated: bool,
    /// Ascending observed aggregates.
    pub values: Vec<f64>,
    /// HT weight 1/(C·E[R_c D_c]) of each observation.
    pub weight: f64,
}

impl WeightedEcdf {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Ĝ(y) = #{values ≤ y} / S_d.
    pub fn eval(&self, y: f64) -> f64 {
        self.values.partition_point(|&v| v <= y) as f64 / self.len() as f64
    }

    /// Left-continuous inverse inf{y : Ĝ(y) ≥ u}.
    pub fn inverse(&self, u: f64) -> f64 {
        let s = self.len();
        let (mut lo, mut hi) = (1, s);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if (mid as f64) / (s as f64) < u {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        self.values[lo - 1]
    }

    /// Order statistic ⌈S_d·num/den⌉ (1-based), clamped to the first one at 0.
    pub fn inverse_rational(&self, num: u64, den: u64) -> f64 {
        let s = self.len() as u64;
        let k = (s * num).div_ceil(den).max(1);
        self.values[(k - 1) as usize]
    }

    /// Σ weight over observations, equal to one up to rounding.
    pub fn total_mass(&self) -> f64 {
        self.weight * self.len() as f64
    }
}

fn ecdf_from(aggregates: &[ClusterAggregate], moments: &DesignMoments, c: usize, treated: bool) -> WeightedEcdf {
    let mut arm: Vec<&ClusterAggregate> = aggregates.iter().filter(|a| a.treated == treated).collect();
    arm.sort_by(|a, b| by_value_then_id(a, b));
    WeightedEcdf {
        treated,
        values: arm.iter().map(|a| a.total_hat).collect(),
        weight: 1.0 / (c as f64 * moments.joint.arm_single(treated)),
    }
}

pub fn weighted_ecdf(sample: &ObservedSample, design: &DesignSpec, treated: bool) -> Result<WeightedEcdf, BoundError> {
    let moments = DesignMoments::new(design)?;
    let aggregates = cluster_aggregates(sample, design)?;
    Ok(ecdf_from(&aggregates, &moments, design.num_clusters, treated))
}

/// A breakpoint k/den of the merged grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Breakpoint {
    pub num: u64,
    pub den: u64,
}

impl Breakpoint {
    fn cmp_value(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Merged grid {k/S1} ∪ {k/S0} on [0, 1] with the order-statistic indices
/// used on each segment (b_{h−1}, b_h].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileGrid {
    pub breakpoints: Vec<Breakpoint>,
    pub widths: Vec<f64>,
    /// 1-based order statistics ⌈S1·b_h⌉ and ⌈S0·b_h⌉ for h = 1..=B.
    pub treated_index: Vec<usize>,
    pub control_index: Vec<usize>,
}

impl QuantileGrid {
    pub fn new(s1: usize, s0: usize) -> Self {
        assert!(s1 > 0 && s0 > 0, "both arms need observations");
        let (a, b) = (s1 as u64, s0 as u64);
        let mut breakpoints = vec![Breakpoint { num: 0, den: 1 }];
        let (mut i, mut j) = (1u64, 1u64);
        while i <= a || j <= b {
            let x = Breakpoint { num: i, den: a };
            let y = Breakpoint { num: j, den: b };
            let next = if i > a {
                j += 1;
                y
            } else if j > b {
                i += 1;
                x
            } else {
                match x.cmp_value(&y) {
                    Ordering::Less => {
                        i += 1;
                        x
                    }
                    Ordering::Greater => {
                        j += 1;
                        y
                    }
                    Ordering::Equal => {
                        i += 1;
                        j += 1;
                        x
                    }
                }
            };
            breakpoints.push(next);
        }
        let widths = breakpoints
            .windows(2)
            .map(|w| {
                let (lo, hi) = (w[0], w[1]);
                let num = hi.num as u128 * lo.den as u128 - lo.num as u128 * hi.den as u128;
                num as f64 / (lo.den as f64 * hi.den as f64)
            })
            .collect();
        let index = |s: u64| -> Vec<usize> {
            breakpoints[1..]
                .iter()
                .map(|bp| (s * bp.num).div_ceil(bp.den) as usize)
                .collect()
        };
        let treated_index = index(a);
        let control_index = index(b);
        Self {
            breakpoints,
            widths,
            treated_index,
            control_index,
        }
    }

    /// Number of segments B.
    pub fn segments(&self) -> usize {
        self.widths.len()
    }

    /// (Σ_h w_h x_[h] y_[h], Σ_h w_h x_[h] y_[B+1−h]) for ascending inputs.
    pub fn couplings(&self, treated: &[f64], control: &[f64]) -> (f64, f64) {
        let b = self.segments();
        let mut high = 0.0;
        let mut low = 0.0;
        for h in 0..b {
            let x = treated[self.treated_index[h] - 1];
            high += self.widths[h] * x * control[self.control_index[h] - 1];
            low += self.widths[h] * x * control[self.control_index[b - 1 - h] - 1];
        }
        (high, low)
    }
}

/// Mass-one covariance bounds of the observed marginals, `(low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaBounds {
    pub low: f64,
    pub high: f64,
}

fn sigma_from(aggregates: &[ClusterAggregate], moments: &DesignMoments, c: usize) -> SigmaBounds {
    let g = ecdf_from(aggregates, moments, c, true);
    let f = ecdf_from(aggregates, moments, c, false);
    let grid = QuantileGrid::new(g.len(), f.len());
    let (high, low) = grid.couplings(&g.values, &f.values);
    let [m0, m1] = ht_arm_means(aggregates, moments, c);
    SigmaBounds {
        low: low - m1 * m0,
        high: high - m1 * m0,
    }
}

pub fn sigma_hat_bounds(sample: &ObservedSample, design: &DesignSpec) -> Result<SigmaBounds, BoundError> {
    for treated in [true, false] {
        let count = sample.arm(treated).count();
        if count == 0 {
            return Err(BoundError::InsufficientArm {
                arm: arm_name(treated),
                count,
            });
        }
    }
    let moments = DesignMoments::new(design)?;
    let aggregates = cluster_aggregates(sample, design)?;
    Ok(sigma_from(&aggregates, &moments, design.num_clusters))
}

/// Cluster-pair part of V̂_d without the 1/C² factor.
fn cluster_part(aggregates: &[ClusterAggregate], moments: &DesignMoments, treated: bool) -> Result<f64, BoundError> {
    let count = aggregates.iter().filter(|a| a.treated == treated).count();
    let weights = moments
        .arm_estimator_weights(treated)
        .filter(|_| count >= 2)
        .ok_or(BoundError::InsufficientArm {
            arm: arm_name(treated),
            count,
        })?;
    let xs: Vec<f64> = aggregates
        .iter()
        .filter(|a| a.treated == treated)
        .map(|a| a.total_hat)
        .collect();
    Ok(weights.quad_form_of(&xs))
}

fn vhat_from(
    aggregates: &[ClusterAggregate],
    moments: &DesignMoments,
    design: &DesignSpec,
    treated: bool,
) -> Result<f64, BoundError> {
    let cluster = cluster_part(aggregates, moments, treated)?;
    let e = moments.joint.arm_single(treated);
    let mut units = 0.0;
    for a in aggregates.iter().filter(|a| a.treated == treated) {
        units += moments
            .within_term(a.index, &a.scaled_units)
            .ok_or_else(|| BoundError::InsufficientUnits {
                cluster: a.id.clone(),
                size: design.clusters[a.index].size,
            })?
            / e;
    }
    let c = design.num_clusters as f64;
    Ok((cluster + units) / (c * c))
}

/// Unbiased HT estimate of the arm-d variance component.
pub fn vhat_arm(sample: &ObservedSample, design: &DesignSpec, treated: bool) -> Result<f64, BoundError> {
    let moments = DesignMoments::new(design)?;
    let aggregates = cluster_aggregates(sample, design)?;
    vhat_from(&aggregates, &moments, design, treated)
}

fn consv_from(aggregates: &[ClusterAggregate], moments: &DesignMoments, c: usize) -> Result<f64, BoundError> {
    let e1 = moments.joint.arm_single(true);
    let e0 = moments.joint.arm_single(false);
    if e1 >= 1.0 || e0 >= 1.0 {
        return Err(BoundError::DegeneratePrefactor);
    }
    let t = cluster_part(aggregates, moments, true)?;
    let u = cluster_part(aggregates, moments, false)?;
    let c = c as f64;
    Ok((t / (1.0 - e1) + u / (1.0 - e0)) / (c * c))
}

/// Unbiased estimate of the conservative variance.
pub fn conservative_estimate(sample: &ObservedSample, design: &DesignSpec) -> Result<f64, BoundError> {
    let moments = DesignMoments::new(design)?;
    let aggregates = cluster_aggregates(sample, design)?;
    consv_from(&aggregates, &moments, design.num_clusters)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub v1_hat: f64,
    pub v0_hat: f64,
    pub sigma_h: f64,
    pub sigma_l: f64,
    pub var_h: f64,
    pub var_l: f64,
    pub var_consv: f64,
    pub se_h: f64,
    pub clamped: bool,
}

/// Combine arm pieces with a mass-one covariance. Mass-one covariances are
/// (C−1)/C times the usual sample covariance, hence the 2/(C−1) multiplier.
pub fn combine(v1: f64, v0: f64, sigma_mass_one: f64, c: usize) -> f64 {
    v1 + v0 + 2.0 * sigma_mass_one / (c as f64 - 1.0)
}

pub fn variance_interval(sample: &ObservedSample, design: &DesignSpec) -> Result<BoundReport, BoundError> {
    let moments = DesignMoments::new(design)?;
    let aggregates = cluster_aggregates(sample, design)?;
    let c = design.num_clusters;
    let v1_hat = vhat_from(&aggregates, &moments, design, true)?;
    let v0_hat = vhat_from(&aggregates, &moments, design, false)?;
    let sigma = sigma_from(&aggregates, &moments, c);
    let var_h = combine(v1_hat, v0_hat, sigma.high, c);
    let var_l = combine(v1_hat, v0_hat, sigma.low, c);
    let var_consv = consv_from(&aggregates, &moments, c)?;
    Ok(BoundReport {
        v1_hat,
        v0_hat,
        sigma_h: sigma.high,
        sigma_l: sigma.low,
        var_h,
        var_l,
        var_consv,
        se_h: var_h.max(0.0).sqrt(),
        clamped: var_h < 0.0,
    })
}
