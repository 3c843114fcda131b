//! Closed-form inclusion and assignment probabilities of the two-stage
//! design (SRSWOR of clusters, SRSWOR assignment of treated clusters,
//! SRSWOR of units within sampled clusters) and the design covariances Δ.
//!
//! By exchangeability every off-diagonal pair shares one value, so each Δ
//! "matrix" is stored as a `(diag, offdiag)` pair and double sums are
//! evaluated with [`PairCovariance::quad_form`].

use serde::Serialize;
use thiserror::Error;

use crate::population::DesignSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("degenerate design: S1 = {treated} with S = {sampled} gives q outside (0,1)")]
    Degenerate { treated: usize, sampled: usize },
    #[error("invalid design: {0}")]
    Invalid(String),
}

/// `a·b / (c·d)` evaluated from integers.
fn ratio2(a: usize, b: usize, c: usize, d: usize) -> f64 {
    (a as f64 * b as f64) / (c as f64 * d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignProbabilities {
    pub p: f64,
    pub q: f64,
    pub p_tilde: f64,
    pub q_tilde: f64,
    pub pi: Vec<f64>,
    pub pi_tilde: Vec<f64>,
}

fn check(design: &DesignSpec) -> Result<(), DesignError> {
    if design.treated == 0 || design.treated >= design.sampled {
        return Err(DesignError::Degenerate {
            treated: design.treated,
            sampled: design.sampled,
        });
    }
    let c = design.num_clusters;
    if c < 2 || design.sampled > c || design.clusters.len() != c {
        return Err(DesignError::Invalid(format!(
            "C = {c}, S = {}, {} cluster entries",
            design.sampled,
            design.clusters.len()
        )));
    }
    if let Some(cl) = design.clusters.iter().find(|cl| cl.sample == 0 || cl.sample > cl.size) {
        return Err(DesignError::Invalid(format!(
            "cluster `{}` has n_c = {} with N_c = {}",
            cl.id, cl.sample, cl.size
        )));
    }
    Ok(())
}

pub fn probabilities(design: &DesignSpec) -> Result<DesignProbabilities, DesignError> {
    check(design)?;
    let (c, s, s1) = (design.num_clusters, design.sampled, design.treated);
    let pi = design
        .clusters
        .iter()
        .map(|cl| cl.sample as f64 / cl.size as f64)
        .collect();
    let pi_tilde = design
        .clusters
        .iter()
        .map(|cl| {
            if cl.size == 1 {
                0.0
            } else {
                (cl.sample - 1) as f64 / (cl.size - 1) as f64
            }
        })
        .collect();
    Ok(DesignProbabilities {
        p: s as f64 / c as f64,
        q: s1 as f64 / s as f64,
        p_tilde: (s - 1) as f64 / (c - 1) as f64,
        q_tilde: (s1 - 1) as f64 / (s - 1) as f64,
        pi,
        pi_tilde,
    })
}

/// Pairwise indicator expectations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointInclusion {
    /// E[R_c D_c R_c' D_c'], c ≠ c'.
    pub treated_pair: f64,
    /// E[R_c (1−D_c) R_c' (1−D_c')], c ≠ c'.
    pub control_pair: f64,
    /// E[R_c D_c R_c' (1−D_c')], c ≠ c'.
    pub mixed_pair: f64,
    /// E[R_c D_c] = pq.
    pub treated_single: f64,
    /// E[R_c (1−D_c)] = p(1−q).
    pub control_single: f64,
    /// Pr(R_c = 1, R_c' = 1), c ≠ c'.
    pub both_sampled: f64,
    /// E[R_{i|c} R_{j|c}], i ≠ j, per cluster.
    pub unit_pair: Vec<f64>,
    /// E[R_{i|c}] = π_c per cluster.
    pub unit_single: Vec<f64>,
}

impl JointInclusion {
    pub fn arm_pair(&self, treated: bool) -> f64 {
        if treated {
            self.treated_pair
        } else {
            self.control_pair
        }
    }

    pub fn arm_single(&self, treated: bool) -> f64 {
        if treated {
            self.treated_single
        } else {
            self.control_single
        }
    }
}

pub fn joint_inclusion(design: &DesignSpec) -> Result<JointInclusion, DesignError> {
    check(design)?;
    let (c, s, s1) = (design.num_clusters, design.sampled, design.treated);
    let s0 = s - s1;
    let unit_pair = design
        .clusters
        .iter()
        .map(|cl| {
            if cl.size < 2 {
                0.0
            } else {
                ratio2(cl.sample, cl.sample - 1, cl.size, cl.size - 1)
            }
        })
        .collect();
    let unit_single = design
        .clusters
        .iter()
        .map(|cl| cl.sample as f64 / cl.size as f64)
        .collect();
    Ok(JointInclusion {
        treated_pair: ratio2(s1, s1 - 1, c, c - 1),
        control_pair: ratio2(s0, s0.saturating_sub(1), c, c - 1),
        mixed_pair: ratio2(s1, s0, c, c - 1),
        treated_single: s1 as f64 / c as f64,
        control_single: s0 as f64 / c as f64,
        both_sampled: ratio2(s, s - 1, c, c - 1),
        unit_pair,
        unit_single,
    })
}

/// Exchangeable covariance structure: one value on the diagonal, one for
/// every off-diagonal pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairCovariance {
    pub diag: f64,
    pub offdiag: f64,
}

impl PairCovariance {
    /// Σ_a Σ_b M_ab x_a x_b from Σx and Σx².
    pub fn quad_form(&self, sum: f64, sum_sq: f64) -> f64 {
        self.offdiag * (sum * sum - sum_sq) + self.diag * sum_sq
    }

    pub fn quad_form_of(&self, xs: &[f64]) -> f64 {
        let (sum, sum_sq) = xs.iter().fold((0.0, 0.0), |(s, q), &x| (s + x, q + x * x));
        self.quad_form(sum, sum_sq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaCovariances {
    /// Δ^1: covariances of R_c D_c.
    pub treated: PairCovariance,
    /// Δ^0: covariances of R_c (1−D_c).
    pub control: PairCovariance,
    /// Δ_{ij|c} per cluster.
    pub units: Vec<PairCovariance>,
}

impl DeltaCovariances {
    pub fn arm(&self, treated: bool) -> PairCovariance {
        if treated {
            self.treated
        } else {
            self.control
        }
    }
}

pub fn delta(design: &DesignSpec) -> Result<DeltaCovariances, DesignError> {
    let j = joint_inclusion(design)?;
    let arm = |single: f64, pair: f64| PairCovariance {
        diag: single * (1.0 - single),
        offdiag: pair - single * single,
    };
    let units = j
        .unit_single
        .iter()
        .zip(&j.unit_pair)
        .map(|(&pi, &pair)| PairCovariance {
            diag: pi * (1.0 - pi),
            offdiag: pair - pi * pi,
        })
        .collect();
    Ok(DeltaCovariances {
        treated: arm(j.treated_single, j.treated_pair),
        control: arm(j.control_single, j.control_pair),
        units,
    })
}

/// Probabilities, joint expectations and Δ bundled for repeated use.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMoments {
    pub probs: DesignProbabilities,
    pub joint: JointInclusion,
    pub delta: DeltaCovariances,
}

impl DesignMoments {
    pub fn new(design: &DesignSpec) -> Result<Self, DesignError> {
        Ok(Self {
            probs: probabilities(design)?,
            joint: joint_inclusion(design)?,
            delta: delta(design)?,
        })
    }

    /// Within-cluster HT variance estimate
    /// Σ_i Σ_j Δ_{ij|c} y_i y_j / (E[R_i R_j] π_c²) over the sampled units of
    /// cluster `c`. `None` when a single unit is drawn from a larger cluster.
    pub fn within_term(&self, c: usize, ys: &[f64]) -> Option<f64> {
        let pi = self.probs.pi[c];
        if pi == 1.0 {
            return Some(0.0);
        }
        let pair = self.joint.unit_pair[c];
        if pair == 0.0 {
            return None;
        }
        let d = self.delta.units[c];
        let w = PairCovariance {
            diag: (1.0 - pi) / (pi * pi),
            offdiag: d.offdiag / (pair * pi * pi),
        };
        Some(w.quad_form_of(ys))
    }

    /// Cluster-pair weights Δ^d / (E[pair] E_d²) for observed same-arm
    /// clusters. `None` when the arm has fewer than two clusters.
    pub fn arm_estimator_weights(&self, treated: bool) -> Option<PairCovariance> {
        let e = self.joint.arm_single(treated);
        let pair = self.joint.arm_pair(treated);
        if pair == 0.0 {
            return None;
        }
        let d = self.delta.arm(treated);
        Some(PairCovariance {
            diag: d.diag / (e * e * e),
            offdiag: d.offdiag / (pair * e * e),
        })
    }
}
