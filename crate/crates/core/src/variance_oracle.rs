//! Exact design variances computed from full potential outcomes.
//! Only usable in simulation and verification.

use serde::Serialize;

use crate::bounds::{combine, BoundError};
use crate::design_probability::{DesignError, DesignMoments};
use crate::population::{scale_outcomes, DesignSpec, FinitePopulation, ScaledOutcomes};
use crate::sampling::TwoArmDraw;

/// Sample covariance (1/(n−1))(Σ x y − n·x̄·ȳ).
pub fn sample_cov(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComponents {
    pub sigma2_1: f64,
    pub sigma2_0: f64,
    pub sigma2_tau: f64,
    pub sigma_10: f64,
    /// s²_c(d) as `[d=0, d=1]`.
    pub within: Vec<[f64; 2]>,
    /// f_c = (1−π_c)(1−π̃_c)/(π_c(π_c−π̃_c)) = N_c²(1−π_c)/n_c.
    pub fpc: Vec<f64>,
}

fn components_of(scaled: &ScaledOutcomes, design: &DesignSpec) -> VarianceComponents {
    let c = scaled.num_clusters();
    let y1: Vec<f64> = (0..c).map(|i| scaled.total(i, true)).collect();
    let y0: Vec<f64> = (0..c).map(|i| scaled.total(i, false)).collect();
    let tau: Vec<f64> = (0..c).map(|i| scaled.cluster_effect(i)).collect();
    VarianceComponents {
        sigma2_1: sample_cov(&y1, &y1),
        sigma2_0: sample_cov(&y0, &y0),
        sigma2_tau: sample_cov(&tau, &tau),
        sigma_10: sample_cov(&y1, &y0),
        within: (0..c)
            .map(|i| [scaled.within_variance(i, false), scaled.within_variance(i, true)])
            .collect(),
        fpc: design
            .clusters
            .iter()
            .map(|cd| {
                let (big, n) = (cd.size as f64, cd.sample as f64);
                big * big * (1.0 - n / big) / n
            })
            .collect(),
    }
}

pub fn variance_components(pop: &FinitePopulation, design: &DesignSpec) -> VarianceComponents {
    components_of(&scale_outcomes(pop), design)
}

fn second_stage_term(v: &VarianceComponents, moments: &DesignMoments, c: usize) -> f64 {
    let (e1, e0) = (moments.joint.arm_single(true), moments.joint.arm_single(false));
    let sum: f64 = v
        .fpc
        .iter()
        .zip(&v.within)
        .map(|(f, s)| f * (s[1] / e1 + s[0] / e0))
        .sum();
    sum / (c * c) as f64
}

fn first_stage_term(v: &VarianceComponents, moments: &DesignMoments, c: usize, with_tau: bool) -> f64 {
    let (e1, e0) = (moments.joint.arm_single(true), moments.joint.arm_single(false));
    let tau = if with_tau { v.sigma2_tau } else { 0.0 };
    (v.sigma2_1 / e1 + v.sigma2_0 / e0 - tau) / c as f64
}

/// Var(τ̄) of the estimator that uses true cluster totals.
pub fn exact_var_infeasible(pop: &FinitePopulation, design: &DesignSpec) -> Result<f64, DesignError> {
    let moments = DesignMoments::new(design)?;
    let v = variance_components(pop, design);
    Ok(first_stage_term(&v, &moments, design.num_clusters, true))
}

/// Var(τ̂) of the two-stage HT estimator.
pub fn exact_var_feasible(pop: &FinitePopulation, design: &DesignSpec) -> Result<f64, DesignError> {
    let moments = DesignMoments::new(design)?;
    let v = variance_components(pop, design);
    let c = design.num_clusters;
    Ok(first_stage_term(&v, &moments, c, true) + second_stage_term(&v, &moments, c))
}

/// Var(τ̂) with the effect-heterogeneity term dropped.
pub fn conservative_var(pop: &FinitePopulation, design: &DesignSpec) -> Result<f64, DesignError> {
    let moments = DesignMoments::new(design)?;
    let v = variance_components(pop, design);
    let c = design.num_clusters;
    Ok(first_stage_term(&v, &moments, c, false) + second_stage_term(&v, &moments, c))
}

/// Variance of the arm-d HT mean (1/C)Σ R_c D_c Ŷ̃_c / E[R_c D_c], i.e. the
/// design expectation of both the plug-in and the feasible arm component.
pub fn arm_variance(pop: &FinitePopulation, design: &DesignSpec, treated: bool) -> Result<f64, DesignError> {
    let moments = DesignMoments::new(design)?;
    let scaled = scale_outcomes(pop);
    let v = components_of(&scaled, design);
    let c = design.num_clusters;
    let e = moments.joint.arm_single(treated);
    let totals: Vec<f64> = (0..c).map(|i| scaled.total(i, treated)).collect();
    let cluster = moments.delta.arm(treated).quad_form_of(&totals) / (e * e);
    let units: f64 = v
        .fpc
        .iter()
        .zip(&v.within)
        .map(|(f, s)| f * s[treated as usize])
        .sum::<f64>()
        / e;
    Ok((cluster + units) / (c * c) as f64)
}

/// Plug-in decomposition available when both arms' aggregates exist for
/// every cluster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PluginDecomposition {
    pub v1: f64,
    pub v0: f64,
    /// Sample covariance of (Ŷ̃_c(1), Ŷ̃_c(0)) over all clusters.
    pub cross_cov: f64,
    pub total: f64,
    pub var_h: f64,
    pub var_l: f64,
}

pub fn infeasible_plugin_decomposition(
    pop: &FinitePopulation,
    design: &DesignSpec,
    draw: &TwoArmDraw,
) -> Result<PluginDecomposition, BoundError> {
    let moments = DesignMoments::new(design)?;
    let c = design.num_clusters;
    let nbar = design.nbar();
    let mut totals = [vec![0.0; c], vec![0.0; c]];
    let mut units = [0.0; 2];
    for (i, cluster) in pop.clusters().iter().enumerate() {
        let cd = &design.clusters[i];
        for d in [false, true] {
            let ys: Vec<f64> = draw.subsets[i][d as usize]
                .iter()
                .map(|&u| cluster.units[u].outcome(d) / nbar)
                .collect();
            totals[d as usize][i] = ys.iter().sum::<f64>() * cd.size as f64 / cd.sample as f64;
            units[d as usize] += moments
                .within_term(i, &ys)
                .ok_or_else(|| BoundError::InsufficientUnits {
                    cluster: cd.id.clone(),
                    size: cd.size,
                })?;
        }
    }
    let arm = |d: usize| {
        let e = moments.joint.arm_single(d == 1);
        let cluster = moments.delta.arm(d == 1).quad_form_of(&totals[d]) / (e * e);
        (cluster + units[d]) / (c * c) as f64
    };
    let (v1, v0) = (arm(1), arm(0));
    let cross_cov = sample_cov(&totals[1], &totals[0]);
    let (low, high) = fh_bounds(&totals[1], &totals[0]);
    let mass_one = |sigma: f64| sigma * (c as f64 - 1.0) / c as f64;
    Ok(PluginDecomposition {
        v1,
        v0,
        cross_cov,
        total: v1 + v0 + 2.0 * cross_cov / c as f64,
        var_h: combine(v1, v0, mass_one(high), c),
        var_l: combine(v1, v0, mass_one(low), c),
    })
}

/// Fréchet–Hoeffding bounds `(low, high)` on the sample covariance of two
/// equally long vectors: reversed and ascending sorted pairing.
pub fn fh_bounds(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let cross = n * (xs.iter().sum::<f64>() / n) * (ys.iter().sum::<f64>() / n);
    let high = xs.iter().zip(&ys).map(|(a, b)| a * b).sum::<f64>();
    let low = xs.iter().zip(ys.iter().rev()).map(|(a, b)| a * b).sum::<f64>();
    ((low - cross) / (n - 1.0), (high - cross) / (n - 1.0))
}

/// Bounds on the covariance of the true scaled cluster totals.
pub fn true_total_fh_bounds(pop: &FinitePopulation) -> (f64, f64) {
    let scaled = scale_outcomes(pop);
    let c = scaled.num_clusters();
    let y1: Vec<f64> = (0..c).map(|i| scaled.total(i, true)).collect();
    let y0: Vec<f64> = (0..c).map(|i| scaled.total(i, false)).collect();
    fh_bounds(&y1, &y0)
}
