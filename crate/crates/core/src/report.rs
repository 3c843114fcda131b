//! JSON reports behind the `estimate`, `oracle` and `enumerate` commands.

use serde::Serialize;
use thiserror::Error;

use crate::baseline_lz::{lz_se, LzVariant};
use crate::bounds::{conservative_estimate, variance_interval, vhat_arm, BoundReport};
use crate::design_probability::probabilities;
use crate::estimators::{diff_in_means, ht_ate, infeasible_ate};
use crate::population::{
    compute_ate, diagnostics, validate_against_population, DesignDiagnostics, DesignSpec, FinitePopulation,
};
use crate::sampling::{enumerate_realizations, ObservedSample, SampleError};
use crate::variance_oracle::{
    conservative_var, exact_var_feasible, exact_var_infeasible, true_total_fh_bounds, variance_components,
    VarianceComponents,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("design violation: {0}")]
    Design(String),
    #[error("estimator precondition failed: {0}")]
    Estimator(String),
    #[error("enumeration refused: {count} realizations exceed the limit of {limit}")]
    TooLarge { count: u128, limit: u128 },
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignEcho {
    #[serde(rename = "C")]
    pub num_clusters: usize,
    #[serde(rename = "S")]
    pub sampled: usize,
    #[serde(rename = "S1")]
    pub treated: usize,
    pub p: f64,
    pub q: f64,
    pub nbar: f64,
}

fn echo(design: &DesignSpec) -> Result<DesignEcho, ReportError> {
    let probs = probabilities(design).map_err(|e| ReportError::Design(e.to_string()))?;
    Ok(DesignEcho {
        num_clusters: design.num_clusters,
        sampled: design.sampled,
        treated: design.treated,
        p: probs.p,
        q: probs.q,
        nbar: design.nbar(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LzSummary {
    pub estimate: f64,
    pub se: f64,
    pub variant: LzVariant,
}

#[derive(Debug, Clone, Serialize)]
pub struct Interval {
    pub method: String,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub tau_hat: f64,
    pub dm_estimate: f64,
    pub bounds: BoundReport,
    pub se_consv: f64,
    pub lz: LzSummary,
    pub critical: f64,
    /// Normal intervals centered at `tau_hat`.
    pub intervals: Vec<Interval>,
    pub design: DesignEcho,
    pub diagnostics: DesignDiagnostics,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    pub critical: f64,
    pub lz_variant: LzVariant,
    pub beta_hint: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            critical: 1.96,
            lz_variant: LzVariant::Cr1,
            beta_hint: 0.0,
        }
    }
}

pub fn estimate(
    sample: &ObservedSample,
    design: &DesignSpec,
    opts: EstimateOptions,
) -> Result<EstimateReport, ReportError> {
    let est = |e: &dyn std::fmt::Display| ReportError::Estimator(e.to_string());
    let design_echo = echo(design)?;
    let tau_hat = ht_ate(sample, design).map_err(|e| est(&e))?;
    let dm_estimate = diff_in_means(sample).map_err(|e| est(&e))?;
    let bounds = variance_interval(sample, design).map_err(|e| est(&e))?;
    let lz = lz_se(sample, opts.lz_variant).map_err(|e| est(&e))?;
    let se_consv = bounds.var_consv.max(0.0).sqrt();
    let diag = diagnostics(design, opts.beta_hint);
    let mut warnings = diag.warnings.clone();
    if bounds.clamped {
        warnings.push(format!(
            "upper variance bound {} is negative; standard error clamped to 0",
            bounds.var_h
        ));
    }
    let z = opts.critical;
    let interval = |method: &str, se: f64| Interval {
        method: method.to_string(),
        se,
        lower: tau_hat - z * se,
        upper: tau_hat + z * se,
    };
    let intervals = vec![
        interval("upper_bound", bounds.se_h),
        interval("conservative", se_consv),
        interval("lz", lz.se_lz),
    ];
    Ok(EstimateReport {
        tau_hat,
        dm_estimate,
        se_consv,
        lz: LzSummary {
            estimate: lz.dm_estimate,
            se: lz.se_lz,
            variant: lz.variant,
        },
        critical: z,
        intervals,
        design: design_echo,
        diagnostics: diag,
        warnings,
        bounds,
    })
}

fn check_population(pop: &FinitePopulation, design: &DesignSpec) -> Result<(), ReportError> {
    let v = validate_against_population(pop, design);
    if v.is_ok() {
        Ok(())
    } else {
        Err(ReportError::Design(v.messages().join("; ")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FhInterval {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub tau: f64,
    /// Variance of the estimator built from true cluster totals.
    pub var_infeasible: f64,
    pub var_feasible: f64,
    pub var_consv: f64,
    /// Sharp bounds on the covariance of scaled treated and control totals.
    pub fh: FhInterval,
    pub components: VarianceComponents,
    pub design: DesignEcho,
}

pub fn oracle(pop: &FinitePopulation, design: &DesignSpec) -> Result<OracleReport, ReportError> {
    check_population(pop, design)?;
    let de = |e: crate::design_probability::DesignError| ReportError::Design(e.to_string());
    let (low, high) = true_total_fh_bounds(pop);
    Ok(OracleReport {
        tau: compute_ate(pop),
        var_infeasible: exact_var_infeasible(pop, design).map_err(de)?,
        var_feasible: exact_var_feasible(pop, design).map_err(de)?,
        var_consv: conservative_var(pop, design).map_err(de)?,
        fh: FhInterval { low, high },
        components: variance_components(pop, design),
        design: echo(design)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EnumerationReport {
    pub realizations: u64,
    pub total_probability: f64,
    pub tau: f64,
    pub mean_tau_hat: f64,
    pub var_tau_hat: f64,
    pub mean_tau_bar: f64,
    pub var_tau_bar: f64,
    /// Design expectations of the variance estimators; null where the
    /// estimator is undefined on some realization.
    pub mean_v1_hat: Option<f64>,
    pub mean_v0_hat: Option<f64>,
    pub mean_var_consv: Option<f64>,
}

/// Exact design moments by summing over every realization.
pub fn enumerate(pop: &FinitePopulation, design: &DesignSpec) -> Result<EnumerationReport, ReportError> {
    check_population(pop, design)?;
    echo(design)?;
    let realizations = enumerate_realizations(pop, design).map_err(|e| match e {
        SampleError::TooLarge { count, limit } => ReportError::TooLarge { count, limit },
        other => ReportError::Design(other.to_string()),
    })?;
    let mut draws: Vec<(f64, f64, f64)> = Vec::new();
    let mut v1 = Some(0.0);
    let mut v0 = Some(0.0);
    let mut consv = Some(0.0);
    let accumulate = |acc: Option<f64>, v: Option<f64>, p: f64| acc.zip(v).map(|(a, v)| a + p * v);
    for (sample, p) in realizations {
        let est = |e: &dyn std::fmt::Display| ReportError::Estimator(e.to_string());
        let t_hat = ht_ate(&sample, design).map_err(|e| est(&e))?;
        let t_bar = infeasible_ate(pop, design, &sample.first_stage()).map_err(|e| est(&e))?;
        draws.push((p, t_hat, t_bar));
        v1 = accumulate(v1, vhat_arm(&sample, design, true).ok(), p);
        v0 = accumulate(v0, vhat_arm(&sample, design, false).ok(), p);
        consv = accumulate(consv, conservative_estimate(&sample, design).ok(), p);
    }
    let moments = |f: fn(&(f64, f64, f64)) -> f64| {
        let m: f64 = draws.iter().map(|d| d.0 * f(d)).sum();
        let v: f64 = draws.iter().map(|d| d.0 * (f(d) - m).powi(2)).sum();
        (m, v)
    };
    let (mean_tau_hat, var_tau_hat) = moments(|d| d.1);
    let (mean_tau_bar, var_tau_bar) = moments(|d| d.2);
    Ok(EnumerationReport {
        realizations: draws.len() as u64,
        total_probability: draws.iter().map(|d| d.0).sum(),
        tau: compute_ate(pop),
        mean_tau_hat,
        var_tau_hat,
        mean_tau_bar,
        var_tau_bar,
        mean_v1_hat: v1,
        mean_v0_hat: v0,
        mean_var_consv: consv,
    })
}
