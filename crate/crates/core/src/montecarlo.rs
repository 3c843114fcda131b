//! Simulation study: data generating processes, the replication loop and
//! normality diagnostics of the standardized estimator.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::baseline_lz::{lz_se, LzVariant};
use crate::bounds::variance_interval;
use crate::estimators::ht_ate;
use crate::population::{compute_ate, DesignSpec, FinitePopulation};
use crate::rng::{derive_seed, SplitMix64};
use crate::sampling::{draw_sample, ObservedSample};
use crate::variance_oracle::exact_var_feasible;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid protocol: {0}")]
    Invalid(String),
    #[error("no population draws for DGP {0}; expected 1-4")]
    UnknownDgp(u8),
}

/// Parameters of one data generating process. Every normal law is given
/// by mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub dgp_id: u8,
    pub noise_sd: f64,
    pub gamma: [f64; 2],
    /// Constant effect of DGP 1.
    pub tau: f64,
    /// Unit effects τ_i of DGP 2.
    pub tau_i_mean: f64,
    pub tau_i_sd: f64,
    /// Cluster intercepts α_c of DGPs 3 and 4.
    pub alpha_mean: f64,
    pub alpha_sd: f64,
    /// Cluster effects τ_c of DGPs 3 and 4.
    pub tau_c_mean: f64,
    pub tau_c_sd: f64,
    /// Upper end of σ_c² ~ U[0, ·], the within-cluster effect variance of DGP 4.
    pub sigma2_c_max: f64,
}

impl DgpSpec {
    /// The four benchmark processes with every second normal argument read
    /// as a standard deviation.
    pub fn builtin(dgp_id: u8) -> Result<Self, ProtocolError> {
        if !(1..=4).contains(&dgp_id) {
            return Err(ProtocolError::UnknownDgp(dgp_id));
        }
        Ok(Self {
            dgp_id,
            noise_sd: 25.0,
            gamma: [1.0, 1.0],
            tau: 50.0,
            tau_i_mean: 50.0,
            tau_i_sd: 100.0,
            alpha_mean: 5.0,
            alpha_sd: 25.0,
            tau_c_mean: 20.0,
            tau_c_sd: 100.0,
            sigma2_c_max: 4.0,
        })
    }

    /// Same processes with every second normal argument read as a variance.
    pub fn builtin_variance_reading(dgp_id: u8) -> Result<Self, ProtocolError> {
        Ok(Self {
            noise_sd: 5.0,
            tau_i_sd: 10.0,
            alpha_sd: 5.0,
            tau_c_sd: 10.0,
            ..Self::builtin(dgp_id)?
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// n_c = round(0.8·N_c), clamped to [2, N_c].
    R1,
    /// n_c = 100.
    R2,
}

impl Regime {
    pub fn sample_size(&self, cluster_size: usize) -> usize {
        match self {
            Regime::R1 => ((0.8 * cluster_size as f64).round() as usize).clamp(2.min(cluster_size), cluster_size),
            Regime::R2 => 100,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::R1 => "r1",
            Regime::R2 => "r2",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r1" => Ok(Regime::R1),
            "r2" => Ok(Regime::R2),
            other => Err(format!("unknown regime `{other}` (expected r1 or r2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProtocol {
    pub clusters: usize,
    pub sampled: usize,
    pub treated: usize,
    pub regime: Regime,
    pub replications: usize,
    pub seed: u64,
    /// Cluster sizes are uniform integers on [size_min, size_max].
    pub size_min: usize,
    pub size_max: usize,
    pub critical: f64,
    pub lz_variant: LzVariant,
}

impl Default for SimProtocol {
    fn default() -> Self {
        Self {
            clusters: 120,
            sampled: 80,
            treated: 40,
            regime: Regime::R1,
            replications: 1000,
            seed: 20240601,
            size_min: 185,
            size_max: 195,
            critical: 1.96,
            lz_variant: LzVariant::Cr1,
        }
    }
}

impl SimProtocol {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Invalid(m));
        if self.clusters < 2 || self.sampled > self.clusters {
            return bad(format!("S = {} of C = {}", self.sampled, self.clusters));
        }
        if self.treated < 2 || self.sampled < self.treated + 2 {
            return bad(format!(
                "S1 = {} of S = {}; both arms need at least two clusters",
                self.treated, self.sampled
            ));
        }
        if self.size_min < 2 || self.size_min > self.size_max {
            return bad(format!("cluster sizes [{}, {}]", self.size_min, self.size_max));
        }
        if self.regime == Regime::R2 && self.size_min < 100 {
            return bad(format!(
                "regime r2 samples 100 units but clusters can have {}",
                self.size_min
            ));
        }
        if self.replications == 0 {
            return bad("zero replications".into());
        }
        if !(self.critical.is_finite() && self.critical > 0.0) {
            return bad(format!("critical value {}", self.critical));
        }
        Ok(())
    }

    pub fn design_for(&self, pop: &FinitePopulation) -> DesignSpec {
        let regime = self.regime;
        DesignSpec::for_population(pop, self.sampled, self.treated, |n| regime.sample_size(n))
    }
}

/// Draws a finite population. Deterministic in `seed`.
pub fn generate_population(dgp: &DgpSpec, protocol: &SimProtocol, seed: u64) -> FinitePopulation {
    let mut rng = SplitMix64::new(seed);
    let [g1, g2] = dgp.gamma;
    let clusters = (0..protocol.clusters)
        .map(|_| {
            let size = rng.range_inclusive(protocol.size_min as u64, protocol.size_max as u64) as usize;
            let (alpha, tau_c, sigma_c) = match dgp.dgp_id {
                3 | 4 => {
                    let alpha = rng.normal(dgp.alpha_mean, dgp.alpha_sd);
                    let tau_c = rng.normal(dgp.tau_c_mean, dgp.tau_c_sd);
                    let sigma_c = if dgp.dgp_id == 4 {
                        rng.uniform(0.0, dgp.sigma2_c_max).sqrt()
                    } else {
                        0.0
                    };
                    (alpha, tau_c, sigma_c)
                }
                _ => (0.0, 0.0, 0.0),
            };
            (0..size)
                .map(|_| {
                    let base = g1 * rng.next_f64() + g2 * rng.next_f64();
                    let (z0, z1) = rng.standard_normal_pair();
                    let (e0, e1) = (dgp.noise_sd * z0, dgp.noise_sd * z1);
                    let (shift0, shift1) = match dgp.dgp_id {
                        1 => (0.0, dgp.tau),
                        2 => (0.0, rng.normal(dgp.tau_i_mean, dgp.tau_i_sd)),
                        3 => (-alpha, alpha + tau_c),
                        _ => (-alpha, alpha + rng.normal(tau_c, sigma_c)),
                    };
                    (base + shift0 + e0, base + shift1 + e1)
                })
                .collect()
        })
        .collect();
    FinitePopulation::from_outcomes(clusters).expect("generated population is valid")
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub tau: f64,
    pub tau_hat: f64,
    pub se_h: f64,
    pub se_consv: f64,
    pub se_lz: f64,
    pub se_exact: f64,
    pub cover_h: bool,
    pub cover_lz: bool,
    pub reject_h: bool,
    pub reject_lz: bool,
    #[serde(skip)]
    pub dm_estimate: f64,
    #[serde(skip)]
    pub clamped: bool,
}

/// Population, design and observed sample of replication `rep`.
pub fn replication_inputs(
    dgp: &DgpSpec,
    protocol: &SimProtocol,
    rep: usize,
) -> (FinitePopulation, DesignSpec, ObservedSample) {
    let seed = derive_seed(protocol.seed, rep as u64);
    let pop = generate_population(dgp, protocol, derive_seed(seed, 0));
    let design = protocol.design_for(&pop);
    let sample = draw_sample(&pop, &design, derive_seed(seed, 1));
    (pop, design, sample)
}

fn run_replication(dgp: &DgpSpec, protocol: &SimProtocol, rep: usize) -> Result<ReplicationRecord, String> {
    let (pop, design, sample) = replication_inputs(dgp, protocol, rep);
    let tau = compute_ate(&pop);
    let tau_hat = ht_ate(&sample, &design).map_err(|e| e.to_string())?;
    let bounds = variance_interval(&sample, &design).map_err(|e| e.to_string())?;
    let lz = lz_se(&sample, protocol.lz_variant).map_err(|e| e.to_string())?;
    let se_exact = exact_var_feasible(&pop, &design)
        .map_err(|e| e.to_string())?
        .max(0.0)
        .sqrt();
    let z = protocol.critical;
    let se_consv = bounds.var_consv.max(0.0).sqrt();
    Ok(ReplicationRecord {
        rep,
        tau,
        tau_hat,
        se_h: bounds.se_h,
        se_consv,
        se_lz: lz.se_lz,
        se_exact,
        cover_h: (tau_hat - tau).abs() <= z * bounds.se_h,
        cover_lz: (tau_hat - tau).abs() <= z * lz.se_lz,
        reject_h: tau_hat.abs() > z * bounds.se_h,
        reject_lz: tau_hat.abs() > z * lz.se_lz,
        dm_estimate: lz.dm_estimate,
        clamped: bounds.clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_se: f64,
    pub coverage: f64,
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityDiagnostics {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_distance: f64,
    /// Flags KS > 1.36/√n or |skewness| > 3·√(6/n).
    pub departure: bool,
}

pub fn normality_diagnostics(z: &[f64]) -> NormalityDiagnostics {
    let n = z.len();
    let nf = n as f64;
    let mean = z.iter().sum::<f64>() / nf;
    let central = |k: i32| z.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / nf;
    let (m2, m3, m4) = (central(2), central(3), central(4));
    let skewness = m3 / m2.powf(1.5);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let ks_distance = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            ((i + 1) as f64 / nf - f).max(f - i as f64 / nf)
        })
        .fold(0.0, f64::max);
    let departure = ks_distance > 1.36 / nf.sqrt() || skewness.abs() > 3.0 * (6.0 / nf).sqrt();
    NormalityDiagnostics {
        n,
        mean,
        sd: (m2 * nf / (nf - 1.0)).sqrt(),
        skewness,
        excess_kurtosis,
        ks_distance,
        departure,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub dgp: DgpSpec,
    pub protocol: SimProtocol,
    pub replications: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub mean_tau: f64,
    pub mean_tau_hat: f64,
    pub mean_dm_estimate: f64,
    /// Mean of τ̂ − τ over replications.
    pub mean_error: f64,
    /// Standard deviation of τ̂ − τ over replications.
    pub mc_sd: f64,
    /// Standard deviation of τ̂ itself.
    pub mc_sd_raw: f64,
    pub mean_exact_var: f64,
    pub clamped: usize,
    pub methods: Vec<MethodSummary>,
    /// Diagnostics of (τ̂ − τ)/se_exact.
    pub normality: NormalityDiagnostics,
}

impl SimResult {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

pub struct StudyOutput {
    pub result: SimResult,
    pub records: Vec<ReplicationRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

fn summarize(dgp: &DgpSpec, protocol: &SimProtocol, outcomes: Vec<Result<ReplicationRecord, String>>) -> StudyOutput {
    let mut records = Vec::with_capacity(outcomes.len());
    let mut failure_messages = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(e) => failure_messages.push(e),
        }
    }
    let z = protocol.critical;
    let frac = |f: &dyn Fn(&ReplicationRecord) -> bool| mean(records.iter().map(|r| f(r) as u8 as f64));
    let method = |name: &str, se: &dyn Fn(&ReplicationRecord) -> f64| MethodSummary {
        method: name.to_string(),
        mean_se: mean(records.iter().map(se)),
        coverage: frac(&|r| (r.tau_hat - r.tau).abs() <= z * se(r)),
        power: frac(&|r| r.tau_hat.abs() > z * se(r)),
    };
    let errors: Vec<f64> = records.iter().map(|r| r.tau_hat - r.tau).collect();
    let tau_hats: Vec<f64> = records.iter().map(|r| r.tau_hat).collect();
    let standardized: Vec<f64> = records.iter().map(|r| (r.tau_hat - r.tau) / r.se_exact).collect();
    let result = SimResult {
        dgp: dgp.clone(),
        protocol: protocol.clone(),
        replications: records.len(),
        failures: failure_messages.len(),
        failure_messages,
        mean_tau: mean(records.iter().map(|r| r.tau)),
        mean_tau_hat: mean(tau_hats.iter().copied()),
        mean_dm_estimate: mean(records.iter().map(|r| r.dm_estimate)),
        mean_error: mean(errors.iter().copied()),
        mc_sd: sd(&errors),
        mc_sd_raw: sd(&tau_hats),
        mean_exact_var: mean(records.iter().map(|r| r.se_exact * r.se_exact)),
        clamped: records.iter().filter(|r| r.clamped).count(),
        methods: vec![
            method("exact", &|r| r.se_exact),
            method("upper_bound", &|r| r.se_h),
            method("conservative", &|r| r.se_consv),
            method("lz", &|r| r.se_lz),
        ],
        normality: normality_diagnostics(&standardized),
    };
    StudyOutput { result, records }
}

/// Runs every replication on the current rayon pool. Records come back in
/// replication order, so the output does not depend on the thread count.
pub fn run_study(dgp: &DgpSpec, protocol: &SimProtocol) -> Result<StudyOutput, ProtocolError> {
    protocol.validate()?;
    if !(1..=4).contains(&dgp.dgp_id) {
        return Err(ProtocolError::UnknownDgp(dgp.dgp_id));
    }
    let outcomes: Vec<_> = (0..protocol.replications)
        .into_par_iter()
        .map(|rep| run_replication(dgp, protocol, rep))
        .collect();
    Ok(summarize(dgp, protocol, outcomes))
}

/// [`run_study`] on a dedicated pool of `threads` workers.
pub fn run_study_with_threads(
    dgp: &DgpSpec,
    protocol: &SimProtocol,
    threads: usize,
) -> Result<StudyOutput, ProtocolError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ProtocolError::Invalid(e.to_string()))?;
    pool.install(|| run_study(dgp, protocol))
}

/// τ̂ over repeated draws from one fixed population and design.
pub fn fixed_population_draws(pop: &FinitePopulation, design: &DesignSpec, reps: usize, seed: u64) -> Vec<f64> {
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let s = draw_sample(pop, design, derive_seed(seed, r as u64));
            ht_ate(&s, design).expect("valid design")
        })
        .collect()
}
