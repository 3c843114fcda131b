//! Design-based inference for cluster-randomized experiments with two-stage
//! sampling: Horvitz–Thompson point estimates, exact design variances on
//! small populations, sharp variance bounds and a cluster-robust baseline.

pub mod baseline_lz;
pub mod bounds;
pub mod cli;
pub mod design_probability;
pub mod estimators;
pub mod io;
pub mod montecarlo;
pub mod population;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod variance_oracle;
