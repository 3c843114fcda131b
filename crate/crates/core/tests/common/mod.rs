#![allow(dead_code)]

use cdinfer::bounds::{conservative_estimate, vhat_arm};
use cdinfer::estimators::{ht_ate, infeasible_ate};
use cdinfer::population::{ClusterDesign, DesignSpec, FinitePopulation};
use cdinfer::rng::SplitMix64;
use cdinfer::sampling::enumerate_realizations;

/// Heterogeneous outcomes on a quarter-integer lattice.
pub fn lattice_population(sizes: &[usize], seed: u64) -> FinitePopulation {
    let mut rng = SplitMix64::new(seed);
    let outcomes = sizes
        .iter()
        .map(|&n| {
            let shift = rng.range_inclusive(0, 12) as f64;
            (0..n)
                .map(|_| {
                    let y0 = shift + rng.range_inclusive(0, 40) as f64 / 4.0;
                    let y1 = y0 + rng.range_inclusive(0, 24) as f64 / 4.0 - 2.0;
                    (y0, y1)
                })
                .collect()
        })
        .collect();
    FinitePopulation::from_outcomes(outcomes).unwrap()
}

pub fn design_with(pop: &FinitePopulation, s: usize, s1: usize, samples: &[usize]) -> DesignSpec {
    DesignSpec::new(
        s,
        s1,
        pop.clusters()
            .iter()
            .zip(samples)
            .map(|(c, &n)| ClusterDesign {
                id: c.id.clone(),
                size: c.size(),
                sample: n,
            })
            .collect(),
    )
}

pub struct Tiny {
    pub name: &'static str,
    pub pop: FinitePopulation,
    pub design: DesignSpec,
}

/// The three small designs used for exact checks, plus one with unequal
/// sizes and at least two clusters per arm.
pub fn tiny_designs() -> Vec<Tiny> {
    let mk = |name, sizes: &[usize], samples: &[usize], s, s1, seed| {
        let pop = lattice_population(sizes, seed);
        let design = design_with(&pop, s, s1, samples);
        Tiny { name, pop, design }
    };
    vec![
        mk("C=4,S=2,S1=1,N=2,n=1", &[2, 2, 2, 2], &[1, 1, 1, 1], 2, 1, 11),
        mk(
            "C=4,S=3,S1=2,N=(1,2,3,2),n=min(N,2)",
            &[1, 2, 3, 2],
            &[1, 2, 2, 2],
            3,
            2,
            12,
        ),
        mk("C=5,S=4,S1=2,N=3,n=2", &[3; 5], &[2; 5], 4, 2, 13),
        mk(
            "C=5,S=4,S1=2,N=(2,3,4,2,3),n=(2,2,3,2,2)",
            &[2, 3, 4, 2, 3],
            &[2, 2, 3, 2, 2],
            4,
            2,
            14,
        ),
    ]
}

#[derive(Debug, Default)]
pub struct Enumerated {
    pub realizations: usize,
    pub total_prob: f64,
    pub mean_tau_hat: f64,
    pub var_tau_hat: f64,
    pub mean_tau_bar: f64,
    pub var_tau_bar: f64,
    pub mean_v1: Option<f64>,
    pub mean_v0: Option<f64>,
    pub mean_consv: Option<f64>,
}

/// Design expectations by exhaustive enumeration.
pub fn enumerate(pop: &FinitePopulation, design: &DesignSpec) -> Enumerated {
    let all: Vec<_> = enumerate_realizations(pop, design).unwrap().collect();
    let mut out = Enumerated {
        realizations: all.len(),
        ..Default::default()
    };
    let mut hat = Vec::new();
    let mut bar = Vec::new();
    let mut v1 = Some(0.0);
    let mut v0 = Some(0.0);
    let mut consv = Some(0.0);
    for (s, p) in &all {
        out.total_prob += p;
        hat.push((ht_ate(s, design).unwrap(), *p));
        bar.push((infeasible_ate(pop, design, &s.first_stage()).unwrap(), *p));
        v1 = v1.and_then(|acc| vhat_arm(s, design, true).ok().map(|v| acc + p * v));
        v0 = v0.and_then(|acc| vhat_arm(s, design, false).ok().map(|v| acc + p * v));
        consv = consv.and_then(|acc| conservative_estimate(s, design).ok().map(|v| acc + p * v));
    }
    let moments = |xs: &[(f64, f64)]| {
        let mean: f64 = xs.iter().map(|(x, p)| x * p).sum();
        let var: f64 = xs.iter().map(|(x, p)| p * (x - mean).powi(2)).sum();
        (mean, var)
    };
    (out.mean_tau_hat, out.var_tau_hat) = moments(&hat);
    (out.mean_tau_bar, out.var_tau_bar) = moments(&bar);
    out.mean_v1 = v1;
    out.mean_v0 = v0;
    out.mean_consv = consv;
    out
}
