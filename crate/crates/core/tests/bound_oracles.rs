use itertools::Itertools;

use cdinfer::bounds::{sigma_hat_bounds, QuantileGrid};
use cdinfer::population::{ClusterDesign, DesignSpec, FinitePopulation};
use cdinfer::rng::SplitMix64;
use cdinfer::sampling::{draw_sample, ObservedSample, SampledCluster, SampledUnit};
use cdinfer::variance_oracle::true_total_fh_bounds;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Left-continuous quantile of the uniform ECDF on sorted `v`, by scanning.
fn quantile(v: &[f64], u: f64) -> f64 {
    let n = v.len() as f64;
    for (i, &x) in v.iter().enumerate() {
        if (i + 1) as f64 / n >= u {
            return x;
        }
    }
    v[v.len() - 1]
}

/// Midpoint-rule coupling integrals on M = a multiple of lcm(S1, S0) near
/// `target` cells, returning (comonotone, antitone).
fn fine_grid(x: &[f64], y: &[f64], target: usize) -> (f64, f64) {
    let l = x.len() / gcd(x.len(), y.len()) * y.len();
    let m = l * (target / l).max(1);
    let (mut high, mut low) = (0.0, 0.0);
    for k in 0..m {
        let u = (k as f64 + 0.5) / m as f64;
        high += quantile(x, u) * quantile(y, u);
        low += quantile(x, u) * quantile(y, 1.0 - u);
    }
    (high / m as f64, low / m as f64)
}

/// Scaled HT cluster totals of one arm, sorted, and their mean.
fn arm_totals(sample: &ObservedSample, design: &DesignSpec, treated: bool) -> (Vec<f64>, f64) {
    let nbar = design.clusters.iter().map(|c| c.size).sum::<usize>() as f64 / design.num_clusters as f64;
    let mut v: Vec<f64> = sample
        .clusters
        .iter()
        .filter(|c| c.treated == treated)
        .map(|c| {
            let cd = &design.clusters[c.index];
            c.units.iter().map(|u| u.y).sum::<f64>() * cd.size as f64 / (cd.sample as f64 * nbar)
        })
        .collect();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v, mean)
}

fn census_sample(arms: &[(bool, f64)]) -> (ObservedSample, DesignSpec) {
    let clusters: Vec<ClusterDesign> = (0..arms.len())
        .map(|i| ClusterDesign {
            id: format!("c{i}"),
            size: 1,
            sample: 1,
        })
        .collect();
    let treated = arms.iter().filter(|a| a.0).count();
    let design = DesignSpec::new(arms.len(), treated, clusters);
    let sample = ObservedSample::new(
        arms.iter()
            .enumerate()
            .map(|(index, &(treated, y))| SampledCluster {
                id: format!("c{index}"),
                index,
                treated,
                units: vec![SampledUnit { unit_id: "u".into(), y }],
            })
            .collect(),
    );
    (sample, design)
}

#[test]
fn two_by_three_example() {
    // treated (0, 1), control (0, 0, 1): breakpoints 0, 1/3, 1/2, 2/3, 1
    let grid = QuantileGrid::new(2, 3);
    let b: Vec<f64> = grid.breakpoints.iter().map(|b| b.value()).collect();
    assert_eq!(b, vec![0.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0]);
    let (s, d) = census_sample(&[(true, 0.0), (true, 1.0), (false, 0.0), (false, 0.0), (false, 1.0)]);
    let sig = sigma_hat_bounds(&s, &d).unwrap();
    // Comonotone pairs 1 with 1 on (2/3, 1]; antitone pairs control 1
    // with treated 0.
    let (m1, m0) = (0.5, 1.0 / 3.0);
    assert!((sig.high - (1.0 / 3.0 - m1 * m0)).abs() < 1e-15);
    assert!((sig.low - (0.0 - m1 * m0)).abs() < 1e-15);
    let (high, low) = fine_grid(&[0.0, 1.0], &[0.0, 0.0, 1.0], 100_000);
    assert!((high - 1.0 / 3.0).abs() < 1e-9 && low.abs() < 1e-9);
}

#[test]
fn grid_matches_fine_integral() {
    let mut checked = 0;
    for seed in 0..60u64 {
        let mut rng = SplitMix64::new(seed);
        let c = rng.range_inclusive(6, 40) as usize;
        let s = rng.range_inclusive(5, c as u64) as usize;
        let s1 = rng.range_inclusive(2, s as u64 - 2) as usize;
        if 2 * s1 == s {
            continue;
        }
        let outcomes: Vec<Vec<(f64, f64)>> = (0..c)
            .map(|_| {
                let n = rng.range_inclusive(2, 8) as usize;
                let shift = rng.normal(0.0, 5.0);
                (0..n)
                    .map(|_| {
                        let y0 = shift + rng.normal(0.0, 1.0);
                        (y0, y0 + rng.normal(2.0, 3.0))
                    })
                    .collect()
            })
            .collect();
        let pop = FinitePopulation::from_outcomes(outcomes).unwrap();
        let clusters = pop
            .clusters()
            .iter()
            .map(|cl| ClusterDesign {
                id: cl.id.clone(),
                size: cl.size(),
                sample: rng.range_inclusive(2, cl.size() as u64) as usize,
            })
            .collect();
        let design = DesignSpec::new(s, s1, clusters);
        let sample = draw_sample(&pop, &design, seed ^ 0xABCD);
        let (x, mx) = arm_totals(&sample, &design, true);
        let (y, my) = arm_totals(&sample, &design, false);
        let (high, low) = fine_grid(&x, &y, 100_000);
        let sig = sigma_hat_bounds(&sample, &design).unwrap();
        let scale = x.iter().chain(&y).map(|v| v * v).fold(1.0, f64::max);
        assert!(
            (sig.high - (high - mx * my)).abs() < 1e-9 * scale,
            "seed {seed}: {} vs {}",
            sig.high,
            high - mx * my
        );
        assert!((sig.low - (low - mx * my)).abs() < 1e-9 * scale, "seed {seed}");
        checked += 1;
    }
    assert!(checked >= 40);
}

fn cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}

#[test]
fn fh_bounds_brute_force() {
    for seed in 0..40u64 {
        let mut rng = SplitMix64::new(seed);
        let c = rng.range_inclusive(2, 6) as usize;
        let outcomes: Vec<Vec<(f64, f64)>> = (0..c)
            .map(|_| {
                (0..rng.range_inclusive(1, 5))
                    .map(|_| (rng.normal(3.0, 4.0), rng.normal(0.0, 6.0)))
                    .collect()
            })
            .collect();
        let pop = FinitePopulation::from_outcomes(outcomes).unwrap();
        let nbar = pop.total_units() as f64 / c as f64;
        let totals = |d: bool| -> Vec<f64> {
            pop.clusters()
                .iter()
                .map(|cl| cl.units.iter().map(|u| u.outcome(d)).sum::<f64>() / nbar)
                .collect()
        };
        let (y1, y0) = (totals(true), totals(false));
        let mut best = (f64::INFINITY, f64::NEG_INFINITY);
        for perm in (0..c).permutations(c) {
            let paired: Vec<f64> = perm.iter().map(|&i| y0[i]).collect();
            let v = cov(&y1, &paired);
            best = (best.0.min(v), best.1.max(v));
        }
        let (low, high) = true_total_fh_bounds(&pop);
        assert!(
            (low - best.0).abs() < 1e-12 * best.0.abs().max(1.0),
            "seed {seed}: {low} vs {}",
            best.0
        );
        assert!(
            (high - best.1).abs() < 1e-12 * best.1.abs().max(1.0),
            "seed {seed}: {high} vs {}",
            best.1
        );
    }
}
