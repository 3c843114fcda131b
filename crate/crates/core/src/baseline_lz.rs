//! Liang–Zeger cluster-robust standard error for the regression of y on an
//! intercept and the treatment indicator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::ObservedSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LzError {
    #[error("cluster-robust SE needs at least two clusters per arm (treated {treated}, control {control})")]
    InsufficientClusters { treated: usize, control: usize },
    #[error("cluster `{0}` has no sampled units")]
    EmptyCluster(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LzVariant {
    Cr0,
    #[default]
    Cr1,
}

impl fmt::Display for LzVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LzVariant::Cr0 => "cr0",
            LzVariant::Cr1 => "cr1",
        })
    }
}

impl FromStr for LzVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cr0" => Ok(LzVariant::Cr0),
            "cr1" => Ok(LzVariant::Cr1),
            other => Err(format!("unknown LZ variant `{other}` (expected cr0 or cr1)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LzReport {
    pub dm_estimate: f64,
    pub se_lz: f64,
    /// Number of clusters G.
    pub clusters: usize,
    pub units: usize,
    pub variant: LzVariant,
    /// Small-sample factor applied to the meat (1 for CR0).
    pub correction: f64,
}

pub fn lz_se(sample: &ObservedSample, variant: LzVariant) -> Result<LzReport, LzError> {
    let (treated, control) = (sample.num_treated(), sample.num_control());
    if treated < 2 || control < 2 {
        return Err(LzError::InsufficientClusters { treated, control });
    }
    if let Some(c) = sample.clusters.iter().find(|c| c.units.is_empty()) {
        return Err(LzError::EmptyCluster(c.id.clone()));
    }
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for c in &sample.clusters {
        let d = c.treated as usize;
        counts[d] += c.units.len();
        sums[d] += c.units.iter().map(|u| u.y).sum::<f64>();
    }
    let means = [sums[0] / counts[0] as f64, sums[1] / counts[1] as f64];
    let meat: f64 = sample
        .clusters
        .iter()
        .map(|c| {
            let d = c.treated as usize;
            let score = c.units.iter().map(|u| u.y - means[d]).sum::<f64>();
            (score / counts[d] as f64).powi(2)
        })
        .sum();
    let g = sample.clusters.len() as f64;
    let n = (counts[0] + counts[1]) as f64;
    let correction = match variant {
        LzVariant::Cr0 => 1.0,
        LzVariant::Cr1 => g / (g - 1.0) * (n - 1.0) / (n - 2.0),
    };
    Ok(LzReport {
        dm_estimate: means[1] - means[0],
        se_lz: (correction * meat).sqrt(),
        clusters: sample.clusters.len(),
        units: counts[0] + counts[1],
        variant,
        correction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::diff_in_means;
    use crate::sampling::{SampledCluster, SampledUnit};

    fn sample(clusters: &[(bool, &[f64])]) -> ObservedSample {
        ObservedSample::new(
            clusters
                .iter()
                .enumerate()
                .map(|(index, &(treated, ys))| SampledCluster {
                    id: format!("g{index}"),
                    index,
                    treated,
                    units: ys
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| SampledUnit {
                            unit_id: i.to_string(),
                            y,
                        })
                        .collect(),
                })
                .collect(),
        )
    }

    /// Naive sandwich with explicit 2×2 matrices.
    fn naive(s: &ObservedSample, factor: bool) -> f64 {
        let mut xtx = [[0.0; 2]; 2];
        let mut xty = [0.0; 2];
        for c in &s.clusters {
            let x = [1.0, if c.treated { 1.0 } else { 0.0 }];
            for u in &c.units {
                for a in 0..2 {
                    xty[a] += x[a] * u.y;
                    for b in 0..2 {
                        xtx[a][b] += x[a] * x[b];
                    }
                }
            }
        }
        let det = xtx[0][0] * xtx[1][1] - xtx[0][1] * xtx[1][0];
        let inv = [[xtx[1][1] / det, -xtx[0][1] / det], [-xtx[1][0] / det, xtx[0][0] / det]];
        let beta = [
            inv[0][0] * xty[0] + inv[0][1] * xty[1],
            inv[1][0] * xty[0] + inv[1][1] * xty[1],
        ];
        let mut meat = [[0.0; 2]; 2];
        let mut n = 0.0;
        for c in &s.clusters {
            let x = [1.0, if c.treated { 1.0 } else { 0.0 }];
            let mut score = [0.0; 2];
            for u in &c.units {
                let e = u.y - beta[0] - beta[1] * x[1];
                score[0] += x[0] * e;
                score[1] += x[1] * e;
                n += 1.0;
            }
            for a in 0..2 {
                for b in 0..2 {
                    meat[a][b] += score[a] * score[b];
                }
            }
        }
        let mut v = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                v += inv[1][a] * meat[a][b] * inv[b][1];
            }
        }
        let g = s.clusters.len() as f64;
        if factor {
            v *= g / (g - 1.0) * (n - 1.0) / (n - 2.0);
        }
        v.sqrt()
    }

    #[test]
    fn constant_within_clusters() {
        let s = sample(&[
            (true, &[3.0, 3.0]),
            (true, &[3.0, 3.0]),
            (false, &[1.0, 1.0]),
            (false, &[1.0, 1.0]),
        ]);
        let r = lz_se(&s, LzVariant::Cr1).unwrap();
        assert_eq!(r.dm_estimate, 2.0);
        assert_eq!(r.se_lz, 0.0);
        assert_eq!(r.clusters, 4);
    }

    #[test]
    fn matches_naive_sandwich() {
        let s = sample(&[
            (true, &[3.0, 1.5, 4.0]),
            (false, &[0.5, 2.0]),
            (true, &[7.0]),
            (false, &[1.0, -1.0, 2.5, 0.0]),
            (true, &[2.0, 2.0]),
        ]);
        for (variant, factor) in [(LzVariant::Cr0, false), (LzVariant::Cr1, true)] {
            let r = lz_se(&s, variant).unwrap();
            let n = naive(&s, factor);
            assert!((r.se_lz - n).abs() < 1e-12 * n, "{} vs {}", r.se_lz, n);
        }
        let r = lz_se(&s, LzVariant::Cr1).unwrap();
        assert!((r.dm_estimate - diff_in_means(&s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn order_invariance_and_scaling() {
        let a = sample(&[
            (true, &[3.0, 1.5]),
            (false, &[0.5, 2.0]),
            (true, &[7.0, 1.0]),
            (false, &[1.0, -1.0]),
        ]);
        let b = sample(&[
            (false, &[-1.0, 1.0]),
            (true, &[1.0, 7.0]),
            (false, &[2.0, 0.5]),
            (true, &[1.5, 3.0]),
        ]);
        let ra = lz_se(&a, LzVariant::Cr1).unwrap();
        let rb = lz_se(&b, LzVariant::Cr1).unwrap();
        assert!((ra.se_lz - rb.se_lz).abs() < 1e-12);
        let rk = lz_se(&a.scaled_by(-3.0), LzVariant::Cr1).unwrap();
        assert!((rk.se_lz - 3.0 * ra.se_lz).abs() < 1e-12);
    }

    #[test]
    fn needs_two_clusters_per_arm() {
        let s = sample(&[(true, &[1.0]), (true, &[2.0]), (false, &[0.0])]);
        assert_eq!(
            lz_se(&s, LzVariant::Cr1),
            Err(LzError::InsufficientClusters { treated: 2, control: 1 })
        );
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("CR0".parse::<LzVariant>().unwrap(), LzVariant::Cr0);
        assert_eq!(LzVariant::default().to_string(), "cr1");
        assert!("hc3".parse::<LzVariant>().is_err());
    }
}
