//! File formats: population CSV (`cluster_id,unit_id,y0,y1`), sample CSV
//! (`cluster_id,unit_id,d,y`) and design JSON.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::population::{validate_design, Cluster, DesignSpec, FinitePopulation, Unit};
use crate::sampling::{ObservedSample, SampledCluster, SampledUnit};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Schema(String),
    #[error("design violation: {0}")]
    Design(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
}

fn schema(e: impl std::fmt::Display) -> IoError {
    IoError::Schema(e.to_string())
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> Result<File, IoError> {
    File::create(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn check_headers<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<(), IoError> {
    let headers = rdr.headers().map_err(schema)?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(IoError::Schema(format!(
            "expected header `{}`, found `{}`",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

#[derive(Debug, Deserialize, Serialize)]
struct PopulationRow {
    cluster_id: String,
    unit_id: String,
    y0: f64,
    y1: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct SampleRow {
    cluster_id: String,
    unit_id: String,
    d: u8,
    y: f64,
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

pub fn read_population<R: Read>(r: R) -> Result<FinitePopulation, IoError> {
    let mut rdr = reader(r);
    check_headers(&mut rdr, &["cluster_id", "unit_id", "y0", "y1"])?;
    let mut clusters: BTreeMap<String, Vec<Unit>> = BTreeMap::new();
    for (line, row) in rdr.deserialize::<PopulationRow>().enumerate() {
        let row = row.map_err(|e| IoError::Schema(format!("row {}: {e}", line + 2)))?;
        clusters
            .entry(row.cluster_id)
            .or_default()
            .push(Unit::new(row.unit_id, row.y0, row.y1));
    }
    let clusters = clusters
        .into_iter()
        .map(|(id, units)| {
            let mut ids: Vec<&str> = units.iter().map(|u| u.unit_id.as_str()).collect();
            ids.sort_unstable();
            if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
                return Err(IoError::Schema(format!("unit `{}` repeated in cluster `{id}`", w[0])));
            }
            Ok(Cluster::new(id, units))
        })
        .collect::<Result<Vec<_>, _>>()?;
    FinitePopulation::new(clusters).map_err(schema)
}

pub fn read_population_file(path: &Path) -> Result<FinitePopulation, IoError> {
    read_population(open(path)?)
}

pub fn write_population<W: Write>(pop: &FinitePopulation, w: W) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    for c in pop.clusters() {
        for u in &c.units {
            wtr.serialize(PopulationRow {
                cluster_id: c.id.clone(),
                unit_id: u.unit_id.clone(),
                y0: u.y0,
                y1: u.y1,
            })
            .map_err(schema)?;
        }
    }
    wtr.flush().map_err(schema)
}

pub fn write_population_file(pop: &FinitePopulation, path: &Path) -> Result<(), IoError> {
    write_population(pop, create(path)?)
}

/// Parses observed data and checks it against `design`: clusters must be
/// design clusters, treatment constant within a cluster, S clusters with
/// S1 treated and n_c units each.
pub fn read_sample<R: Read>(r: R, design: &DesignSpec) -> Result<ObservedSample, IoError> {
    let mut rdr = reader(r);
    check_headers(&mut rdr, &["cluster_id", "unit_id", "d", "y"])?;
    let mut clusters: BTreeMap<String, (u8, Vec<SampledUnit>)> = BTreeMap::new();
    for (line, row) in rdr.deserialize::<SampleRow>().enumerate() {
        let row = row.map_err(|e| IoError::Schema(format!("row {}: {e}", line + 2)))?;
        if row.d > 1 {
            return Err(IoError::Schema(format!(
                "row {}: d must be 0 or 1, got {}",
                line + 2,
                row.d
            )));
        }
        if !row.y.is_finite() {
            return Err(IoError::Schema(format!("row {}: non-finite outcome", line + 2)));
        }
        let entry = clusters.entry(row.cluster_id.clone()).or_insert((row.d, Vec::new()));
        if entry.0 != row.d {
            return Err(IoError::Design(format!(
                "treatment must be cluster-level: cluster `{}` has both d = 0 and d = 1",
                row.cluster_id
            )));
        }
        entry.1.push(SampledUnit {
            unit_id: row.unit_id,
            y: row.y,
        });
    }
    let mut out = Vec::with_capacity(clusters.len());
    for (id, (d, units)) in clusters {
        let index = design
            .index_of(&id)
            .ok_or_else(|| IoError::Design(format!("cluster `{id}` is not in the design")))?;
        let mut ids: Vec<&str> = units.iter().map(|u| u.unit_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(IoError::Design(format!(
                "unit `{}` sampled twice in cluster `{id}`",
                w[0]
            )));
        }
        out.push(SampledCluster {
            id,
            index,
            treated: d == 1,
            units,
        });
    }
    let sample = ObservedSample::new(out);
    sample
        .check_against(design)
        .map_err(|e| IoError::Design(e.to_string()))?;
    Ok(sample)
}

pub fn read_sample_file(path: &Path, design: &DesignSpec) -> Result<ObservedSample, IoError> {
    read_sample(open(path)?, design)
}

pub fn write_sample<W: Write>(sample: &ObservedSample, w: W) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    for c in &sample.clusters {
        for u in &c.units {
            wtr.serialize(SampleRow {
                cluster_id: c.id.clone(),
                unit_id: u.unit_id.clone(),
                d: c.treated as u8,
                y: u.y,
            })
            .map_err(schema)?;
        }
    }
    wtr.flush().map_err(schema)
}

pub fn write_sample_file(sample: &ObservedSample, path: &Path) -> Result<(), IoError> {
    write_sample(sample, create(path)?)
}

/// Parses a design and validates its invariants.
pub fn read_design<R: Read>(r: R) -> Result<DesignSpec, IoError> {
    let mut design: DesignSpec = serde_json::from_reader(r).map_err(|e| IoError::Schema(format!("design: {e}")))?;
    design.canonicalize();
    let v = validate_design(&design);
    if !v.is_ok() {
        return Err(IoError::Design(v.messages().join("; ")));
    }
    Ok(design)
}

pub fn read_design_file(path: &Path) -> Result<DesignSpec, IoError> {
    read_design(open(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn write_json_file<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut f = create(path)?;
    f.write_all(to_json(value).as_bytes()).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}
