//! CSV ingestion and serialization of survey samples.
//!
//! Dialect is fixed for reproducibility: comma-separated, header row
//! required, UTF-8, `.` decimal separator. The expected schema is a value
//! column `z`, exactly one of `weight`/`pi`, and optional `stratum` and
//! `cluster` columns; [`ColumnMap`] remaps the names.

use std::path::Path;

use crate::error::{Error, Result};
use crate::population::{DesignTag, SampleRow, SurveySample};

/// Column-name mapping for [`load_sample_csv`].
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub z: String,
    pub weight: String,
    pub pi: String,
    pub stratum: String,
    pub cluster: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            z: "z".into(),
            weight: "weight".into(),
            pi: "pi".into(),
            stratum: "stratum".into(),
            cluster: "cluster".into(),
        }
    }
}

/// Load a survey sample from CSV.
///
/// Weights are converted to inclusion probabilities (`pi = 1/weight`); the
/// implied population size is the weight total. The design tag is inferred
/// from the labels present: cluster column -> two-stage cluster, stratum
/// column -> stratified, otherwise generic single-stage unequal-probability
/// sampling.
pub fn load_sample_csv<P: AsRef<Path>>(path: P, schema: &ColumnMap) -> Result<SurveySample> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(csv_err)?;

    let headers = reader.headers().map_err(csv_err)?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let z_col = find(&schema.z).ok_or_else(|| Error::Csv {
        line: 1,
        msg: format!("missing required column `{}`", schema.z),
    })?;
    let weight_col = find(&schema.weight);
    let pi_col = find(&schema.pi);
    if weight_col.is_none() && pi_col.is_none() {
        return Err(Error::Csv {
            line: 1,
            msg: format!("need a `{}` or `{}` column", schema.weight, schema.pi),
        });
    }
    if weight_col.is_some() && pi_col.is_some() {
        return Err(Error::Csv {
            line: 1,
            msg: format!("both `{}` and `{}` present; keep one", schema.weight, schema.pi),
        });
    }
    let stratum_col = find(&schema.stratum);
    let cluster_col = find(&schema.cluster);

    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse_f64 = |idx: usize, what: &str| -> Result<f64> {
            let raw = rec.get(idx).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Csv {
                line,
                msg: format!("cannot parse {what} value `{raw}`"),
            })
        };
        let parse_u32 = |idx: usize, what: &str| -> Result<u32> {
            let raw = rec.get(idx).unwrap_or("");
            raw.parse::<u32>().map_err(|_| Error::Csv {
                line,
                msg: format!("cannot parse {what} label `{raw}`"),
            })
        };

        let z = parse_f64(z_col, "z")?;
        let pi = if let Some(c) = weight_col {
            let w = parse_f64(c, "weight")?;
            if !(w > 0.0) {
                return Err(Error::Csv { line, msg: format!("nonpositive weight {w}") });
            }
            1.0 / w
        } else {
            let p = parse_f64(pi_col.unwrap(), "pi")?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Csv {
                    line,
                    msg: format!("inclusion probability {p} outside (0, 1]"),
                });
            }
            p
        };
        let stratum = stratum_col.map(|c| parse_u32(c, "stratum")).transpose()?;
        let cluster = cluster_col.map(|c| parse_u32(c, "cluster")).transpose()?;
        rows.push(SampleRow { unit_id: rows.len() as u32 + 1, z, pi, stratum, cluster });
    }
    if rows.is_empty() {
        return Err(Error::Csv { line: 1, msg: "file has no data rows".into() });
    }

    let design = if rows.iter().any(|r| r.cluster.is_some()) {
        DesignTag::TwoStageCluster
    } else if rows.iter().any(|r| r.stratum.is_some()) {
        DesignTag::Stratified
    } else {
        DesignTag::SystematicPps
    };
    let n = rows.len() as f64;
    let population_size: f64 = rows.iter().map(|r| 1.0 / r.pi).sum();
    Ok(SurveySample { rows, population_size, design, expected_n: n })
}

/// Serialize a sample using the same schema accepted by [`load_sample_csv`]
/// (`z`, `weight`, and any labels present).
pub fn save_sample_csv<P: AsRef<Path>>(sample: &SurveySample, path: P) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    let has_stratum = sample.rows.iter().any(|r| r.stratum.is_some());
    let has_cluster = sample.rows.iter().any(|r| r.cluster.is_some());
    let mut header = vec!["z".to_string(), "weight".to_string()];
    if has_stratum {
        header.push("stratum".into());
    }
    if has_cluster {
        header.push("cluster".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in &sample.rows {
        let mut rec = vec![format!("{:?}", r.z), format!("{:?}", 1.0 / r.pi)];
        if has_stratum {
            rec.push(r.stratum.map(|s| s.to_string()).unwrap_or_default());
        }
        if has_cluster {
            rec.push(r.cluster.map(|c| c.to_string()).unwrap_or_default());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    Error::Csv { line, msg: e.to_string() }
}
