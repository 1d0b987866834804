//! Long-format CSV pools: one row per visit, grouped into clusters.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClusterObservation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSchema {
    pub cluster_column: String,
    pub order_column: String,
    pub response_column: String,
    pub covariate_columns: Vec<String>,
    #[serde(default)]
    pub standardize: bool,
    /// Prepend a column of ones after standardization.
    #[serde(default)]
    pub intercept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct LoadedPool {
    pub clusters: Vec<ClusterObservation>,
    /// Cluster keys as they appear in the file, indexed by cluster id.
    pub labels: Vec<String>,
    pub covariate_names: Vec<String>,
    pub scaling: Vec<ColumnScaling>,
}

struct Row {
    order: f64,
    y: f64,
    x: Vec<f64>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("column '{name}' not found in header")))
}

fn number(record: &csv::StringRecord, idx: usize, name: &str, row: usize) -> Result<f64> {
    let cell = record.get(idx).unwrap_or("").trim();
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Data(format!("row {row}, column '{name}': '{cell}' is not a number")))
}

pub fn load_csv_pool(path: &Path, schema: &PoolSchema) -> Result<LoadedPool> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv_pool(f, schema)
}

pub fn read_csv_pool<R: Read>(reader: R, schema: &PoolSchema) -> Result<LoadedPool> {
    if schema.covariate_columns.is_empty() {
        return Err(Error::Data("schema lists no covariate columns".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let c_idx = column(&headers, &schema.cluster_column)?;
    let o_idx = column(&headers, &schema.order_column)?;
    let y_idx = column(&headers, &schema.response_column)?;
    let x_idx: Vec<usize> = schema.covariate_columns.iter().map(|c| column(&headers, c)).collect::<Result<_>>()?;

    let mut labels: Vec<String> = Vec::new();
    let mut position: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<Vec<Row>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let row = i + 2;
        let key = rec.get(c_idx).unwrap_or("").to_string();
        if key.is_empty() {
            return Err(Error::Data(format!("row {row}, column '{}': missing cluster id", schema.cluster_column)));
        }
        let order = number(&rec, o_idx, &schema.order_column, row)?;
        let y = number(&rec, y_idx, &schema.response_column, row)?;
        let x = x_idx
            .iter()
            .zip(&schema.covariate_columns)
            .map(|(&j, name)| number(&rec, j, name, row))
            .collect::<Result<Vec<_>>>()?;
        let g = *position.entry(key.clone()).or_insert_with(|| {
            labels.push(key);
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(Row { order, y, x });
    }
    if groups.is_empty() {
        return Err(Error::Data("file contains no data rows".into()));
    }

    let mut counts: HashMap<usize, usize> = HashMap::new();
    for g in &groups {
        *counts.entry(g.len()).or_default() += 1;
    }
    if counts.len() > 1 {
        let (&m, _) = counts.iter().max_by_key(|(&size, &n)| (n, std::cmp::Reverse(size))).unwrap();
        let ragged: Vec<String> = groups
            .iter()
            .zip(&labels)
            .filter(|(g, _)| g.len() != m)
            .map(|(g, l)| format!("{l} ({} rows)", g.len()))
            .collect();
        return Err(Error::Data(format!("clusters must all have {m} rows; ragged clusters: {}", ragged.join(", "))));
    }

    for g in groups.iter_mut() {
        g.sort_by(|a, b| a.order.total_cmp(&b.order));
    }

    let q = schema.covariate_columns.len();
    let mut scaling = Vec::new();
    if schema.standardize {
        let n = groups.iter().map(|g| g.len()).sum::<usize>() as f64;
        if n < 2.0 {
            return Err(Error::Data("standardizing needs at least two rows".into()));
        }
        for j in 0..q {
            let mean = groups.iter().flatten().map(|r| r.x[j]).sum::<f64>() / n;
            let var = groups.iter().flatten().map(|r| (r.x[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if !(sd > 0.0) {
                return Err(Error::Data(format!("column '{}' is constant and cannot be standardized", schema.covariate_columns[j])));
            }
            for r in groups.iter_mut().flatten() {
                r.x[j] = (r.x[j] - mean) / sd;
            }
            scaling.push(ColumnScaling { column: schema.covariate_columns[j].clone(), mean, sd });
        }
    }

    let offset = usize::from(schema.intercept);
    let mut names = Vec::with_capacity(q + offset);
    if schema.intercept {
        names.push("(intercept)".to_string());
    }
    names.extend(schema.covariate_columns.iter().cloned());

    let clusters = groups
        .iter()
        .enumerate()
        .map(|(id, g)| {
            let y = DVector::from_iterator(g.len(), g.iter().map(|r| r.y));
            let x = DMatrix::from_fn(g.len(), q + offset, |i, j| {
                if j < offset {
                    1.0
                } else {
                    g[i].x[j - offset]
                }
            });
            ClusterObservation::new(id as u64, y, x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedPool { clusters, labels, covariate_names: names, scaling })
}
