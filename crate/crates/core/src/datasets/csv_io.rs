use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Labels, Snapshot, TaskKind, TemporalDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// How raw time values are grouped into snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DomainBinning {
    /// One snapshot per distinct time value, stamped with that value.
    Distinct,
    /// Buckets `[e_i, e_{i+1})`; the last bucket is closed on the right.
    Edges { edges: Vec<f64> },
    /// `bins` equal-width buckets spanning the observed time range.
    EqualWidth { bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default = "default_time")]
    pub time_column: String,
    #[serde(default = "default_target")]
    pub target_column: String,
    pub task: TaskKind,
    pub binning: DomainBinning,
}

fn default_time() -> String {
    "t".into()
}
fn default_target() -> String {
    "y".into()
}

impl CsvSchema {
    pub fn new(task: TaskKind, binning: DomainBinning) -> Self {
        Self {
            time_column: default_time(),
            target_column: default_target(),
            task,
            binning,
        }
    }
}

/// Writes `t,x0,...,x{d-1},y` with snapshots in time order.
///
/// Values use the shortest representation that parses back to the same
/// `f64`, so export followed by load is lossless.
pub fn write_temporal_csv(ds: &TemporalDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io_error(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("x{j}")));
    header.push("y".into());
    w.write_record(&header)?;
    for s in ds.snapshots() {
        for r in 0..s.len() {
            let mut rec = Vec::with_capacity(ds.dim() + 2);
            rec.push(s.time.to_string());
            rec.extend(s.x.row_slice(r).iter().map(f64::to_string));
            rec.push(match &s.y {
                Labels::Class(v) => v[r].to_string(),
                Labels::Real(v) => v[r].to_string(),
            });
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Csv(e)
    }
}

struct Row {
    line: usize,
    t: f64,
    x: Vec<f64>,
    y: f64,
}

fn parse_cell(cell: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Data {
        row: line,
        detail: format!("column `{column}` holds non-numeric value `{cell}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Data {
            row: line,
            detail: format!("column `{column}` holds non-finite value `{cell}`"),
        });
    }
    Ok(v)
}

/// Loads a CSV with a header row into a [`TemporalDataset`]. Every column
/// other than the time and target columns is a feature, in file order.
///
/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn load_temporal_csv(path: &Path, schema: &CsvSchema) -> Result<TemporalDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io_error(path, e))?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let t_col = find(&schema.time_column)?;
    let y_col = find(&schema.target_column)?;
    let features: Vec<usize> = (0..headers.len())
        .filter(|&c| c != t_col && c != y_col)
        .collect();

    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let cell = |c: usize| parse_cell(&rec[c], line, &headers[c]);
        let t = cell(t_col)?;
        let y = cell(y_col)?;
        if schema.task == TaskKind::Classification && (y < 0.0 || y.fract() != 0.0) {
            return Err(Error::Data {
                row: line,
                detail: format!(
                    "class label `{}` is not a non-negative integer",
                    &rec[y_col]
                ),
            });
        }
        let x = features
            .iter()
            .map(|&c| cell(c))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row { line, t, x, y });
    }
    if rows.is_empty() {
        return Err(Error::Data {
            row: 1,
            detail: "no data rows after the header".into(),
        });
    }

    let buckets = bucketize(&rows, &schema.binning)?;
    let d = features.len();
    let snapshots = buckets
        .into_iter()
        .map(|(stamp, members)| {
            let x = Tensor::new(
                members.len(),
                d,
                members.iter().flat_map(|r| r.x.iter().copied()).collect(),
            )?;
            let y = match schema.task {
                TaskKind::Classification => {
                    Labels::Class(members.iter().map(|r| r.y as usize).collect())
                }
                TaskKind::Regression => Labels::Real(members.iter().map(|r| r.y).collect()),
            };
            Snapshot::new(stamp, x, y)
        })
        .collect::<Result<Vec<_>>>()?;
    TemporalDataset::new(snapshots)
}

/// Groups rows by bucket, preserving file order within a bucket.
fn bucketize<'a>(rows: &'a [Row], binning: &DomainBinning) -> Result<Vec<(f64, Vec<&'a Row>)>> {
    match binning {
        DomainBinning::Distinct => {
            let mut map: BTreeMap<u64, (f64, Vec<&Row>)> = BTreeMap::new();
            for r in rows {
                map.entry(order_key(r.t))
                    .or_insert((r.t, Vec::new()))
                    .1
                    .push(r);
            }
            Ok(map.into_values().collect())
        }
        DomainBinning::Edges { edges } => bin_by_edges(rows, edges),
        DomainBinning::EqualWidth { bins } => {
            if *bins == 0 {
                return Err(Error::Config(
                    "equal-width binning needs at least 1 bin".into(),
                ));
            }
            let lo = rows.iter().map(|r| r.t).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max);
            let width = if hi > lo {
                (hi - lo) / *bins as f64
            } else {
                1.0
            };
            let edges: Vec<f64> = (0..=*bins)
                .map(|i| {
                    if i == *bins {
                        hi.max(lo + width)
                    } else {
                        lo + width * i as f64
                    }
                })
                .collect();
            bin_by_edges(rows, &edges)
        }
    }
}

fn bin_by_edges<'a>(rows: &'a [Row], edges: &[f64]) -> Result<Vec<(f64, Vec<&'a Row>)>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config(
            "bin edges need at least two strictly increasing values".into(),
        ));
    }
    let last = edges.len() - 2;
    let mut buckets: Vec<Vec<&Row>> = vec![Vec::new(); edges.len() - 1];
    for r in rows {
        if r.t < edges[0] || r.t > edges[last + 1] {
            return Err(Error::Data {
                row: r.line,
                detail: format!(
                    "time {} falls outside bin edges [{}, {}]",
                    r.t,
                    edges[0],
                    edges[last + 1]
                ),
            });
        }
        let k = edges.partition_point(|&e| e <= r.t);
        buckets[(k - 1).min(last)].push(r);
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(b, members)| {
            if members.is_empty() {
                return Err(Error::Data {
                    row: 0,
                    detail: format!("bucket {b} [{}, {}) is empty", edges[b], edges[b + 1]),
                });
            }
            Ok((0.5 * (edges[b] + edges[b + 1]), members))
        })
        .collect()
}

/// Monotone map from finite `f64` to `u64` for ordering.
fn order_key(v: f64) -> u64 {
    let bits = (v + 0.0).to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}
