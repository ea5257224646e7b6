//! On-disk formats: the binary dataset file, CSV exports and matrix CSVs.
//!
//! A dataset file is one ASCII header line
//!
//! ```text
//! QGTDATA v1 N=<n> M=<m> K=<k> S=<s> D=<d> seed=<u64> count=<c>
//! ```
//!
//! followed by `count` fixed-width records: the signal `x` as `N` bytes,
//! then the measurement `y` as `M` little-endian `i32`. The pooling matrix is
//! not stored; it is regenerated from the header's configuration.

use std::fmt::Display;
use std::io::{BufRead, Write};
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{QgtError, Result};
use crate::generate::{pooling_for, Dataset, GenConfig, PoolingMatrix, Split};

const MAGIC: &str = "QGTDATA";
const VERSION: &str = "v1";

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(QgtError::Format(msg.into()))
}

pub fn dataset_header(cfg: &GenConfig, count: usize) -> String {
    format!(
        "{MAGIC} {VERSION} N={} M={} K={} S={} D={} seed={} count={count}",
        cfg.n, cfg.m, cfg.k, cfg.s, cfg.d, cfg.seed
    )
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    writeln!(out, "{}", dataset_header(&ds.gen_config, ds.len()))?;
    let mut record = Vec::with_capacity(ds.gen_config.n + 4 * ds.gen_config.m);
    for (x, y) in ds.signals.rows().into_iter().zip(ds.measurements.rows()) {
        record.clear();
        record.extend(x.iter());
        for v in y {
            record.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&record)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_header(line: &str) -> Result<(GenConfig, usize)> {
    let mut parts = line.split_ascii_whitespace();
    if parts.next() != Some(MAGIC) {
        return format_err("missing QGTDATA magic");
    }
    match parts.next() {
        Some(VERSION) => {}
        other => return format_err(format!("unsupported dataset version {other:?}")),
    }
    let mut fields = std::collections::HashMap::new();
    for part in parts {
        let (key, value) = part.split_once('=').ok_or_else(|| QgtError::Format(format!("bad header field `{part}`")))?;
        fields.insert(key, value);
    }
    fn get<T: std::str::FromStr>(fields: &std::collections::HashMap<&str, &str>, key: &str) -> Result<T> {
        let raw = fields.get(key).ok_or_else(|| QgtError::Format(format!("header lacks `{key}`")))?;
        raw.parse().map_err(|_| QgtError::Format(format!("cannot parse header field `{key}={raw}`")))
    }
    let cfg = GenConfig {
        n: get(&fields, "N")?,
        m: get(&fields, "M")?,
        k: get(&fields, "K")?,
        s: get(&fields, "S")?,
        d: get(&fields, "D")?,
        seed: get(&fields, "seed")?,
    };
    Ok((cfg, get(&fields, "count")?))
}

/// Reads a dataset file written by [`write_dataset`].
///
/// Each record is checked against the regenerated pooling matrix: the
/// residual `y - A x` must lie within the noise bound.
pub fn read_dataset<R: BufRead>(mut input: R, split: Split) -> Result<Dataset> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let (cfg, count) = parse_header(line.trim_end_matches(['\n', '\r']))?;
    cfg.validate().map_err(|e| QgtError::Format(format!("header config invalid: {e}")))?;
    let pooling = Arc::new(pooling_for(&cfg)?);
    let (n, m) = (cfg.n, cfg.m);
    let mut signals = Array2::<u8>::zeros((count, n));
    let mut measurements = Array2::<i32>::zeros((count, m));
    let mut record = vec![0u8; n + 4 * m];
    for i in 0..count {
        input
            .read_exact(&mut record)
            .map_err(|e| QgtError::Format(format!("record {i} truncated: {e}")))?;
        let (xs, ys) = record.split_at(n);
        if xs.iter().any(|&b| b > 1) {
            return format_err(format!("record {i} has a non-binary signal entry"));
        }
        signals.row_mut(i).assign(&ndarray::ArrayView1::from(xs));
        for (slot, chunk) in measurements.row_mut(i).iter_mut().zip(ys.chunks_exact(4)) {
            *slot = i32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return format_err("trailing bytes after the last record");
    }
    let ds = Dataset { pooling, measurements, signals, split, gen_config: cfg };
    let residual = &ds.measurements - &ds.noiseless_measurements();
    if let Some(pos) = residual.iter().position(|r| r.abs() > cfg.d) {
        return format_err(format!(
            "record {} is inconsistent with the pooling matrix for seed {}",
            pos / m,
            cfg.seed
        ));
    }
    Ok(ds)
}

/// One row per sample: `y_0..y_{M-1}, x_0..x_{N-1}`.
pub fn dataset_csv(ds: &Dataset) -> String {
    let (n, m) = (ds.gen_config.n, ds.gen_config.m);
    let header: Vec<String> = (0..m).map(|i| format!("y_{i}")).chain((0..n).map(|j| format!("x_{j}"))).collect();
    let mut out = header.join(",");
    out.push('\n');
    for (x, y) in ds.signals.rows().into_iter().zip(ds.measurements.rows()) {
        let row: Vec<String> = y.iter().map(i32::to_string).chain(x.iter().map(u8::to_string)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Headerless CSV, one matrix row per line.
pub fn matrix_csv<T: Display>(a: &Array2<T>) -> String {
    let mut out = String::new();
    for row in a.rows() {
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv<T: std::str::FromStr>(text: &str) -> Result<Array2<T>> {
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<T>().map_err(|_| QgtError::Format(format!("line {}: bad cell `{c}`", i + 1))))
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return format_err("ragged matrix CSV");
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, cols), rows.into_iter().flatten().collect())
        .map_err(|e| QgtError::Format(e.to_string()))
}

pub fn read_pooling_csv(text: &str) -> Result<PoolingMatrix> {
    PoolingMatrix::from_entries(parse_matrix_csv::<u8>(text)?)
}
