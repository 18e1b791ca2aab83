//! Long-format CSV ingestion.
//!
//! Expected schema: `timestamp,node_id,value` with ISO-8601 timestamps.
//! Rows may arrive grouped by node or interleaved; within each node the
//! timestamps must be strictly increasing. The time axis is the union of
//! all timestamps, and any (node, time) pair without a reading becomes NaN
//! for the cleaning stage. Empty or literal `NaN` values are also missing.

use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDateTime;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

use super::RawSeries;

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    None
}

pub fn read_csv_series(path: &Path) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CoreError::Data(format!("opening {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| CoreError::Data(format!("reading header of {}: {e}", path.display())))?
        .clone();
    let expected = ["timestamp", "node_id", "value"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(CoreError::Data(format!(
            "{} has header {:?}, expected {:?}",
            path.display(),
            got,
            expected
        )));
    }

    // node order is first appearance; per node, keep (time, value) pairs.
    let mut node_order: Vec<String> = Vec::new();
    let mut node_rows: HashMap<String, Vec<(NaiveDateTime, f64)>> = HashMap::new();
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record =
            record.map_err(|e| CoreError::Data(format!("{} line {line}: {e}", path.display())))?;
        if record.len() != 3 {
            return Err(CoreError::Data(format!(
                "{} line {line}: expected 3 fields, got {}",
                path.display(),
                record.len()
            )));
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| {
            CoreError::Data(format!(
                "{} line {line}: unparseable timestamp '{}'",
                path.display(),
                &record[0]
            ))
        })?;
        let node = record[1].to_string();
        if node.is_empty() {
            return Err(CoreError::Data(format!(
                "{} line {line}: empty node_id",
                path.display()
            )));
        }
        let raw_value = record[2].trim();
        let value = if raw_value.is_empty() || raw_value.eq_ignore_ascii_case("nan") {
            f64::NAN
        } else {
            raw_value.parse::<f64>().map_err(|_| {
                CoreError::Data(format!(
                    "{} line {line}: unparseable value '{raw_value}'",
                    path.display()
                ))
            })?
        };
        let rows = node_rows.entry(node.clone()).or_insert_with(|| {
            node_order.push(node.clone());
            Vec::new()
        });
        if let Some((prev, _)) = rows.last() {
            if ts <= *prev {
                return Err(CoreError::Data(format!(
                    "{} line {line}: timestamp {ts} for node '{node}' is not strictly increasing (previous {prev})",
                    path.display()
                )));
            }
        }
        rows.push((ts, value));
        timestamps.push(ts);
    }

    timestamps.sort();
    timestamps.dedup();
    if timestamps.len() < 2 {
        return Err(CoreError::Data(format!(
            "{} has {} distinct timestamps; need at least 2 to infer an interval",
            path.display(),
            timestamps.len()
        )));
    }

    // Modal gap between consecutive axis points, in minutes.
    let mut gap_counts: HashMap<i64, usize> = HashMap::new();
    for pair in timestamps.windows(2) {
        let mins = (pair[1] - pair[0]).num_minutes();
        *gap_counts.entry(mins).or_insert(0) += 1;
    }
    let interval = gap_counts
        .iter()
        .max_by_key(|(gap, count)| (**count, -**gap))
        .map(|(gap, _)| *gap)
        .unwrap_or(0);
    if interval <= 0 {
        return Err(CoreError::Data(format!(
            "{} has sub-minute or zero modal interval",
            path.display()
        )));
    }

    let index: HashMap<NaiveDateTime, usize> = timestamps
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i))
        .collect();
    let (t_len, n) = (timestamps.len(), node_order.len());
    let mut values = Tensor::filled(&[t_len, n, 1], f64::NAN);
    for (ni, node) in node_order.iter().enumerate() {
        for &(ts, v) in &node_rows[node] {
            values.data[index[&ts] * n + ni] = v;
        }
    }
    RawSeries::new(values, interval as u32, node_order)
}
