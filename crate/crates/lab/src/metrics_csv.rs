//! Metrics tables as CSV. The header is exactly [`METRICS_COLUMNS`]; absent
//! values are empty cells; floats use Rust's `Debug` form, the shortest
//! text that parses back to the same bits.

use std::path::Path;

use pmr_core::train::{MetricsRow, Scope, METRICS_COLUMNS};

use crate::error::{LabError, Result};
use crate::fsutil::write_atomic;

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn to_csv(rows: &[MetricsRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_COLUMNS).expect("in-memory write");
    for r in rows {
        let mut rec = vec![r.scope.as_str().to_string(), r.epoch.to_string(), r.step.to_string()];
        rec.extend(r.values().into_iter().map(cell));
        w.write_record(&rec).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn from_csv(bytes: &[u8]) -> std::result::Result<Vec<MetricsRow>, String> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(METRICS_COLUMNS) {
        return Err("header does not match the metrics schema".into());
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let at = |what: String| format!("row {}: {what}", line + 1);
        let scope: Scope = rec[0].parse().map_err(|e: pmr_core::Error| at(e.to_string()))?;
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| at(format!("{}: {e}", METRICS_COLUMNS[i])));
        let (epoch, step) = (int(1)?, int(2)?);
        let mut values = [None; 20];
        for (k, slot) in values.iter_mut().enumerate() {
            let s = &rec[k + 3];
            if !s.is_empty() {
                *slot = Some(
                    s.parse::<f64>()
                        .map_err(|e| at(format!("{}: {e}", METRICS_COLUMNS[k + 3])))?,
                );
            }
        }
        rows.push(MetricsRow::from_values(scope, epoch, step, values).map_err(|e| at(e.to_string()))?);
    }
    Ok(rows)
}

pub fn write(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, &to_csv(rows))
}

pub fn read(path: &Path) -> Result<Vec<MetricsRow>> {
    let bytes = std::fs::read(path).map_err(LabError::io(path))?;
    from_csv(&bytes).map_err(|m| LabError::format(path, m))
}
