//! Run outputs: the phasor-rate time series, the event log, stage timings,
//! optional raw waveforms, and the comparison of two recorded runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimulationResult {
    /// Column names; `time_s` first, `stage` last.
    pub columns: Vec<String>,
    /// One row per phasor step; quantities a mode cannot observe are NaN.
    pub rows: Vec<Vec<f64>>,
    /// Event lines, already formatted, in emission order.
    pub events: Vec<String>,
    /// Wall-clock seconds per stage plus `total`.
    pub timings: Vec<(String, f64)>,
    /// Raw point-on-wave samples, when capture was requested.
    pub waveforms: Option<WaveformDump>,
}

/// Contiguous point-on-wave samples at the monitored detailed buses.
#[derive(Debug, Clone)]
pub struct WaveformDump {
    /// Sample spacing, s.
    pub dt: f64,
    /// Time of the first stored sample, s.
    pub t0: f64,
    pub columns: Vec<String>,
    pub samples: Vec<Vec<f64>>,
}

/// Numbers are written with enough digits to round-trip `f64` exactly, so
/// a written run compares bit-for-bit with the in-memory one.
fn push_num(out: &mut String, x: f64) {
    if x.is_nan() {
        out.push_str("nan");
    } else {
        let _ = write!(out, "{x:.16e}");
    }
}

impl SimulationResult {
    pub fn timeseries_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            for (k, x) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                push_num(&mut out, *x);
            }
            out.push('\n');
        }
        out
    }

    pub fn events_text(&self) -> String {
        let mut out = self.events.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }

    pub fn timing_text(&self) -> String {
        let mut out = String::new();
        for (label, secs) in &self.timings {
            let _ = writeln!(out, "{label} {secs:.6}");
        }
        out
    }

    /// Write `timeseries.csv`, `events.log`, `timing.txt`, and — when
    /// captured — `waveforms.csv` under `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("timeseries.csv"), self.timeseries_csv())?;
        std::fs::write(dir.join("events.log"), self.events_text())?;
        std::fs::write(dir.join("timing.txt"), self.timing_text())?;
        if let Some(w) = &self.waveforms {
            std::fs::write(dir.join("waveforms.csv"), w.csv())?;
        }
        Ok(())
    }

    pub fn total_seconds(&self) -> f64 {
        self.timings
            .iter()
            .find(|(l, _)| l == "total")
            .map(|(_, s)| *s)
            .unwrap_or(0.0)
    }
}

impl WaveformDump {
    pub fn csv(&self) -> String {
        let mut out = String::from("time_s,");
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for (k, row) in self.samples.iter().enumerate() {
            push_num(&mut out, self.t0 + k as f64 * self.dt);
            for x in row {
                out.push(',');
                push_num(&mut out, *x);
            }
            out.push('\n');
        }
        out
    }
}

/// A time series read back from CSV, for comparisons.
#[derive(Debug, Clone)]
pub struct LoadedSeries {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LoadedSeries {
    pub fn parse(text: &str) -> Result<LoadedSeries> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::case(1, "empty time-series file"))?;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        if columns.first().map(String::as_str) != Some("time_s") {
            return Err(Error::case(1, "first column must be time_s"));
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    if s == "nan" {
                        Ok(f64::NAN)
                    } else {
                        s.parse::<f64>()
                            .map_err(|_| Error::case(k + 2, format!("'{s}' is not a number")))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != columns.len() {
                return Err(Error::case(
                    k + 2,
                    format!(
                        "row has {} values but the header names {} columns",
                        vals.len(),
                        columns.len()
                    ),
                ));
            }
            rows.push(vals);
        }
        Ok(LoadedSeries { columns, rows })
    }

    pub fn load(path: &Path) -> Result<LoadedSeries> {
        LoadedSeries::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_result(r: &SimulationResult) -> LoadedSeries {
        LoadedSeries {
            columns: r.columns.clone(),
            rows: r.rows.clone(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Per-column disagreement between two runs on their shared time grid.
#[derive(Debug, Clone)]
pub struct ColumnDiff {
    pub column: String,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Time at which the largest difference occurred, s.
    pub t_max: f64,
    /// Rows where exactly one side had data.
    pub one_sided: usize,
}

/// Result of comparing two recorded runs.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub diffs: Vec<ColumnDiff>,
    /// Time points present in both runs.
    pub shared_rows: usize,
    /// Columns present in only one run.
    pub unmatched_columns: Vec<String>,
}

impl Comparison {
    /// Largest `max_abs` over the compared columns.
    pub fn worst(&self) -> f64 {
        self.diffs.iter().map(|d| d.max_abs).fold(0.0, f64::max)
    }

    pub fn diff(&self, column: &str) -> Option<&ColumnDiff> {
        self.diffs.iter().find(|d| d.column == column)
    }
}

const TIME_KEY_SCALE: f64 = 1e9;

fn time_key(t: f64) -> i64 {
    (t * TIME_KEY_SCALE).round() as i64
}

/// Compare two runs column by column on the time grid they share. The
/// comparison is symmetric; `time_s` and rows missing on either side are
/// excluded from the numbers.
pub fn compare_series(a: &LoadedSeries, b: &LoadedSeries) -> Comparison {
    use std::collections::BTreeMap;
    let index_b: BTreeMap<i64, usize> = b
        .rows
        .iter()
        .enumerate()
        .map(|(k, row)| (time_key(row[0]), k))
        .collect();
    let pairs: Vec<(usize, usize)> = a
        .rows
        .iter()
        .enumerate()
        .filter_map(|(ka, row)| index_b.get(&time_key(row[0])).map(|kb| (ka, *kb)))
        .collect();

    let mut unmatched: Vec<String> = Vec::new();
    let mut diffs = Vec::new();
    for (ca, name) in a.columns.iter().enumerate() {
        if name == "time_s" {
            continue;
        }
        let Some(cb) = b.column(name) else {
            unmatched.push(name.clone());
            continue;
        };
        let mut max_abs: f64 = 0.0;
        let mut t_max = 0.0;
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut one_sided = 0usize;
        for &(ka, kb) in &pairs {
            let va = a.rows[ka][ca];
            let vb = b.rows[kb][cb];
            match (va.is_nan(), vb.is_nan()) {
                (false, false) => {
                    let d = (va - vb).abs();
                    if d > max_abs {
                        max_abs = d;
                        t_max = a.rows[ka][0];
                    }
                    sum += d;
                    n += 1;
                }
                (true, true) => {}
                _ => one_sided += 1,
            }
        }
        diffs.push(ColumnDiff {
            column: name.clone(),
            max_abs,
            mean_abs: if n > 0 { sum / n as f64 } else { 0.0 },
            t_max,
            one_sided,
        });
    }
    for name in &b.columns {
        if name != "time_s" && a.column(name).is_none() {
            unmatched.push(name.clone());
        }
    }

    Comparison {
        diffs,
        shared_rows: pairs.len(),
        unmatched_columns: unmatched,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result_with(rows: Vec<Vec<f64>>) -> SimulationResult {
        SimulationResult {
            columns: vec!["time_s".into(), "v1_pos_mag".into(), "stage".into()],
            rows,
            events: vec!["t=0.100000000 source=case kind=fault_on target=bus1".into()],
            timings: vec![("stage1".into(), 0.5), ("total".into(), 0.5)],
            waveforms: None,
        }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let r = result_with(vec![
            vec![0.0, 1.0399999999999991, 1.0],
            vec![0.005, f64::NAN, 1.0],
            vec![0.01, 1.0 / 3.0, 2.0],
        ]);
        let text = r.timeseries_csv();
        let back = LoadedSeries::parse(&text).unwrap();
        assert_eq!(back.columns, r.columns);
        for (ra, rb) in r.rows.iter().zip(&back.rows) {
            for (a, b) in ra.iter().zip(rb) {
                if a.is_nan() {
                    assert!(b.is_nan());
                } else {
                    assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn comparison_is_symmetric_and_aligns_on_time() {
        let a = LoadedSeries::from_result(&result_with(vec![
            vec![0.0, 1.00, 1.0],
            vec![0.005, 1.01, 1.0],
            vec![0.010, 1.02, 1.0],
        ]));
        // Second run starts later: only the shared grid is compared.
        let b = LoadedSeries::from_result(&result_with(vec![
            vec![0.005, 1.02, 1.0],
            vec![0.010, 1.04, 1.0],
            vec![0.015, 1.06, 1.0],
        ]));
        let ab = compare_series(&a, &b);
        let ba = compare_series(&b, &a);
        assert_eq!(ab.shared_rows, 2);
        let d = ab.diff("v1_pos_mag").unwrap();
        assert!((d.max_abs - 0.02).abs() < 1e-15);
        assert!((d.mean_abs - 0.015).abs() < 1e-15);
        assert_eq!(d.t_max, 0.010);
        let e = ba.diff("v1_pos_mag").unwrap();
        assert_eq!(d.max_abs, e.max_abs);
        assert_eq!(d.mean_abs, e.mean_abs);
    }

    #[test]
    fn nan_pairs_are_skipped_and_one_sided_counted() {
        let a = LoadedSeries::from_result(&result_with(vec![
            vec![0.0, f64::NAN, 1.0],
            vec![0.005, 1.0, 1.0],
        ]));
        let b = LoadedSeries::from_result(&result_with(vec![
            vec![0.0, 0.9, 1.0],
            vec![0.005, 1.0, 1.0],
        ]));
        let cmp = compare_series(&a, &b);
        let d = cmp.diff("v1_pos_mag").unwrap();
        assert_eq!(d.one_sided, 1);
        assert_eq!(d.max_abs, 0.0);
    }

    #[test]
    fn unmatched_columns_are_reported() {
        let a = LoadedSeries {
            columns: vec!["time_s".into(), "x".into()],
            rows: vec![vec![0.0, 1.0]],
        };
        let b = LoadedSeries {
            columns: vec!["time_s".into(), "y".into()],
            rows: vec![vec![0.0, 2.0]],
        };
        let cmp = compare_series(&a, &b);
        assert_eq!(cmp.unmatched_columns, vec!["x".to_string(), "y".to_string()]);
        assert!(cmp.diffs.is_empty());
    }
}
