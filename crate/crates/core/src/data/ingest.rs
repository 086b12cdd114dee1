//! CSV ingestion and preprocessing onto a uniform 5-minute grid.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::{DomainDataset, STEP_SECONDS};
use crate::autodiff::Tensor;
use crate::error::RowError;
use crate::{Error, Result};

/// Sensor kinds recognised by default. A column `<kind>_<device>` (or exactly
/// `<kind>`) is grouped under the longest matching kind; other columns form
/// a kind of their own.
pub const DEFAULT_KINDS: &[&str] = &[
    "outdoor_temperature",
    "outdoor_humidity",
    "indoor_temperature",
    "indoor_humidity",
    "indoor_light",
    "indoor_co2",
    "indoor_tvoc",
    "indoor_pressure",
    "indoor_pm25",
    "occupancy",
];

/// Column layout of an input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub timestamp: String,
    pub target: String,
    pub kinds: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            target: "energy".into(),
            kinds: DEFAULT_KINDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Schema {
    fn kind_of(&self, column: &str) -> String {
        self.kinds
            .iter()
            .filter(|k| column == k.as_str() || column.starts_with(&format!("{k}_")))
            .max_by_key(|k| k.len())
            .cloned()
            .unwrap_or_else(|| column.to_string())
    }
}

/// Device columns sharing one sensor kind. `values[m][i]` is member `m` at
/// row `i`; missing readings are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGroup {
    pub kind: String,
    pub members: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Parsed, not yet aligned multi-device series.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<i64>,
    pub groups: Vec<SensorGroup>,
    /// Target per row; NaN where missing.
    pub target: Vec<f64>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Parses an ISO-8601 timestamp (offset or naive; naive values are read as
/// UTC) to unix seconds.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    None
}

pub fn format_timestamp(t: i64) -> String {
    DateTime::from_timestamp(t, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%S").to_string())
        .unwrap_or_else(|| t.to_string())
}

pub fn ingest_csv(path: &Path, schema: &Schema) -> Result<RawSeries> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, schema)
}

/// Reads `timestamp,<sensor>_<device>,...,<target>` rows. Empty cells are
/// missing readings; every unparseable row is reported with its line.
pub fn ingest_reader<R: Read>(reader: R, schema: &Schema) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = find(&schema.timestamp)
        .ok_or_else(|| Error::Schema(format!("missing timestamp column {:?}", schema.timestamp)))?;
    let y_col = find(&schema.target)
        .ok_or_else(|| Error::Schema(format!("missing target column {:?}", schema.target)))?;

    let mut by_kind: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
    let mut kind_order = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == ts_col || i == y_col {
            continue;
        }
        let kind = schema.kind_of(h);
        if !by_kind.contains_key(&kind) {
            kind_order.push(kind.clone());
        }
        by_kind.entry(kind).or_default().push((h.to_string(), i));
    }
    if by_kind.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut timestamps = Vec::new();
    let mut target = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    let mut errors = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let Some(t) = rec.get(ts_col).and_then(parse_timestamp) else {
            errors.push(RowError {
                line,
                message: format!("malformed timestamp {:?}", rec.get(ts_col).unwrap_or("")),
            });
            continue;
        };
        let mut row = Vec::with_capacity(headers.len());
        let mut bad = None;
        for (i, cell) in rec.iter().enumerate() {
            if i == ts_col {
                row.push(0.0);
            } else if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                row.push(f64::NAN);
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(v),
                    _ => {
                        bad = Some(format!("column {:?}: unparseable value {cell:?}", &headers[i]));
                        break;
                    }
                }
            }
        }
        if let Some(message) = bad {
            errors.push(RowError { line, message });
            continue;
        }
        if row.len() != headers.len() {
            errors.push(RowError {
                line,
                message: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
            continue;
        }
        timestamps.push(t);
        target.push(row[y_col]);
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    if !errors.is_empty() {
        return Err(Error::Parse(errors));
    }
    let groups = kind_order
        .into_iter()
        .map(|kind| {
            let members = by_kind.remove(&kind).expect("kind recorded");
            SensorGroup {
                kind,
                values: members.iter().map(|(_, i)| std::mem::take(&mut cols[*i])).collect(),
                members: members.into_iter().map(|(n, _)| n).collect(),
            }
        })
        .collect();
    Ok(RawSeries {
        timestamps,
        groups,
        target,
    })
}

/// Work-hours calendar for the `is_work` feature: the given weekdays
/// (0 = Monday), hours `start_hour <= h < end_hour`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkCalendar {
    pub weekdays: Vec<u32>,
    pub start_hour: u32,
    pub end_hour: u32,
}

impl Default for WorkCalendar {
    fn default() -> Self {
        Self {
            weekdays: vec![0, 1, 2, 3, 4],
            start_hour: 9,
            end_hour: 18,
        }
    }
}

impl WorkCalendar {
    pub fn is_work(&self, t: i64) -> bool {
        let Some(dt) = DateTime::from_timestamp(t, 0) else {
            return false;
        };
        let wd = dt.weekday().num_days_from_monday();
        let h = dt.hour();
        self.weekdays.contains(&wd) && h >= self.start_hour && h < self.end_hour
    }
}

/// Alignment and gap handling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapPolicy {
    pub step_seconds: i64,
    /// Longest run of missing grid points filled by linear interpolation.
    pub max_gap_steps: usize,
    /// Segments shorter than this are dropped (use `w + 1`).
    pub min_segment_len: usize,
    pub calendar: WorkCalendar,
    /// Name of the appended calendar column.
    pub work_column: String,
}

impl Default for GapPolicy {
    fn default() -> Self {
        Self {
            step_seconds: STEP_SECONDS,
            max_gap_steps: 3,
            min_segment_len: super::DEFAULT_WINDOW + 1,
            calendar: WorkCalendar::default(),
            work_column: "is_work".into(),
        }
    }
}

/// Aligns to the grid, collapses device columns to per-kind means, fills
/// short gaps linearly, splits at long gaps, drops short segments and
/// appends the `is_work` indicator.
pub fn preprocess(raw: &RawSeries, id: &str, policy: &GapPolicy) -> Result<DomainDataset> {
    if raw.is_empty() {
        return Err(Error::Integrity(format!("domain {id}: no rows")));
    }
    let step = policy.step_seconds;
    if step <= 0 {
        return Err(Error::Config("step_seconds must be positive".into()));
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by_key(|&i| raw.timestamps[i]);
    let t0 = raw.timestamps[order[0]];
    let t_last = raw.timestamps[*order.last().expect("non-empty")];
    let n_grid = ((t_last - t0 + step / 2) / step) as usize + 1;

    // Per-kind means on the grid; NaN where nothing was observed.
    let k = raw.groups.len();
    let mut grid = vec![vec![f64::NAN; n_grid]; k + 1];
    let mut filled = vec![false; n_grid];
    for &i in &order {
        let slot = ((raw.timestamps[i] - t0 + step / 2).div_euclid(step)) as usize;
        if filled[slot] {
            continue;
        }
        filled[slot] = true;
        for (g, group) in raw.groups.iter().enumerate() {
            let obs: Vec<f64> = group.values.iter().map(|v| v[i]).filter(|v| !v.is_nan()).collect();
            if !obs.is_empty() {
                grid[g][slot] = obs.iter().sum::<f64>() / obs.len() as f64;
            }
        }
        grid[k][slot] = raw.target[i];
    }
    for col in &mut grid {
        fill_short_gaps(col, policy.max_gap_steps);
    }

    let complete: Vec<bool> = (0..n_grid).map(|s| grid.iter().all(|c| !c[s].is_nan())).collect();
    let mut keep = Vec::new();
    let mut s = 0;
    while s < n_grid {
        if !complete[s] {
            s += 1;
            continue;
        }
        let start = s;
        while s < n_grid && complete[s] {
            s += 1;
        }
        if s - start >= policy.min_segment_len.max(1) {
            keep.extend(start..s);
        }
    }
    if keep.is_empty() {
        return Err(Error::Integrity(format!(
            "domain {id}: no segment of at least {} complete steps",
            policy.min_segment_len
        )));
    }

    let mut names: Vec<String> = raw.groups.iter().map(|g| g.kind.clone()).collect();
    names.push(policy.work_column.clone());
    let p = names.len();
    let mut x = Vec::with_capacity(keep.len() * p);
    let mut y = Vec::with_capacity(keep.len());
    let mut ts = Vec::with_capacity(keep.len());
    for &s in &keep {
        let t = t0 + s as i64 * step;
        for col in grid.iter().take(k) {
            x.push(col[s]);
        }
        x.push(if policy.calendar.is_work(t) { 1.0 } else { 0.0 });
        y.push(grid[k][s]);
        ts.push(t);
    }
    if y.iter().any(|&v| v < 0.0) {
        log::warn!("domain {id}: negative target values present");
    }
    DomainDataset::new(id, ts, step, names, Tensor::matrix(keep.len(), p, x), y)
}

/// Linear interpolation across interior NaN runs of length `<= max_gap`.
fn fill_short_gaps(col: &mut [f64], max_gap: usize) {
    let n = col.len();
    let mut i = 0;
    while i < n {
        if !col[i].is_nan() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && col[i].is_nan() {
            i += 1;
        }
        let len = i - start;
        if start == 0 || i == n || len > max_gap {
            continue;
        }
        let (a, b) = (col[start - 1], col[i]);
        for (k, v) in col[start..i].iter_mut().enumerate() {
            let frac = (k + 1) as f64 / (len + 1) as f64;
            *v = a + (b - a) * frac;
        }
    }
}
