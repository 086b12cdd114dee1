//! Domain datasets, windowing, per-domain statistics and leave-one-domain-out
//! splits.
//!
//! A [`DomainDataset`] holds the raw (unstandardized) series of one domain on
//! a uniform grid, cut into contiguous segments. Splitting produces
//! [`PreparedDomain`]s: standardized feature matrices plus window indices and
//! the [`DomainStats`] fitted on the fitting portion only.

mod bundle;
mod ingest;
mod synth;

pub use bundle::{
    read_bundle, write_bundle, BundleDomain, BundleManifest, BUNDLE_VERSION, MANIFEST_FILE,
};
pub use ingest::{
    format_timestamp, ingest_csv, ingest_reader, parse_timestamp, preprocess, GapPolicy, RawSeries,
    Schema, SensorGroup, WorkCalendar, DEFAULT_KINDS,
};
pub use synth::{
    domain_id, mb_variance_check, sample_static, synth_scm_generate, Edge, GroundTruth, LinkFn,
    MbVarianceEstimate, NodeKind, NodeSpec, NoiseKind, NoiseSpec, Role, ScmSpec, SynthOutput,
    TargetSpec,
};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::objectives::{self, Difficulty};
use crate::{stats, Error, Result};

/// Default grid step in seconds (5 minutes).
pub const STEP_SECONDS: i64 = 300;
/// Default window length (one hour of 5-minute readings).
pub const DEFAULT_WINDOW: usize = 12;
/// Rows per domain of the default synthetic bundle, before size factors.
pub const DEFAULT_ROWS_PER_DOMAIN: usize = 750;
/// Fraction of each training domain's windows used for fitting.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Leading fraction of a held-out domain used only for calibration.
pub const CALIBRATION_FRACTION: f64 = 0.2;
/// Features with a fitted std below this are centred but not rescaled.
pub const STD_FLOOR: f64 = 1e-12;

/// One domain on a uniform time grid. Rows of different segments are
/// separated by gaps in time; windows never cross a segment boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub id: String,
    /// Unix seconds, strictly increasing, constant step within a segment.
    pub timestamps: Vec<i64>,
    pub step_seconds: i64,
    pub feature_names: Vec<String>,
    /// Raw features, `n x p`.
    pub x: Tensor,
    /// Non-negative target per row.
    pub y: Vec<f64>,
    /// Row ranges of contiguous segments, in order, covering every row.
    pub segments: Vec<Range<usize>>,
}

impl DomainDataset {
    /// Builds a dataset and checks its invariants. Segments are inferred from
    /// breaks in the timestamp step.
    pub fn new(
        id: impl Into<String>,
        timestamps: Vec<i64>,
        step_seconds: i64,
        feature_names: Vec<String>,
        x: Tensor,
        y: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        let n = y.len();
        if n == 0 {
            return Err(Error::Integrity(format!("domain {id}: no rows")));
        }
        if timestamps.len() != n || x.rows() != n {
            return Err(Error::Integrity(format!(
                "domain {id}: {} timestamps, {} feature rows, {n} targets",
                timestamps.len(),
                x.rows()
            )));
        }
        if x.cols() != feature_names.len() {
            return Err(Error::Integrity(format!(
                "domain {id}: {} feature columns but {} names",
                x.cols(),
                feature_names.len()
            )));
        }
        if step_seconds <= 0 {
            return Err(Error::Integrity(format!("domain {id}: step must be positive")));
        }
        if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!("domain {id}: missing or non-finite values")));
        }
        let mut segments = Vec::new();
        let mut start = 0;
        for i in 1..n {
            let dt = timestamps[i] - timestamps[i - 1];
            if dt <= 0 {
                return Err(Error::Integrity(format!(
                    "domain {id}: timestamps not strictly increasing at row {i}"
                )));
            }
            if dt != step_seconds {
                segments.push(start..i);
                start = i;
            }
        }
        segments.push(start..n);
        Ok(Self {
            id,
            timestamps,
            step_seconds,
            feature_names,
            x,
            y,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn p(&self) -> usize {
        self.feature_names.len()
    }

    /// Copy restricted to the named features, in the given order.
    pub fn select_features(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| Error::UnknownVariable(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x: self.x.select_columns(&idx),
            feature_names: names.to_vec(),
            ..self.clone()
        })
    }
}

/// Target row indices `t` of every window `(X[t-w..t], Y[t])` that fits
/// inside a single segment, in chronological order. A segment of length `L`
/// yields `max(0, L - w)` windows.
pub fn make_windows(ds: &DomainDataset, w: usize) -> Vec<usize> {
    assert!(w >= 1, "window length must be >= 1");
    ds.segments
        .iter()
        .flat_map(|seg| (seg.start + w)..seg.end.max(seg.start + w))
        .collect()
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on the given rows of `x`. Near-constant features keep a unit
    /// scale so they are centred without blowing up.
    pub fn fit(x: &Tensor, rows: Range<usize>) -> Self {
        let p = x.cols();
        let mut mean = Vec::with_capacity(p);
        let mut std = Vec::with_capacity(p);
        for j in 0..p {
            let col: Vec<f64> = rows.clone().map(|r| x.get(r, j)).collect();
            mean.push(stats::mean(&col));
            let s = stats::std(&col);
            std.push(if s > STD_FLOOR { s } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let (n, p) = x.dims2();
        let mut out = x.clone();
        for i in 0..n {
            for j in 0..p {
                out.set(i, j, (x.get(i, j) - self.mean[j]) / self.std[j]);
            }
        }
        out
    }
}

/// Descriptive statistics of one domain, fitted on its fitting portion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    /// Scale-encoder input `[mean, std, q1, q3]` of the fitting targets.
    pub scale: [f64; 4],
    pub standardizer: Standardizer,
    /// Difficulty and weight; absent for held-out domains.
    pub difficulty: Option<Difficulty>,
    /// Last row index (inclusive) that the statistics may depend on.
    pub fit_rows_end: usize,
}

/// Scale summary `[mean, std, q1, q3]` of a target sample.
pub fn scale_summary(y: &[f64]) -> [f64; 4] {
    [
        stats::mean(y),
        stats::std(y),
        stats::quantile(y, 0.25),
        stats::quantile(y, 0.75),
    ]
}

/// Fits [`DomainStats`] on the first `n_fit` windows of `targets`. Only rows
/// up to and including the last fitting target are read.
pub fn fit_domain_stats(
    ds: &DomainDataset,
    targets: &[usize],
    n_fit: usize,
    with_difficulty: bool,
) -> Result<DomainStats> {
    if n_fit == 0 {
        return Err(Error::Integrity(format!(
            "domain {}: no windows available for fitting statistics",
            ds.id
        )));
    }
    let fit_targets = &targets[..n_fit];
    let last = *fit_targets.last().expect("non-empty");
    let standardizer = Standardizer::fit(&ds.x, 0..last + 1);
    let y_fit: Vec<f64> = fit_targets.iter().map(|&t| ds.y[t]).collect();
    let scale = scale_summary(&y_fit);
    let difficulty = if with_difficulty {
        let rows: Vec<usize> = (0..=last).collect();
        let xs = standardizer.apply(&ds.x.select_rows(&rows));
        Some(objectives::difficulty(&ds.id, &y_fit, &xs)?)
    } else {
        None
    };
    Ok(DomainStats {
        scale,
        standardizer,
        difficulty,
        fit_rows_end: last,
    })
}

/// A domain ready for training or evaluation: standardized features, raw
/// targets and window index sets.
#[derive(Debug, Clone)]
pub struct PreparedDomain {
    pub id: String,
    pub w: usize,
    pub feature_names: Vec<String>,
    /// Standardized features, `n x p`.
    pub x: Tensor,
    pub y: Vec<f64>,
    pub stats: DomainStats,
    /// Fitting windows (training portion, or calibration for a held-out domain).
    pub fit: Vec<usize>,
    /// Validation windows (training domains) or scored windows (held-out).
    pub eval: Vec<usize>,
}

impl PreparedDomain {
    /// Prepares a training domain: chronological split of its windows into
    /// the first `floor(0.8 n)` for fitting and the rest for validation.
    pub fn training(ds: &DomainDataset, w: usize) -> Result<Self> {
        let windows = make_windows(ds, w);
        let n_fit = (windows.len() as f64 * TRAIN_FRACTION).floor() as usize;
        if n_fit < 2 || n_fit == windows.len() {
            return Err(Error::Integrity(format!(
                "domain {}: {} windows are too few to split",
                ds.id,
                windows.len()
            )));
        }
        let stats = fit_domain_stats(ds, &windows, n_fit, true)?;
        Ok(Self::assemble(ds, w, stats, windows, n_fit))
    }

    /// Prepares a held-out domain. The first 20% of windows calibrate the
    /// feature z-scores and the scale summary and are excluded from scoring.
    /// With `zero_shot_scale`, the scale summary is replaced by the given one.
    pub fn held_out(ds: &DomainDataset, w: usize, zero_shot_scale: Option<[f64; 4]>) -> Result<Self> {
        let windows = make_windows(ds, w);
        let n_cal = ((windows.len() as f64 * CALIBRATION_FRACTION).floor() as usize).max(1);
        if n_cal >= windows.len() {
            return Err(Error::Integrity(format!(
                "domain {}: {} windows are too few to hold out",
                ds.id,
                windows.len()
            )));
        }
        let mut stats = fit_domain_stats(ds, &windows, n_cal, false)?;
        if let Some(s) = zero_shot_scale {
            stats.scale = s;
        }
        Ok(Self::assemble(ds, w, stats, windows, n_cal))
    }

    fn assemble(ds: &DomainDataset, w: usize, stats: DomainStats, windows: Vec<usize>, n_fit: usize) -> Self {
        let x = stats.standardizer.apply(&ds.x);
        let eval = windows[n_fit..].to_vec();
        let mut fit = windows;
        fit.truncate(n_fit);
        Self {
            id: ds.id.clone(),
            w,
            feature_names: ds.feature_names.clone(),
            x,
            y: ds.y.clone(),
            stats,
            fit,
            eval,
        }
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    /// Targets of the given windows.
    pub fn targets(&self, windows: &[usize]) -> Vec<f64> {
        windows.iter().map(|&t| self.y[t]).collect()
    }
}

/// Leave-one-domain-out partition.
#[derive(Debug, Clone)]
pub struct LodoSplit {
    pub train: Vec<PreparedDomain>,
    pub test: PreparedDomain,
}

/// Holds out `test_id`; every other domain is split chronologically into
/// training and validation windows with statistics fitted on its training
/// portion only.
pub fn split_leave_one_out(
    domains: &[DomainDataset],
    test_id: &str,
    w: usize,
    zero_shot: bool,
) -> Result<LodoSplit> {
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-domain-out needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    let test_ds = domains
        .iter()
        .find(|d| d.id == test_id)
        .ok_or_else(|| Error::UnknownDomain(test_id.to_string()))?;
    let train = domains
        .iter()
        .filter(|d| d.id != test_id)
        .map(|d| PreparedDomain::training(d, w))
        .collect::<Result<Vec<_>>>()?;
    let zero_shot_scale = zero_shot.then(|| {
        let mut s = [0.0; 4];
        for d in &train {
            for (acc, v) in s.iter_mut().zip(d.stats.scale) {
                *acc += v / train.len() as f64;
            }
        }
        s
    });
    let test = PreparedDomain::held_out(test_ds, w, zero_shot_scale)?;
    Ok(LodoSplit { train, test })
}

/// Materializes a batch of windows as `w` step matrices (`batch x p`) plus
/// the `batch x 1` target column. `picks` are `(domain index, target row)`.
pub fn gather(domains: &[&PreparedDomain], picks: &[(usize, usize)]) -> (Vec<Tensor>, Tensor) {
    assert!(!picks.is_empty(), "empty batch");
    let w = domains[0].w;
    let p = domains[0].p();
    let b = picks.len();
    let mut steps: Vec<Vec<f64>> = vec![Vec::with_capacity(b * p); w];
    let mut y = Vec::with_capacity(b);
    for &(e, t) in picks {
        let d = domains[e];
        for (k, step) in steps.iter_mut().enumerate() {
            step.extend_from_slice(d.x.row(t - w + k));
        }
        y.push(d.y[t]);
    }
    let steps = steps.into_iter().map(|s| Tensor::matrix(b, p, s)).collect();
    (steps, Tensor::matrix(b, 1, y))
}
