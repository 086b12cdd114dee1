//! Dataset bundle: one CSV per domain plus `manifest.json`.
//!
//! The bundle contains no wall-clock information, so regenerating it with the
//! same spec and seed reproduces identical bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ingest::{format_timestamp, parse_timestamp};
use super::{scale_summary, DomainDataset, GroundTruth, ScmSpec};
use crate::autodiff::Tensor;
use crate::error::RowError;
use crate::{Error, Result};

pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleDomain {
    pub id: String,
    pub file: String,
    pub rows: usize,
    pub segments: usize,
    /// Whole-series `[mean, std, q1, q3]` of the target, for reference only;
    /// training recomputes statistics on its own fitting portion.
    pub target_summary: [f64; 4],
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub target: String,
    pub feature_names: Vec<String>,
    pub step_seconds: i64,
    pub domains: Vec<BundleDomain>,
    /// Difficulty CVs are computed on standardized features.
    pub cv_basis: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub ground_truth: Option<GroundTruth>,
    #[serde(default)]
    pub spec: Option<ScmSpec>,
}

fn domain_csv(ds: &DomainDataset, target: &str) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = vec!["timestamp".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    header.push(target.to_string());
    writeln!(out, "{}", header.join(",")).expect("in-memory write");
    for i in 0..ds.len() {
        let mut line = format_timestamp(ds.timestamps[i]);
        for v in ds.x.row(i) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push(',');
        line.push_str(&ds.y[i].to_string());
        writeln!(out, "{line}").expect("in-memory write");
    }
    out
}

/// Writes every domain and the manifest into `dir` (created if needed).
pub fn write_bundle(
    dir: &Path,
    domains: &[DomainDataset],
    target: &str,
    seed: Option<u64>,
    truth: Option<&GroundTruth>,
    spec: Option<&ScmSpec>,
) -> Result<BundleManifest> {
    let first = domains
        .first()
        .ok_or_else(|| Error::Integrity("bundle with no domains".into()))?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(domains.len());
    for ds in domains {
        if ds.feature_names != first.feature_names {
            return Err(Error::Integrity(format!("domain {}: feature names differ", ds.id)));
        }
        let bytes = domain_csv(ds, target);
        let file = format!("{}.csv", ds.id);
        std::fs::write(dir.join(&file), &bytes)?;
        entries.push(BundleDomain {
            id: ds.id.clone(),
            file,
            rows: ds.len(),
            segments: ds.segments.len(),
            target_summary: scale_summary(&ds.y),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        target: target.to_string(),
        feature_names: first.feature_names.clone(),
        step_seconds: first.step_seconds,
        domains: entries,
        cv_basis: "standardized_features".into(),
        seed,
        ground_truth: truth.cloned(),
        spec: spec.cloned(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

/// Reads a bundle, verifying each file's checksum and schema.
pub fn read_bundle(dir: &Path) -> Result<(BundleManifest, Vec<DomainDataset>)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: BundleManifest = serde_json::from_str(&text)?;
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::Schema(format!("unsupported bundle version {}", manifest.version)));
    }
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for entry in &manifest.domains {
        let bytes = std::fs::read(dir.join(&entry.file))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != entry.sha256 {
            return Err(Error::Integrity(format!("{}: checksum mismatch", entry.file)));
        }
        domains.push(parse_domain(&entry.id, &bytes, &manifest)?);
    }
    Ok((manifest, domains))
}

fn parse_domain(id: &str, bytes: &[u8], m: &BundleManifest) -> Result<DomainDataset> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr.headers()?.clone();
    let p = m.feature_names.len();
    let expected: Vec<&str> = std::iter::once("timestamp")
        .chain(m.feature_names.iter().map(String::as_str))
        .chain(std::iter::once(m.target.as_str()))
        .collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Schema(format!("domain {id}: header does not match manifest")));
    }
    let mut ts = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut errors = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let Some(t) = parse_timestamp(&rec[0]) else {
            errors.push(RowError {
                line,
                message: format!("malformed timestamp {:?}", &rec[0]),
            });
            continue;
        };
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.len() == p + 1 => {
                ts.push(t);
                x.extend_from_slice(&v[..p]);
                y.push(v[p]);
            }
            _ => errors.push(RowError {
                line,
                message: "unparseable or missing values".into(),
            }),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Parse(errors));
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Integrity(format!("domain {id}: empty file")));
    }
    DomainDataset::new(id, ts, m.step_seconds, m.feature_names.clone(), Tensor::matrix(n, p, x), y)
}
