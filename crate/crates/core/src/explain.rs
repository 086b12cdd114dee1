//! Gate-weight tables and time-averaged input Jacobians of the encoder.
//!
//! The Jacobian is taken with respect to the standardized inputs *before*
//! the gate, so every column carries a factor `g_j`. [`debias`] divides it
//! back out to expose the encoder's intrinsic sensitivity.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{gather, PreparedDomain};
use crate::model::{gate_weights, CaberNet};
use crate::objectives::RegularizerWeights;
use crate::rng::seeded;
use crate::{stats, Error, Result};

/// Gate weights at or below this are treated as fully suppressed.
pub const SUPPRESSION_EPS: f64 = 1e-12;
/// Windows drawn for a Jacobian report by default.
pub const DEFAULT_EXPLAIN_SAMPLES: usize = 256;
/// Latent size recommended for explainability runs.
pub const EXPLAIN_HIDDEN: usize = 5;
/// Minimum rank improvement under debiasing that flags a feature.
pub const SUPPRESSED_RANK_GAP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateClass {
    /// `f > f*`.
    SupCausal,
    InfCausal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub index: usize,
    pub name: String,
    pub g: f64,
    pub f: f64,
    pub class: GateClass,
}

/// Per-feature gate table, sorted by `g` descending (ties by index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub f_star: f64,
    pub rows: Vec<FeatureWeight>,
}

impl FeatureWeights {
    pub fn sup_causal(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.class == GateClass::SupCausal)
            .map(|r| r.name.as_str())
            .collect()
    }

    pub fn write_csv(&self, path: &Path, config_hash: &str, checkpoint_id: &str) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "rank,feature,g,f,class,f_star,config_hash,checkpoint_id")?;
        for (k, r) in self.rows.iter().enumerate() {
            let class = match r.class {
                GateClass::SupCausal => "sup_causal",
                GateClass::InfCausal => "inf_causal",
            };
            writeln!(
                out,
                "{},{},{},{},{class},{},{config_hash},{checkpoint_id}",
                k + 1,
                r.name,
                r.g,
                r.f,
                self.f_star
            )?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Gate weights `g`, probabilities `f` and the partition at the tipping
/// point of `weights`.
pub fn export_feature_weights(model: &CaberNet, weights: &RegularizerWeights) -> Result<FeatureWeights> {
    let f_star = weights.tipping_point()?;
    let g = model.gate.weights();
    let f = model.gate.probs();
    let mut rows: Vec<FeatureWeight> = model
        .feature_names
        .iter()
        .enumerate()
        .map(|(j, name)| FeatureWeight {
            index: j,
            name: name.clone(),
            g: g[j],
            f: f[j],
            class: if f[j] > f_star { GateClass::SupCausal } else { GateClass::InfCausal },
        })
        .collect();
    rows.sort_by(|a, b| b.g.total_cmp(&a.g).then(a.index.cmp(&b.index)));
    Ok(FeatureWeights { f_star, rows })
}

/// Mean pairwise Spearman correlation between gate-weight profiles, e.g. of
/// the checkpoints of a leave-one-out sweep.
pub fn profile_rank_agreement(profiles: &[Vec<f64>]) -> Option<f64> {
    let mut rs = Vec::new();
    for a in 0..profiles.len() {
        for b in a + 1..profiles.len() {
            rs.push(stats::spearman(&profiles[a], &profiles[b]));
        }
    }
    (!rs.is_empty()).then(|| stats::mean(&rs))
}

/// `J[i, j] = mean_{samples, t} |dZ_i / dX_t[j]|` for an arbitrary encoder
/// mapping `w` steps (`batch x p` each) to `batch x d`. Samples must not
/// interact inside the encoder.
pub fn time_avg_jacobian_with<F>(steps: &[Tensor], encoder: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let first = steps
        .first()
        .ok_or_else(|| Error::Config("Jacobian needs at least one time step".into()))?;
    let (batch, p) = first.dims2();
    if batch == 0 {
        return Err(Error::Config("Jacobian needs a non-empty batch".into()));
    }
    let mut tape = Tape::new();
    let xs: Vec<Var> = steps.iter().map(|s| tape.variable(s.clone())).collect();
    let z = encoder(&mut tape, &xs)?;
    let d = tape.value(z).cols();
    let mut j = Tensor::zeros(&[d, p]);
    let norm = 1.0 / (batch * steps.len()) as f64;
    for i in 0..d {
        let col = tape.slice_cols(z, i, i + 1)?;
        let s = tape.sum(col);
        let grads = tape.backward(s)?;
        for &x in &xs {
            let gx = grads.get(x);
            for b in 0..batch {
                for (k, v) in gx.row(b).iter().enumerate() {
                    let cur = j.get(i, k);
                    j.set(i, k, cur + v.abs() * norm);
                }
            }
        }
    }
    Ok(j)
}

/// Jacobian of the model's latent with respect to the pre-gate inputs.
pub fn time_avg_jacobian(model: &CaberNet, steps: &[Tensor]) -> Result<Tensor> {
    time_avg_jacobian_with(steps, |tape, xs| {
        let pv = model.bind_frozen(tape);
        let batch = tape.value(xs[0]).rows();
        let g = gate_weights(tape, pv.alpha());
        let gb = tape.broadcast(g, [batch, model.dims.p])?;
        let gated = xs
            .iter()
            .map(|&x| tape.mul(x, gb))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        model.encode(tape, &pv, &gated)
    })
}

/// Jacobian of the model's latent with respect to the gated inputs `g ⊙ X_t`.
pub fn time_avg_jacobian_gated(model: &CaberNet, steps: &[Tensor]) -> Result<Tensor> {
    let g = model.gate.weights();
    let gated: Vec<Tensor> = steps
        .iter()
        .map(|s| {
            let mut t = s.clone();
            let p = t.cols();
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v *= g[k % p];
            }
            t
        })
        .collect();
    time_avg_jacobian_with(&gated, |tape, xs| {
        let pv = model.bind_frozen(tape);
        model.encode(tape, &pv, xs)
    })
}

/// Column-wise `J / g`. Columns with `g_j <= SUPPRESSION_EPS` are zeroed and
/// reported instead of divided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Debiased {
    pub matrix: Tensor,
    pub suppressed: Vec<usize>,
}

pub fn debias(j: &Tensor, g: &[f64]) -> Result<Debiased> {
    let (d, p) = j.dims2();
    if g.len() != p {
        return Err(Error::Config(format!("{} gate weights for {p} Jacobian columns", g.len())));
    }
    let mut m = j.clone();
    let suppressed: Vec<usize> = (0..p).filter(|&c| g[c] <= SUPPRESSION_EPS).collect();
    for i in 0..d {
        for c in 0..p {
            let v = if g[c] <= SUPPRESSION_EPS { 0.0 } else { j.get(i, c) / g[c] };
            m.set(i, c, v);
        }
    }
    Ok(Debiased { matrix: m, suppressed })
}

/// `max |J_deb diag(g) - J|` over non-suppressed columns.
pub fn debias_residual(j: &Tensor, deb: &Debiased, g: &[f64]) -> f64 {
    let (d, p) = j.dims2();
    let mut worst = 0.0f64;
    for i in 0..d {
        for c in (0..p).filter(|c| !deb.suppressed.contains(c)) {
            worst = worst.max((deb.matrix.get(i, c) * g[c] - j.get(i, c)).abs());
        }
    }
    worst
}

/// Feature indices of each row ranked by value, descending; ties keep the
/// lower index first. Returns at most `k` per row.
pub fn top_k(m: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let (d, p) = m.dims2();
    (0..d)
        .map(|i| {
            let mut idx: Vec<usize> = (0..p).collect();
            idx.sort_by(|&a, &b| m.get(i, b).total_cmp(&m.get(i, a)));
            idx.truncate(k);
            idx
        })
        .collect()
}

/// A feature whose rank in some latent dimension improves by at least
/// [`SUPPRESSED_RANK_GAP`] places once the gate is divided out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuppressedFlag {
    pub dim: usize,
    pub feature: String,
    pub rank_original: usize,
    pub rank_debiased: usize,
}

fn rank_positions(m: &Tensor) -> Vec<Vec<usize>> {
    let p = m.cols();
    top_k(m, p)
        .into_iter()
        .map(|order| {
            let mut pos = vec![0; p];
            for (r, &j) in order.iter().enumerate() {
                pos[j] = r + 1;
            }
            pos
        })
        .collect()
}

pub fn informative_yet_suppressed(j: &Tensor, deb: &Tensor, names: &[String]) -> Vec<SuppressedFlag> {
    let ro = rank_positions(j);
    let rd = rank_positions(deb);
    let mut out = Vec::new();
    for (dim, (a, b)) in ro.iter().zip(&rd).enumerate() {
        for (f, (&orig, &debr)) in a.iter().zip(b).enumerate() {
            if orig >= debr + SUPPRESSED_RANK_GAP {
                out.push(SuppressedFlag {
                    dim,
                    feature: names[f].clone(),
                    rank_original: orig,
                    rank_debiased: debr,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub feature_names: Vec<String>,
    pub samples: usize,
    pub seed: u64,
    pub j: Tensor,
    pub j_debiased: Tensor,
    pub g: Vec<f64>,
    pub suppressed: Vec<String>,
    pub k: usize,
    pub top_k: Vec<Vec<String>>,
    pub top_k_debiased: Vec<Vec<String>>,
    pub flagged: Vec<SuppressedFlag>,
    /// `max |J_deb diag(g) - J|`.
    pub debias_residual: f64,
    pub config_hash: String,
    pub checkpoint_id: String,
}

/// Draws up to `n` of `windows` without replacement (seeded, order kept).
pub fn sample_windows(windows: &[usize], n: usize, seed: u64) -> Vec<usize> {
    if windows.len() <= n {
        return windows.to_vec();
    }
    let mut rng = seeded(seed);
    let mut idx = sample(&mut rng, windows.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| windows[i]).collect()
}

/// Full report on `n` seeded evaluation windows of `domain`.
pub fn jacobian_report(
    model: &CaberNet,
    domain: &PreparedDomain,
    n: usize,
    seed: u64,
    k: usize,
    config_hash: &str,
    checkpoint_id: &str,
) -> Result<JacobianReport> {
    let windows = sample_windows(&domain.eval, n, seed);
    if windows.is_empty() {
        return Err(Error::Integrity(format!("domain {}: no windows to explain", domain.id)));
    }
    let picks: Vec<(usize, usize)> = windows.iter().map(|&t| (0, t)).collect();
    let (steps, _) = gather(&[domain], &picks);
    let j = time_avg_jacobian(model, &steps)?;
    let g = model.gate.weights();
    let deb = debias(&j, &g)?;
    let names = &model.feature_names;
    let label = |rows: Vec<Vec<usize>>| -> Vec<Vec<String>> {
        rows.into_iter()
            .map(|r| r.into_iter().map(|i| names[i].clone()).collect())
            .collect()
    };
    Ok(JacobianReport {
        feature_names: names.clone(),
        samples: windows.len(),
        seed,
        top_k: label(top_k(&j, k)),
        top_k_debiased: label(top_k(&deb.matrix, k)),
        flagged: informative_yet_suppressed(&j, &deb.matrix, names),
        debias_residual: debias_residual(&j, &deb, &g),
        suppressed: deb.suppressed.iter().map(|&i| names[i].clone()).collect(),
        j,
        j_debiased: deb.matrix,
        g,
        k,
        config_hash: config_hash.to_string(),
        checkpoint_id: checkpoint_id.to_string(),
    })
}

impl JacobianReport {
    /// Writes `jacobian.csv`, `jacobian_debiased.csv` and `jacobian.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (file, m) in [("jacobian.csv", &self.j), ("jacobian_debiased.csv", &self.j_debiased)] {
            let mut out = Vec::new();
            writeln!(out, "dim,{},config_hash,checkpoint_id", self.feature_names.join(","))?;
            for i in 0..m.rows() {
                let vals: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
                writeln!(out, "z{},{},{},{}", i + 1, vals.join(","), self.config_hash, self.checkpoint_id)?;
            }
            std::fs::write(dir.join(file), out)?;
        }
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(dir.join("jacobian.json"), json)?;
        Ok(())
    }
}
