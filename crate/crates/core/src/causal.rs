//! DirectLiNGAM causal ordering, Markov blankets, the blanket-masked
//! baseline and latent SCM reconstruction over `(Z, Y)`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{split_leave_one_out, DomainDataset, Standardizer};
use crate::rng::Rng;
use crate::trainer::{latent_windows, run_split, RunResult, TrainConfig, Variant};
use crate::data::PreparedDomain;
use crate::{stats, Error, Result};

/// Default absolute-coefficient pruning threshold on standardized data.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

const K1: f64 = 79.047;
const K2: f64 = 7.4129;
const GAMMA: f64 = 0.37457;

/// Weighted DAG. `b[i][j]` is the direct effect of variable `j` on `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub variables: Vec<String>,
    pub b: Tensor,
    /// Causal order, most exogenous first.
    pub order: Vec<usize>,
    /// Pruning threshold applied, if any.
    pub threshold: Option<f64>,
}

impl CausalGraph {
    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn parents(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.b.get(i, j) != 0.0).collect()
    }

    pub fn children(&self, j: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.b.get(i, j) != 0.0).collect()
    }

    /// Nonzero edges as `(from, to, weight)`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let m = self.len();
        let mut out = Vec::new();
        for i in 0..m {
            for j in 0..m {
                let w = self.b.get(i, j);
                if w != 0.0 {
                    out.push((j, i, w));
                }
            }
        }
        out
    }

    /// True when `b` permuted by `order` is strictly lower triangular.
    pub fn respects_order(&self) -> bool {
        let m = self.len();
        let mut pos = vec![0; m];
        for (k, &v) in self.order.iter().enumerate() {
            pos[v] = k;
        }
        (0..m).all(|i| (0..m).all(|j| self.b.get(i, j) == 0.0 || pos[j] < pos[i]))
    }
}

/// Differential-entropy approximation of a standardized sample.
fn entropy(u: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mut lc = 0.0;
    let mut ue = 0.0;
    for &x in u {
        // log cosh without overflow
        let a = x.abs();
        lc += a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2;
        ue += x * (-x * x / 2.0).exp();
    }
    let (lc, ue) = (lc / n, ue / n);
    (1.0 + (2.0 * std::f64::consts::PI).ln()) / 2.0 - K1 * (lc - GAMMA).powi(2) - K2 * ue.powi(2)
}

fn standardize(x: &[f64]) -> Vec<f64> {
    let m = stats::mean(x);
    let s = stats::std(x);
    x.iter().map(|v| (v - m) / s).collect()
}

/// `xi - cov(xi, xj) / var(xj) * xj`.
fn residual(xi: &[f64], xj: &[f64]) -> Vec<f64> {
    let (mi, mj) = (stats::mean(xi), stats::mean(xj));
    let mut cov = 0.0;
    let mut var = 0.0;
    for (a, b) in xi.iter().zip(xj) {
        cov += (a - mi) * (b - mj);
        var += (b - mj) * (b - mj);
    }
    let beta = cov / var;
    xi.iter().zip(xj).map(|(a, b)| a - beta * b).collect()
}

fn diff_mutual_info(xi: &[f64], xj: &[f64], ri_j: &[f64], rj_i: &[f64]) -> f64 {
    (entropy(xj) + entropy(&standardize(ri_j))) - (entropy(xi) + entropy(&standardize(rj_i)))
}

fn most_exogenous(cols: &[Vec<f64>], remaining: &[usize]) -> usize {
    if remaining.len() == 1 {
        return remaining[0];
    }
    let std_cols: Vec<Option<Vec<f64>>> = (0..cols.len())
        .map(|k| remaining.contains(&k).then(|| standardize(&cols[k])))
        .collect();
    let mut best = remaining[0];
    let mut best_score = f64::NEG_INFINITY;
    for &i in remaining {
        let xi = std_cols[i].as_ref().expect("remaining");
        let mut m = 0.0;
        for &j in remaining {
            if i == j {
                continue;
            }
            let xj = std_cols[j].as_ref().expect("remaining");
            let ri_j = residual(xi, xj);
            let rj_i = residual(xj, xi);
            m += diff_mutual_info(xi, xj, &ri_j, &rj_i).min(0.0).powi(2);
        }
        if -m > best_score {
            best_score = -m;
            best = i;
        }
    }
    best
}

fn check_design(data: &Tensor, names: &[String]) -> Result<()> {
    let (n, m) = data.dims2();
    if n < 2 || m == 0 {
        return Err(Error::Config(format!("causal discovery needs n >= 2 rows and columns, got {n} x {m}")));
    }
    if !data.all_finite() {
        return Err(Error::Numerical("non-finite values in causal discovery input".into()));
    }
    let cols: Vec<Vec<f64>> = (0..m).map(|j| data.column(j)).collect();
    let constant: Vec<String> = (0..m)
        .filter(|&j| stats::std(&cols[j]) <= 1e-12 * (1.0 + stats::mean_abs(&cols[j])))
        .map(|j| names[j].clone())
        .collect();
    if !constant.is_empty() {
        return Err(Error::Singular { columns: constant });
    }
    let z: Vec<Vec<f64>> = cols.iter().map(|c| standardize(c)).collect();
    let mut corr = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            corr[a * m + b] = z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        }
    }
    if let Err(k) = stats::cholesky_solve(&corr, m, &vec![0.0; m]) {
        let mut columns = vec![names[k].clone()];
        let fit = stats::ols(&Tensor::from_rows(&(0..n).map(|r| (0..k).map(|c| z[c][r]).collect()).collect::<Vec<_>>()), &z[k], false);
        if let Ok(fit) = fit {
            columns.extend((0..k).filter(|&c| fit.coef[c].abs() > 1e-6).map(|c| names[c].clone()));
        } else {
            columns.extend(names[..k].iter().cloned());
        }
        return Err(Error::Singular { columns });
    }
    Ok(())
}

/// DirectLiNGAM: repeatedly picks the most exogenous remaining variable by
/// the pairwise likelihood-ratio measure, regresses it out of the rest and
/// finally estimates `b` by least squares along the discovered order.
pub fn direct_lingam(data: &Tensor, names: &[String]) -> Result<CausalGraph> {
    let m = data.cols();
    if names.len() != m {
        return Err(Error::Config(format!("{} names for {m} columns", names.len())));
    }
    check_design(data, names)?;
    let mut cols: Vec<Vec<f64>> = (0..m).map(|j| data.column(j)).collect();
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut order = Vec::with_capacity(m);
    while !remaining.is_empty() {
        let k = most_exogenous(&cols, &remaining);
        let xk = cols[k].clone();
        for &i in &remaining {
            if i != k {
                cols[i] = residual(&cols[i], &xk);
            }
        }
        order.push(k);
        remaining.retain(|&i| i != k);
    }
    let b = estimate_adjacency(data, &order)?;
    Ok(CausalGraph {
        variables: names.to_vec(),
        b,
        order,
        threshold: None,
    })
}

/// Least-squares coefficients of each variable on its predecessors in `order`.
pub fn estimate_adjacency(data: &Tensor, order: &[usize]) -> Result<Tensor> {
    let m = data.cols();
    let mut b = Tensor::zeros(&[m, m]);
    for k in 1..order.len() {
        let target = order[k];
        let preds = &order[..k];
        let fit = stats::ols(&data.select_columns(preds), &data.column(target), true)?;
        for (&j, c) in preds.iter().zip(fit.coef) {
            b.set(target, j, c);
        }
    }
    Ok(b)
}

/// Zeroes every coefficient with `|b| < threshold`.
pub fn prune(graph: &CausalGraph, threshold: f64) -> CausalGraph {
    let mut out = graph.clone();
    for v in out.b.data_mut() {
        if v.abs() < threshold {
            *v = 0.0;
        }
    }
    out.threshold = Some(threshold);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovBlanket {
    pub target: String,
    pub parents: Vec<String>,
    pub children: Vec<String>,
    pub spouses: Vec<String>,
    /// `parents ∪ children ∪ spouses`, in graph variable order.
    pub blanket: Vec<String>,
}

pub fn markov_blanket(graph: &CausalGraph, target: &str) -> Result<MarkovBlanket> {
    let t = graph.index_of(target)?;
    let parents: BTreeSet<usize> = graph.parents(t).into_iter().collect();
    let children: BTreeSet<usize> = graph.children(t).into_iter().collect();
    let spouses: BTreeSet<usize> = children
        .iter()
        .flat_map(|&c| graph.parents(c))
        .filter(|&s| s != t)
        .collect();
    let all: BTreeSet<usize> = parents.iter().chain(&children).chain(&spouses).copied().collect();
    let name = |s: &BTreeSet<usize>| s.iter().map(|&i| graph.variables[i].clone()).collect::<Vec<_>>();
    Ok(MarkovBlanket {
        target: target.to_string(),
        parents: name(&parents),
        children: name(&children),
        spouses: name(&spouses),
        blanket: name(&all),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GraphFile {
    variables: Vec<String>,
    order: Vec<String>,
    threshold: Option<f64>,
    b: Vec<Vec<f64>>,
    blanket: Option<MarkovBlanket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest_id: Option<String>,
}

/// Writes `edges.csv` (src, dst, weight) and `graph.json` into `dir`.
/// `manifest_id` is stored in `graph.json` when given.
pub fn write_graph(
    dir: &Path,
    graph: &CausalGraph,
    blanket: Option<&MarkovBlanket>,
    manifest_id: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    writeln!(out, "src,dst,weight")?;
    for (from, to, w) in graph.edges() {
        writeln!(out, "{},{},{}", graph.variables[from], graph.variables[to], w)?;
    }
    std::fs::write(dir.join("edges.csv"), out)?;
    let file = GraphFile {
        variables: graph.variables.clone(),
        order: graph.order.iter().map(|&i| graph.variables[i].clone()).collect(),
        threshold: graph.threshold,
        b: (0..graph.len()).map(|i| graph.b.row(i).to_vec()).collect(),
        blanket: blanket.cloned(),
        manifest_id: manifest_id.map(String::from),
    };
    let mut json = serde_json::to_vec_pretty(&file)?;
    json.push(b'\n');
    std::fs::write(dir.join("graph.json"), json)?;
    Ok(())
}

/// Reads a graph written by [`write_graph`].
pub fn read_graph(dir: &Path) -> Result<(CausalGraph, Option<MarkovBlanket>)> {
    let file: GraphFile = serde_json::from_slice(&std::fs::read(dir.join("graph.json"))?)?;
    let m = file.variables.len();
    if file.b.len() != m || file.b.iter().any(|r| r.len() != m) {
        return Err(Error::Schema("graph matrix does not match variable count".into()));
    }
    let index = |name: &String| {
        file.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::UnknownVariable(name.clone()))
    };
    let order = file.order.iter().map(index).collect::<Result<Vec<_>>>()?;
    let graph = CausalGraph {
        b: Tensor::from_rows(&file.b),
        variables: file.variables,
        order,
        threshold: file.threshold,
    };
    Ok((graph, file.blanket))
}

/// Random DAG over `m` nodes: a random causal order, each forward pair
/// connected with probability `edge_prob`, coefficients with magnitude in
/// `[0.5, 1.5]` and random sign. Returns `(b, order)`.
pub fn random_dag(m: usize, edge_prob: f64, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let mut order: Vec<usize> = (0..m).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let mut b = Tensor::zeros(&[m, m]);
    for hi in 1..m {
        for lo in 0..hi {
            if rng.random_bool(edge_prob) {
                let mag = rng.random_range(0.5..1.5);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                b.set(order[hi], order[lo], sign * mag);
            }
        }
    }
    (b, order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimNoise {
    Uniform,
    Gaussian,
}

/// `n` rows of the linear SEM `x = b x + e` with unit-variance noise.
pub fn simulate_linear(b: &Tensor, order: &[usize], n: usize, noise: SimNoise, rng: &mut Rng) -> Tensor {
    let m = b.rows();
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let r3 = 3f64.sqrt();
    let mut data = vec![0.0; n * m];
    for r in 0..n {
        let row = &mut data[r * m..(r + 1) * m];
        for &i in order {
            let e = match noise {
                SimNoise::Uniform => rng.random_range(-r3..r3),
                SimNoise::Gaussian => normal.sample(rng),
            };
            let mut v = e;
            for j in 0..m {
                let c = b.get(i, j);
                if c != 0.0 {
                    v += c * row[j];
                }
            }
            row[i] = v;
        }
    }
    Tensor::matrix(n, m, data)
}

/// Pools the fitting rows of each domain (features then target), each
/// domain z-scored on its own rows.
pub fn pooled_rows(domains: &[&PreparedDomain], raw: &[&DomainDataset]) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (d, ds) in domains.iter().zip(raw) {
        let end = d.stats.fit_rows_end + 1;
        let mut block = Vec::with_capacity(end * (ds.p() + 1));
        for r in 0..end {
            block.extend_from_slice(ds.x.row(r));
            block.push(ds.y[r]);
        }
        let t = Tensor::matrix(end, ds.p() + 1, block);
        let z = Standardizer::fit(&t, 0..end).apply(&t);
        rows.extend((0..end).map(|r| z.row(r).to_vec()));
    }
    Tensor::from_rows(&rows)
}

/// Outcome of the blanket-masked baseline for one held-out domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub graph: CausalGraph,
    pub blanket: MarkovBlanket,
    pub run: RunResult,
}

/// Trains the ERM variant on `features` only (kept in dataset order).
pub fn train_on_features(
    cfg: &TrainConfig,
    domains: &[DomainDataset],
    features: &[String],
    holdout: &str,
    seed_index: u64,
) -> Result<RunResult> {
    let first = domains.first().ok_or_else(|| Error::Config("no domains".into()))?;
    let selected: Vec<String> = first
        .feature_names
        .iter()
        .filter(|n| features.contains(n))
        .cloned()
        .collect();
    if let Some(missing) = features.iter().find(|f| !first.feature_names.contains(f)) {
        return Err(Error::UnknownVariable(missing.clone()));
    }
    if selected.is_empty() {
        return Err(Error::EmptyBlanket { target: "target".into() });
    }
    let masked = domains
        .iter()
        .map(|d| d.select_features(&selected))
        .collect::<Result<Vec<_>>>()?;
    let erm = TrainConfig {
        variant: Variant::Erm,
        ..cfg.clone()
    };
    erm.validate()?;
    let split = split_leave_one_out(&masked, holdout, erm.window, erm.zero_shot)?;
    Ok(run_split(&erm, &split, seed_index))
}

/// Discovers a graph on the pooled training rows, extracts the target's
/// Markov blanket and trains ERM restricted to it.
pub fn blanket_mask_baseline(
    cfg: &TrainConfig,
    domains: &[DomainDataset],
    target: &str,
    holdout: &str,
    seed_index: u64,
    threshold: f64,
) -> Result<BaselineResult> {
    let split = split_leave_one_out(domains, holdout, cfg.window, cfg.zero_shot)?;
    let raw: Vec<&DomainDataset> = domains.iter().filter(|d| d.id != holdout).collect();
    let prepared: Vec<&PreparedDomain> = split.train.iter().collect();
    let data = pooled_rows(&prepared, &raw);
    let mut names = domains[0].feature_names.clone();
    if names.iter().any(|n| n == target) {
        return Err(Error::Config(format!("target name {target:?} collides with a feature")));
    }
    names.push(target.to_string());
    let graph = prune(&direct_lingam(&data, &names)?, threshold);
    let blanket = markov_blanket(&graph, target)?;
    if blanket.blanket.is_empty() {
        return Err(Error::EmptyBlanket { target: target.to_string() });
    }
    let run = train_on_features(cfg, domains, &blanket.blanket, holdout, seed_index)?;
    Ok(BaselineResult { graph, blanket, run })
}

/// Discovered graph over latent coordinates and the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScm {
    pub graph: CausalGraph,
    pub blanket: MarkovBlanket,
    /// Latent coordinates left out because they were constant.
    pub dropped: Vec<String>,
}

/// Runs the frozen encoder over `windows` of `domain`, pairs `Z` with the
/// observed target and fits a pruned DirectLiNGAM graph over `(Z_1..Z_d, Y)`.
pub fn reconstruct_scm(
    model: &crate::model::CaberNet,
    domain: &PreparedDomain,
    windows: &[usize],
    target: &str,
    threshold: f64,
) -> Result<LatentScm> {
    let z = latent_windows(model, domain, windows, 1024)?;
    let y = domain.targets(windows);
    let d = z.cols();
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..d {
        let c = z.column(j);
        if stats::std(&c) <= 1e-10 {
            dropped.push(format!("z{}", j + 1));
        } else {
            keep.push(j);
        }
    }
    let mut names: Vec<String> = keep.iter().map(|j| format!("z{}", j + 1)).collect();
    names.push(target.to_string());
    let n = windows.len();
    let mut rows = Vec::with_capacity(n);
    for (r, &yv) in y.iter().enumerate() {
        let mut row: Vec<f64> = keep.iter().map(|&j| z.get(r, j)).collect();
        row.push(yv);
        rows.push(row);
    }
    let data = Tensor::from_rows(&rows);
    let data = Standardizer::fit(&data, 0..n).apply(&data);
    let graph = prune(&direct_lingam(&data, &names)?, threshold);
    let blanket = markov_blanket(&graph, target)?;
    Ok(LatentScm { graph, blanket, dropped })
}
