use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{latent_windows, train, evaluate_windows, TrainConfig, Variant};
use crate::data::{split_leave_one_out, DomainDataset, LodoSplit};
use crate::objectives::independence_value;
use crate::rng::{derive_seed, label};
use crate::{parallel, stats, Result};

/// One training run scored on its held-out domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub holdout: String,
    pub variant: Variant,
    pub hidden: usize,
    pub seed_index: u64,
    /// Seed the run was trained with.
    pub seed: u64,
    /// Held-out NMSE of the best-validation checkpoint.
    pub test_nmse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    /// Mean off-diagonal `|C|` of held-out latents after the final epoch.
    pub offdiag_last: Option<f64>,
    /// Same, for the best-validation checkpoint.
    pub offdiag_best: Option<f64>,
    pub feature_names: Vec<String>,
    /// Gate probabilities of the best checkpoint.
    pub gate_f: Vec<f64>,
    /// Gate weights of the best checkpoint.
    pub gate_g: Vec<f64>,
    pub diverged: Option<String>,
    pub error: Option<String>,
}

/// Seed for run `seed_index` holding out `holdout`. Independent of the
/// variant and latent size, so variants are compared on common draws.
pub fn run_seed(root: u64, seed_index: u64, holdout: &str) -> u64 {
    derive_seed(root, &[seed_index, label(holdout)])
}

/// Leave-one-out splits for each holdout, prepared once and shared.
pub fn prepare_splits(
    domains: &[DomainDataset],
    holdouts: &[String],
    w: usize,
    zero_shot: bool,
) -> Result<Vec<LodoSplit>> {
    holdouts
        .iter()
        .map(|h| split_leave_one_out(domains, h, w, zero_shot))
        .collect()
}

/// Trains on `split.train` with seed [`run_seed`]`(cfg.seed, seed_index, ..)`
/// and scores the held-out domain. Training failures are recorded in the
/// result rather than returned.
pub fn run_split(cfg: &TrainConfig, split: &LodoSplit, seed_index: u64) -> RunResult {
    let seed = run_seed(cfg.seed, seed_index, &split.test.id);
    let mut result = RunResult {
        holdout: split.test.id.clone(),
        variant: cfg.variant,
        hidden: cfg.hidden,
        seed_index,
        seed,
        test_nmse: None,
        best_epoch: None,
        best_val: None,
        offdiag_last: None,
        offdiag_best: None,
        feature_names: split.test.feature_names.clone(),
        gate_f: Vec::new(),
        gate_g: Vec::new(),
        diverged: None,
        error: None,
    };
    let run_cfg = TrainConfig { seed, ..cfg.clone() };
    let outcome = match train(&run_cfg, &split.train) {
        Ok(o) => o,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    let test = &split.test;
    let chunk = cfg.eval_chunk;
    let scored = (|| -> Result<()> {
        result.test_nmse = Some(evaluate_windows(&outcome.best.model, test, &test.eval, chunk)?);
        result.offdiag_last = Some(independence_value(&latent_windows(&outcome.last, test, &test.eval, chunk)?)?);
        result.offdiag_best = Some(independence_value(&latent_windows(&outcome.best.model, test, &test.eval, chunk)?)?);
        Ok(())
    })();
    if let Err(e) = scored {
        result.error = Some(e.to_string());
    }
    result.best_epoch = Some(outcome.best.epoch);
    result.best_val = Some(outcome.best.val_mean);
    result.gate_f = outcome.best.model.gate.probs();
    result.gate_g = outcome.best.model.gate.weights();
    result.diverged = outcome.diverged;
    result
}

/// One leave-one-out run from raw domains.
pub fn run_single(cfg: &TrainConfig, domains: &[DomainDataset], holdout: &str, seed_index: u64) -> Result<RunResult> {
    cfg.validate()?;
    let split = split_leave_one_out(domains, holdout, cfg.window, cfg.zero_shot)?;
    Ok(run_split(cfg, &split, seed_index))
}

/// Grid of runs: every variant × latent size × holdout × seed index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    pub hiddens: Vec<usize>,
    /// Held-out domain ids; empty means every domain.
    pub holdouts: Vec<String>,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    pub fn new(base: TrainConfig, variants: Vec<Variant>, seeds: usize) -> Self {
        Self {
            hiddens: vec![base.hidden],
            base,
            variants,
            holdouts: Vec::new(),
            seeds: (0..seeds as u64).collect(),
        }
    }

    pub fn len(&self, n_domains: usize) -> usize {
        let h = if self.holdouts.is_empty() { n_domains } else { self.holdouts.len() };
        self.variants.len() * self.hiddens.len() * h * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty() || self.hiddens.is_empty() || self.seeds.is_empty()
    }
}

/// Mean held-out NMSE over seeds for one cell; `holdout == "mean"` rows
/// average the per-holdout means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub hidden: usize,
    pub holdout: String,
    pub mean_nmse: f64,
    pub std_nmse: f64,
    pub mean_offdiag: f64,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub config_hash: String,
    pub root_seed: u64,
    pub seeds: Vec<u64>,
    pub holdouts: Vec<String>,
    pub config: TrainConfig,
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    /// Id of the run manifest that produced the table, once known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_id: Option<String>,
}

/// Runs a sweep, fanning independent runs out over [`parallel::map`].
pub fn run_sweep(plan: &SweepPlan, domains: &[DomainDataset]) -> Result<ResultsTable> {
    plan.base.validate()?;
    let holdouts: Vec<String> = if plan.holdouts.is_empty() {
        domains.iter().map(|d| d.id.clone()).collect()
    } else {
        plan.holdouts.clone()
    };
    let splits = prepare_splits(domains, &holdouts, plan.base.window, plan.base.zero_shot)?;
    let mut jobs = Vec::new();
    for &variant in &plan.variants {
        for &hidden in &plan.hiddens {
            for split in &splits {
                for &s in &plan.seeds {
                    let cfg = TrainConfig {
                        variant,
                        hidden,
                        ..plan.base.clone()
                    };
                    jobs.push((cfg, split, s));
                }
            }
        }
    }
    let runs = parallel::map(jobs, |(cfg, split, s)| {
        let r = run_split(&cfg, split, s);
        log::info!(
            "{} d={} holdout={} seed={} nmse={:?}",
            r.variant,
            r.hidden,
            r.holdout,
            r.seed_index,
            r.test_nmse
        );
        r
    });
    Ok(ResultsTable {
        config_hash: plan.base.hash(),
        root_seed: plan.base.seed,
        seeds: plan.seeds.clone(),
        summary: summarize(&runs),
        holdouts,
        config: plan.base.clone(),
        runs,
        manifest_id: None,
    })
}

fn finite_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        stats::mean(xs)
    }
}

/// Per-cell seed averages plus a `"mean"` row per (variant, hidden).
pub fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(Variant, usize), BTreeMap<String, Vec<&RunResult>>> = BTreeMap::new();
    for r in runs {
        cells
            .entry((r.variant, r.hidden))
            .or_default()
            .entry(r.holdout.clone())
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for ((variant, hidden), by_holdout) in cells {
        let mut holdout_means = Vec::new();
        let mut holdout_offdiag = Vec::new();
        let mut total = 0;
        let mut failed_total = 0;
        for (holdout, rs) in by_holdout {
            let nmse: Vec<f64> = rs.iter().filter_map(|r| r.test_nmse).collect();
            let off: Vec<f64> = rs.iter().filter_map(|r| r.offdiag_last).collect();
            let failed = rs.len() - nmse.len();
            let row = SummaryRow {
                variant,
                hidden,
                holdout,
                mean_nmse: finite_mean(&nmse),
                std_nmse: if nmse.len() > 1 { stats::std(&nmse) } else { 0.0 },
                mean_offdiag: finite_mean(&off),
                runs: rs.len(),
                failed,
            };
            holdout_means.push(row.mean_nmse);
            holdout_offdiag.push(row.mean_offdiag);
            total += rs.len();
            failed_total += failed;
            rows.push(row);
        }
        rows.push(SummaryRow {
            variant,
            hidden,
            holdout: "mean".into(),
            mean_nmse: stats::mean(&holdout_means),
            std_nmse: if holdout_means.len() > 1 { stats::std(&holdout_means) } else { 0.0 },
            mean_offdiag: stats::mean(&holdout_offdiag),
            runs: total,
            failed: failed_total,
        });
    }
    rows
}

impl ResultsTable {
    /// Mean row for a (variant, hidden) cell.
    pub fn mean_row(&self, variant: Variant, hidden: usize) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.variant == variant && r.hidden == hidden && r.holdout == "mean")
    }

    pub fn runs_of(&self, variant: Variant, hidden: usize) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.variant == variant && r.hidden == hidden)
    }

    /// Writes `runs.csv`, `summary.csv` and `results.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut out = Vec::new();
        writeln!(
            out,
            "holdout,variant,hidden,seed_index,seed,test_nmse,best_epoch,best_val,offdiag_last,offdiag_best,diverged,error,config_hash,manifest_id"
        )?;
        let manifest = self.manifest_id.as_deref().unwrap_or("");
        for r in &self.runs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.holdout,
                r.variant,
                r.hidden,
                r.seed_index,
                r.seed,
                opt(r.test_nmse),
                r.best_epoch.map_or_else(String::new, |e| e.to_string()),
                opt(r.best_val),
                opt(r.offdiag_last),
                opt(r.offdiag_best),
                csv_field(r.diverged.as_deref().unwrap_or("")),
                csv_field(r.error.as_deref().unwrap_or("")),
                self.config_hash,
                manifest
            )?;
        }
        std::fs::write(dir.join("runs.csv"), out)?;

        let mut out = Vec::new();
        writeln!(out, "variant,hidden,holdout,mean_nmse,std_nmse,mean_offdiag,runs,failed,config_hash,manifest_id")?;
        for r in &self.summary {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.variant, r.hidden, r.holdout, r.mean_nmse, r.std_nmse, r.mean_offdiag, r.runs, r.failed, self.config_hash, manifest
            )?;
        }
        std::fs::write(dir.join("summary.csv"), out)?;

        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(dir.join("results.json"), json)?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
