//! Mini-batch training of [`CaberNet`] across domains, validation-based
//! checkpoint selection and the leave-one-domain-out driver.

mod adam;
mod batches;
mod config;
mod lodo;

pub use adam::Adam;
pub use batches::{Batch, BatchPlan};
pub use config::{BatchStrategy, TrainConfig, Variant};
pub use lodo::{
    prepare_splits, run_seed, run_single, run_split, run_sweep, summarize, RunResult, ResultsTable, SummaryRow,
    SweepPlan,
};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{gather, DomainStats, PreparedDomain};
use crate::model::{CaberNet, DomainContext, ModelDims, PARAM_NAMES};
use crate::objectives::{self, total_loss, LossInputs};
use crate::rng::{derive_seed, seeded};
use crate::{stats, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Model snapshot plus everything needed to score new data with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: CaberNet,
    /// Statistics of each training domain, in training order.
    pub domains: Vec<(String, DomainStats)>,
    pub epoch: usize,
    pub val_nmse: Vec<(String, f64)>,
    pub val_mean: f64,
    pub config_hash: String,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut json = serde_json::to_vec(self)?;
        json.push(b'\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }
}

/// Per-term training losses averaged over one epoch's steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub target: f64,
    pub var: f64,
    pub indy: f64,
    pub be: f64,
    pub l1: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `None` for the pre-training evaluation at epoch 0.
    pub losses: Option<LossMeans>,
    pub val_nmse: Vec<f64>,
    pub val_mean: f64,
    pub f_min: f64,
    pub f_median: f64,
    pub f_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub target: f64,
    pub var: f64,
    pub indy: f64,
    pub be: f64,
    pub l1: f64,
    pub total: f64,
    pub f_min: f64,
    pub f_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub domains: Vec<String>,
    /// Tipping point of the active gate regularizer, when defined.
    pub f_star: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Minimum mean validation NMSE over the logged epochs.
    pub fn best_val(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_mean).fold(f64::INFINITY, f64::min)
    }

    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let mut header = vec!["epoch", "target", "var", "indy", "be", "l1", "total"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend(self.domains.iter().map(|d| format!("val_{d}")));
        header.extend(["val_mean", "f_min", "f_median", "f_max"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.epochs {
            let mut row = vec![r.epoch.to_string()];
            match r.losses {
                Some(l) => row.extend([l.target, l.var, l.indy, l.be, l.l1, l.total].map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 6)),
            }
            row.extend(r.val_nmse.iter().map(f64::to_string));
            row.extend([r.val_mean, r.f_min, r.f_median, r.f_max].map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_step_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "step,epoch,target,var,indy,be,l1,total,f_star,f_min,f_max")?;
        let f_star = self.f_star.map_or_else(String::new, |v| v.to_string());
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                s.step, s.epoch, s.target, s.var, s.indy, s.be, s.l1, s.total, f_star, s.f_min, s.f_max
            )?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest mean validation NMSE.
    pub best: Checkpoint,
    /// Parameters after the last completed step.
    pub last: CaberNet,
    pub log: TrainLog,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// NMSE of `model` on the given windows of one domain, using that domain's
/// scale summary. Predictions are computed in chunks of `chunk` windows.
pub fn evaluate_windows(model: &CaberNet, domain: &PreparedDomain, windows: &[usize], chunk: usize) -> Result<f64> {
    let yhat = predict_windows(model, domain, windows, chunk)?;
    objectives::nmse(&domain.targets(windows), &yhat)
}

/// Predictions for the given windows of one domain.
pub fn predict_windows(model: &CaberNet, domain: &PreparedDomain, windows: &[usize], chunk: usize) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::Integrity(format!("domain {}: no windows to evaluate", domain.id)));
    }
    let scale = [domain.stats.scale];
    let mut out = Vec::with_capacity(windows.len());
    for part in windows.chunks(chunk.max(1)) {
        let picks: Vec<(usize, usize)> = part.iter().map(|&t| (0, t)).collect();
        let (steps, _) = gather(&[domain], &picks);
        let labels = vec![0; part.len()];
        let ctx = DomainContext {
            scale_stats: &scale,
            sample_domain: &labels,
        };
        out.extend(model.predict_batch(&steps, &ctx)?);
    }
    Ok(out)
}

/// Scores a checkpoint on a domain's evaluation windows.
pub fn evaluate(ck: &Checkpoint, domain: &PreparedDomain) -> Result<f64> {
    evaluate_windows(&ck.model, domain, &domain.eval, ck.config.eval_chunk)
}

/// Latent codes of the given windows, stacked `n x d`.
pub fn latent_windows(model: &CaberNet, domain: &PreparedDomain, windows: &[usize], chunk: usize) -> Result<crate::autodiff::Tensor> {
    let mut data = Vec::with_capacity(windows.len() * model.dims.d);
    for part in windows.chunks(chunk.max(1)) {
        let picks: Vec<(usize, usize)> = part.iter().map(|&t| (0, t)).collect();
        let (steps, _) = gather(&[domain], &picks);
        data.extend_from_slice(model.latent(&steps)?.data());
    }
    Ok(crate::autodiff::Tensor::matrix(windows.len(), model.dims.d, data))
}

fn validation(model: &CaberNet, train: &[PreparedDomain], chunk: usize) -> Result<Vec<f64>> {
    train.iter().map(|d| evaluate_windows(model, d, &d.eval, chunk)).collect()
}

fn f_summary(model: &CaberNet) -> (f64, f64, f64) {
    let f = model.gate.probs();
    let min = f.iter().copied().fold(f64::INFINITY, f64::min);
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, stats::median(&f), max)
}

/// Difficulty weights of the training domains, optionally rescaled to mean 1.
pub fn domain_weights(train: &[PreparedDomain], normalize: bool) -> Result<Vec<f64>> {
    let mut w = train
        .iter()
        .map(|d| {
            d.stats
                .difficulty
                .map(|x| x.weight)
                .ok_or_else(|| Error::Integrity(format!("domain {} has no difficulty weight", d.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    if normalize {
        let m = stats::mean(&w);
        w.iter_mut().for_each(|v| *v /= m);
    }
    Ok(w)
}

/// Trains a fresh model on the given training domains. Initialization uses
/// `derive_seed(cfg.seed, [1])` and batching `derive_seed(cfg.seed, [2])`.
pub fn train(cfg: &TrainConfig, train: &[PreparedDomain]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Config("training needs at least one domain".into()))?;
    let p = first.p();
    if let Some(d) = train
        .iter()
        .find(|d| d.feature_names != first.feature_names || d.w != cfg.window) {
        return Err(Error::Config(format!(
            "domain {} has p = {}, w = {}; expected p = {p}, w = {}",
            d.id,
            d.p(),
            d.w,
            cfg.window
        )));
    }
    let dims = ModelDims {
        p,
        d: cfg.hidden,
        w: cfg.window,
        scale_hidden: cfg.scale_hidden,
    };
    let names = first.feature_names.clone();
    let mut rng = seeded(derive_seed(cfg.seed, &[1]));
    let mut model = CaberNet::new(dims, names, &mut rng)?;
    model.use_scale_encoder = cfg.use_scale_encoder;
    train_model(cfg, train, model)
}

/// Trains starting from the given model.
pub fn train_model(cfg: &TrainConfig, train: &[PreparedDomain], mut model: CaberNet) -> Result<TrainOutcome> {
    cfg.validate()?;
    let active = cfg.variant.active_terms();
    let gate_trainable = cfg.gate_trainable();
    let ids: Vec<String> = train.iter().map(|d| d.id.clone()).collect();
    let weights = domain_weights(train, cfg.normalize_domain_weights)?;
    let scale_stats: Vec<[f64; 4]> = train.iter().map(|d| d.stats.scale).collect();
    let refs: Vec<&PreparedDomain> = train.iter().collect();
    let plan = BatchPlan::new(
        train.iter().map(|d| d.fit.clone()).collect(),
        cfg.batch_size,
        cfg.strategy(),
        derive_seed(cfg.seed, &[2]),
    )?;
    let eff = active.effective(&cfg.weights);
    let f_star = if active.gate { objectives::tipping_point(&eff).ok() } else { None };

    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&sizes);
    let config_hash = cfg.hash();
    let domain_stats: Vec<(String, DomainStats)> = train.iter().map(|d| (d.id.clone(), d.stats.clone())).collect();

    let mut log = TrainLog {
        domains: ids.clone(),
        f_star,
        epochs: Vec::new(),
        steps: Vec::new(),
    };
    let snapshot = |model: &CaberNet, epoch: usize, val: &[f64]| Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        domains: domain_stats.clone(),
        epoch,
        val_nmse: ids.iter().cloned().zip(val.iter().copied()).collect(),
        val_mean: stats::mean(val),
        config_hash: config_hash.clone(),
        config: cfg.clone(),
    };

    let val0 = validation(&model, train, cfg.eval_chunk)?;
    let (f_min, f_median, f_max) = f_summary(&model);
    log.epochs.push(EpochRecord {
        epoch: 0,
        losses: None,
        val_nmse: val0.clone(),
        val_mean: stats::mean(&val0),
        f_min,
        f_median,
        f_max,
    });
    let mut best = snapshot(&model, 0, &val0);
    let mut diverged = None;
    let mut step = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 6];
        let mut count = 0usize;
        for batch in plan.epoch(epoch) {
            let (steps, y) = gather(&refs, &batch);
            let labels: Vec<usize> = batch.iter().map(|&(e, _)| e).collect();
            let mut tape = Tape::new();
            let pv = model.bind(&mut tape, gate_trainable);
            let ctx = DomainContext {
                scale_stats: &scale_stats,
                sample_domain: &labels,
            };
            let out = model.forward(&mut tape, &pv, &steps, &ctx)?;
            let loss = total_loss(
                &mut tape,
                &LossInputs {
                    yhat: out.yhat,
                    y: &y,
                    sample_domain: &labels,
                    domain_ids: &ids,
                    domain_weights: &weights,
                    z: out.z,
                    f: out.f,
                },
                &cfg.weights,
                active,
            )?;
            let b = &loss.bundle;
            if !b.total.is_finite() {
                let msg = format!("non-finite loss at epoch {epoch}, step {}", step + 1);
                log::warn!("{msg}; keeping checkpoint from epoch {}", best.epoch);
                diverged = Some(msg);
                break 'epochs;
            }
            let grads = tape.backward(loss.total)?;
            let g: Vec<_> = pv.vars.iter().map(|&v| grads.try_get(v)).collect();
            let mut params = model.tensors_mut();
            if let Err(e) = adam.update(&mut params, &g, &PARAM_NAMES, cfg.lr) {
                let msg = format!("{e} at epoch {epoch}, step {}", step + 1);
                log::warn!("{msg}; keeping checkpoint from epoch {}", best.epoch);
                diverged = Some(msg);
                break 'epochs;
            }
            step += 1;
            let f = model.gate.probs();
            log.steps.push(StepRecord {
                step,
                epoch,
                target: b.target,
                var: b.var,
                indy: b.indy,
                be: b.be,
                l1: b.l1,
                total: b.total,
                f_min: f.iter().copied().fold(f64::INFINITY, f64::min),
                f_max: f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
            for (s, v) in sums.iter_mut().zip([b.target, b.var, b.indy, b.be, b.l1, b.total]) {
                *s += v;
            }
            count += 1;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let val = validation(&model, train, cfg.eval_chunk)?;
            let mean = stats::mean(&val);
            let n = count.max(1) as f64;
            let (f_min, f_median, f_max) = f_summary(&model);
            log.epochs.push(EpochRecord {
                epoch,
                losses: Some(LossMeans {
                    target: sums[0] / n,
                    var: sums[1] / n,
                    indy: sums[2] / n,
                    be: sums[3] / n,
                    l1: sums[4] / n,
                    total: sums[5] / n,
                }),
                val_nmse: val.clone(),
                val_mean: mean,
                f_min,
                f_median,
                f_max,
            });
            if mean < best.val_mean {
                best = snapshot(&model, epoch, &val);
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        log,
        diverged,
    })
}
