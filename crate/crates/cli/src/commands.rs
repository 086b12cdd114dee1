use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cabernet::autodiff::Tensor;
use cabernet::causal::{self, CausalGraph};
use cabernet::data::{
    self, preprocess, read_bundle, split_leave_one_out, synth_scm_generate, write_bundle, DomainDataset, GapPolicy,
    PreparedDomain, Schema, ScmSpec, Standardizer,
};
use cabernet::explain;
use cabernet::trainer::{self, Checkpoint, SweepPlan, TrainConfig};
use cabernet::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::Recorder;
use crate::{AblateArgs, DiscoverArgs, ExplainArgs, GenerateArgs, IngestArgs, LodoArgs, TrainArgs, TrainOverrides};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let spec: ScmSpec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(e.to_string()))?
        }
        None => ScmSpec::default(),
    };
    let spec_json = serde_json::to_value(&spec)?;
    let mut rec = Recorder::start("generate", spec_json, sha256_hex(serde_json::to_string(&spec)?.as_bytes()), a.seed);
    if let Some(p) = &a.config {
        rec.input(p);
    }
    rec.seeds([a.seed]);
    let out = synth_scm_generate(&spec, a.domains, a.rows, a.seed)?;
    write_bundle(&a.out, &out.domains, &spec.target.name, Some(a.seed), Some(&out.truth), Some(&spec))?;
    rec.output(&a.out);
    rec.finish(&a.out)?;
    println!("wrote {} domains to {}", out.domains.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct IngestConfig {
    schema: Schema,
    gaps: GapPolicy,
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let cfg: IngestConfig = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).map_err(Error::from)?,
        None => IngestConfig::default(),
    };
    let cfg_json = serde_json::to_value(&cfg)?;
    let mut rec = Recorder::start("ingest", cfg_json.clone(), sha256_hex(cfg_json.to_string().as_bytes()), 0);
    let mut domains = Vec::with_capacity(a.data.len());
    for path in &a.data {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("cannot derive a domain id from {}", path.display())))?;
        let raw = data::ingest_csv(path, &cfg.schema).with_context(|| format!("ingesting {}", path.display()))?;
        domains.push(preprocess(&raw, id, &cfg.gaps)?);
        rec.input(path);
    }
    write_bundle(&a.out, &domains, &cfg.schema.target, None, None, None)?;
    rec.output(&a.out);
    rec.finish(&a.out)?;
    println!("wrote {} domains to {}", domains.len(), a.out.display());
    Ok(())
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    })
}

fn resolve_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = load_config(o.config.as_ref())?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(s) = o.strategy {
        cfg.strategy = Some(s);
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if o.no_scale_encoder {
        cfg.use_scale_encoder = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_bundle(dir: &Path) -> Result<Vec<DomainDataset>> {
    let (_, domains) = read_bundle(dir).with_context(|| format!("reading bundle {}", dir.display()))?;
    if domains.is_empty() {
        bail!(Error::Integrity("bundle has no domains".into()));
    }
    Ok(domains)
}

fn pick_domain(domains: &[DomainDataset], id: Option<&str>) -> Result<String> {
    match id {
        Some(id) => {
            if !domains.iter().any(|d| d.id == id) {
                bail!(Error::UnknownDomain(id.to_string()));
            }
            Ok(id.to_string())
        }
        None => Ok(domains.last().expect("non-empty").id.clone()),
    }
}

#[derive(Debug, Serialize)]
struct TrainMetrics<'a> {
    holdout: &'a str,
    variant: String,
    hidden: usize,
    seed: u64,
    test_nmse: f64,
    best_epoch: usize,
    best_val: f64,
    diverged: Option<String>,
    config_hash: String,
    checkpoint_id: String,
    manifest_id: String,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(h) = a.hidden {
        cfg.hidden = h;
    }
    cfg.validate()?;
    let domains = load_bundle(&a.common.data)?;
    let holdout = pick_domain(&domains, a.holdout.as_deref())?;
    let mut rec = Recorder::start("train", serde_json::to_value(&cfg)?, cfg.hash(), cfg.seed);
    rec.input(&a.common.data);
    rec.seeds([cfg.seed]);
    let split = split_leave_one_out(&domains, &holdout, cfg.window, cfg.zero_shot)?;
    let outcome = trainer::train(&cfg, &split.train)?;
    let test_nmse = trainer::evaluate(&outcome.best, &split.test)?;
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let ck_path = out.join("checkpoint.json");
    outcome.best.save(&ck_path)?;
    outcome.log.write_epoch_csv(&out.join("epochs.csv"))?;
    outcome.log.write_step_csv(&out.join("steps.csv"))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let metrics = TrainMetrics {
        holdout: &holdout,
        variant: cfg.variant.to_string(),
        hidden: cfg.hidden,
        seed: cfg.seed,
        test_nmse,
        best_epoch: outcome.best.epoch,
        best_val: outcome.best.val_mean,
        diverged: outcome.diverged.clone(),
        config_hash: cfg.hash(),
        checkpoint_id: checkpoint_id(&ck_path)?,
        manifest_id: rec.id(),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    for f in ["checkpoint.json", "epochs.csv", "steps.csv", "config.toml", "metrics.json"] {
        rec.output(&out.join(f));
    }
    rec.finish(out)?;
    if let Some(reason) = &outcome.diverged {
        log::warn!("training stopped early: {reason}");
    }
    println!("holdout {holdout}: test nmse {test_nmse:.6} (best epoch {})", outcome.best.epoch);
    Ok(())
}

fn checkpoint_id(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?)[..16].to_string())
}

fn run_plan(command: &str, plan: SweepPlan, o: &TrainOverrides) -> Result<()> {
    if plan.is_empty() {
        bail!(Error::Config("empty sweep".into()));
    }
    let domains = load_bundle(&o.data)?;
    for h in &plan.holdouts {
        pick_domain(&domains, Some(h))?;
    }
    let mut rec = Recorder::start(command, serde_json::to_value(&plan)?, plan.base.hash(), plan.base.seed);
    rec.input(&o.data);
    let mut table = trainer::run_sweep(&plan, &domains)?;
    rec.seeds(table.runs.iter().map(|r| r.seed));
    table.manifest_id = Some(rec.id());
    table.write(&o.out)?;
    for f in ["runs.csv", "summary.csv", "results.json"] {
        rec.output(&o.out.join(f));
    }
    rec.finish(&o.out)?;
    let failed = table.runs.iter().filter(|r| r.error.is_some()).count();
    for row in table.summary.iter().filter(|r| r.holdout == "mean") {
        println!(
            "{:7} d={:<3} mean nmse {:.6} ± {:.6} ({} runs, {} failed)",
            row.variant.to_string(),
            row.hidden,
            row.mean_nmse,
            row.std_nmse,
            row.runs,
            row.failed
        );
    }
    if failed > 0 {
        log::warn!("{failed} of {} runs failed; see runs.csv", table.runs.len());
    }
    Ok(())
}

pub fn lodo(a: &LodoArgs) -> Result<()> {
    let mut base = resolve_config(&a.common)?;
    if let Some(v) = a.variant {
        base.variant = v;
    }
    if let Some(h) = a.hidden {
        base.hidden = h;
    }
    let mut plan = SweepPlan::new(base.clone(), vec![base.variant], a.seeds);
    plan.holdouts = a.holdout.clone();
    run_plan("lodo", plan, &a.common)
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let base = resolve_config(&a.common)?;
    let mut plan = SweepPlan::new(base, a.variants.clone(), a.seeds);
    plan.hiddens = a.hiddens.clone();
    plan.holdouts = a.holdout.clone();
    run_plan("ablate", plan, &a.common)
}

#[derive(Debug, Serialize)]
struct ExplainSummary {
    domain: String,
    checkpoint_id: String,
    config_hash: String,
    manifest_id: String,
    sup_causal: Vec<String>,
    f_star: f64,
    debias_residual: f64,
    flagged: Vec<String>,
    scm_blanket: Option<Vec<String>>,
    scm_error: Option<String>,
}

pub fn explain(a: &ExplainArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ck_id = checkpoint_id(&a.checkpoint)?;
    let (manifest, domains) = read_bundle(&a.data).with_context(|| format!("reading bundle {}", a.data.display()))?;
    let id = pick_domain(&domains, a.holdout.as_deref())?;
    let ds = domains.iter().find(|d| d.id == id).expect("checked");
    if ds.feature_names != ck.model.feature_names {
        bail!(Error::Schema(format!(
            "checkpoint features {:?} differ from bundle features {:?}",
            ck.model.feature_names, ds.feature_names
        )));
    }
    let mut rec = Recorder::start("explain", serde_json::to_value(&ck.config)?, ck.config_hash.clone(), a.seed);
    rec.input(&a.checkpoint);
    rec.input(&a.data);
    rec.seeds([a.seed]);
    let domain = PreparedDomain::held_out(ds, ck.config.window, None)?;

    std::fs::create_dir_all(&a.out)?;
    let weights = explain::export_feature_weights(&ck.model, &ck.config.weights)?;
    let weights_path = a.out.join("feature_weights.csv");
    weights.write_csv(&weights_path, &ck.config_hash, &ck_id)?;
    rec.output(&weights_path);

    let report = explain::jacobian_report(&ck.model, &domain, a.samples, a.seed, a.top_k, &ck.config_hash, &ck_id)?;
    let jdir = a.out.join("jacobian");
    report.write(&jdir)?;
    rec.output(&jdir);

    let scm = causal::reconstruct_scm(&ck.model, &domain, &domain.eval, &manifest.target, a.threshold);
    let (scm_blanket, scm_error) = match scm {
        Ok(scm) => {
            let sdir = a.out.join("scm");
            causal::write_graph(&sdir, &scm.graph, Some(&scm.blanket), Some(&rec.id()))?;
            rec.output(&sdir);
            (Some(scm.blanket.blanket), None)
        }
        Err(e) => {
            log::warn!("latent SCM not reconstructed: {e}");
            (None, Some(e.to_string()))
        }
    };
    let summary = ExplainSummary {
        domain: id,
        checkpoint_id: ck_id,
        config_hash: ck.config_hash.clone(),
        manifest_id: rec.id(),
        sup_causal: weights.sup_causal().into_iter().map(String::from).collect(),
        f_star: weights.f_star,
        debias_residual: report.debias_residual,
        flagged: report.flagged.iter().map(|f| format!("z{}:{}", f.dim + 1, f.feature)).collect(),
        scm_blanket,
        scm_error,
    };
    let spath = a.out.join("explain.json");
    write_json(&spath, &summary)?;
    rec.output(&spath);
    rec.finish(&a.out)?;
    println!("sup-causal features: {:?}", summary.sup_causal);
    Ok(())
}

/// Numeric columns of a CSV; columns with any non-numeric cell are skipped.
fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut cols: Vec<Option<Vec<f64>>> = vec![Some(Vec::new()); headers.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (c, cell) in rec.iter().enumerate() {
            if let Some(col) = cols.get_mut(c) {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        if let Some(vals) = col {
                            vals.push(v);
                        }
                    }
                    _ => *col = None,
                }
            }
        }
    }
    let kept: Vec<(String, Vec<f64>)> = headers
        .into_iter()
        .zip(cols)
        .filter_map(|(h, c)| c.map(|c| (h, c)))
        .collect();
    let n = kept.first().map_or(0, |(_, c)| c.len());
    if kept.iter().any(|(_, c)| c.len() != n) {
        bail!(Error::Schema("ragged CSV".into()));
    }
    let mut data = Vec::with_capacity(n * kept.len());
    for r in 0..n {
        data.extend(kept.iter().map(|(_, c)| c[r]));
    }
    let m = kept.len();
    Ok((kept.into_iter().map(|(h, _)| h).collect(), Tensor::matrix(n, m, data)))
}

#[derive(Debug, Serialize)]
struct BaselineRow {
    holdout: String,
    blanket: Vec<String>,
    test_nmse: Option<f64>,
    error: Option<String>,
}

pub fn discover(a: &DiscoverArgs) -> Result<()> {
    if a.threshold.iter().any(|t| !t.is_finite() || *t < 0.0) {
        bail!(Error::Config("thresholds must be finite and non-negative".into()));
    }
    let bundle = a.data.is_dir();
    let cfg = load_config(a.config.as_ref())?;
    let root_seed = a.seed.unwrap_or(cfg.seed);
    let mut rec = Recorder::start(
        "discover",
        serde_json::json!({ "thresholds": a.threshold, "target": a.target, "holdout": a.holdout, "baseline": a.baseline, "train": cfg }),
        cfg.hash(),
        root_seed,
    );
    rec.input(&a.data);
    let (names, data, target, domains) = if bundle {
        let (manifest, domains) = read_bundle(&a.data).with_context(|| format!("reading bundle {}", a.data.display()))?;
        let target = a.target.clone().unwrap_or(manifest.target.clone());
        if target != manifest.target {
            bail!(Error::UnknownVariable(target));
        }
        let used: Vec<&DomainDataset> = domains.iter().filter(|d| Some(&d.id) != a.holdout.as_ref()).collect();
        if let Some(h) = &a.holdout {
            pick_domain(&domains, Some(h))?;
        }
        let prepared = used
            .iter()
            .map(|d| PreparedDomain::training(d, cfg.window))
            .collect::<cabernet::Result<Vec<_>>>()?;
        let refs: Vec<&PreparedDomain> = prepared.iter().collect();
        let data = causal::pooled_rows(&refs, &used);
        let mut names = manifest.feature_names.clone();
        names.push(target.clone());
        (names, data, target, Some(domains))
    } else {
        let target = a
            .target
            .clone()
            .ok_or_else(|| Error::Config("--target is required for CSV input".into()))?;
        let (names, data) = read_numeric_csv(&a.data)?;
        if !names.contains(&target) {
            bail!(Error::UnknownVariable(target));
        }
        let n = data.rows();
        let data = Standardizer::fit(&data, 0..n).apply(&data);
        (names, data, target, None)
    };
    let graph = causal::direct_lingam(&data, &names)?;
    std::fs::create_dir_all(&a.out)?;
    let mut pruned = Vec::with_capacity(a.threshold.len());
    for &t in &a.threshold {
        let g: CausalGraph = causal::prune(&graph, t);
        let mb = causal::markov_blanket(&g, &target)?;
        println!("threshold {t}: blanket of {target} = {:?}", mb.blanket);
        pruned.push((t, g, mb));
    }
    let mut baseline = None;
    if a.baseline {
        let Some(domains) = domains else {
            bail!(Error::Config("--baseline needs a bundle directory".into()));
        };
        let holdouts: Vec<String> = match &a.holdout {
            Some(h) => vec![h.clone()],
            None => domains.iter().map(|d| d.id.clone()).collect(),
        };
        let base = TrainConfig { seed: root_seed, ..cfg };
        let mut rows = Vec::new();
        for h in holdouts {
            let row = match causal::blanket_mask_baseline(&base, &domains, &target, &h, 0, a.threshold[0]) {
                Ok(b) => {
                    rec.seeds([b.run.seed]);
                    BaselineRow {
                        holdout: h,
                        blanket: b.blanket.blanket,
                        test_nmse: b.run.test_nmse,
                        error: b.run.error,
                    }
                }
                Err(e) => BaselineRow {
                    holdout: h,
                    blanket: Vec::new(),
                    test_nmse: None,
                    error: Some(e.to_string()),
                },
            };
            println!("baseline holdout {}: nmse {:?}", row.holdout, row.test_nmse);
            rows.push(row);
        }
        baseline = Some((base.hash(), rows));
    }
    let manifest_id = rec.id();
    for (t, g, mb) in &pruned {
        let dir = a.out.join(format!("threshold_{t}"));
        causal::write_graph(&dir, g, Some(mb), Some(&manifest_id))?;
        rec.output(&dir);
    }
    if let Some((config_hash, rows)) = baseline {
        let path = a.out.join("baseline.json");
        write_json(
            &path,
            &serde_json::json!({ "config_hash": config_hash, "manifest_id": manifest_id, "runs": rows }),
        )?;
        rec.output(&path);
    }
    rec.finish(&a.out)?;
    Ok(())
}
