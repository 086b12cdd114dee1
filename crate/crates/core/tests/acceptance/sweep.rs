use std::sync::OnceLock;
use std::time::Instant;

use cabernet::data::{synth_scm_generate, GroundTruth, ScmSpec, DEFAULT_ROWS_PER_DOMAIN};
use cabernet::trainer::{run_sweep, ResultsTable, SweepPlan, TrainConfig, Variant};

use crate::{ensure, Outcome};

const SEEDS: usize = 5;
const SWEEP_LIMIT_S: f64 = 15.0 * 60.0;

struct Sweeps {
    main: ResultsTable,
    main_seconds: f64,
    sizes: ResultsTable,
    truth: GroundTruth,
    f_star: f64,
}

fn sweeps() -> &'static Result<Sweeps, String> {
    static CELL: OnceLock<Result<Sweeps, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = synth_scm_generate(&ScmSpec::default(), 4, DEFAULT_ROWS_PER_DOMAIN, 0).map_err(|e| e.to_string())?;
        let base = TrainConfig::desk();
        let f_star = base.weights.tipping_point().map_err(|e| e.to_string())?;
        let start = Instant::now();
        let main = run_sweep(&SweepPlan::new(base.clone(), Variant::ALL.to_vec(), SEEDS), &data.domains)
            .map_err(|e| e.to_string())?;
        let main_seconds = start.elapsed().as_secs_f64();
        let mut plan = SweepPlan::new(base, vec![Variant::NoIndy, Variant::Full], SEEDS);
        plan.hiddens = vec![8, 32];
        let sizes = run_sweep(&plan, &data.domains).map_err(|e| e.to_string())?;
        Ok(Sweeps { main, main_seconds, sizes, truth: data.truth, f_star })
    })
}

fn mean_nmse(t: &ResultsTable, v: Variant, hidden: usize) -> Result<f64, String> {
    let row = t.mean_row(v, hidden).ok_or_else(|| format!("no summary row for {v} d={hidden}"))?;
    ensure(row.failed == 0, format!("{} of {v} d={hidden} runs failed", row.failed))?;
    Ok(row.mean_nmse)
}

pub fn a3_variant_ordering() -> Outcome {
    let s = sweeps().as_ref().map_err(Clone::clone)?;
    let m = |v| mean_nmse(&s.main, v, 16);
    let (full, sirm, erm) = (m(Variant::Full)?, m(Variant::Sirm)?, m(Variant::Erm)?);
    let gain = (erm - full) / erm;
    let detail = format!(
        "FULL {full:.5}, SIRM {sirm:.5}, ERM {erm:.5}, FULL gain {:.1}%, sweep {:.0}s",
        100.0 * gain,
        s.main_seconds
    );
    ensure(full <= sirm, format!("FULL > SIRM; {detail}"))?;
    ensure(sirm <= erm, format!("SIRM > ERM; {detail}"))?;
    ensure(gain >= 0.05, format!("FULL gain below 5%; {detail}"))?;
    ensure(s.main_seconds <= SWEEP_LIMIT_S, format!("sweep over budget; {detail}"))?;
    Ok(detail)
}

pub fn a4_gate_partition() -> Outcome {
    let s = sweeps().as_ref().map_err(Clone::clone)?;
    let runs: Vec<_> = s.main.runs_of(Variant::Full, 16).collect();
    let names = &runs.first().ok_or("no FULL runs")?.feature_names;
    let idx = |set: &[String]| -> Vec<usize> {
        set.iter().map(|n| names.iter().position(|m| m == n).expect("feature")).collect()
    };
    let parents = idx(&s.truth.invariant_parents);
    let spurious = idx(&s.truth.spurious);
    let mut ok_seeds = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS as u64 {
        let seed_runs: Vec<_> = runs.iter().filter(|r| r.seed_index == seed).collect();
        let ok = !seed_runs.is_empty()
            && seed_runs.iter().all(|r| {
                parents.iter().all(|&i| r.gate_f[i] > s.f_star) && spurious.iter().all(|&i| r.gate_f[i] < 0.5)
            });
        if ok {
            ok_seeds += 1;
        }
        let min_parent = seed_runs
            .iter()
            .flat_map(|r| parents.iter().map(move |&i| r.gate_f[i]))
            .fold(f64::INFINITY, f64::min);
        let max_spur = seed_runs
            .iter()
            .flat_map(|r| spurious.iter().map(move |&i| r.gate_f[i]))
            .fold(f64::NEG_INFINITY, f64::max);
        lines.push(format!("seed {seed}: min parent f {min_parent:.3}, max spurious f {max_spur:.3}"));
    }
    let detail = format!("{ok_seeds}/{SEEDS} seeds (f*={:.4}); {}", s.f_star, lines.join("; "));
    ensure(ok_seeds >= 4, detail.clone())?;
    Ok(detail)
}

pub fn a5_independence() -> Outcome {
    let s = sweeps().as_ref().map_err(Clone::clone)?;
    let offdiag = |v| -> Result<f64, String> {
        let vals: Vec<f64> = s.main.runs_of(v, 16).filter_map(|r| r.offdiag_last).collect();
        ensure(vals.len() == s.main.runs_of(v, 16).count(), format!("{v}: missing off-diagonal values"))?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let (c_full, c_noindy) = (offdiag(Variant::Full)?, offdiag(Variant::NoIndy)?);
    let reduction = (c_noindy - c_full) / c_noindy;
    let degradation = |v| -> Result<f64, String> {
        let small = mean_nmse(&s.sizes, v, 8)?;
        let large = mean_nmse(&s.sizes, v, 32)?;
        Ok((small - large) / large)
    };
    let (deg_full, deg_noindy) = (degradation(Variant::Full)?, degradation(Variant::NoIndy)?);
    let detail = format!(
        "|C| FULL {c_full:.3} vs NOINDY {c_noindy:.3} ({:.0}% lower); d=32->8 degradation FULL {:.1}% vs NOINDY {:.1}%",
        100.0 * reduction,
        100.0 * deg_full,
        100.0 * deg_noindy
    );
    ensure(reduction >= 0.30, detail.clone())?;
    ensure(deg_full <= deg_noindy, detail.clone())?;
    Ok(detail)
}
