use std::collections::BTreeSet;
use std::time::Instant;

use cabernet::autodiff::Tensor;
use cabernet::causal::{blanket_mask_baseline, direct_lingam, markov_blanket, prune, random_dag, simulate_linear, CausalGraph, SimNoise, DEFAULT_THRESHOLD};
use cabernet::data::{mb_variance_check, synth_scm_generate, Role, ScmSpec};
use cabernet::rng::{derive_seed, seeded};
use cabernet::trainer::{run_single, TrainConfig, Variant};

use crate::{ensure, within_runtime, Outcome};

fn names(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("v{i}")).collect()
}

/// True when every edge of `b` points forward in `order`.
fn consistent(b: &Tensor, order: &[usize]) -> bool {
    let m = b.rows();
    let mut pos = vec![0; m];
    for (k, &v) in order.iter().enumerate() {
        pos[v] = k;
    }
    (0..m).all(|i| (0..m).all(|j| b.get(i, j) == 0.0 || pos[j] < pos[i]))
}

/// Blanket straight from the adjacency definition.
fn brute_blanket(b: &Tensor, t: usize) -> BTreeSet<usize> {
    let m = b.rows();
    let edge = |from: usize, to: usize| b.get(to, from) != 0.0;
    (0..m)
        .filter(|&j| j != t)
        .filter(|&j| edge(j, t) || edge(t, j) || (0..m).any(|c| edge(t, c) && edge(j, c)))
        .collect()
}

pub fn a7_lingam() -> Outcome {
    let start = Instant::now();
    let mut exact = 0;
    let mut sq_err = 0.0;
    let mut n_edges = 0usize;
    for trial in 0..10u64 {
        let mut rng = seeded(derive_seed(70, &[trial]));
        let (b, _) = random_dag(5, 0.6, &mut rng);
        let order = topo_order(&b);
        let x = simulate_linear(&b, &order, 5000, SimNoise::Uniform, &mut rng);
        let g = direct_lingam(&x, &names(5)).map_err(|e| e.to_string())?;
        if consistent(&b, &g.order) {
            exact += 1;
        }
        let pruned = prune(&g, DEFAULT_THRESHOLD);
        for i in 0..5 {
            for j in 0..5 {
                if b.get(i, j) != 0.0 && pruned.b.get(i, j) != 0.0 {
                    sq_err += (pruned.b.get(i, j) - b.get(i, j)).powi(2);
                    n_edges += 1;
                }
            }
        }
    }
    let rms = (sq_err / n_edges.max(1) as f64).sqrt();
    ensure(exact >= 8, format!("causal order recovered in {exact}/10 trials"))?;
    ensure(n_edges > 0 && rms < 0.05, format!("coefficient RMS {rms:.4} over {n_edges} edges"))?;

    let mut rng = seeded(71);
    for _ in 0..100 {
        let (b, order) = random_dag(8, 0.35, &mut rng);
        let g = CausalGraph { variables: names(8), b: b.clone(), order, threshold: None };
        for t in 0..8 {
            let mb = markov_blanket(&g, &format!("v{t}")).map_err(|e| e.to_string())?;
            let got: BTreeSet<usize> = mb.blanket.iter().map(|n| n[1..].parse().unwrap()).collect();
            ensure(got == brute_blanket(&b, t), format!("blanket mismatch for v{t}"))?;
        }
    }

    // Gaussian noise: the order of a complete DAG is not identifiable
    let mut gauss_exact = 0;
    for trial in 0..10u64 {
        let mut rng = seeded(derive_seed(72, &[trial]));
        let (b, order) = random_dag(5, 1.0, &mut rng);
        let x = simulate_linear(&b, &order, 5000, SimNoise::Gaussian, &mut rng);
        let g = direct_lingam(&x, &names(5)).map_err(|e| e.to_string())?;
        if g.order == order {
            gauss_exact += 1;
        }
    }
    ensure(gauss_exact <= 6, format!("Gaussian noise recovered {gauss_exact}/10 orders"))?;
    let t = within_runtime(start, 60.0, "A7")?;
    Ok(format!(
        "order {exact}/10, coef RMS {rms:.4} over {n_edges} edges, 800 blankets match, Gaussian {gauss_exact}/10; {t:.1}s"
    ))
}

fn topo_order(b: &Tensor) -> Vec<usize> {
    let m = b.rows();
    let mut done = vec![false; m];
    let mut order = Vec::with_capacity(m);
    while order.len() < m {
        let next = (0..m)
            .find(|&i| !done[i] && (0..m).all(|j| b.get(i, j) == 0.0 || done[j]))
            .expect("acyclic");
        done[next] = true;
        order.push(next);
    }
    order
}

pub fn a8_blanket_variance() -> Outcome {
    let spec = ScmSpec::default();
    let est = mb_variance_check(&spec, 100_000, 81).map_err(|e| e.to_string())?;
    ensure(
        est.gap() > 3.0 * est.se_gap,
        format!("gap {:.5} vs 3 SE {:.5}", est.gap(), 3.0 * est.se_gap),
    )?;

    let mut bare = ScmSpec::default();
    bare.nodes.retain(|n| !matches!(n.role, Role::Child | Role::Spouse | Role::Spurious));
    let truth = bare.ground_truth().map_err(|e| e.to_string())?;
    ensure(truth.children.is_empty() && truth.spouses.is_empty(), "reduced spec still has children")?;
    let eq = mb_variance_check(&bare, 100_000, 82).map_err(|e| e.to_string())?;
    ensure(
        eq.gap().abs() <= 2.0 * eq.se_gap,
        format!("no-children gap {:.2e} vs 2 SE {:.2e}", eq.gap(), 2.0 * eq.se_gap),
    )?;
    Ok(format!(
        "Var(Y|MB)={:.4} < Var(Y|Pa)={:.4}, gap {:.1} SE; parents-only |gap| {:.2e} <= 2 SE {:.2e}",
        est.var_blanket,
        est.var_parents,
        est.gap() / est.se_gap,
        eq.gap().abs(),
        2.0 * eq.se_gap
    ))
}

fn all_parent_spec() -> ScmSpec {
    serde_json::from_value(serde_json::json!({
        "nodes": [
            {"name": "a", "role": "invariant_parent", "noise": {"kind": "uniform", "scale": 1.0, "ar": 0.5}},
            {"name": "b", "role": "invariant_parent", "noise": {"kind": "laplace", "scale": 1.0, "ar": 0.3}},
            {"name": "c", "role": "invariant_parent", "noise": {"kind": "uniform", "scale": 1.0, "ar": 0.7},
             "offsets": [0.0, 0.5, -0.5, 1.0]}
        ],
        "target": {
            "name": "energy",
            "intercept": 4.0,
            "parents": [{"from": "a", "coef": 0.8}, {"from": "b", "coef": 0.6}, {"from": "c", "coef": -0.7}],
            "noise": {"kind": "laplace", "scale": 0.3, "ar": 0.0}
        }
    }))
    .expect("valid spec")
}

pub fn a10_baseline_coincidence() -> Outcome {
    let spec = all_parent_spec();
    let data = synth_scm_generate(&spec, 4, 400, 10).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 30, ..TrainConfig::desk() };
    let holdout = "domain_2";
    let base = blanket_mask_baseline(&cfg, &data.domains, "energy", holdout, 3, DEFAULT_THRESHOLD)
        .map_err(|e| e.to_string())?;
    let all = spec.feature_names();
    ensure(base.blanket.blanket == all, format!("blanket {:?} is not every feature", base.blanket.blanket))?;
    let erm = run_single(&TrainConfig { variant: Variant::Erm, ..cfg }, &data.domains, holdout, 3)
        .map_err(|e| e.to_string())?;
    let (a, b) = (base.run.test_nmse, erm.test_nmse);
    ensure(a.is_some(), "baseline run failed")?;
    ensure(
        a.map(f64::to_bits) == b.map(f64::to_bits),
        format!("baseline {a:?} vs ERM {b:?}"),
    )?;
    Ok(format!("blanket = all {} features; NMSE {:.6} identical bitwise", all.len(), a.unwrap()))
}
