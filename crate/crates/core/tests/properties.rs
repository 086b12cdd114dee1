use std::collections::BTreeSet;

use cabernet::autodiff::{sigmoid, Tape, Tensor};
use cabernet::causal::{markov_blanket, prune, random_dag, read_graph, write_graph, CausalGraph};
use cabernet::explain::debias;
use cabernet::model::gate_weights;
use cabernet::objectives::{combined_reg_grad, independence_value, nmse, variance_loss, RegularizerWeights};
use cabernet::rng::seeded;
use cabernet::trainer::{BatchPlan, BatchStrategy};
use proptest::prelude::*;

fn softmax(alpha: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, alpha.len(), alpha.to_vec()));
    let g = gate_weights(&mut tape, a);
    tape.value(g).data().to_vec()
}

fn names(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("v{i}")).collect()
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        alpha in prop::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let g = softmax(&alpha);
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(g.iter().all(|&v| v > 0.0 && v <= 1.0));
        let shifted: Vec<f64> = alpha.iter().map(|a| a + shift).collect();
        for (a, b) in g.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_in_open_interval(x in -30.0f64..30.0) {
        let s = sigmoid(x);
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert!((sigmoid(-x) - (1.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn nmse_is_nonnegative_and_scale_free(
        pairs in prop::collection::vec((0.1f64..10.0, -5.0f64..10.0), 1..40),
        c in 0.01f64..100.0,
    ) {
        let (y, yhat): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let v = nmse(&y, &yhat).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(nmse(&y, &y).unwrap(), 0.0);
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        let hs: Vec<f64> = yhat.iter().map(|v| v * c).collect();
        prop_assert!((nmse(&ys, &hs).unwrap() - v).abs() <= 1e-10 * v.max(1.0));
    }

    #[test]
    fn variance_loss_vanishes_only_on_equal_losses(losses in prop::collection::vec(0.0f64..5.0, 1..8)) {
        let mut tape = Tape::new();
        let vars: Vec<_> = losses.iter().map(|&l| tape.constant(Tensor::scalar(l))).collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let m = tape.constant(Tensor::scalar(mean));
        let l = variance_loss(&mut tape, &vars, m).unwrap();
        let v = tape.value(l).item();
        prop_assert!(v >= 0.0);
        let spread = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - losses.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn independence_is_bounded_and_scale_free(
        data in prop::collection::vec(-3.0f64..3.0, 24),
        scales in prop::collection::vec(0.1f64..10.0, 3),
    ) {
        let z = Tensor::matrix(8, 3, data.clone());
        let v = independence_value(&z).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        let scaled: Vec<f64> = data.iter().enumerate().map(|(i, x)| x * scales[i % 3]).collect();
        let w = independence_value(&Tensor::matrix(8, 3, scaled)).unwrap();
        prop_assert!((v - w).abs() < 1e-10);
        let mut rows: Vec<f64> = data[3..].to_vec();
        rows.extend_from_slice(&data[..3]);
        let u = independence_value(&Tensor::matrix(8, 3, rows)).unwrap();
        prop_assert!((v - u).abs() < 1e-10);
    }

    #[test]
    fn regularizer_gradient_sign_follows_tipping_point(
        be in 0.01f64..2.0,
        l1 in 0.0f64..2.0,
        f in 0.001f64..0.999,
    ) {
        let w = RegularizerWeights { lambda_be: be, lambda_l1: l1, lambda_var: 0.0, lambda_indy: 0.0 };
        let f_star = w.tipping_point().unwrap();
        prop_assume!((f - f_star).abs() > 1e-6);
        let g = combined_reg_grad(f, &w);
        // descent lowers alpha below the tipping point and raises it above
        prop_assert_eq!(g > 0.0, f < f_star);
    }

    #[test]
    fn debias_inverts_the_gate(
        j in prop::collection::vec(0.0f64..5.0, 12),
        g in prop::collection::vec(0.01f64..1.0, 4),
    ) {
        let total: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / total).collect();
        let jm = Tensor::matrix(3, 4, j);
        let deb = debias(&jm, &g).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let back = deb.matrix.get(r, c) * g[c];
                prop_assert!(deb.matrix.get(r, c) >= 0.0);
                prop_assert!((back - jm.get(r, c)).abs() <= 1e-12 * jm.get(r, c).max(1.0));
            }
        }
    }

    #[test]
    fn proportional_batches_cover_every_window_once(
        sizes in prop::collection::vec(1usize..60, 1..5),
        batch in 2usize..40,
        seed in any::<u64>(),
        epoch in 0usize..5,
    ) {
        let windows: Vec<Vec<usize>> = sizes.iter().map(|&n| (10..10 + n).collect()).collect();
        let plan = BatchPlan::new(windows.clone(), batch, BatchStrategy::Proportional, seed).unwrap();
        let batches = plan.epoch(epoch);
        prop_assert_eq!(batches.len(), plan.batches_per_epoch());
        let mut seen: Vec<(usize, usize)> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        let mut expected: Vec<(usize, usize)> = windows
            .iter()
            .enumerate()
            .flat_map(|(e, ws)| ws.iter().map(move |&t| (e, t)))
            .collect();
        expected.sort_unstable();
        prop_assert_eq!(seen, expected);
        prop_assert_eq!(plan.epoch(epoch), batches);
    }

    #[test]
    fn stratified_batches_are_balanced(
        sizes in prop::collection::vec(1usize..60, 1..5),
        batch in 8usize..40,
        seed in any::<u64>(),
    ) {
        let k = sizes.len();
        let windows: Vec<Vec<usize>> = sizes.iter().map(|&n| (0..n).collect()).collect();
        let plan = BatchPlan::new(windows, batch, BatchStrategy::StratifiedEqual, seed).unwrap();
        for b in plan.epoch(0) {
            for e in 0..k {
                let count = b.iter().filter(|(d, _)| *d == e).count();
                prop_assert_eq!(count, batch / k);
            }
            prop_assert!(b.iter().all(|&(e, t)| t < sizes[e]));
        }
    }

    #[test]
    fn blanket_membership_is_symmetric(seed in any::<u64>(), m in 2usize..9) {
        let mut rng = seeded(seed);
        let (b, order) = random_dag(m, 0.4, &mut rng);
        let g = CausalGraph { variables: names(m), b, order, threshold: None };
        prop_assert!(g.respects_order());
        let sets: Vec<BTreeSet<String>> = (0..m)
            .map(|t| markov_blanket(&g, &format!("v{t}")).unwrap().blanket.into_iter().collect())
            .collect();
        for i in 0..m {
            let me = format!("v{i}");
            prop_assert!(!sets[i].contains(&me));
            for j in 0..m {
                prop_assert_eq!(sets[i].contains(&format!("v{j}")), sets[j].contains(&format!("v{i}")));
            }
        }
    }

    #[test]
    fn pruning_zeroes_exactly_the_small_entries(seed in any::<u64>(), t in 0.0f64..1.5) {
        let mut rng = seeded(seed);
        let (b, order) = random_dag(6, 0.5, &mut rng);
        let g = CausalGraph { variables: names(6), b: b.clone(), order, threshold: None };
        let p = prune(&g, t);
        for i in 0..6 {
            for j in 0..6 {
                let (orig, kept) = (b.get(i, j), p.b.get(i, j));
                if orig.abs() < t {
                    prop_assert_eq!(kept, 0.0);
                } else {
                    prop_assert_eq!(kept, orig);
                }
            }
        }
        prop_assert!(p.respects_order());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn graph_files_round_trip(seed in any::<u64>(), m in 2usize..7) {
        let mut rng = seeded(seed);
        let (b, order) = random_dag(m, 0.5, &mut rng);
        let g = CausalGraph { variables: names(m), b, order, threshold: Some(0.1) };
        let mb = markov_blanket(&g, "v0").unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_graph(dir.path(), &g, Some(&mb), Some("abc")).unwrap();
        let (back, mb_back) = read_graph(dir.path()).unwrap();
        prop_assert_eq!(back.variables, g.variables);
        prop_assert_eq!(back.order, g.order);
        prop_assert_eq!(back.b.data(), g.b.data());
        prop_assert_eq!(mb_back.map(|m| m.blanket), Some(mb.blanket));
    }
}

#[test]
fn tensor_rejects_mismatched_length() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
}
