use proptest::prelude::*;
use sparse_mlp::graph::Graph;
use sparse_mlp::moe::{self, importance_loss, importance_score_filter, top_k_indices, GatingParams, MixingMode, MoeParams};
use sparse_mlp::params::build_store;
use sparse_mlp::verify::gradcheck_point;
use sparse_mlp::{Rng, Tensor};

fn shape() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..=8)
        .prop_flat_map(|n| (1usize..=24, Just(n), 1..=n, 1usize..=10, any::<u64>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_keeps_k_unnormalized_weights((m, n, k, d, seed) in shape(), training in any::<bool>()) {
        let gating = GatingParams::new("g", n, k).unwrap();
        let mut rng = Rng::new(seed);
        let mut store = build_store(&gating.layout(d), &mut rng).unwrap();
        gradcheck_point(&mut store, &mut rng);
        let items = Tensor::from_fn(&[m, d], |_| rng.normal()).unwrap();
        let out = moe::gate(&items, &store, &gating, &mut rng, training).unwrap();
        prop_assert_eq!(out.selected.len(), m * k);
        for (row, probs) in out.weights.data().chunks(n).zip(out.probs.data().chunks(n)) {
            prop_assert_eq!(row.iter().filter(|w| **w > 0.0).count(), k);
            let total: f64 = row.iter().sum();
            prop_assert!(total <= 1.0 + 1e-12);
            // kept weights are the softmax values themselves
            for (w, p) in row.iter().zip(probs) {
                prop_assert!(*w == 0.0 || w == p);
            }
        }
        if !training {
            prop_assert_eq!(out.clean_logits.data(), out.noisy_logits.data());
        }
    }

    #[test]
    fn top_k_is_a_sorted_prefix(row in prop::collection::vec(-3.0f64..3.0, 1..10), k in 1usize..10) {
        let idx = top_k_indices(&row, k);
        prop_assert_eq!(idx.len(), k.min(row.len()));
        for w in idx.windows(2) {
            prop_assert!(row[w[0]] > row[w[1]] || (row[w[0]] == row[w[1]] && w[0] < w[1]));
        }
        let floor = idx.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
        for i in (0..row.len()).filter(|i| !idx.contains(i)) {
            prop_assert!(row[i] <= floor);
        }
    }

    #[test]
    fn filter_drops_floor_fraction(m in 1usize..200, n in 1usize..6, fraction in 0.0f64..0.9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let probs = Tensor::from_fn(&[m, n], |_| rng.uniform()).unwrap();
        let kept = importance_score_filter(&probs, fraction);
        prop_assert_eq!(m - kept.len(), (fraction * m as f64).floor() as usize);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let score = |i: usize| probs.data()[i * n..(i + 1) * n].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lowest_kept = kept.iter().map(|&i| score(i)).fold(f64::INFINITY, f64::min);
        for i in (0..m).filter(|i| !kept.contains(i)) {
            prop_assert!(score(i) <= lowest_kept);
        }
    }

    #[test]
    fn importance_cv2_is_bounded(m in 1usize..20, n in 1usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let logits = g.constant(Tensor::from_fn(&[m, n], |_| rng.normal()).unwrap());
        let probs = g.softmax(logits).unwrap();
        let loss = importance_loss(g.value(probs)).unwrap();
        prop_assert!((0.0..=(n as f64 - 1.0) + 1e-9).contains(&loss));
    }

    #[test]
    fn routed_counts_are_conserved((m, n, k, d, seed) in shape(), eliminate in any::<bool>()) {
        let fraction = if eliminate { 0.1 } else { 0.0 };
        let p = MoeParams::new("m", MixingMode::Token, n, k, fraction).unwrap();
        let mut rng = Rng::new(seed);
        let store = build_store(&p.layout(d, 3), &mut rng).unwrap();
        let items = Tensor::from_fn(&[m, d], |_| rng.normal()).unwrap();
        let (y, out) = moe::moe_forward(&items, &store, &p, &mut rng, true).unwrap();
        prop_assert_eq!(y.shape(), items.shape());
        prop_assert_eq!(out.histogram.iter().sum::<usize>(), out.kept.len() * k);
        prop_assert_eq!(out.expert_evaluations, out.kept.len() * k);
        prop_assert!(y.is_finite());
    }
}
