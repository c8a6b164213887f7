use comol_core::accounting::{count_flops, count_params, CostConfig};
use comol_core::adapters::init_layer;
use comol_core::flops;
use comol_core::linalg::{frobenius_distance, matmul, reduced_svd, softmax};
use comol_core::persistence::{load_checkpoint, save_checkpoint, LoadedLayer};
use comol_core::rng::SeededRng;
use comol_core::{AdapterLayer, LayerConfig, Matrix, Method};
use proptest::prelude::*;

fn method() -> impl Strategy<Value = Method> {
    prop::sample::select(Method::ALL.to_vec())
}

fn layer_config() -> impl Strategy<Value = LayerConfig> {
    (method(), 1usize..7, 1usize..7, 1usize..4, 1usize..5, 1usize..5).prop_map(|(method, m, n, r, e, k)| {
        let c = LayerConfig::new(method, m, n, r, e);
        if method == Method::MoeSparse {
            c.with_top_k(k.min(e))
        } else {
            c
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 1..10), shift in -50.0f64..50.0) {
        let p = softmax(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_of_transpose_has_same_spectrum(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8) {
        let a: Matrix = SeededRng::new(seed).uniform_matrix(rows, cols, 1.0);
        let s = reduced_svd(&a).unwrap();
        let t = reduced_svd(&a.transpose()).unwrap();
        for (x, y) in s.sigma.iter().zip(&t.sigma) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        prop_assert!(frobenius_distance(&s.reconstruct(), &a).unwrap() < 1e-10);
    }

    #[test]
    fn matmul_associative(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6, d in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let (x, y, z): (Matrix, Matrix, Matrix) =
            (rng.uniform_matrix(a, b, 1.0), rng.uniform_matrix(b, c, 1.0), rng.uniform_matrix(c, d, 1.0));
        let left = matmul(&matmul(&x, &y).unwrap(), &z).unwrap();
        let right = matmul(&x, &matmul(&y, &z).unwrap()).unwrap();
        prop_assert!(frobenius_distance(&left, &right).unwrap() < 1e-12);
    }

    #[test]
    fn smear_permutes_with_tokens(seed in any::<u64>(), l in 2usize..6) {
        let mut layer: AdapterLayer = init_layer(&LayerConfig::new(Method::Smear, 4, 5, 2, 3), seed).unwrap();
        layer.randomize(seed, 0.6);
        let mut rng = SeededRng::new(seed ^ 1);
        let tokens: Matrix = rng.uniform_matrix(l, 5, 1.0);
        let mut order: Vec<usize> = (0..l).collect();
        rng.shuffle(&mut order);
        let permuted = Matrix::from_fn(l, 5, |i, j| tokens.get(order[i], j));
        let (a, b) = (layer.apply(&tokens).unwrap(), layer.apply(&permuted).unwrap());
        for (i, &src) in order.iter().enumerate() {
            for j in 0..4 {
                prop_assert!((b.get(i, j) - a.get(src, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counter_matches_closed_form(config in layer_config(), l in 1usize..5, seed in any::<u64>()) {
        let mut layer: AdapterLayer = init_layer(&config, seed).unwrap();
        layer.randomize(seed, 0.5);
        let tokens = SeededRng::new(seed).uniform_matrix(l, config.n, 1.0);
        let (out, tally) = flops::measure(|| layer.apply(&tokens));
        out.unwrap();
        let cost = count_flops(&CostConfig::from_layer(&config, l));
        prop_assert_eq!((tally.expert, tally.aggregation, tally.routing), (cost.expert, cost.aggregation, cost.routing));
        prop_assert_eq!(count_params(&CostConfig::from_layer(&config, l)).total as usize, layer.num_trainable());
    }

    #[test]
    fn routing_rows_sum_to_one(config in layer_config(), seed in any::<u64>()) {
        prop_assume!(config.method != Method::MoeSparse);
        let mut layer: AdapterLayer = init_layer(&config, seed).unwrap();
        layer.randomize(seed, 2.0);
        let tokens = SeededRng::new(seed).uniform_matrix(3, config.n, 1.0);
        let g = layer.routing_weights(&tokens).unwrap();
        for t in 0..3 {
            prop_assert!((g.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip(config in layer_config(), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut layer: AdapterLayer<f32> = init_layer(&config, seed).unwrap();
        layer.randomize(seed, 1.0);
        save_checkpoint(&layer, dir.path()).unwrap();
        prop_assert_eq!(load_checkpoint(dir.path()).unwrap(), LoadedLayer::F32(layer));
    }

    #[test]
    fn comol_params_grow_by_core_and_router(m in 1u64..5000, n in 1u64..5000, r in 1u64..16, e in 1u64..64) {
        let c = |e| count_params(&CostConfig::new(Method::Comol, m, n, r, e, 1)).total;
        prop_assert_eq!(c(e + 1) - c(e), r * r + r);
    }
}
