use proptest::prelude::*;

use ahbn::config::ExperimentConfig;
use ahbn::retrieval::{attribute_map, rank_queries, topk_accuracy, Gallery};
use ahbn::sketch::{cbp_vector, make_sketch_params, outer_sketch_oracle, project};
use ahbn::synth::{generate_dataset, read_manifest, write_manifest, Split, SynthSpec};
use ahbn::tensor::{circular_convolve, dft, idft_real};

fn vec_strategy(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn small_spec(seed: u64, num_items: usize) -> SynthSpec {
    SynthSpec { num_items, renders_per_item: 2, queries_per_item: 1, seed, ..SynthSpec::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cbp_matches_outer_product_sketch(
        x1 in vec_strategy(1..=12), x2 in vec_strategy(1..=12), d in 1usize..40, seed in any::<u64>()
    ) {
        let p1 = make_sketch_params(x1.len(), d, seed).unwrap();
        let p2 = make_sketch_params(x2.len(), d, seed ^ 1).unwrap();
        let fast = cbp_vector(&x1, &x2, &p1, &p2).unwrap();
        let slow = outer_sketch_oracle(&x1, &x2, &p1, &p2).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn projection_is_linear_and_bounded_by_l1(
        x in vec_strategy(1..=20), s in -3.0f64..3.0, d in 1usize..32, seed in any::<u64>()
    ) {
        let p = make_sketch_params(x.len(), d, seed).unwrap();
        let px = project(&x, &p).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
        let ps = project(&scaled, &p).unwrap();
        for (a, b) in px.iter().zip(&ps) {
            prop_assert!((a * s - b).abs() <= 1e-12);
        }
        let l2 = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        let l1: f64 = x.iter().map(|v| v.abs()).sum();
        prop_assert!(l2 <= l1 + 1e-12);
    }

    #[test]
    fn dft_round_trip_and_convolution_commutes(a in vec_strategy(1..=48), seed in any::<u64>()) {
        let back = idft_real(&dft(&a).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&back) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let b: Vec<f64> = (0..a.len()).map(|i| ((seed.wrapping_add(i as u64) % 7) as f64) - 3.0).collect();
        let ab = circular_convolve(&a, &b).unwrap();
        let ba = circular_convolve(&b, &a).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn ranking_is_a_permutation_and_accuracy_grows_with_k(
        rows in prop::collection::vec(vec_strategy(3..=3), 1..20),
        queries in prop::collection::vec(vec_strategy(3..=3), 1..6),
    ) {
        let ids: Vec<usize> = (0..rows.len()).map(|i| i % 4).collect();
        let gallery = Gallery::new(rows.clone(), ids.clone()).unwrap();
        let ranked = rank_queries(&queries, &gallery).unwrap();
        for list in &ranked {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..rows.len()).collect::<Vec<_>>());
        }
        let query_ids: Vec<usize> = (0..queries.len()).map(|i| ids[i % ids.len()]).collect();
        let ks = [1, 2, 3, 5, 8, 13, 21];
        let topk = topk_accuracy(&ranked, &query_ids, &ids, &ks).unwrap();
        let accs: Vec<f64> = ks.iter().map(|k| topk.acc_at_k[k]).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(accs.iter().all(|&a| (0.0..=1.0).contains(&a)));
        prop_assert_eq!(*accs.last().unwrap(), 1.0);
    }

    #[test]
    fn ranking_is_invariant_to_rotations(
        rows in prop::collection::vec(vec_strategy(2..=2), 1..12),
        q in vec_strategy(2..=2),
        theta in 0.0f64..std::f64::consts::TAU,
    ) {
        let rot = |v: &Vec<f64>| vec![v[0] * theta.cos() - v[1] * theta.sin(), v[0] * theta.sin() + v[1] * theta.cos()];
        let ids: Vec<usize> = (0..rows.len()).collect();
        let plain = rank_queries(std::slice::from_ref(&q), &Gallery::new(rows.clone(), ids.clone()).unwrap()).unwrap();
        let rotated = rank_queries(&[rot(&q)], &Gallery::new(rows.iter().map(rot).collect(), ids).unwrap()).unwrap();
        let dist = |g: usize| (rows[g][0] - q[0]).powi(2) + (rows[g][1] - q[1]).powi(2);
        // Equal up to near-ties, which rotation roundoff may reorder.
        for (a, b) in plain[0].iter().zip(&rotated[0]) {
            prop_assert!(a == b || (dist(*a) - dist(*b)).abs() <= 1e-9);
        }
    }

    #[test]
    fn average_precision_is_a_probability(
        scores in prop::collection::vec(vec_strategy(3..=3), 1..15),
        bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 3), 15),
    ) {
        let targets = bits[..scores.len()].to_vec();
        let ap = attribute_map(&scores, &targets).unwrap();
        for (a, v) in ap.ap.iter().enumerate() {
            let has_positive = targets.iter().any(|t| t[a]);
            prop_assert_eq!(v.is_some(), has_positive);
            if let Some(v) = v {
                prop_assert!(*v > 0.0 && *v <= 1.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn synthetic_data_is_seed_deterministic(seed in any::<u64>()) {
        let spec = small_spec(seed, 8);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        let other = generate_dataset(&small_spec(seed.wrapping_add(1), 8)).unwrap();
        prop_assert_ne!(a.items, other.items);
    }

    #[test]
    fn manifest_round_trips(seed in any::<u64>()) {
        let ds = generate_dataset(&small_spec(seed, 6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for split in [Split::Train, Split::Query, Split::Gallery] {
            let path = dir.path().join(split.file_name());
            let manifest = ds.manifest(split);
            write_manifest(&path, &manifest).unwrap();
            prop_assert_eq!(read_manifest(&path).unwrap(), manifest);
        }
    }

    #[test]
    fn config_toml_round_trips(seed in 0u64..i64::MAX as u64, epochs in 1usize..50, d in 1usize..512) {
        let text = format!("seed = {seed}\n[train]\nmax_epochs = {epochs}\n[arch.fusion]\nd = {d}\n");
        let cfg = ExperimentConfig::from_toml_str(&text, None, None).unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap(), None, None).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.config_hash(), cfg.config_hash());
    }
}
