use std::collections::BTreeSet;

use fedle_core::data::{gen_synthetic, partition_noniid};
use fedle_core::energy::{network_alive, step_battery, step_cost};
use fedle_core::similarity::{build_similarity_matrix, embed_clients, kmeans, lowest_pair};
use fedle_core::{BatteryParams, BatteryState, Metric};
use proptest::prelude::*;

fn vectors(k: usize, len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-5.0f64..5.0, len).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)),
        k,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_disjoint_and_respects_roles(
        classes in 3usize..6,
        per_class in 10usize..30,
        clients in 2usize..12,
        shard_size in 1usize..40,
        seed in any::<u64>(),
    ) {
        let ds = gen_synthetic(classes, 3, per_class, 0.1, seed).unwrap();
        let shard_clients = clients / 2;
        let p = match partition_noniid(&ds, clients, shard_clients, shard_size, 0, seed) {
            Ok(p) => p,
            Err(fedle_core::Error::PartitionInfeasible { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(p.client_count(), clients);
        prop_assert!(p.shard_size <= shard_size);
        let mut seen = BTreeSet::new();
        for (id, idx) in p.clients.iter().enumerate() {
            for &i in idx {
                prop_assert!(seen.insert(i), "sample {i} assigned twice");
            }
            let labels = p.client_labels(&ds, id);
            if id >= shard_clients {
                prop_assert_eq!(labels, vec![0]);
            } else {
                prop_assert_eq!(idx.len(), p.shard_size);
                prop_assert!(!labels.contains(&0));
            }
        }
        // every majority-class sample is dealt out, as evenly as possible
        let majority: Vec<usize> = p.clients[shard_clients..].iter().map(Vec::len).collect();
        prop_assert_eq!(majority.iter().sum::<usize>(), per_class);
        prop_assert!(majority.iter().max().unwrap() - majority.iter().min().unwrap() <= 1);
    }

    #[test]
    fn similarity_matrix_is_symmetric_with_unit_diagonal(vs in (2usize..7, 1usize..6).prop_flat_map(|(k, n)| vectors(k, n))) {
        let m = build_similarity_matrix(&vs, Metric::Cosine).unwrap();
        let k = vs.len();
        for i in 0..k {
            prop_assert_eq!(m.get(i, i), 1.0);
            for j in 0..k {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
                prop_assert!((-1.0..=1.0).contains(&m.get(i, j)));
            }
            prop_assert!((m.row_sums[i] - m.scores[i].iter().sum::<f64>()).abs() < 1e-12);
        }
        let (a, b) = lowest_pair(&m);
        prop_assert!(a < b);
        prop_assert!(m.off_diagonal().iter().all(|&v| v >= m.get(a, b)));
        let e = embed_clients(&m, a, b);
        prop_assert_eq!(e[a], [1.0, m.get(a, b)]);
        prop_assert_eq!(e[b], [m.get(a, b), 1.0]);
    }

    #[test]
    fn cosine_is_scale_invariant(vs in vectors(3, 4), scale in 0.1f64..10.0) {
        let scaled: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
        let a = build_similarity_matrix(&vs, Metric::Cosine).unwrap();
        let b = build_similarity_matrix(&scaled, Metric::Cosine).unwrap();
        for (x, y) in a.off_diagonal().iter().zip(b.off_diagonal()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_objective_never_increases(
        points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 3..30),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= points.len());
        let r = kmeans(&points, k, seed, 100, 0.0).unwrap();
        prop_assert_eq!(r.labels.len(), points.len());
        prop_assert!(r.labels.iter().all(|&l| l < k));
        for w in r.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "objective rose {} -> {}", w[0], w[1]);
        }
        // at a fixpoint every point sits with its nearest centroid
        if r.iterations < 100 {
            for (p, &l) in points.iter().zip(&r.labels) {
                let d = |c: &Vec<f64>| c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let own = d(&r.centroids[l]);
                prop_assert!(r.centroids.iter().all(|c| own <= d(c) + 1e-9));
            }
        }
    }

    #[test]
    fn battery_step_charges_exactly_and_clamps(
        level in 0.21f64..1.0,
        r in 0.0f64..0.05,
        s in 0.0f64..0.2,
        a in 0.0f64..0.05,
        selected: bool,
        extra in 0u32..3,
    ) {
        let params = BatteryParams { b0: level, r, s, a };
        let state = BatteryState::new(&params, 0.2);
        let next = step_battery(&state, &params, selected, extra, 0.2).unwrap();
        let cost = step_cost(&params, selected, extra);
        let expected = r + if selected { s + a } else { 0.0 } + f64::from(extra) * a;
        prop_assert!((cost - expected).abs() < 1e-15);
        prop_assert_eq!(next.level, (level - cost).max(0.0));
        prop_assert_eq!(next.alive, next.level > 0.2);
        let dead = BatteryState { alive: false, ..next };
        prop_assert!(step_battery(&dead, &params, false, 0, 0.2).is_err());
    }

    #[test]
    fn network_dies_at_the_dead_fraction(levels in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let dead = levels.iter().filter(|&&l| l <= 0.2).count();
        let alive = network_alive(&levels, 0.2, 0.5);
        prop_assert_eq!(alive, 2 * dead < levels.len());
    }
}
