use proptest::prelude::*;

use super::*;

fn small() -> SyntheticBenchConfig {
    SyntheticBenchConfig {
        n_groups_per_family: 3,
        cascades_per_group: 6,
        horizon: 20.0,
        max_events_per_cascade: 7,
        knn_k: 1,
        seed: 5,
        model: IcthConfig::tiny(),
        ..SyntheticBenchConfig::default()
    }
}

#[test]
fn synthetic_groups_are_labelled_canonical_and_reproducible() {
    let cfg = small();
    let g = generate_synthetic_groups(&cfg).unwrap();
    assert_eq!(g.len(), 6);
    assert_eq!(g.iter().map(|x| x.cascades.len()).sum::<usize>(), 36);
    assert_eq!(g[0].label.as_deref(), Some(EXPONENTIAL));
    assert_eq!(g[5].label.as_deref(), Some(POWER_LAW));
    assert_eq!(g[4].group_id, "power_law-001");
    for c in g.iter().flat_map(|x| &x.cascades) {
        assert!(validate(&c).is_empty(), "{}", c.id);
        assert_eq!(c.records[0], crate::cascade::CascadeRecord::event(0.0));
        assert!(c.event_times().len() <= 7);
    }
    assert_eq!(g, generate_synthetic_groups(&cfg).unwrap());
    let other = SyntheticBenchConfig { seed: 6, ..cfg };
    assert_ne!(g, generate_synthetic_groups(&other).unwrap());
}

#[test]
fn desk_config_has_forty_groups_and_two_thousand_cascades() {
    let cfg = SyntheticBenchConfig::default();
    let g = generate_synthetic_groups(&cfg).unwrap();
    assert_eq!(g.len(), 40);
    assert_eq!(g.iter().map(|x| x.cascades.len()).sum::<usize>(), 2000);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = |f: fn(&mut SyntheticBenchConfig)| {
        let mut c = small();
        f(&mut c);
        assert!(generate_synthetic_groups(&c).is_err());
    };
    bad(|c| c.exponential.kappa = [0.9, 0.3]);
    bad(|c| c.power_law.theta = [0.0, 1.0]);
    bad(|c| c.power_law.c = [f64::NAN, 1.0]);
    bad(|c| c.n_groups_per_family = 0);
    bad(|c| c.p_missing = vec![1.5]);
    bad(|c| c.max_events_per_cascade = 100);
    bad(|c| {
        c.immigrant = false;
        c.background_rate = 0.0;
    });
}

#[test]
fn down_sampling_masks_are_nested_and_counts_kept() {
    let g = generate_synthetic_groups(&small()).unwrap();
    let lo = downsample_groups(&g, 0.3, 11).unwrap();
    let hi = downsample_groups(&g, 0.8, 11).unwrap();
    for ((a, b), c) in lo.iter().zip(&hi).zip(&g) {
        assert_eq!(a.total_count(), c.total_count());
        assert_eq!(b.total_count(), c.total_count());
        for (x, y) in a.cascades.iter().zip(&b.cascades) {
            let kept: Vec<f64> = x.event_times();
            assert!(y.event_times().iter().all(|t| kept.contains(t)));
        }
    }
    assert_eq!(downsample_groups(&g, 0.0, 11).unwrap(), g);
}

#[test]
fn benchmark_reports_one_level_per_probability() {
    let cfg = SyntheticBenchConfig {
        p_missing: vec![0.0, 0.9],
        ..small()
    };
    let training = ContrastiveConfig {
        epochs: 1,
        batch_groups: 3,
        ..ContrastiveConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = BenchOptions {
        export_dir: Some(dir.path().to_path_buf()),
        timings: false,
    };
    let r = run_downsampling_benchmark(&cfg, &training, &opts).unwrap();
    assert_eq!(r.levels.len(), 2);
    assert_eq!(r.n_groups, 6);
    for l in &r.levels {
        assert!(l.count_preserved);
        assert!((0.0..=1.0).contains(&l.retrieval_accuracy));
        assert!((0.0..=1.0).contains(&l.knn_accuracy));
        assert!((-1.0..=1.0).contains(&l.silhouette));
        let rows = read_embeddings(l.embeddings.as_ref().unwrap()).unwrap();
        assert_eq!(rows.len(), 6);
    }
    assert!(r.levels[1].observed_events < r.levels[0].observed_events);
    assert!(r.runtime_seconds.is_none());
    let again = run_downsampling_benchmark(&cfg, &training, &opts).unwrap();
    assert_eq!(r.to_json().unwrap(), again.to_json().unwrap());
}

fn rotate(points: &[Vec<f64>], angle: f64) -> Vec<Vec<f64>> {
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q[0] = c * p[0] - s * p[1];
            q[1] = s * p[0] + c * p[1];
            q
        })
        .collect()
}

fn points(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_rotation_invariant(p in points(12), angle in 0.0f64..6.283, labels in prop::collection::vec(0usize..3, 12)) {
        let r = rotate(&p, angle);
        let halves: Vec<(Vec<f64>, Vec<f64>)> = p.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
        let rhalves: Vec<(Vec<f64>, Vec<f64>)> = r.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
        if let (Ok(a), Ok(b)) = (pair_retrieval(&halves), pair_retrieval(&rhalves)) {
            prop_assert_eq!(a, b);
        }
        prop_assert_eq!(knn_accuracy(&p, &labels, 3).unwrap(), knn_accuracy(&r, &labels, 3).unwrap());
        if let Ok(s) = silhouette(&p, &labels) {
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - silhouette(&r, &labels).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(p in points(20), k in 1usize..6, seed in 0u64..100) {
        let km = kmeans(&p, k, seed).unwrap();
        prop_assert!(km.inertia.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
        prop_assert_eq!(km, kmeans(&p, k, seed).unwrap());
    }

    #[test]
    fn embeddings_round_trip_exactly(vals in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 4), 0..5)) {
        let rows: Vec<EmbeddingRow> = vals.into_iter().enumerate().map(|(i, values)| EmbeddingRow {
            group_id: format!("g{i}"),
            label: "x".into(),
            values,
        }).collect();
        let text = embeddings_to_string(&rows).unwrap();
        prop_assert_eq!(embeddings_from_str(&text, Path::new("p")).unwrap(), rows);
    }

    #[test]
    fn jaccard_matrix_is_symmetric(sets in prop::collection::vec(prop::collection::btree_set("[a-d]", 0..4), 2..8)) {
        let assign: Vec<usize> = (0..sets.len()).map(|i| i % 2).collect();
        let r = jaccard_matrix(&sets, &assign).unwrap();
        for i in 0..sets.len() {
            prop_assert!(r.matrix[i][i].is_none());
            for j in 0..sets.len() {
                prop_assert_eq!(r.matrix[i][j], r.matrix[j][i]);
            }
        }
    }
}

#[test]
fn random_embeddings_retrieve_near_chance() {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::seeded(3);
    let mut total = 0.0;
    for _ in 0..20 {
        let halves: Vec<(Vec<f64>, Vec<f64>)> = (0..40)
            .map(|_| {
                let mut v = || (0..8).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>();
                (v(), v())
            })
            .collect();
        total += pair_retrieval(&halves).unwrap();
    }
    // chance is 1/79 per half
    assert!(total / 20.0 < 0.04, "{}", total / 20.0);
}

#[test]
fn shuffled_labels_give_prior_level_knn() {
    use rand::seq::SliceRandom;
    let mut r = rng::seeded(8);
    let pts: Vec<Vec<f64>> = (0..400).map(|_| vec![r.gen::<f64>(), r.gen::<f64>()]).collect();
    let mut labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
    labels.shuffle(&mut r);
    let acc = knn_accuracy(&pts, &labels, 5).unwrap();
    assert!((acc - 0.5).abs() < 0.1, "{acc}");
}
