use super::*;
use crate::neural::IcthConfig;
use crate::parametric::{simulate, Kernel, ParametricModel, SimulateOptions};

fn group(id: &str, n: usize, seed: u64) -> CascadeGroup {
    let model = ParametricModel::hawkes(0.5, Kernel::exponential(0.5, 1.0));
    let cascades = (0..n)
        .map(|i| {
            let mut c = simulate(&model, 8.0, seed * 1000 + i as u64, &SimulateOptions { max_events: Some(10) })
                .unwrap();
            c.id = format!("{id}-{i}");
            c
        })
        .collect();
    CascadeGroup::new(id, None, cascades)
}

#[test]
fn halves_are_balanced_disjoint_and_cover_the_group() {
    let groups = vec![group("a", 4, 1), group("b", 5, 2), group("c", 1, 3)];
    let pairs = make_pairs(&groups, 9);
    assert_eq!(pairs.len(), 2);
    assert_eq!((pairs[0].first.len(), pairs[0].second.len()), (2, 2));
    assert_eq!((pairs[1].first.len(), pairs[1].second.len()), (3, 2));
    for p in &pairs {
        let mut all: Vec<usize> = p.first.iter().chain(&p.second).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..groups[p.group].cascades.len()).collect::<Vec<_>>());
    }
    assert_eq!(make_pairs(&groups, 9), pairs);
    assert_ne!(make_pairs(&groups, 10), make_pairs(&groups, 11));
}

#[test]
fn adam_with_zero_rate_leaves_weights_untouched() {
    let m = IcthModel::new(IcthConfig::tiny(), 1).unwrap();
    let mut p = m.params.clone();
    let mut g = m.params.clone();
    for (_, x) in g.iter_mut() {
        x.fill(0.3);
    }
    let mut adam = Adam::new(0.0, &p);
    adam.step(&mut p, &g);
    assert_eq!(p, m.params);
}

#[test]
fn clipping_caps_the_joint_norm() {
    let mut a = ParamStore::new();
    a.insert("x", Mat::from_elem((1, 2), 3.0));
    let mut b = ParamStore::new();
    b.insert("y", Mat::from_elem((1, 1), 4.0));
    let before = clip_gradients(&mut [&mut a, &mut b], 5.0);
    assert!((before - 34f64.sqrt()).abs() < 1e-12);
    let after: f64 = [a.tensor("x"), b.tensor("y")]
        .iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>())
        .sum();
    assert!((after.sqrt() - 5.0).abs() < 1e-12);
}

#[test]
fn gradients_of_every_loss_match_finite_differences() {
    let model = tiny_model(3);
    for target in GradCheckTarget::ALL {
        let r = grad_check(&model, target, 1e-5, 3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{target:?}: {r:?}");
        assert!(r.values_checked > 0);
    }
}

#[test]
fn constant_directions_have_zero_gradient() {
    let model = IcthModel::zeros(IcthConfig::tiny()).unwrap();
    let c = super::gradcheck::tiny_cascade("z", 4, 6);
    let mut t = crate::autograd::Tape::new();
    let b = model.params.bind(&mut t, true);
    let ll = model.loglik_graph(&mut t, &b, &c).unwrap();
    let g = b.gradients(&t.backward(ll), &model.params);
    assert!(g.tensor("layers.0.heads.0.w_q").iter().all(|&x| x == 0.0));
    let base = crate::neural::icth_loglik(&model, &c).unwrap();
    let mut m = model.clone();
    m.params.get_mut("layers.0.heads.0.w_q").unwrap()[[0, 0]] = 0.5;
    assert_eq!(crate::neural::icth_loglik(&m, &c).unwrap(), base);
}

#[test]
fn pretraining_is_deterministic_and_never_worse_than_start() {
    let groups: Vec<CascadeGroup> = (0..4).map(|g| group(&format!("g{g}"), 4, g)).collect();
    let cfg = ContrastiveConfig {
        epochs: 2,
        batch_groups: 2,
        learning_rate: 1e-2,
        ..ContrastiveConfig::default()
    };
    let run = || {
        let mut m = IcthModel::new(IcthConfig::tiny(), 5).unwrap();
        let r = pretrain(&mut m, &groups, &cfg).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
    assert!(r1.best_loss <= r1.initial_loss);
    assert_eq!(r1.metrics.len(), 2);
    assert!(m1.extras.get("projection.w1").is_some());
}

#[test]
fn zero_learning_rate_keeps_backbone_bit_for_bit() {
    let groups: Vec<CascadeGroup> = (0..3).map(|g| group(&format!("g{g}"), 2, g + 10)).collect();
    let cfg = ContrastiveConfig {
        epochs: 1,
        batch_groups: 3,
        learning_rate: 0.0,
        ..ContrastiveConfig::default()
    };
    let mut m = IcthModel::new(IcthConfig::tiny(), 6).unwrap();
    let before = m.params.clone();
    pretrain(&mut m, &groups, &cfg).unwrap();
    assert_eq!(m.params, before);
}

#[test]
fn separable_embeddings_are_classified_perfectly_on_train() {
    let mut groups = Vec::new();
    for g in 0..12 {
        let label = if g % 2 == 0 { "slow" } else { "fast" };
        let k = if g % 2 == 0 {
            Kernel::exponential(0.2, 0.3)
        } else {
            Kernel::exponential(0.8, 5.0)
        };
        let mu = if g % 2 == 0 { 0.5 } else { 3.0 };
        let model = ParametricModel::hawkes(mu, k);
        let cascades = (0..6)
            .map(|i| {
                let mut c = simulate(&model, 4.0, g * 10 + i, &SimulateOptions { max_events: Some(14) })
                    .unwrap();
                c.id = format!("g{g}-{i}");
                c
            })
            .filter(|c| !c.is_empty())
            .collect();
        groups.push(CascadeGroup::new(format!("g{g}"), Some(label.into()), cascades));
    }
    let mut m = IcthModel::new(IcthConfig::tiny(), 7).unwrap();
    let cfg = HeadConfig {
        epochs: 400,
        patience: 400,
        learning_rate: 0.05,
        ..HeadConfig::default()
    };
    let r = finetune_classify(&mut m, &groups, &cfg).unwrap();
    assert_eq!(r.train_macro_f1, 1.0);
    assert_eq!(r.classes, vec!["fast".to_string(), "slow".to_string()]);
    let total: usize = r.confusion.iter().flatten().sum();
    assert_eq!(total, r.test_groups.len());
    assert!(m.extras.get("classifier.w").is_some());
    let again = finetune_classify(&mut IcthModel::new(IcthConfig::tiny(), 7).unwrap(), &groups, &cfg).unwrap();
    assert_eq!(again, r);
}

#[test]
fn classification_requires_two_classes() {
    let mut g = group("a", 2, 1);
    g.label = Some("x".into());
    let mut h = group("b", 2, 2);
    h.label = Some("x".into());
    let mut m = IcthModel::new(IcthConfig::tiny(), 1).unwrap();
    assert!(finetune_classify(&mut m, &[g, h], &HeadConfig::default()).is_err());
}

#[test]
fn popularity_predictions_are_non_negative_and_report_baseline() {
    let model = ParametricModel::hawkes(1.0, Kernel::exponential(0.5, 1.0));
    let cascades: Vec<Cascade> = (0..30)
        .map(|i| {
            let mut c = simulate(&model, 10.0, 100 + i, &SimulateOptions { max_events: Some(14) }).unwrap();
            c.id = format!("p{i}");
            c
        })
        .collect();
    let mut m = IcthModel::new(IcthConfig::tiny(), 8).unwrap();
    let cfg = HeadConfig {
        task: HeadTask::Popularity,
        epochs: 50,
        observation_time: Some(4.0),
        ..HeadConfig::default()
    };
    let r = finetune_popularity(&mut m, &cascades, &cfg).unwrap();
    assert!(!r.test.is_empty());
    assert!(r.test.iter().all(|a| a.predicted >= a.observed as f64 && a.ape >= 0.0));
    assert!(r.baseline_mean_ape.is_finite());
    let wrong = HeadConfig::default();
    assert!(finetune_popularity(&mut m, &cascades, &wrong).is_err());
}
