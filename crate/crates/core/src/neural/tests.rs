use super::*;
use crate::cascade::downsample;
use rand::Rng;

fn random_times(rng: &mut crate::rng::Rng, n: usize, horizon: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..horizon)).collect();
    t.sort_by(f64::total_cmp);
    t
}

fn mixed_cascade(seed: u64, n: usize) -> Cascade {
    let mut rng = crate::rng::seeded(seed);
    let times = random_times(&mut rng, n, 10.0);
    let c = Cascade::from_event_times(format!("c{seed}"), 10.0, &times)
        .unwrap()
        .tiled();
    downsample(&c, 0.5, seed).unwrap()
}

fn model(seed: u64) -> IcthModel {
    let mut m = IcthModel::new(IcthConfig::tiny(), seed).unwrap();
    m.params.get_mut("intensity.alpha").unwrap()[[0, 0]] = -0.3;
    m
}

#[test]
fn time_encoding_at_zero_alternates_one_and_zero() {
    let e = encode_time(0.0, 8);
    assert_eq!(e, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    for t in [0.3, 17.0, 1e4] {
        assert!(encode_time(t, 16).iter().all(|x| (-1.0..=1.0).contains(x)));
    }
    let e = encode_time(1000.0, 4);
    assert!((e[2] - (1000.0 / 1000f64.sqrt()).cos()).abs() < 1e-15);
    assert!((e[3] - 1.0f64.sin()).abs() < 1e-15);
}

#[test]
fn events_are_not_masked() {
    let m = model(1);
    let x = m.encode_record(&CascadeRecord::event(2.5)).unwrap();
    assert_eq!(x, encode_time(2.5, 8));
}

#[test]
fn zero_mask_weights_quarter_the_encoding() {
    let m = IcthModel::zeros(IcthConfig::tiny()).unwrap();
    let x = m.encode_record(&CascadeRecord::censored(1.5, 2.0, 4)).unwrap();
    for (a, b) in x.iter().zip(encode_time(1.5, 8)) {
        assert!((a - 0.25 * b).abs() < 1e-15);
    }
}

#[test]
fn masks_lie_strictly_inside_unit_interval() {
    let m = model(2);
    let r = CascadeRecord::censored(3.0, 0.7, 12);
    let x = m.encode_record(&r).unwrap();
    for (a, b) in x.iter().zip(encode_time(3.0, 8)) {
        let ratio = a / b;
        assert!(ratio > 0.0 && ratio < 1.0, "{ratio}");
    }
}

#[test]
fn zero_network_intensity_is_beta_log_two() {
    for beta in [1.0, 2.5] {
        let cfg = IcthConfig {
            beta,
            ..IcthConfig::tiny()
        };
        let m = IcthModel::zeros(cfg).unwrap();
        let fp = m.forward(&mixed_cascade(3, 8)).unwrap();
        for j in 0..fp.len() {
            assert!((fp.record_intensity(j) - beta * 2f64.ln()).abs() < 1e-15);
        }
    }
}

#[test]
fn hidden_states_ignore_later_records() {
    let m = model(4);
    let c = Cascade::from_event_times("a", 10.0, &[0.5, 1.0, 2.0, 4.0, 7.0]).unwrap();
    let mut moved = c.clone();
    moved.records[3] = CascadeRecord::event(5.5);
    let a = m.forward(&c).unwrap();
    let b = m.forward(&moved).unwrap();
    assert_eq!(a.start_hidden(), b.start_hidden());
    for j in 0..3 {
        assert_eq!(a.hidden().row(j), b.hidden().row(j));
    }
    assert_ne!(a.hidden().row(3), b.hidden().row(3));
}

#[test]
fn intensity_follows_trend_within_segments() {
    let mut m = model(5);
    let c = Cascade::from_event_times("a", 10.0, &[1.0, 4.0]).unwrap();
    m.params.get_mut("intensity.alpha").unwrap()[[0, 0]] = 0.0;
    let fp = m.forward(&c).unwrap();
    assert_eq!(fp.intensity(1.5).unwrap(), fp.intensity(3.9).unwrap());
    assert_eq!(fp.intensity(4.2).unwrap(), fp.record_intensity(1));
    assert!((fp.compensator(1.5, 3.0).unwrap() - 1.5 * fp.record_intensity(0)).abs() < 1e-14);

    m.params.get_mut("intensity.alpha").unwrap()[[0, 0]] = 0.4;
    let fp = m.forward(&c).unwrap();
    let xs: Vec<f64> = (0..20).map(|i| fp.intensity(4.0 + 0.3 * (i + 1) as f64).unwrap()).collect();
    assert!(xs.windows(2).all(|w| w[1] > w[0]));
    assert!((fp.intensity(4.0 + 1e-12).unwrap() - fp.record_intensity(1)).abs() < 1e-11);
    assert!(fp.intensity(-1.0).is_err());
}

#[test]
fn compensator_is_additive_and_converges() {
    let mut rng = crate::rng::seeded(6);
    let c = mixed_cascade(6, 10);
    let m = model(6);
    let fp = m.forward(&c).unwrap();
    for _ in 0..50 {
        let mut p = [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)];
        p.sort_by(f64::total_cmp);
        let sum = fp.compensator(p[0], p[1]).unwrap() + fp.compensator(p[1], p[2]).unwrap();
        assert!((sum - fp.compensator(p[0], p[2]).unwrap()).abs() < 1e-12);
        assert!(fp.compensator(p[0], p[1]).unwrap() >= 0.0);
    }
    let mut fine = m.clone();
    fine.config.integ_points = 16;
    let fq = fine.forward(&c).unwrap();
    let coarse = fp.compensator(0.0, 10.0).unwrap();
    let refined = fq.compensator(0.0, 10.0).unwrap();
    assert!(((coarse - refined) / refined).abs() < 1e-3);
}

#[test]
fn event_only_likelihood_matches_pointwise_path() {
    let m = model(7);
    let mut rng = crate::rng::seeded(7);
    for i in 0..20 {
        let n = rng.gen_range(0..12);
        let times = random_times(&mut rng, n, 10.0);
        let c = Cascade::from_event_times(format!("e{i}"), 10.0, &times).unwrap();
        let a = icth_loglik(&m, &c).unwrap();
        let b = event_only_loglik(&m, &c).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn interval_likelihood_has_count_and_compensator_terms_only() {
    let m = model(8);
    let c = Cascade::new(
        "i",
        6.0,
        vec![
            CascadeRecord::censored(0.0, 1.5, 3),
            CascadeRecord::censored(1.5, 2.0, 0),
            CascadeRecord::censored(3.5, 2.5, 5),
        ],
    )
    .unwrap();
    let fp = m.forward(&c).unwrap();
    let expected = 3.0 * fp.compensator(0.0, 1.5).unwrap().ln()
        + 5.0 * fp.compensator(3.5, 6.0).unwrap().ln()
        - fp.compensator(0.0, 6.0).unwrap();
    assert!((icth_loglik(&m, &c).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn likelihood_rejects_untiled_mixed_cascades() {
    let m = model(9);
    let c = Cascade::new(
        "x",
        6.0,
        vec![CascadeRecord::censored(1.0, 1.0, 2), CascadeRecord::event(4.0)],
    )
    .unwrap();
    assert!(matches!(icth_loglik(&m, &c), Err(Error::InvalidCascade { .. })));
    assert!(icth_loglik(&m, &c.tiled()).unwrap().is_finite());
}

#[test]
fn long_sequences_are_rejected() {
    let m = model(10);
    let times: Vec<f64> = (0..17).map(|i| i as f64 * 0.5).collect();
    let c = Cascade::from_event_times("long", 10.0, &times).unwrap();
    assert!(matches!(m.forward(&c), Err(Error::SequenceTooLong { len: 17, max: 16 })));
}

#[test]
fn likelihood_gradients_match_finite_differences() {
    let m = model(11);
    let c = mixed_cascade(11, 6);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, true);
    let ll = m.loglik_graph(&mut tape, &b, &c).unwrap();
    let grads = b.gradients(&tape.backward(ll), &m.params);
    let mut worst = 0.0_f64;
    for (name, g) in grads.iter() {
        for idx in 0..g.len() {
            let eval = |delta: f64| {
                let mut p = m.clone();
                p.params.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += delta;
                icth_loglik(&p, &c).unwrap()
            };
            let num = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            let a = g.as_slice().unwrap()[idx];
            worst = worst.max((a - num).abs() / (1.0 + num.abs()));
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut m = model(12);
    m.extras.insert("head.w", Mat::from_elem((2, 3), 0.1));
    let text = m.to_checkpoint().unwrap();
    let back = IcthModel::from_checkpoint(&text).unwrap();
    assert_eq!(back, m);
    let bumped = text.replace("\"version\":1", "\"version\":9");
    assert!(IcthModel::from_checkpoint(&bumped).is_err());
}

#[test]
fn checkpoint_rejects_wrong_shapes() {
    let mut m = model(13);
    *m.params.get_mut("intensity.w").unwrap() = Mat::zeros((3, 1));
    let text = m.to_checkpoint().unwrap();
    assert!(matches!(IcthModel::from_checkpoint(&text), Err(Error::Shape { .. })));
}

#[test]
fn embeddings_follow_mean_rules() {
    let m = model(14);
    let single = Cascade::new("s", 5.0, vec![CascadeRecord::event(1.0)]).unwrap();
    let fp = m.forward(&single).unwrap();
    assert_eq!(cascade_embedding(&m, &single).unwrap(), fp.hidden().row(0).to_vec());

    let a = mixed_cascade(20, 5);
    let b = mixed_cascade(21, 6);
    let g1 = CascadeGroup::new("g", None, vec![a.clone()]);
    assert_eq!(group_embedding(&m, &g1).unwrap(), cascade_embedding(&m, &a).unwrap());

    let pair = CascadeGroup::new("p", None, vec![a.clone(), b.clone()]);
    let doubled = CascadeGroup::new("d", None, vec![a.clone(), b.clone(), a.clone(), b.clone()]);
    let e1 = group_embedding(&m, &pair).unwrap();
    let e2 = group_embedding(&m, &doubled).unwrap();
    for (x, y) in e1.iter().zip(&e2) {
        assert!((x - y).abs() < 1e-15);
    }
    let other = CascadeGroup::new("o", None, vec![mixed_cascade(22, 4), mixed_cascade(23, 6)]);
    assert_ne!(e1, group_embedding(&m, &other).unwrap());

    let empty = CascadeGroup::new("e", None, vec![]);
    assert!(group_embedding(&m, &empty).is_err());
    let blank = Cascade::new("b", 1.0, vec![]).unwrap();
    assert!(cascade_embedding(&m, &blank).is_err());
}

#[test]
fn identical_cascades_embed_identically() {
    let m = model(15);
    let c = mixed_cascade(15, 9);
    assert_eq!(
        cascade_embedding(&m, &c).unwrap(),
        cascade_embedding(&m, &c.clone()).unwrap()
    );
}
