use std::path::Path;

use icth::cascade::{
    downsample, groups_from_str, groups_to_string, raw_from_str, raw_to_string,
    reconstruct_missing_counts, validate, Cascade, CascadeGroup, CascadeRecord, RawCascade,
    RawObservedEvent,
};
use icth::neural::{event_only_loglik, icth_loglik, IcthConfig, IcthModel};
use icth::parametric::{Kernel, ModelFile, ParametricModel};
use proptest::prelude::*;

fn times(max: usize) -> impl Strategy<Value = (f64, Vec<f64>)> {
    (0.5f64..80.0, prop::collection::vec(0.0f64..1.0, 0..max)).prop_map(|(h, mut u)| {
        u.sort_by(f64::total_cmp);
        u.dedup();
        (h, u.into_iter().map(|x| x * h).collect())
    })
}

fn mixed_cascade() -> impl Strategy<Value = Cascade> {
    (times(30), prop::collection::vec(0u64..6, 32)).prop_map(|((h, t), counts)| {
        let mut records = Vec::new();
        let mut prev = 0.0;
        for (i, &x) in t.iter().enumerate() {
            if x > prev {
                records.push(CascadeRecord::spanning(prev, x, counts[i]));
            }
            records.push(CascadeRecord::event(x));
            prev = x;
        }
        if h > prev {
            records.push(CascadeRecord::spanning(prev, h, counts[31]));
        }
        Cascade::new("p", h, records).unwrap()
    })
}

fn raw_trace() -> impl Strategy<Value = (f64, Vec<RawObservedEvent>)> {
    (times(20), prop::collection::vec(0u64..50, 20)).prop_filter_map("need one event", |((h, t), c)| {
        if t.is_empty() {
            return None;
        }
        let raw = t
            .iter()
            .zip(c)
            .map(|(&time, cumulative_count)| RawObservedEvent { time, cumulative_count })
            .collect();
        Some((h, raw))
    })
}

proptest! {
    #[test]
    fn downsampling_keeps_the_total_and_canonical_form(c in mixed_cascade(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        prop_assert!(validate(&c).is_empty());
        let d = downsample(&c, p, seed).unwrap();
        prop_assert_eq!(d.total_count(), c.total_count());
        prop_assert!(validate(&d).is_empty());
        let kept = c.event_times();
        prop_assert!(d.event_times().iter().all(|t| kept.contains(t)));
    }

    #[test]
    fn reconstruction_is_canonical_and_accounts_for_adjustments((h, raw) in raw_trace()) {
        let (c, warnings) = reconstruct_missing_counts("r", &raw, h).unwrap();
        prop_assert!(validate(&c).is_empty());
        let adjusted: i64 = warnings.iter().map(|w| w.adjustment).sum();
        let last = raw.last().unwrap().cumulative_count as i64;
        prop_assert_eq!(c.total_count() as i64, last + adjusted);
        prop_assert_eq!(c.event_times().len(), raw.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn group_files_round_trip(cs in prop::collection::vec(mixed_cascade(), 1..4), label in prop::option::of("[a-z_]{1,8}")) {
        let cascades: Vec<Cascade> = cs
            .into_iter()
            .enumerate()
            .map(|(i, c)| Cascade { id: format!("c{i}"), ..c })
            .collect();
        let groups = vec![CascadeGroup::new("g", label, cascades)];
        let text = groups_to_string(&groups).unwrap();
        let back = groups_from_str(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &groups);
        prop_assert_eq!(groups_to_string(&back).unwrap(), text);
    }

    #[test]
    fn raw_files_round_trip((h, events) in raw_trace()) {
        let raw = vec![RawCascade { cascade_id: "x".into(), events, horizon: h }];
        let text = raw_to_string(&raw).unwrap();
        prop_assert_eq!(raw_from_str(&text, Path::new("mem")).unwrap(), raw);
    }

    #[test]
    fn model_files_round_trip(mu in 0.0f64..3.0, kappa in 0.0f64..2.0, theta in 0.01f64..5.0, c in 0.01f64..3.0, power in any::<bool>()) {
        let kernel = if power { Kernel::power_law(kappa, theta, c) } else { Kernel::exponential(kappa, theta) };
        let m = ParametricModel::hawkes(mu, kernel);
        let f = ModelFile::new(&m, Some(-1.5));
        let back = ModelFile::from_json(&f.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.model().unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn event_only_cascades_use_the_event_path((h, t) in times(15), seed in 0u64..1000) {
        let c = Cascade::from_event_times("e", h, &t).unwrap();
        let m = IcthModel::new(IcthConfig::tiny(), seed).unwrap();
        let a = icth_loglik(&m, &c).unwrap();
        let b = event_only_loglik(&m, &c).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let m = IcthModel::new(IcthConfig::tiny(), seed).unwrap();
        let text = m.to_checkpoint().unwrap();
        let back = IcthModel::from_checkpoint(&text).unwrap();
        prop_assert_eq!(back.to_checkpoint().unwrap(), text);
    }
}
