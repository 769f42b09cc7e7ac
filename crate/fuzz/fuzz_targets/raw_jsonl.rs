#![no_main]

use std::path::Path;

use icth::cascade::{raw_from_str, raw_to_string, reconstruct_missing_counts, validate};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(raw) = raw_from_str(text, Path::new("fuzz")) else {
        return;
    };
    for r in &raw {
        if let Ok((c, warnings)) = reconstruct_missing_counts(&r.cascade_id, &r.events, r.horizon) {
            assert!(validate(&c).is_empty());
            let last = r.events.last().map_or(0, |e| e.cumulative_count) as i128;
            let adj: i128 = warnings.iter().map(|w| w.adjustment as i128).sum();
            if c.total_count() < u64::MAX {
                assert_eq!(c.total_count() as i128, last + adj);
            }
        }
    }
    let again = raw_to_string(&raw).expect("serialize");
    assert_eq!(raw_from_str(&again, Path::new("fuzz")).expect("reparse"), raw);
});
