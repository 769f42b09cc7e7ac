#![no_main]

use std::path::Path;

use icth::cascade::{groups_from_str, groups_to_string, validate};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(groups) = groups_from_str(text, Path::new("fuzz")) else {
        return;
    };
    for c in groups.iter().flat_map(|g| &g.cascades) {
        let _ = validate(c);
        let _ = c.tiled();
    }
    // whatever parses must survive a round trip unchanged
    let again = groups_to_string(&groups).expect("serialize parsed groups");
    let back = groups_from_str(&again, Path::new("fuzz")).expect("reparse");
    assert_eq!(back, groups);
});
