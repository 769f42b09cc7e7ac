#![no_main]

use std::path::Path;

use icth::eval::{embeddings_from_str, embeddings_to_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(rows) = embeddings_from_str(text, Path::new("fuzz")) else {
        return;
    };
    // rows with ragged widths cannot come out of the parser
    if let Ok(again) = embeddings_to_string(&rows) {
        assert_eq!(embeddings_from_str(&again, Path::new("fuzz")).expect("reparse"), rows);
    }
});
