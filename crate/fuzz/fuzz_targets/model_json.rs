#![no_main]

use icth::parametric::ModelFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(file) = ModelFile::from_json(text) {
        let _ = file.model();
        if let Ok(s) = file.to_json() {
            let back = ModelFile::from_json(&s).expect("reparse");
            assert_eq!(back.family, file.family);
            assert_eq!(back.kernel, file.kernel);
        }
    }
});
