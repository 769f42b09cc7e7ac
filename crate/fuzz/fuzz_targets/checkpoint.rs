#![no_main]

use icth::neural::IcthModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(model) = IcthModel::from_checkpoint(text) else {
        return;
    };
    let again = model.to_checkpoint().expect("encode decoded model");
    assert_eq!(IcthModel::from_checkpoint(&again).expect("decode"), model);
});
