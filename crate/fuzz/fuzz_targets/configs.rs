#![no_main]

use icth::cli::{BenchmarkFile, FitFile, GradcheckFile, PretrainFile, SimulateConfig};
use icth::training::HeadConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // first byte picks the config type
    let Some((&kind, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    match kind % 6 {
        0 => {
            if let Ok(c) = serde_json::from_str::<BenchmarkFile>(text) {
                let _ = c.synthetic.check();
                let _ = c.training.check();
            }
        }
        1 => {
            if let Ok(c) = serde_json::from_str::<PretrainFile>(text) {
                let _ = c.model.check();
                let _ = c.training.check();
            }
        }
        2 => {
            if let Ok(c) = serde_json::from_str::<SimulateConfig>(text) {
                let _ = c.model.model();
            }
        }
        3 => {
            let _ = serde_json::from_str::<FitFile>(text).map(|c| c.init.model());
        }
        4 => {
            let _ = serde_json::from_str::<HeadConfig>(text);
        }
        _ => {
            let _ = serde_json::from_str::<GradcheckFile>(text);
        }
    }
});
