#![no_main]

use emkd::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_json(text) {
            let round = serde_json::to_string(&cfg).unwrap();
            assert!(RunConfig::from_json(&round).is_ok(), "serialized config rejected: {round}");
        }
    }
});
