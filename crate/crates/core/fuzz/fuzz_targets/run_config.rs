#![no_main]

use kwspot_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_json(text) {
            assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }
});
