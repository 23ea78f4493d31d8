#![no_main]

use libfuzzer_sys::fuzz_target;
use rlvr_lab::config::{parse_config_text, resolve_values, ConfigSources};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(value) = parse_config_text(text, "fuzz.json") {
        if let Ok(cfg) = resolve_values(Some(&value), &ConfigSources::default()) {
            // A resolved config must survive its own echo.
            let again = rlvr_lab::config::RunConfig::from_value(cfg.to_value()).unwrap();
            assert_eq!(again, cfg);
        }
    }
});
