#![no_main]

use libfuzzer_sys::fuzz_target;
use rlvr_lab::config::{parse_override, resolve_values, ConfigSources};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let overrides: Vec<String> = text.lines().take(8).map(str::to_string).collect();
    for spec in &overrides {
        let _ = parse_override(spec);
    }
    let sources = ConfigSources {
        overrides,
        ..ConfigSources::default()
    };
    let _ = resolve_values(None, &sources);
});
