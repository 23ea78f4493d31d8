#![no_main]

use libfuzzer_sys::fuzz_target;
use rlvr_lab::audit::{audit, parse_trace};
use rlvr_lab::objectives::BaselineClips;
use rlvr_lab::types::ClipConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(lines) = parse_trace(text, "fuzz.jsonl") {
        let _ = audit(
            &lines,
            &ClipConfig::default(),
            (0.0, 1.0),
            &BaselineClips::default(),
        );
    }
});
