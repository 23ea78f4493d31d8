#![no_main]

use libfuzzer_sys::fuzz_target;
use rlvr_lab::trainer::checkpoint_from_json;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = checkpoint_from_json(text, "fuzz.json");
    }
});
