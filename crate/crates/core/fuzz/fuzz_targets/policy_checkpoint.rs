#![no_main]

use libfuzzer_sys::fuzz_target;
use rlvr_lab::policy::{parse_checkpoint, PolicyParams};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(params) = parse_checkpoint(text, "fuzz.txt") {
        let again = PolicyParams::from_text(&params.to_text()).unwrap();
        assert_eq!(again.to_text(), params.to_text());
    }
});
