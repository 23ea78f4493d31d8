#![no_main]

use libfuzzer_sys::fuzz_target;
use rlvr_lab::metrics::{compare_logs, parse_log};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(log) = parse_log(text, "fuzz.jsonl") {
        let steps: Vec<u64> = log.records.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        let _ = compare_logs(&[log], "mean_entropy");
    }
});
