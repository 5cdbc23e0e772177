#![no_main]

use latprune::latency::parse_latency_output;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(ms) = parse_latency_output(s) {
        assert!(ms.is_finite() && ms > 0.0);
    }
});
