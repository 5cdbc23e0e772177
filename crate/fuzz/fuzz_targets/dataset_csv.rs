#![no_main]

use latprune::executor::parse_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(split) = parse_csv(data, "label") {
        assert_eq!(split.x.len(), split.len() * split.features);
    }
});
