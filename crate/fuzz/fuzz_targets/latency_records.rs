#![no_main]

use std::path::Path;

use latprune::latency::parse_records;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = parse_records(data, Path::new("fuzz.jsonl")) {
        assert!(file.valid_len <= data.len());
        assert!(file.records.iter().all(|(sig, ms)| !sig.is_empty() && *ms > 0.0));
        let again = parse_records(&data[..file.valid_len], Path::new("fuzz.jsonl")).unwrap();
        assert_eq!(again.records, file.records);
    }
});
