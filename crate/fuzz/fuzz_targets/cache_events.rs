#![no_main]

use latprune::cache::{read_events_csv, write_events_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(events) = read_events_csv(data) else { return };
    let mut out = Vec::new();
    write_events_csv(&events, &mut out).unwrap();
    let again = read_events_csv(out.as_slice()).unwrap();
    assert_eq!(again.len(), events.len());
});
