#![no_main]

use std::fmt::Display;
use std::str::FromStr;

use latprune::importance::ReductionConfig;
use latprune::latency::{AnalyticalParams, ProviderSpec};
use latprune::search::{GoalSpec, StepPolicy};
use libfuzzer_sys::fuzz_target;

fn round_trip<T: FromStr + Display + PartialEq + std::fmt::Debug>(s: &str) {
    if let Ok(v) = s.parse::<T>() {
        let again = v.to_string().parse::<T>().ok();
        assert_eq!(again.as_ref(), Some(&v), "{s:?}");
    }
}

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    round_trip::<GoalSpec>(s);
    round_trip::<StepPolicy>(s);
    round_trip::<ReductionConfig>(s);
    round_trip::<AnalyticalParams>(s);
    round_trip::<ProviderSpec>(s);
});
