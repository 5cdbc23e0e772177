#![no_main]

use std::path::Path;

use latprune_cli::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(m) = RunManifest::from_toml(s, Path::new("/base")) {
        assert!(m.model.as_deref().is_none_or(|p| p.is_absolute()));
    }
});
