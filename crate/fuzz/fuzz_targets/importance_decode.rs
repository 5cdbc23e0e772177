#![no_main]

use latprune::importance::ImportanceState;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let (manifest, blob) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    if let Ok(state) = ImportanceState::decode(manifest, blob) {
        for (_, shape, values) in state.layers() {
            assert_eq!(shape.iter().product::<usize>(), values.len());
            assert!(values.iter().all(|v| *v >= 0.0));
        }
    }
});
