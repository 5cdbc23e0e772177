#![no_main]

use latprune::graph::{build_channel_groups, decode_model, encode_model};
use libfuzzer_sys::fuzz_target;

// Manifest and tensor blob are separated by the first zero byte.
fuzz_target!(|data: &[u8]| {
    let (manifest, blob) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    let Ok(model) = decode_model(manifest, blob) else { return };
    let _ = build_channel_groups(&model);
    let (json, bin) = encode_model(&model).expect("decoded models encode");
    let again = decode_model(&json, &bin).expect("encoded models decode");
    assert_eq!(encode_model(&again).unwrap(), (json, bin));
});
