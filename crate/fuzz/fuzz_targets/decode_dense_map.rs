#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let r = splatseg::scene::io::decode_dense_map(data);
    if let Ok(map) = r {
        assert_eq!(splatseg::scene::io::encode_dense_map(&map), data);
    }
});
