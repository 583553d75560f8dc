#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let r = splatseg::scene::io::decode_point_cloud(data);
    if let Ok(cloud) = r {
        assert!(cloud.validate().is_ok());
    }
});
