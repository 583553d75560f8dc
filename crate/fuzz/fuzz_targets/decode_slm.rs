#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let r = splatseg::raster::decode_slm(data);
    if let Ok(img) = r {
        assert_eq!(splatseg::raster::encode_slm(&img), data);
    }
});
