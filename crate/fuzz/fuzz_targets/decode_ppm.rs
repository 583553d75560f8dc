#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let r = splatseg::raster::decode_ppm(data);
    if let Ok(img) = r {
        assert_eq!(img.data.len(), img.width as usize * img.height as usize * 3);
    }
});
