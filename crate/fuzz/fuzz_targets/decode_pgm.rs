#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let r = splatseg::raster::decode_pgm(data);
    if let Ok(img) = r {
        assert_eq!(img.labels.len(), img.width as usize * img.height as usize);
    }
});
