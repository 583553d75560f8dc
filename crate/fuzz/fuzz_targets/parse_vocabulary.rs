#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let r = splatseg::scene::io::parse_vocabulary(text);
    if let Ok(v) = r {
        assert_eq!(v.names().len(), v.len());
    }
});
