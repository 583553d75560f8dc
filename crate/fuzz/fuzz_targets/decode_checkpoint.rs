#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let r = splatseg::autodiff::Checkpoint::decode(data);
    if let Ok(ck) = r {
        assert_eq!(ck.encode().expect("decoded checkpoints encode"), data);
    }
});
