#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let r = splatseg::scene::io::decode_scene(data);
    if let Ok(scene) = r {
        assert!(scene.validate().is_ok());
        let again = splatseg::scene::io::encode_scene(&scene).expect("decoded scenes encode");
        assert_eq!(splatseg::scene::io::decode_scene(&again).expect("re-decodes").gaussians.len(), scene.gaussians.len());
    }
});
