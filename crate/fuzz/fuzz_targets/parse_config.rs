#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::config::Settings;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut s = Settings::default();
    if s.merge_json(text).is_err() {
        return;
    }
    let mut echoed: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&s.to_json()).expect("echo is a JSON object");
    echoed.retain(|_, v| !v.is_null());
    let mut back = Settings::default();
    back.merge_json(&serde_json::Value::Object(echoed).to_string()).expect("echo reloads");
    assert_eq!(back, s);
});
