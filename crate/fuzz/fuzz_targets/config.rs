//! `key = value` config parser.

#![no_main]

use dsgcqr::config::KeyValues;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KeyValues::parse(text) {
        for e in kv.entries() {
            let _ = kv.get::<f64>(&e.key);
        }
    }
});
