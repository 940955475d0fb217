#![no_main]

use libfuzzer_sys::fuzz_target;
use umm_core::datagen::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = Manifest::parse(text) {
            let text = m.to_text();
            assert_eq!(Manifest::parse(&text).expect("round trip").to_text(), text);
        }
    }
});
