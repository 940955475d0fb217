#![no_main]

use libfuzzer_sys::fuzz_target;
use umm_core::trainer::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = RunConfig::parse(text) {
            let text = c.to_toml();
            assert_eq!(RunConfig::parse(&text).expect("round trip").to_toml(), text);
        }
    }
});
