#![no_main]

use libfuzzer_sys::fuzz_target;
use umm_cli::args::SubjectArg;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(arg) = text.parse::<SubjectArg>() {
            assert!(arg.position >= 1);
        }
    }
});
