#![no_main]

use libfuzzer_sys::fuzz_target;
use umm_core::image::Image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::decode_ppm(data) {
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
});
