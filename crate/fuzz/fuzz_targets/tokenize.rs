#![no_main]

use libfuzzer_sys::fuzz_target;
use umm_core::encoders::Vocabulary;

fuzz_target!(|data: &[u8]| {
    let Some((&len, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let vocab = Vocabulary::from_words("a circle square on sand grass and".split(' ')).expect("fixed vocabulary");
    if let Ok(tokens) = vocab.tokenize(text, len as usize) {
        assert_eq!(tokens.ids().len(), len as usize);
        let _ = vocab.decode(&tokens);
    }
});
