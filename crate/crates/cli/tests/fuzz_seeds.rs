//! Replays the checked-in fuzz corpus through the same entry points the fuzz
//! targets exercise, so regressions show up under plain `cargo test`.

use std::path::PathBuf;

use umm_cli::args::SubjectArg;
use umm_core::datagen::Manifest;
use umm_core::encoders::Vocabulary;
use umm_core::image::Image;
use umm_core::numerics::Checkpoint;
use umm_core::trainer::RunConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Seeds named `valid*` must be accepted; the rest only must not panic.
fn replay(target: &str, accept: impl Fn(&[u8]) -> bool) {
    for (name, bytes) in seeds(target) {
        let ok = accept(&bytes);
        if name.starts_with("valid") {
            assert!(ok, "{target}/{name} was rejected");
        }
    }
}

#[test]
fn checkpoint_seeds() {
    replay("checkpoint_decode", |b| match Checkpoint::decode(b) {
        Ok(c) => Checkpoint::decode(&c.encode()).unwrap().encode() == c.encode(),
        Err(_) => false,
    });
}

#[test]
fn manifest_seeds() {
    replay("manifest_parse", |b| {
        std::str::from_utf8(b).ok().and_then(|t| Manifest::parse(t).ok()).is_some_and(|m| {
            let text = m.to_text();
            Manifest::parse(&text).unwrap().to_text() == text
        })
    });
}

#[test]
fn vocab_seeds() {
    replay("vocab_parse", |b| std::str::from_utf8(b).ok().and_then(|t| Vocabulary::parse(t).ok()).is_some());
}

#[test]
fn config_seeds() {
    replay("config_parse", |b| {
        std::str::from_utf8(b).ok().and_then(|t| RunConfig::parse(t).ok()).is_some_and(|c| {
            let text = c.to_toml();
            RunConfig::parse(&text).unwrap().to_toml() == text
        })
    });
}

#[test]
fn tokenize_seeds() {
    let vocab = Vocabulary::from_words("a circle square on sand grass and".split(' ')).unwrap();
    replay("tokenize", |b| {
        let Some((&len, rest)) = b.split_first() else { return false };
        let Ok(text) = std::str::from_utf8(rest) else { return false };
        vocab.tokenize(text, len as usize).is_ok_and(|t| t.ids().len() == len as usize)
    });
}

#[test]
fn ppm_seeds() {
    replay("ppm_decode", |b| Image::decode_ppm(b).is_ok_and(|i| i.data().iter().all(|v| (-1.0..=1.0).contains(v))));
}

#[test]
fn subject_arg_seeds() {
    replay("subject_arg", |b| {
        std::str::from_utf8(b).ok().and_then(|t| t.parse::<SubjectArg>().ok()).is_some_and(|a| a.position >= 1)
    });
}
