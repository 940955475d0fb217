use std::fs;
use std::path::Path;

use proptest::prelude::*;
use umm_core::datagen::{build_corpus, BBox, Corpus, CorpusStats, FilterPolicy, GrammarConfig, Manifest, ManifestRecord, SubjectRecord};

const GOLDEN: &str = "tests/golden/corpus_1000_seed7.json";

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_corpus_statistics_match_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, stats) = build_corpus(1000, &GrammarConfig::default(), &FilterPolicy::default(), 7, dir.path()).unwrap();
    let text = serde_json::to_string_pretty(&stats).unwrap() + "\n";
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(GOLDEN, &text).unwrap();
    }
    let golden: CorpusStats = serde_json::from_str(&fs::read_to_string(GOLDEN).unwrap()).unwrap();
    assert_eq!(stats, golden);
    assert_eq!(stats.acceptance_fraction().to_bits(), golden.acceptance_fraction().to_bits());
    assert_eq!(
        stats.candidates,
        stats.accepted + stats.rejected_area + stats.rejected_duplicate_label + stats.rejected_resolution
    );
    for n in [stats.rejected_area, stats.rejected_duplicate_label, stats.rejected_resolution] {
        assert!(n > 0, "every filter should fire on the default grammar: {stats:?}");
    }
}

#[test]
fn corpus_builds_are_byte_reproducible_and_load_back() {
    let g = GrammarConfig::default();
    let p = FilterPolicy::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (manifest, _) = build_corpus(120, &g, &p, 11, a.path()).unwrap();
    build_corpus(120, &g, &p, 11, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let corpus = Corpus::load(a.path()).unwrap();
    assert_eq!(corpus.samples.len(), manifest.records.len());
    assert_eq!(corpus.grammar, g);
    for (s, r) in corpus.samples.iter().zip(&manifest.records) {
        assert_eq!(s.caption, r.caption);
        assert_eq!(s.subjects.len(), r.subjects.len());
    }

    let c = tempfile::tempdir().unwrap();
    build_corpus(120, &g, &p, 12, c.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn missing_corpus_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Corpus::load(&dir.path().join("nope")).is_err());
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

fn subject() -> impl Strategy<Value = SubjectRecord> {
    ("[a-z0-9_]{1,10}\\.ppm", 1usize..20, (0usize..64, 0usize..64, 1usize..64, 1usize..64), word(), word()).prop_map(
        |(crop, position, (y, x, h, w), label, color)| SubjectRecord {
            crop: format!("crops/{crop}"),
            position,
            bbox: BBox { y, x, h, w },
            label,
            color,
        },
    )
}

fn record() -> impl Strategy<Value = ManifestRecord> {
    ("[a-z0-9]{1,10}", prop::collection::vec(word(), 0..8), word(), prop::collection::vec(subject(), 0..3)).prop_map(
        |(image, words, background, subjects)| ManifestRecord {
            image: format!("images/{image}.ppm"),
            caption: words.join(" "),
            background,
            subjects,
        },
    )
}

proptest! {
    #[test]
    fn manifest_round_trips(records in prop::collection::vec(record(), 0..6)) {
        let m = Manifest { records };
        let back = Manifest::parse(&m.to_text()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn manifest_parse_never_panics(text in "\\PC{0,200}") {
        let _ = Manifest::parse(&text);
    }
}
