//! Synthetic captioned-scene corpus: scene grammar and renderer, discard
//! filters, manifest format and corpus builder.

mod corpus;
mod filter;
mod grammar;

pub use corpus::{
    build_corpus, candidate_of, make_fixtures, scene_seed, Corpus, CorpusStats, Fixture, Manifest, ManifestRecord, Subject,
    SubjectRecord, TrainingSample, MANIFEST_SCHEMA, MANIFEST_VERSION,
};
pub use filter::{apply_filters, Candidate, FilterDecision, FilterPolicy, RejectReason};
pub use grammar::{shape_covers, BBox, GeneratedScene, GrammarConfig, NamedColor, Scene, SceneObject};
