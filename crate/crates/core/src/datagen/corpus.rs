use std::fs;
use std::path::{Component, Path};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{apply_filters, BBox, Candidate, FilterDecision, FilterPolicy, GeneratedScene, GrammarConfig, RejectReason};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_SCHEMA: &str = "umm-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub crop: Image,
    /// Caption index of the label word, BOS = 0.
    pub position: usize,
    pub bbox: BBox,
    pub label: String,
    pub color: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub image: Image,
    pub caption: String,
    pub background: String,
    pub subjects: Vec<Subject>,
}

impl TrainingSample {
    /// Keeps the objects whose label appears in the caption, each at the
    /// first unused occurrence. Returns the sample and the number dropped.
    pub fn from_scene(grammar: &GrammarConfig, generated: &GeneratedScene) -> Result<(Self, usize)> {
        let words: Vec<String> = generated.caption.split_whitespace().map(str::to_lowercase).collect();
        let mut subjects = Vec::new();
        let mut dropped = 0;
        for obj in &generated.scene.objects {
            let label = grammar.shapes[obj.shape].to_lowercase();
            let taken: Vec<usize> = subjects.iter().map(|s: &Subject| s.position).collect();
            let found = (0..words.len()).find(|&i| words[i] == label && !taken.contains(&(i + 1)));
            match found {
                Some(i) => {
                    let b = obj.bbox;
                    subjects.push(Subject {
                        crop: generated.image.crop(b.y, b.x, b.h, b.w)?,
                        position: i + 1,
                        bbox: b,
                        label,
                        color: grammar.colors[obj.color].name.clone(),
                    });
                }
                None => dropped += 1,
            }
        }
        subjects.sort_by_key(|s| s.position);
        let sample = TrainingSample {
            image: generated.image.clone(),
            caption: generated.caption.clone(),
            background: grammar.backgrounds[generated.scene.background].name.clone(),
            subjects,
        };
        Ok((sample, dropped))
    }

    pub fn validate(&self) -> Result<()> {
        let words: Vec<String> = self.caption.split_whitespace().map(str::to_lowercase).collect();
        let mut prev = 0;
        for s in &self.subjects {
            if s.position <= prev || s.position > words.len() {
                return Err(Error::InvalidPosition {
                    position: s.position,
                    reason: "positions must be increasing caption word indices".into(),
                });
            }
            prev = s.position;
            if words[s.position - 1] != s.label {
                return Err(Error::invalid(format!(
                    "caption word {} is `{}`, subject label is `{}`",
                    s.position,
                    words[s.position - 1],
                    s.label
                )));
            }
            if self.image.crop(s.bbox.y, s.bbox.x, s.bbox.h, s.bbox.w)? != s.crop {
                return Err(Error::invalid(format!("crop for `{}` does not match its box", s.label)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub crop: String,
    pub position: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    pub color: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub caption: String,
    pub background: String,
    pub subjects: Vec<SubjectRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    schema: String,
    version: u32,
}

/// JSON-lines manifest: a schema header line, then one record per sample.
/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let header = ManifestHeader {
            schema: MANIFEST_SCHEMA.into(),
            version: MANIFEST_VERSION,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::format("manifest", format!("line {line}: {reason}"));
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|e| bad(1, e.to_string()))?;
        if header.schema != MANIFEST_SCHEMA || header.version != MANIFEST_VERSION {
            return Err(bad(1, format!("unsupported schema {} v{}", header.schema, header.version)));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
            for p in std::iter::once(&r.image).chain(r.subjects.iter().map(|s| &s.crop)) {
                check_relative(p).map_err(|e| bad(i + 1, e))?;
            }
            records.push(r);
        }
        Ok(Manifest { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn check_relative(p: &str) -> std::result::Result<(), String> {
    let path = Path::new(p);
    if p.is_empty() || path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(format!("`{p}` must be a relative path without `..`"));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub candidates: usize,
    pub accepted: usize,
    pub rejected_area: usize,
    pub rejected_duplicate_label: usize,
    pub rejected_resolution: usize,
    pub subjects_kept: usize,
    pub subjects_dropped: usize,
    /// Accepted samples left without any subject.
    pub text_only: usize,
}

impl CorpusStats {
    pub fn acceptance_fraction(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.accepted as f64 / self.candidates as f64
        }
    }

    fn reject(&mut self, r: RejectReason) {
        match r {
            RejectReason::Area => self.rejected_area += 1,
            RejectReason::DuplicateLabel => self.rejected_duplicate_label += 1,
            RejectReason::Resolution => self.rejected_resolution += 1,
        }
    }
}

/// Seed of scene `index` in a corpus built with `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.random()
}

pub fn candidate_of(grammar: &GrammarConfig, generated: &GeneratedScene) -> Candidate {
    Candidate {
        height: generated.image.height(),
        width: generated.image.width(),
        source_resolution: generated.scene.source_resolution,
        boxes: generated
            .scene
            .objects
            .iter()
            .map(|o| (grammar.shapes[o.shape].clone(), o.bbox))
            .collect(),
    }
}

/// Generates `n` candidate scenes, filters them and writes the accepted
/// samples with their crops, vocabulary, grammar, manifest and statistics.
pub fn build_corpus(n: usize, grammar: &GrammarConfig, policy: &FilterPolicy, seed: u64, out: &Path) -> Result<(Manifest, CorpusStats)> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be positive"));
    }
    grammar.validate()?;
    policy.validate()?;
    let vocab = grammar.vocabulary()?;
    for dir in [out.to_path_buf(), out.join("images"), out.join("crops")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut stats = CorpusStats::default();
    let mut manifest = Manifest::default();
    for i in 0..n {
        stats.candidates += 1;
        let generated = grammar.generate_scene(scene_seed(seed, i as u64))?;
        if let FilterDecision::Reject(r) = apply_filters(&candidate_of(grammar, &generated), policy) {
            stats.reject(r);
            continue;
        }
        stats.accepted += 1;
        let (sample, dropped) = TrainingSample::from_scene(grammar, &generated)?;
        stats.subjects_dropped += dropped;
        stats.subjects_kept += sample.subjects.len();
        if sample.subjects.is_empty() {
            stats.text_only += 1;
        }
        let image_rel = format!("images/{i:06}.ppm");
        sample.image.save_ppm(out.join(&image_rel))?;
        let mut subjects = Vec::new();
        for (k, s) in sample.subjects.iter().enumerate() {
            let crop_rel = format!("crops/{i:06}_{k}.ppm");
            s.crop.save_ppm(out.join(&crop_rel))?;
            subjects.push(SubjectRecord {
                crop: crop_rel,
                position: s.position,
                bbox: s.bbox,
                label: s.label.clone(),
                color: s.color.clone(),
            });
        }
        manifest.records.push(ManifestRecord {
            image: image_rel,
            caption: sample.caption,
            background: sample.background,
            subjects,
        });
    }
    manifest.save(out.join("manifest.jsonl"))?;
    vocab.save(out.join("vocab.txt"))?;
    write_json(&out.join("grammar.json"), grammar)?;
    write_json(&out.join("stats.json"), &stats)?;
    Ok((manifest, stats))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// A corpus read back from disk with every record re-validated.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub grammar: GrammarConfig,
    pub vocab: Vocabulary,
    pub samples: Vec<TrainingSample>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let grammar_path = dir.join("grammar.json");
        if !grammar_path.exists() {
            return Err(Error::MissingInput(grammar_path));
        }
        let text = fs::read_to_string(&grammar_path).map_err(|e| Error::io(&grammar_path, e))?;
        let grammar: GrammarConfig = serde_json::from_str(&text).map_err(|e| Error::format("grammar", e.to_string()))?;
        grammar.validate()?;
        let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
        let manifest = Manifest::load(dir.join("manifest.jsonl"))?;
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let image = Image::load_ppm(dir.join(&r.image))?;
            let mut subjects = Vec::new();
            for s in &r.subjects {
                subjects.push(Subject {
                    crop: Image::load_ppm(dir.join(&s.crop))?,
                    position: s.position,
                    bbox: s.bbox,
                    label: s.label.clone(),
                    color: s.color.clone(),
                });
            }
            let sample = TrainingSample {
                image,
                caption: r.caption.clone(),
                background: r.background.clone(),
                subjects,
            };
            sample.validate()?;
            samples.push(sample);
        }
        Ok(Corpus { grammar, vocab, samples })
    }
}

/// Held-out evaluation case: a caption naming a shape on one background and
/// a subject image of that shape cut from a scene with a different
/// background.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub caption: String,
    pub position: usize,
    pub subject: Image,
    pub shape: usize,
    pub color: usize,
    pub subject_background: usize,
    pub background: usize,
}

pub fn make_fixtures(grammar: &GrammarConfig, count: usize, seed: u64) -> Result<Vec<Fixture>> {
    grammar.validate()?;
    if grammar.backgrounds.len() < 2 {
        return Err(Error::invalid("fixtures need at least two backgrounds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_size = grammar.min_object.max(grammar.max_object.saturating_sub(4)).max(1);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = rng.random_range(0..grammar.shapes.len());
        let palette = &grammar.palettes[shape];
        let color = palette[rng.random_range(0..palette.len())];
        let subject_background = rng.random_range(0..grammar.backgrounds.len());
        let offset = rng.random_range(1..grammar.backgrounds.len());
        let background = (subject_background + offset) % grammar.backgrounds.len();
        let size = rng.random_range(min_size..=grammar.max_object);
        let subject = grammar.render_subject(shape, color, subject_background, size, rng.random())?;
        let obj = crate::datagen::SceneObject {
            shape,
            color,
            bbox: BBox { y: 0, x: 0, h: 0, w: 0 },
        };
        let caption = grammar.caption(&grammar.template, &[obj], background);
        let label = grammar.shapes[shape].to_lowercase();
        let position = caption
            .split_whitespace()
            .position(|w| w.to_lowercase() == label)
            .ok_or_else(|| Error::invalid("template does not name the shape"))?
            + 1;
        out.push(Fixture {
            caption,
            position,
            subject,
            shape,
            color,
            subject_background,
            background,
        });
    }
    Ok(out)
}
