use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Word-level vocabulary. Ids are dense from 0 and the first three are the
/// reserved `<pad>`, `<bos>`, `<eos>` tokens.
///
/// On disk it is one token per line, line number = id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Tokenized caption padded to a fixed length: `BOS w₁ … wₙ EOS PAD …`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    len: usize,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in first-seen order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.to_lowercase();
            validate_word(&w)?;
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::format("vocabulary", "must start with <pad>, <bos>, <eos>"));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if i >= RESERVED.len() {
                validate_word(t).map_err(|_| Error::format("vocabulary", format!("bad token on line {}", i + 1)))?;
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::format("vocabulary", format!("duplicate token `{t}`")));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lower-cases and splits on whitespace. Fails on unknown words or when
    /// the framed sequence would exceed `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let mut ids = vec![BOS];
        for word in text.split_whitespace() {
            let w = word.to_lowercase();
            match self.id(&w) {
                Some(id) if id >= RESERVED.len() => ids.push(id),
                _ => return Err(Error::UnknownToken(word.to_string())),
            }
        }
        ids.push(EOS);
        let len = ids.len();
        if len > max_len {
            return Err(Error::CaptionTooLong { len, max: max_len });
        }
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids, len })
    }

    pub fn decode(&self, tokens: &TokenSequence) -> String {
        tokens
            .content()
            .iter()
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn validate_word(w: &str) -> Result<()> {
    if w.is_empty() || w.chars().any(|c| c.is_whitespace() || c.is_control()) || RESERVED.contains(&w) {
        return Err(Error::invalid(format!("`{w}` cannot be a vocabulary word")));
    }
    Ok(())
}

impl TokenSequence {
    /// Builds a sequence from raw ids, checking the framing invariants.
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        let bad = || Error::format("token sequence", "expected BOS content EOS PAD*");
        if ids.first() != Some(&BOS) {
            return Err(bad());
        }
        let eos = ids.iter().position(|&i| i == EOS).ok_or_else(bad)?;
        if ids[1..eos].iter().any(|&i| i < RESERVED.len()) || ids[eos + 1..].iter().any(|&i| i != PAD) {
            return Err(bad());
        }
        Ok(TokenSequence { ids, len: eos + 1 })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of framed tokens, BOS and EOS included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 2
    }

    pub fn eos_index(&self) -> usize {
        self.len - 1
    }

    pub fn content(&self) -> &[usize] {
        &self.ids[1..self.len - 1]
    }

    /// True when `pos` holds a word rather than BOS/EOS/PAD.
    pub fn is_content(&self, pos: usize) -> bool {
        pos >= 1 && pos < self.len - 1
    }

    /// Positions are 1-based word indices once BOS sits at index 0.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }

    pub fn with_id(&self, pos: usize, id: usize) -> Result<Self> {
        if !self.is_content(pos) || id < RESERVED.len() {
            return Err(Error::InvalidPosition {
                position: pos,
                reason: "not a content token".into(),
            });
        }
        let mut ids = self.ids.clone();
        ids[pos] = id;
        Ok(TokenSequence { ids, len: self.len })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "dog", "on", "grass", "is", "under", "tower"]).unwrap()
    }

    #[test]
    fn empty_caption_is_framed() {
        let t = vocab().tokenize("", 6).unwrap();
        assert_eq!(t.ids(), &[BOS, EOS, PAD, PAD, PAD, PAD]);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn caption_ids_follow_vocabulary_order() {
        let v = vocab();
        let t = v.tokenize("a dog on grass", 8).unwrap();
        assert_eq!(t.ids(), &[BOS, 3, 4, 5, 6, EOS, PAD, PAD]);
        assert_eq!(t, v.tokenize("A  dog on grass", 8).unwrap());
        assert_eq!(v.decode(&t), "a dog on grass");
    }

    #[test]
    fn two_subject_caption_positions_are_word_indices() {
        let v = vocab();
        let t = v.tokenize("a dog is under a tower", 10).unwrap();
        assert_eq!(t.ids()[2], v.id("dog").unwrap());
        assert_eq!(t.ids()[6], v.id("tower").unwrap());
    }

    #[test]
    fn errors_name_the_problem() {
        let v = vocab();
        match v.tokenize("a cat", 8) {
            Err(Error::UnknownToken(w)) => assert_eq!(w, "cat"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(v.tokenize("a dog on grass", 5), Err(Error::CaptionTooLong { len: 6, max: 5 })));
        assert!(v.tokenize("<eos>", 5).is_err());
    }

    #[test]
    fn file_format_round_trips() {
        let v = vocab();
        assert!(v.to_text().starts_with("<pad>\n<bos>\n<eos>\na\n"));
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::parse("<pad>\n<bos>\n").is_err());
        assert!(Vocabulary::parse("<pad>\n<bos>\n<eos>\na\na\n").is_err());
        assert!(Vocabulary::parse("<pad>\n<bos>\n<eos>\nhas space\n").is_err());
    }

    proptest! {
        #[test]
        fn tokenize_is_deterministic_and_well_framed(words in prop::collection::vec(0usize..7, 0..6)) {
            let v = vocab();
            let text: Vec<&str> = words.iter().map(|&i| v.token(i + 3).unwrap()).collect();
            let text = text.join(" ");
            let a = v.tokenize(&text, 8).unwrap();
            prop_assert_eq!(&a, &v.tokenize(&text, 8).unwrap());
            prop_assert_eq!(TokenSequence::from_ids(a.ids().to_vec()).unwrap(), a);
        }
    }
}
