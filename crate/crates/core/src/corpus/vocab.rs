//! Token-id vocabulary with fixed reserved ids.
//!
//! Ids 0-3 are `<PAD>`, `<BOS>`, `<EOS>`, `<UNK>` in that order, so padding
//! and mask logic elsewhere can hard-code `<PAD>` = 0. The file format is one
//! token per line, line number = id, reserved tokens included.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{BOS, EOS, SPECIAL_TOKENS, UNK, UNK_TOKEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary over every token the iterator yields. Non-special
    /// tokens are ordered by descending frequency, ties lexicographic, after
    /// the four reserved ids.
    pub fn build<'a, I>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for sentence in sentences {
            for tok in sentence {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut by_freq: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(t))
            .collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(by_freq.into_iter().map(|(t, _)| t.to_owned()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    /// Maps tokens to ids; unknown tokens become `<UNK>`, and the optional
    /// `<BOS>` prefix / `<EOS>` suffix markers are attached here.
    pub fn numberize(&self, sentence: &[String], add_bos: bool, add_eos: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(sentence.len() + 2);
        if add_bos {
            ids.push(BOS);
        }
        ids.extend(sentence.iter().map(|t| self.id(t).unwrap_or(UNK)));
        if add_eos {
            ids.push(EOS);
        }
        ids
    }

    /// Renders ids back to tokens (reserved ids render as their token text).
    pub fn tokens_of(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&id| self.token(id).to_owned()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < SPECIAL_TOKENS.len()
            || SPECIAL_TOKENS.iter().zip(&tokens).any(|(s, t)| s != t)
        {
            return Err(Error::MalformedFile {
                path: path.to_owned(),
                reason: "vocabulary must start with <PAD> <BOS> <EOS> <UNK>".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let sents = [toks("b a a")];
        let v = Vocabulary::build(sents.iter().map(Vec::as_slice));
        assert_eq!(v.id("<PAD>"), Some(PAD));
        assert_eq!(v.id("<BOS>"), Some(BOS));
        assert_eq!(v.id("<EOS>"), Some(EOS));
        assert_eq!(v.id("<UNK>"), Some(UNK));
        // "a" is more frequent than "b".
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
    }

    #[test]
    fn numberize_appends_requested_markers() {
        let sents = [toks("x y")];
        let v = Vocabulary::build(sents.iter().map(Vec::as_slice));
        let ids = v.numberize(&toks("x y"), false, true);
        assert_eq!(ids.len(), 3);
        assert_eq!(*ids.last().unwrap(), EOS);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let sents = [toks("x")];
        let v = Vocabulary::build(sents.iter().map(Vec::as_slice));
        assert_eq!(v.numberize(&toks("zzz"), false, false), vec![UNK]);
    }

    #[test]
    fn teacher_forcing_pair_has_equal_lengths() {
        let sents = [toks("a b c")];
        let v = Vocabulary::build(sents.iter().map(Vec::as_slice));
        let input = v.numberize(&toks("a b c"), true, false);
        let output = v.numberize(&toks("a b c"), false, true);
        assert_eq!(input.len(), output.len());
        assert_eq!(input[0], BOS);
        assert_eq!(*output.last().unwrap(), EOS);
        assert_eq!(&input[1..], &output[..output.len() - 1]);
    }

    #[test]
    fn vocabulary_is_bijective() {
        let sents = [toks("c a b a")];
        let v = Vocabulary::build(sents.iter().map(Vec::as_slice));
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id)), Some(id));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let sents = [toks("pelican otter")];
        let v = Vocabulary::build(sents.iter().map(Vec::as_slice));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
