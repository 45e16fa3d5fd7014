//! Parallel-corpus loading, subword segmentation, and vocabularies.
//!
//! Corpus files are plain UTF-8 text, one pre-tokenized (whitespace-separated)
//! sentence per line, LF line endings. Loading is lossless and
//! order-preserving: `origin_index` is the zero-based line number, and
//! consecutive order is meaningful downstream (consecutive concatenation
//! relies on it).

mod bpe;
mod vocab;

pub use bpe::{apply_bpe, learn_bpe, merge_continuations, BpeModel, BpeSide, CONTINUATION_MARKER};
pub use vocab::Vocabulary;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<PAD>";
pub const BOS_TOKEN: &str = "<BOS>";
pub const EOS_TOKEN: &str = "<EOS>";
pub const UNK_TOKEN: &str = "<UNK>";

pub const SPECIAL_TOKENS: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

/// One aligned sentence pair, tokens as they appeared in the corpus files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// Position in the raw corpus file (zero-based line number).
    pub origin_index: usize,
}

/// An ordered parallel corpus; order is file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    /// Builds a corpus from in-memory pairs, applying the same validation as
    /// [`load_corpus`] (both sides non-empty, no reserved tokens).
    pub fn from_pairs(pairs: Vec<(Vec<String>, Vec<String>)>) -> Result<Self> {
        let mut out = Vec::with_capacity(pairs.len());
        for (i, (source, target)) in pairs.into_iter().enumerate() {
            validate_side(&source, "<memory:source>", i)?;
            validate_side(&target, "<memory:target>", i)?;
            out.push(SentencePair {
                source,
                target,
                origin_index: i,
            });
        }
        Ok(Self { pairs: out })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn validate_side(tokens: &[String], path: &str, line_idx: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyLine {
            path: path.into(),
            line: line_idx + 1,
        });
    }
    for tok in tokens {
        if SPECIAL_TOKENS.contains(&tok.as_str()) {
            return Err(Error::ReservedToken {
                path: path.into(),
                line: line_idx + 1,
                token: tok.clone(),
            });
        }
    }
    Ok(())
}

fn read_side(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let mut sentences = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        validate_side(&tokens, &path.to_string_lossy(), i)?;
        sentences.push(tokens);
    }
    Ok(sentences)
}

/// Loads an aligned pair of corpus files.
///
/// Both files must have the same line count; pairs come back in file order
/// with `origin_index` equal to the line number. Empty lines and reserved
/// special tokens are rejected with the offending line named.
pub fn load_corpus(source_path: &Path, target_path: &Path) -> Result<ParallelCorpus> {
    let source = read_side(source_path)?;
    let target = read_side(target_path)?;
    if source.len() != target.len() {
        return Err(Error::Alignment {
            source_path: source_path.to_owned(),
            target_path: target_path.to_owned(),
            source_lines: source.len(),
            target_lines: target.len(),
        });
    }
    let pairs = source
        .into_iter()
        .zip(target)
        .enumerate()
        .map(|(i, (source, target))| SentencePair {
            source,
            target,
            origin_index: i,
        })
        .collect();
    Ok(ParallelCorpus { pairs })
}

/// A sentence pair mapped to vocabulary ids. No `<BOS>`/`<EOS>` markers yet;
/// those are added when training examples are assembled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumberizedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub origin_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NumberizedCorpus {
    pub pairs: Vec<NumberizedPair>,
}

impl NumberizedCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Segments each side with `bpe` (pass `None` to keep raw tokens) and maps
/// tokens to ids. Order and `origin_index` are preserved.
pub fn numberize_corpus(
    corpus: &ParallelCorpus,
    bpe: Option<&BpeModel>,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
) -> NumberizedCorpus {
    let segment = |sentence: &[String]| -> Vec<String> {
        match bpe {
            Some(model) => apply_bpe(model, sentence),
            None => sentence.to_vec(),
        }
    };
    let pairs = corpus
        .pairs
        .iter()
        .map(|p| NumberizedPair {
            source: source_vocab.numberize(&segment(&p.source), false, false),
            target: target_vocab.numberize(&segment(&p.target), false, false),
            origin_index: p.origin_index,
        })
        .collect();
    NumberizedCorpus { pairs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        path
    }

    #[test]
    fn loads_two_line_corpus_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_lines(dir.path(), "c.src", &["a b", "c d e"]);
        let tgt = write_lines(dir.path(), "c.tgt", &["x", "y z"]);
        let corpus = load_corpus(&src, &tgt).unwrap();
        assert_eq!(corpus.len(), 2);
        let indices: Vec<usize> = corpus.pairs.iter().map(|p| p.origin_index).collect();
        assert_eq!(indices, vec![0, 1]);
        assert_eq!(corpus.pairs[1].source, vec!["c", "d", "e"]);
    }

    #[test]
    fn line_count_mismatch_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_lines(dir.path(), "c.src", &["a", "b", "c"]);
        let tgt = write_lines(dir.path(), "c.tgt", &["x", "y", "z", "w"]);
        match load_corpus(&src, &tgt) {
            Err(Error::Alignment {
                source_lines: 3,
                target_lines: 4,
                ..
            }) => {}
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn empty_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_lines(dir.path(), "c.src", &["a", "", "c"]);
        let tgt = write_lines(dir.path(), "c.tgt", &["x", "y", "z"]);
        match load_corpus(&src, &tgt) {
            Err(Error::EmptyLine { line: 2, .. }) => {}
            other => panic!("expected empty-line error, got {other:?}"),
        }
    }

    #[test]
    fn reserved_tokens_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_lines(dir.path(), "c.src", &["a <EOS> b"]);
        let tgt = write_lines(dir.path(), "c.tgt", &["x"]);
        assert!(matches!(
            load_corpus(&src, &tgt),
            Err(Error::ReservedToken { line: 1, .. })
        ));
    }

    #[test]
    fn en_vi_sample_pair_has_five_tokens_each_side() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_lines(dir.path(), "c.src", &["And I think back ."]);
        let tgt = write_lines(dir.path(), "c.tgt", &["Và tôi nghĩ lại ."]);
        let corpus = load_corpus(&src, &tgt).unwrap();
        assert_eq!(corpus.pairs[0].source.len(), 5);
        assert_eq!(corpus.pairs[0].target.len(), 5);
    }
}
