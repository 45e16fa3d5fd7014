//! Byte-pair-encoding subword segmentation: the greedy most-frequent-pair
//! merge procedure, learned on word frequencies and applied per word.
//!
//! Word-internal subwords carry a trailing `@@` continuation marker, so
//! joining on the marker always recovers the original tokens. Merge learning
//! is deterministic: frequency ties break on the lexicographically smallest
//! (left, right) pair.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};

pub const CONTINUATION_MARKER: &str = "@@";

/// Which side(s) of the corpus to learn merges from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpeSide {
    Source,
    Target,
    Joint,
}

/// An ordered list of learned merges. Applying them in learned order is the
/// whole segmentation model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
    /// The requested operation count (the learned list may be shorter when
    /// the corpus runs out of repeated pairs).
    pub num_operations: usize,
}

impl BpeModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("bpe v1 {}\n", self.num_operations);
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::MalformedFile {
            path: path.to_owned(),
            reason: "missing header".into(),
        })?;
        let mut parts = header.split_whitespace();
        let (magic, version) = (parts.next(), parts.next());
        if magic != Some("bpe") || version != Some("v1") {
            return Err(Error::MalformedFile {
                path: path.to_owned(),
                reason: format!("bad header {header:?}"),
            });
        }
        let num_operations = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedFile {
                path: path.to_owned(),
                reason: "header missing operation count".into(),
            })?;
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_owned(), r.to_owned()));
                }
                _ => {
                    return Err(Error::MalformedFile {
                        path: path.to_owned(),
                        reason: format!("bad merge on line {}", i + 2),
                    })
                }
            }
        }
        Ok(Self {
            merges,
            num_operations,
        })
    }
}

fn word_frequencies(corpus: &ParallelCorpus, side: BpeSide) -> HashMap<String, u64> {
    let mut freq: HashMap<String, u64> = HashMap::new();
    for pair in &corpus.pairs {
        if matches!(side, BpeSide::Source | BpeSide::Joint) {
            for tok in &pair.source {
                *freq.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        if matches!(side, BpeSide::Target | BpeSide::Joint) {
            for tok in &pair.target {
                *freq.entry(tok.clone()).or_insert(0) += 1;
            }
        }
    }
    freq
}

type Pair = (String, String);

fn add_word_pairs(stats: &mut HashMap<Pair, i64>, index: &mut HashMap<Pair, Vec<usize>>, symbols: &[String], count: i64, word_idx: usize) {
    for win in symbols.windows(2) {
        let pair = (win[0].clone(), win[1].clone());
        *stats.entry(pair.clone()).or_insert(0) += count;
        index.entry(pair).or_default().push(word_idx);
    }
}

fn remove_word_pairs(stats: &mut HashMap<Pair, i64>, symbols: &[String], count: i64) {
    for win in symbols.windows(2) {
        let pair = (win[0].clone(), win[1].clone());
        *stats.entry(pair).or_insert(0) -= count;
    }
}

/// One left-to-right pass replacing non-overlapping occurrences of `pair`.
/// A single pass is complete: a merged symbol can never recreate the pair.
fn merge_in_word(symbols: &[String], pair: &Pair, joined: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(joined.to_owned());
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `num_operations` merges from the corpus side(s).
///
/// Stops early once no symbol pair occurs at least twice. Statistics updates
/// are order-sensitive, so learning is single-threaded by contract.
pub fn learn_bpe(corpus: &ParallelCorpus, num_operations: usize, side: BpeSide) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("learn_bpe needs at least one sentence"));
    }

    // Distinct words in deterministic order.
    let freq = word_frequencies(corpus, side);
    let mut words: Vec<(String, u64)> = freq.into_iter().collect();
    words.sort();
    let counts: Vec<i64> = words.iter().map(|(_, c)| *c as i64).collect();
    let mut symbols: Vec<Vec<String>> = words
        .iter()
        .map(|(w, _)| w.chars().map(String::from).collect())
        .collect();

    let mut stats: HashMap<Pair, i64> = HashMap::new();
    let mut index: HashMap<Pair, Vec<usize>> = HashMap::new();
    for (i, syms) in symbols.iter().enumerate() {
        add_word_pairs(&mut stats, &mut index, syms, counts[i], i);
    }

    let mut merges = Vec::new();
    for _ in 0..num_operations {
        // Max count, ties to the lexicographically smallest pair. The fold is
        // order-independent, so HashMap iteration order does not matter.
        let best = stats
            .iter()
            .filter(|(_, &c)| c >= 2)
            .fold(None::<(&Pair, i64)>, |best, (pair, &count)| match best {
                None => Some((pair, count)),
                Some((bp, bc)) => {
                    if count > bc || (count == bc && pair < bp) {
                        Some((pair, count))
                    } else {
                        Some((bp, bc))
                    }
                }
            });
        let Some((pair, _)) = best else { break };
        let pair = pair.clone();
        let joined = format!("{}{}", pair.0, pair.1);

        let mut touched = index.remove(&pair).unwrap_or_default();
        touched.sort_unstable();
        touched.dedup();
        for word_idx in touched {
            if !symbols[word_idx].windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                continue; // stale index entry
            }
            remove_word_pairs(&mut stats, &symbols[word_idx], counts[word_idx]);
            symbols[word_idx] = merge_in_word(&symbols[word_idx], &pair, &joined);
            add_word_pairs(&mut stats, &mut index, &symbols[word_idx], counts[word_idx], word_idx);
        }
        stats.remove(&pair);
        merges.push(pair);
    }

    Ok(BpeModel {
        merges,
        num_operations,
    })
}

/// Segments a pre-tokenized sentence into subwords, trailing `@@` on every
/// word-internal piece. Unknown characters simply pass through as singleton
/// symbols.
pub fn apply_bpe(model: &BpeModel, sentence: &[String]) -> Vec<String> {
    let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
    let mut out = Vec::with_capacity(sentence.len());
    for word in sentence {
        let pieces = cache
            .entry(word.as_str())
            .or_insert_with(|| segment_word(model, word));
        out.extend(pieces.iter().cloned());
    }
    out
}

fn segment_word(model: &BpeModel, word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    for pair in &model.merges {
        if symbols.len() < 2 {
            break;
        }
        let joined = format!("{}{}", pair.0, pair.1);
        symbols = merge_in_word(&symbols, pair, &joined);
    }
    let last = symbols.len() - 1;
    symbols
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if i < last {
                format!("{s}{CONTINUATION_MARKER}")
            } else {
                s
            }
        })
        .collect()
}

/// Reverses segmentation: joins subwords on the continuation marker.
pub fn merge_continuations(subwords: &[String]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for piece in subwords {
        match piece.strip_suffix(CONTINUATION_MARKER) {
            Some(head) => current.push_str(head),
            None => {
                current.push_str(piece);
                words.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus_of(lines: &[&str]) -> ParallelCorpus {
        let pairs = lines
            .iter()
            .map(|l| {
                let toks: Vec<String> = l.split_whitespace().map(str::to_owned).collect();
                (toks.clone(), toks)
            })
            .collect();
        ParallelCorpus::from_pairs(pairs).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn zero_operations_gives_character_segmentation() {
        let model = learn_bpe(&corpus_of(&["cat"]), 0, BpeSide::Source).unwrap();
        assert!(model.merges.is_empty());
        assert_eq!(apply_bpe(&model, &toks("cat")), toks("c@@ a@@ t"));
    }

    #[test]
    fn first_merge_on_aaab_is_a_a() {
        // Brute-force pair counts for "aaab": (a,a) twice, (a,b) once.
        let model = learn_bpe(&corpus_of(&["aaab aaab aaab"]), 1, BpeSide::Source).unwrap();
        assert_eq!(model.merges, vec![("a".to_owned(), "a".to_owned())]);
    }

    #[test]
    fn single_merge_applied_greedily_left_to_right() {
        let model = BpeModel {
            merges: vec![("a".into(), "a".into())],
            num_operations: 1,
        };
        assert_eq!(apply_bpe(&model, &toks("aaab")), toks("aa@@ a@@ b"));
    }

    #[test]
    fn learning_is_deterministic() {
        let corpus = corpus_of(&["the cat sat", "the hat mat", "then that"]);
        let a = learn_bpe(&corpus, 20, BpeSide::Joint).unwrap();
        let b = learn_bpe(&corpus, 20, BpeSide::Joint).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let model = learn_bpe(&corpus_of(&["ab cd"]), 100, BpeSide::Source).unwrap();
        assert!(model.merges.is_empty());
    }

    #[test]
    fn empty_corpus_is_error() {
        let corpus = ParallelCorpus::default();
        assert!(learn_bpe(&corpus, 10, BpeSide::Joint).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let corpus = corpus_of(&["banana bandana", "canal banal"]);
        let model = learn_bpe(&corpus, 8, BpeSide::Source).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bpe.model");
        model.save(&path).unwrap();
        let loaded = BpeModel::load(&path).unwrap();
        assert_eq!(model, loaded);
        loaded.save(dir.path().join("again.model").as_path()).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(dir.path().join("again.model")).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn segmentation_round_trips(words in proptest::collection::vec("[a-d]{1,8}", 1..6)) {
            let line = words.join(" ");
            let corpus = corpus_of(&[line.as_str()]);
            let model = learn_bpe(&corpus, 10, BpeSide::Source).unwrap();
            let sentence = toks(&line);
            let segmented = apply_bpe(&model, &sentence);
            prop_assert_eq!(merge_continuations(&segmented), sentence);
        }
    }
}
