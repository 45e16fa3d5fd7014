//! Concatenation and position-shift augmentation.
//!
//! Training examples carry explicit per-token position indices alongside the
//! token ids. Concatenating two sentence-pairs makes the second constituent's
//! positions continue where the first left off; the shift variants re-index a
//! single sentence to start at a nonzero offset instead. Shifting never adds
//! tokens — padding would corrupt attention statistics — it only changes the
//! index the positional encoder sees.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{NumberizedCorpus, NumberizedPair, Vocabulary, BOS, EOS};
use crate::error::Result;
use crate::rng;

/// How a training example was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Consec,
    Rand,
    SimShift,
    UniformShift,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Consec => "consec",
            Provenance::Rand => "rand",
            Provenance::SimShift => "sim_shift",
            Provenance::UniformShift => "uniform_shift",
        }
    }

    /// Concatenated examples have two constituent sentences per side.
    pub fn is_concat(self) -> bool {
        matches!(self, Provenance::Consec | Provenance::Rand)
    }
}

/// One teacher-forced training example.
///
/// `source_ids` ends every constituent sentence with `<EOS>`; `target_in_ids`
/// starts every constituent with `<BOS>`; `target_out_ids` is the input
/// shifted left by one with `<EOS>` closing each constituent. Position
/// sequences run parallel to the ids and increase by exactly one within a
/// segment; segment labels are 0 for the first constituent and 1 for the
/// second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub source_ids: Vec<usize>,
    pub target_in_ids: Vec<usize>,
    pub target_out_ids: Vec<usize>,
    pub source_positions: Vec<usize>,
    pub target_positions: Vec<usize>,
    pub source_segments: Vec<u8>,
    pub target_segments: Vec<u8>,
    pub provenance: Provenance,
}

impl TrainExample {
    /// An unconcatenated, unshifted example: positions 0..len-1, segments 0.
    pub fn from_pair(pair: &NumberizedPair) -> Self {
        let mut source_ids = pair.source.clone();
        source_ids.push(EOS);
        let mut target_in_ids = Vec::with_capacity(pair.target.len() + 1);
        target_in_ids.push(BOS);
        target_in_ids.extend_from_slice(&pair.target);
        let mut target_out_ids = pair.target.clone();
        target_out_ids.push(EOS);

        let source_positions = (0..source_ids.len()).collect();
        let target_positions = (0..target_in_ids.len()).collect();
        let source_segments = vec![0; source_ids.len()];
        let target_segments = vec![0; target_in_ids.len()];
        Self {
            source_ids,
            target_in_ids,
            target_out_ids,
            source_positions,
            target_positions,
            source_segments,
            target_segments,
            provenance: Provenance::Original,
        }
    }

    pub fn source_len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn target_len(&self) -> usize {
        self.target_in_ids.len()
    }

    /// Source length of each constituent segment (1 or 2 entries).
    pub fn source_segment_lens(&self) -> Vec<usize> {
        let seg1 = self.source_segments.iter().filter(|&&s| s == 1).count();
        if seg1 == 0 {
            vec![self.source_ids.len()]
        } else {
            vec![self.source_ids.len() - seg1, seg1]
        }
    }

    /// Rewrites position indices so each segment restarts at 0 (reset-pos).
    pub fn reset_positions(&mut self) {
        reset_side(&mut self.source_positions, &self.source_segments);
        reset_side(&mut self.target_positions, &self.target_segments);
    }
}

fn reset_side(positions: &mut [usize], segments: &[u8]) {
    let mut start = 0;
    for (i, (&seg, pos)) in segments.iter().zip(positions.iter_mut()).enumerate() {
        if i > 0 && seg != segments[i - 1] {
            start = i;
        }
        *pos = i - start;
    }
}

/// Concatenates two single-segment examples; `b` becomes segment 1 and its
/// positions continue from the end of `a` (marker tokens included).
pub fn concat_pair(a: &TrainExample, b: &TrainExample, provenance: Provenance) -> TrainExample {
    debug_assert!(a.source_segments.iter().all(|&s| s == 0));
    debug_assert!(b.source_segments.iter().all(|&s| s == 0));
    let src0 = a.source_ids.len();
    let tgt0 = a.target_in_ids.len();

    let mut source_ids = a.source_ids.clone();
    source_ids.extend_from_slice(&b.source_ids);
    let mut target_in_ids = a.target_in_ids.clone();
    target_in_ids.extend_from_slice(&b.target_in_ids);
    let mut target_out_ids = a.target_out_ids.clone();
    target_out_ids.extend_from_slice(&b.target_out_ids);

    let source_positions = (0..source_ids.len()).collect();
    let target_positions = (0..target_in_ids.len()).collect();
    let mut source_segments = vec![0u8; src0];
    source_segments.resize(source_ids.len(), 1);
    let mut target_segments = vec![0u8; tgt0];
    target_segments.resize(target_in_ids.len(), 1);

    TrainExample {
        source_ids,
        target_in_ids,
        target_out_ids,
        source_positions,
        target_positions,
        source_segments,
        target_segments,
        provenance,
    }
}

/// The unaugmented training set: one example per corpus pair, in order.
pub fn original_examples(corpus: &NumberizedCorpus) -> Vec<TrainExample> {
    corpus.pairs.iter().map(TrainExample::from_pair).collect()
}

/// Concatenates consecutive sentence-pairs: pair i with pair i+1, giving
/// N-1 examples. A corpus with fewer than two pairs yields an empty list.
pub fn concat_consecutive(corpus: &NumberizedCorpus) -> Vec<TrainExample> {
    concat_adjacent(&original_examples(corpus), Provenance::Consec)
}

/// Same as [`concat_consecutive`] but on a seeded uniform permutation of the
/// corpus, so the concatenated pairs are (almost always) unrelated.
pub fn concat_random(corpus: &NumberizedCorpus, seed: u64) -> Vec<TrainExample> {
    let mut examples = original_examples(corpus);
    examples.shuffle(&mut rng::seeded(seed));
    concat_adjacent(&examples, Provenance::Rand)
}

fn concat_adjacent(examples: &[TrainExample], provenance: Provenance) -> Vec<TrainExample> {
    if examples.len() < 2 {
        log::warn!("concatenation needs at least 2 sentence pairs; returning empty set");
        return Vec::new();
    }
    examples
        .windows(2)
        .map(|w| concat_pair(&w[0], &w[1], provenance))
        .collect()
}

/// List concatenation of the original and augmented streams. Duplicates are
/// permitted; the union is over example streams, not contents.
pub fn combine_training_set(
    d_orig: Vec<TrainExample>,
    d_new: Vec<TrainExample>,
) -> Vec<TrainExample> {
    let mut combined = d_orig;
    combined.extend(d_new);
    combined
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftMode {
    None,
    SimShift,
    UniformShift,
}

/// Position-shift configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShiftConfig {
    pub mode: ShiftMode,
    /// Per-example selection probability.
    pub probability: f64,
    /// Inclusive upper bound of the uniform draw (uniform mode only).
    pub max_shift: usize,
    pub seed: u64,
}

impl ShiftConfig {
    /// Mimics concatenation's offsets: select with p = 1/3, shift by another
    /// example's lengths.
    pub fn sim_shift(seed: u64) -> Self {
        Self {
            mode: ShiftMode::SimShift,
            probability: 1.0 / 3.0,
            max_shift: 0,
            seed,
        }
    }

    /// Uniform offsets on [0, 100] at p = 0.1.
    pub fn uniform_shift(seed: u64) -> Self {
        Self {
            mode: ShiftMode::UniformShift,
            probability: 0.1,
            max_shift: 100,
            seed,
        }
    }
}

fn shift_example(pair: &NumberizedPair, src_start: usize, tgt_start: usize, provenance: Provenance) -> TrainExample {
    let mut ex = TrainExample::from_pair(pair);
    for (i, p) in ex.source_positions.iter_mut().enumerate() {
        *p = src_start + i;
    }
    for (i, p) in ex.target_positions.iter_mut().enumerate() {
        *p = tgt_start + i;
    }
    ex.provenance = provenance;
    ex
}

/// Shift distances are measured in post-BPE tokens including the sentence's
/// own marker token, matching what the model's position axis sees.
fn marked_lens(pair: &NumberizedPair) -> (usize, usize) {
    (pair.source.len() + 1, pair.target.len() + 1)
}

/// For each pair, with probability `cfg.probability`, picks a random pair j
/// (the same j for both sides) and re-indexes the source from |f_j| and the
/// target from |e_j|. Token ids are untouched.
pub fn sim_shift(corpus: &NumberizedCorpus, cfg: &ShiftConfig) -> Vec<TrainExample> {
    debug_assert_eq!(cfg.mode, ShiftMode::SimShift);
    let n = corpus.len();
    corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut r = rng::stream(cfg.seed, i as u64);
            if n > 0 && r.gen::<f64>() < cfg.probability {
                let j = r.gen_range(0..n);
                let (src_start, tgt_start) = marked_lens(&corpus.pairs[j]);
                shift_example(pair, src_start, tgt_start, Provenance::SimShift)
            } else {
                TrainExample::from_pair(pair)
            }
        })
        .collect()
}

/// With probability `cfg.probability`, draws independent integer distances
/// s, t uniformly from [0, max_shift] and re-indexes source from s and
/// target from t.
pub fn uniform_shift(corpus: &NumberizedCorpus, cfg: &ShiftConfig) -> Vec<TrainExample> {
    debug_assert_eq!(cfg.mode, ShiftMode::UniformShift);
    corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut r = rng::stream(cfg.seed, i as u64);
            if r.gen::<f64>() < cfg.probability {
                let s = r.gen_range(0..=cfg.max_shift);
                let t = r.gen_range(0..=cfg.max_shift);
                shift_example(pair, s, t, Provenance::UniformShift)
            } else {
                TrainExample::from_pair(pair)
            }
        })
        .collect()
}

/// Debug dump: provenance, tokens, positions, and segments, one example per
/// line, tab-separated. Positions are comma-joined; the segments field holds
/// the source and target label runs joined by `|`.
pub fn dump_examples<W: Write>(
    w: &mut W,
    examples: &[TrainExample],
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
) -> Result<()> {
    fn join_nums<T: ToString>(xs: &[T]) -> String {
        xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }
    for ex in examples {
        let src = source_vocab.tokens_of(&ex.source_ids).join(" ");
        let tgt = target_vocab.tokens_of(&ex.target_out_ids).join(" ");
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}|{}",
            ex.provenance.as_str(),
            src,
            tgt,
            join_nums(&ex.source_positions),
            join_nums(&ex.target_positions),
            join_nums(&ex.source_segments),
            join_nums(&ex.target_segments),
        )?;
    }
    Ok(())
}
