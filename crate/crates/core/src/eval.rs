//! Decoding, tokenized corpus BLEU, and paired bootstrap significance.
//!
//! BLEU is the corpus-level 4-gram score with clipped counts and the brevity
//! penalty, computed on words (subword continuation markers merged back
//! before scoring). Zero precision at any order gives BLEU 0; no smoothing.

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::batching::Minibatch;
use crate::corpus::{NumberizedCorpus, ParallelCorpus, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{build_masks, forward, MaskMode, Mode, ModelParams};
use crate::rng;

const MAX_NGRAM: usize = 4;

/// Sentences ready for decoding plus their word-level references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSet {
    /// Numberized source sequences including the `<EOS>` markers.
    pub sources: Vec<Vec<usize>>,
    /// Word-level (pre-BPE) reference sentences.
    pub references: Vec<Vec<String>>,
    /// False for concatenated dev sets: those scores are not comparable with
    /// single-sentence BLEU.
    pub comparable: bool,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Builds the standard single-sentence evaluation set.
pub fn eval_set(raw: &ParallelCorpus, numberized: &NumberizedCorpus) -> EvalSet {
    let sources = numberized
        .pairs
        .iter()
        .map(|p| {
            let mut ids = p.source.clone();
            ids.push(EOS);
            ids
        })
        .collect();
    let references = raw.pairs.iter().map(|p| p.target.clone()).collect();
    EvalSet {
        sources,
        references,
        comparable: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatEvalMode {
    Consec,
    Rand,
}

/// Concatenates the dev set the same way the training data is concatenated,
/// for the discourse ablation. The result is flagged non-comparable.
pub fn build_concat_devset(
    raw: &ParallelCorpus,
    numberized: &NumberizedCorpus,
    mode: ConcatEvalMode,
    seed: u64,
) -> EvalSet {
    let n = numberized.len();
    let mut order: Vec<usize> = (0..n).collect();
    if mode == ConcatEvalMode::Rand {
        order.shuffle(&mut rng::seeded(seed));
    }
    let mut sources = Vec::new();
    let mut references = Vec::new();
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut ids = numberized.pairs[a].source.clone();
        ids.push(EOS);
        ids.extend_from_slice(&numberized.pairs[b].source);
        ids.push(EOS);
        sources.push(ids);
        let mut rf = raw.pairs[a].target.clone();
        rf.extend_from_slice(&raw.pairs[b].target);
        references.push(rf);
    }
    EvalSet {
        sources,
        references,
        comparable: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

/// Maximum rows forwarded together during batched greedy decoding.
const DECODE_GROUP: usize = 64;

/// Generates translations. Decoding starts from `<BOS>` and stops at `<EOS>`
/// or after `max_len` tokens; inputs are plain sentences with positions from
/// 0 and a single segment. The returned sequences carry no markers.
pub fn decode(
    params: &ModelParams,
    sources: &[Vec<usize>],
    strategy: DecodeStrategy,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    match strategy {
        DecodeStrategy::Greedy => {
            let mut out = Vec::with_capacity(sources.len());
            for group in sources.chunks(DECODE_GROUP) {
                out.extend(greedy_group(params, group, max_len)?);
            }
            Ok(out)
        }
        DecodeStrategy::Beam(k) => sources
            .iter()
            .map(|src| beam_search(params, src, k.max(1), max_len))
            .collect(),
    }
}

/// Builds the decoding batch for the current prefixes. `target_out` is
/// unused by the forward pass and stays `<PAD>`.
fn decode_minibatch(sources: &[Vec<usize>], prefixes: &[Vec<usize>]) -> Minibatch {
    let rows = sources.len();
    let s = sources.iter().map(Vec::len).max().unwrap_or(0);
    let t = prefixes.iter().map(Vec::len).max().unwrap_or(0);
    let mut mb = Minibatch {
        source: Array2::from_elem((rows, s), PAD),
        target_in: Array2::from_elem((rows, t), PAD),
        target_out: Array2::from_elem((rows, t), PAD),
        source_positions: Array2::zeros((rows, s)),
        target_positions: Array2::zeros((rows, t)),
        source_segments: Array2::zeros((rows, s)),
        target_segments: Array2::zeros((rows, t)),
        source_pad: Array2::from_elem((rows, s), true),
        target_pad: Array2::from_elem((rows, t), true),
        example_indices: (0..rows).collect(),
    };
    for (row, src) in sources.iter().enumerate() {
        for (col, &id) in src.iter().enumerate() {
            mb.source[[row, col]] = id;
            mb.source_positions[[row, col]] = col;
            mb.source_pad[[row, col]] = false;
        }
    }
    for (row, prefix) in prefixes.iter().enumerate() {
        for (col, &id) in prefix.iter().enumerate() {
            mb.target_in[[row, col]] = id;
            mb.target_positions[[row, col]] = col;
            mb.target_pad[[row, col]] = false;
        }
    }
    mb
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn greedy_group(params: &ModelParams, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let rows = sources.len();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; rows];
    let mut finished = vec![false; rows];
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); rows];

    for _ in 0..max_len {
        let batch = decode_minibatch(sources, &prefixes);
        let masks = build_masks(&batch, MaskMode::Unmasked);
        let fwd = forward(params, &batch, &masks, &mut Mode::Eval)?;
        let t = batch.target_len();
        for row in 0..rows {
            if finished[row] {
                continue;
            }
            let pos = prefixes[row].len() - 1;
            let next = argmax(fwd.logits.row(row * t + pos));
            if next == EOS {
                finished[row] = true;
            } else {
                outputs[row].push(next);
                prefixes[row].push(next);
            }
        }
        if finished.iter().all(|&f| f) {
            break;
        }
    }
    Ok(outputs)
}

/// Beam search with length-normalized log-probability (exponent 1.0).
/// With k = 1 this reduces exactly to greedy search.
fn beam_search(params: &ModelParams, source: &[usize], k: usize, max_len: usize) -> Result<Vec<usize>> {
    #[derive(Clone)]
    struct Hyp {
        tokens: Vec<usize>, // generated, no BOS/EOS
        logp: f64,
    }
    let normalized = |h: &Hyp| h.logp / (h.tokens.len() + 1) as f64;

    let mut live = vec![Hyp { tokens: Vec::new(), logp: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let sources: Vec<Vec<usize>> = live.iter().map(|_| source.to_vec()).collect();
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|h| {
                let mut p = vec![BOS];
                p.extend_from_slice(&h.tokens);
                p
            })
            .collect();
        let batch = decode_minibatch(&sources, &prefixes);
        let masks = build_masks(&batch, MaskMode::Unmasked);
        let fwd = forward(params, &batch, &masks, &mut Mode::Eval)?;
        let t = batch.target_len();

        let mut candidates: Vec<(usize, usize, f64)> = Vec::new(); // (hyp, token, logp)
        for (hi, hyp) in live.iter().enumerate() {
            let pos = prefixes[hi].len() - 1;
            let row = fwd.logits.row(hi * t + pos);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (tok, &logit) in row.iter().enumerate() {
                candidates.push((hi, tok, hyp.logp + logit - lse));
            }
        }
        // Stable best-first order; ties keep (hyp, token) order so k=1
        // matches greedy argmax.
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1)));

        let mut next_live = Vec::new();
        for (hi, tok, logp) in candidates {
            if next_live.len() >= k {
                break;
            }
            let mut hyp = live[hi].clone();
            hyp.logp = logp;
            if tok == EOS {
                finished.push(hyp);
            } else {
                hyp.tokens.push(tok);
                next_live.push(hyp);
            }
        }
        live = next_live;
        if finished.len() >= k {
            break;
        }
    }

    let best = finished
        .into_iter()
        .chain(live.into_iter())
        .max_by(|a, b| normalized(a).partial_cmp(&normalized(b)).unwrap_or(std::cmp::Ordering::Equal));
    Ok(best.map(|h| h.tokens).unwrap_or_default())
}

/// Corpus BLEU decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl fmt::Display for BleuReport {
    /// The canonical one-line format of the reference scorer.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratio = if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        };
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
            ratio,
            self.hyp_len,
            self.ref_len
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SentenceStats {
    correct: [u64; MAX_NGRAM],
    total: [u64; MAX_NGRAM],
    hyp_len: u64,
    ref_len: u64,
}

fn sentence_stats(hyp: &[String], reference: &[String]) -> SentenceStats {
    let mut stats = SentenceStats {
        hyp_len: hyp.len() as u64,
        ref_len: reference.len() as u64,
        ..Default::default()
    };
    for n in 1..=MAX_NGRAM {
        if hyp.len() < n {
            break;
        }
        stats.total[n - 1] = (hyp.len() - n + 1) as u64;
        let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
        for gram in reference.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
        let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
        for gram in hyp.windows(n) {
            *hyp_counts.entry(gram).or_insert(0) += 1;
        }
        stats.correct[n - 1] = hyp_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
    }
    stats
}

fn combine_stats<'a>(stats: impl Iterator<Item = &'a SentenceStats>) -> BleuReport {
    let mut correct = [0u64; MAX_NGRAM];
    let mut total = [0u64; MAX_NGRAM];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for s in stats {
        for n in 0..MAX_NGRAM {
            correct[n] += s.correct[n];
            total[n] += s.total[n];
        }
        hyp_len += s.hyp_len;
        ref_len += s.ref_len;
    }
    let mut precisions = [0.0; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        if total[n] > 0 {
            precisions[n] = correct[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64).exp() * 100.0
    };
    BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    }
}

/// Corpus-level tokenized BLEU over word sequences.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus("bleu needs at least one sentence"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::ShapeMismatch {
            context: "bleu",
            expected: format!("{} references", hypotheses.len()),
            got: format!("{}", references.len()),
        });
    }
    let stats: Vec<SentenceStats> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h, r))
        .collect();
    Ok(combine_stats(stats.iter()))
}

/// Paired bootstrap outcome. `p_value` is the fraction of resamples in which
/// the system with the lower full-corpus BLEU wins or ties; `wins_a` is the
/// fraction of resamples where system A strictly beats system B.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceReport {
    pub mean_a: f64,
    pub mean_b: f64,
    pub wins_a: f64,
    pub p_value: f64,
    pub resamples: usize,
    pub seed: u64,
}

/// Koehn-style paired bootstrap resampling over sentences.
pub fn bootstrap_significance(
    hyps_a: &[Vec<String>],
    hyps_b: &[Vec<String>],
    references: &[Vec<String>],
    resamples: usize,
    seed: u64,
) -> Result<SignificanceReport> {
    let n = references.len();
    if n < 2 {
        return Err(Error::Invalid(
            "bootstrap needs at least 2 sentences".into(),
        ));
    }
    if hyps_a.len() != n || hyps_b.len() != n {
        return Err(Error::ShapeMismatch {
            context: "bootstrap",
            expected: format!("{n} hypotheses per system"),
            got: format!("{} / {}", hyps_a.len(), hyps_b.len()),
        });
    }
    let stats_a: Vec<SentenceStats> = hyps_a
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h, r))
        .collect();
    let stats_b: Vec<SentenceStats> = hyps_b
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h, r))
        .collect();

    let full_a = combine_stats(stats_a.iter()).bleu;
    let full_b = combine_stats(stats_b.iter()).bleu;
    let a_is_lower = full_a <= full_b;

    let mut r = rng::seeded(seed);
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut wins_a = 0usize;
    let mut lower_wins_or_ties = 0usize;
    let mut picks = vec![0usize; n];
    for _ in 0..resamples {
        for p in picks.iter_mut() {
            *p = r.gen_range(0..n);
        }
        let ba = combine_stats(picks.iter().map(|&i| &stats_a[i])).bleu;
        let bb = combine_stats(picks.iter().map(|&i| &stats_b[i])).bleu;
        sum_a += ba;
        sum_b += bb;
        if ba > bb {
            wins_a += 1;
        }
        let lower_won = if a_is_lower { ba >= bb } else { bb >= ba };
        if lower_won {
            lower_wins_or_ties += 1;
        }
    }
    Ok(SignificanceReport {
        mean_a: sum_a / resamples as f64,
        mean_b: sum_b / resamples as f64,
        wins_a: wins_a as f64 / resamples as f64,
        p_value: lower_wins_or_ties as f64 / resamples as f64,
        resamples,
        seed,
    })
}

/// Two-sided paired bootstrap on per-unit metric values (e.g. one metric per
/// seed): resamples the paired differences and doubles the smaller tail.
pub fn paired_bootstrap_two_sided(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mut r = rng::seeded(seed);
    let (mut le, mut ge) = (0usize, 0usize);
    for _ in 0..resamples {
        let mean: f64 = (0..n).map(|_| diffs[r.gen_range(0..n)]).sum::<f64>() / n as f64;
        if mean <= 0.0 {
            le += 1;
        }
        if mean >= 0.0 {
            ge += 1;
        }
    }
    let tail = (le.min(ge) as f64) / resamples as f64;
    (2.0 * tail).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let refs = vec![words("the cat sat on the mat"), words("a b c d")];
        let report = bleu(&refs, &refs).unwrap();
        assert_relative_eq!(report.bleu, 100.0, epsilon = 1e-9);
        assert_eq!(report.brevity_penalty, 1.0);
    }

    #[test]
    fn clipping_zeroes_degenerate_hypothesis() {
        let report = bleu(&[words("the the the the")], &[words("the cat")]).unwrap();
        assert_relative_eq!(report.precisions[0], 0.25, epsilon = 1e-12);
        assert_eq!(report.precisions[1], 0.0);
        assert_eq!(report.bleu, 0.0);
    }

    #[test]
    fn brevity_penalty_hand_value() {
        let report = bleu(&[words("a b c d")], &[words("a b c d e")]).unwrap();
        assert_relative_eq!(report.bleu, 100.0 * (-0.25f64).exp(), epsilon = 1e-9);
        assert_relative_eq!(report.brevity_penalty, (-0.25f64).exp(), epsilon = 1e-12);
        for p in report.precisions {
            assert_relative_eq!(p, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn report_line_matches_canonical_format() {
        let report = bleu(&[words("a b c d")], &[words("a b c d e")]).unwrap();
        let line = report.to_string();
        assert!(line.starts_with("BLEU = 77.88, 100.0/100.0/100.0/100.0 (BP=0.779"));
        assert!(line.ends_with("hyp_len=4, ref_len=5)"));
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(bleu(&[], &[]).is_err());
    }

    /// Independent oracle: linear-scan n-gram counting and the product form
    /// of the geometric mean.
    fn bleu_oracle(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
        let mut correct = [0u64; 4];
        let mut total = [0u64; 4];
        let (mut hyp_len, mut ref_len) = (0u64, 0u64);
        for (hyp, rf) in hyps.iter().zip(refs) {
            hyp_len += hyp.len() as u64;
            ref_len += rf.len() as u64;
            for n in 1..=4usize {
                if hyp.len() < n {
                    continue;
                }
                let grams: Vec<&[String]> = hyp.windows(n).collect();
                let mut seen: Vec<&[String]> = Vec::new();
                for &g in &grams {
                    total[n - 1] += 1;
                    if seen.contains(&g) {
                        continue;
                    }
                    seen.push(g);
                    let in_hyp = grams.iter().filter(|&&x| x == g).count() as u64;
                    let in_ref = rf.windows(n).filter(|&x| x == g).count() as u64;
                    correct[n - 1] += in_hyp.min(in_ref);
                }
            }
        }
        let mut product = 1.0;
        for n in 0..4 {
            if total[n] == 0 {
                return 0.0;
            }
            product *= correct[n] as f64 / total[n] as f64;
        }
        if product == 0.0 {
            return 0.0;
        }
        let bp = if hyp_len >= ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        };
        bp * product.powf(0.25) * 100.0
    }

    #[test]
    fn matches_brute_force_oracle_on_random_corpora() {
        let mut r = rng::seeded(99);
        for _ in 0..50 {
            let n = r.gen_range(1..=5);
            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for _ in 0..n {
                let hl = r.gen_range(1..=8);
                let rl = r.gen_range(1..=8);
                hyps.push((0..hl).map(|_| format!("w{}", r.gen_range(0..10))).collect());
                refs.push((0..rl).map(|_| format!("w{}", r.gen_range(0..10))).collect());
            }
            let ours = bleu(&hyps, &refs).unwrap().bleu;
            let oracle = bleu_oracle(&hyps, &refs);
            assert!(
                (ours - oracle).abs() < 1e-9,
                "ours {ours} oracle {oracle}"
            );
        }
    }

    #[test]
    fn duplicating_a_perfect_sentence_never_lowers_bleu() {
        let mut r = rng::seeded(7);
        for _ in 0..20 {
            let n = r.gen_range(2..=5);
            let mut hyps: Vec<Vec<String>> = Vec::new();
            let mut refs: Vec<Vec<String>> = Vec::new();
            for _ in 0..n {
                let rl = r.gen_range(4..=8);
                let rf: Vec<String> = (0..rl).map(|_| format!("w{}", r.gen_range(0..6))).collect();
                let hl = r.gen_range(4..=8);
                let hyp: Vec<String> = (0..hl).map(|_| format!("w{}", r.gen_range(0..6))).collect();
                refs.push(rf);
                hyps.push(hyp);
            }
            let before = bleu(&hyps, &refs).unwrap().bleu;
            hyps.push(refs[0].clone());
            refs.push(refs[0].clone());
            let after = bleu(&hyps, &refs).unwrap().bleu;
            assert!(after >= before - 1e-12, "before {before} after {after}");
        }
    }

    #[test]
    fn identical_systems_have_p_near_one() {
        let refs: Vec<Vec<String>> = (0..10).map(|i| words(&format!("tok{i} a b c"))).collect();
        let hyps = refs.clone();
        let report = bootstrap_significance(&hyps, &hyps, &refs, 200, 5).unwrap();
        assert_eq!(report.p_value, 1.0);
        assert_eq!(report.wins_a, 0.0);
    }

    #[test]
    fn garbage_system_loses_decisively() {
        let refs: Vec<Vec<String>> = (0..30)
            .map(|i| words(&format!("a{i} b{i} c{i} d{i} e{i}")))
            .collect();
        let good = refs.clone();
        let garbage: Vec<Vec<String>> = (0..30).map(|i| words(&format!("z{} z z", i + 50))).collect();
        let report = bootstrap_significance(&good, &garbage, &refs, 1000, 11).unwrap();
        assert!(report.p_value < 0.01, "p = {}", report.p_value);
        assert!(report.mean_a > report.mean_b);
    }

    #[test]
    fn bootstrap_is_deterministic_under_fixed_seed() {
        let refs: Vec<Vec<String>> = (0..12).map(|i| words(&format!("w{i} x{i} y"))).collect();
        let hyps_a: Vec<Vec<String>> = (0..12).map(|i| words(&format!("w{i} x{i} z"))).collect();
        let hyps_b: Vec<Vec<String>> = (0..12).map(|i| words(&format!("w{i} q q"))).collect();
        let r1 = bootstrap_significance(&hyps_a, &hyps_b, &refs, 500, 42).unwrap();
        let r2 = bootstrap_significance(&hyps_a, &hyps_b, &refs, 500, 42).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn two_sided_bootstrap_on_identical_samples_is_one() {
        let xs = [0.5, 0.6, 0.7, 0.8, 0.9];
        let p = paired_bootstrap_two_sided(&xs, &xs, 500, 3);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn two_sided_bootstrap_detects_a_clear_gap() {
        let a = [0.9, 0.92, 0.91, 0.93, 0.9];
        let b = [0.1, 0.12, 0.11, 0.13, 0.1];
        let p = paired_bootstrap_two_sided(&a, &b, 1000, 3);
        assert!(p < 0.05, "p = {p}");
    }

    #[test]
    fn concat_devset_follows_the_n_minus_one_rule() {
        let raw = ParallelCorpus::from_pairs(vec![
            (words("a b"), words("x y")),
            (words("c"), words("z")),
        ])
        .unwrap();
        let src_sents: Vec<Vec<String>> = raw.pairs.iter().map(|p| p.source.clone()).collect();
        let tgt_sents: Vec<Vec<String>> = raw.pairs.iter().map(|p| p.target.clone()).collect();
        let sv = crate::corpus::Vocabulary::build(src_sents.iter().map(Vec::as_slice));
        let tv = crate::corpus::Vocabulary::build(tgt_sents.iter().map(Vec::as_slice));
        let num = crate::corpus::numberize_corpus(&raw, None, &sv, &tv);

        let set = build_concat_devset(&raw, &num, ConcatEvalMode::Consec, 0);
        assert_eq!(set.len(), 1);
        assert!(!set.comparable);
        // references are the concatenated constituent references in order
        assert_eq!(set.references[0], words("x y z"));
        // source carries both <EOS> markers
        assert_eq!(set.sources[0].iter().filter(|&&t| t == EOS).count(), 2);
    }
}
