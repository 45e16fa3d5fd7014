//! Token-budgeted minibatch planning.
//!
//! The default scheme shuffles the examples, reads them in chunks, sorts each
//! chunk by source length, and greedily packs sorted runs into batches whose
//! padded token count stays under the budget. The `sep-batch` variant forms
//! concatenated examples only *after* the length sort — so each one joins two
//! similar-length sentences — and packs original and concatenated examples as
//! two separate streams that never share a batch.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::augment::{concat_pair, Provenance, TrainExample};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_CHUNK_SIZE: usize = 10_000;
pub const DEFAULT_TOKEN_BUDGET: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchPolicy {
    Default,
    SepBatch,
}

/// How sep-batch pairs adjacent sorted examples when forming concatenations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SepPairing {
    /// i with i+1 for every i: chunk_len - 1 concatenations, mirroring the
    /// sliding window of consecutive concatenation.
    Sliding,
    /// (0,1), (2,3), ...: each example used once.
    Disjoint,
}

/// An ordered batch schedule over an owned example list.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub examples: Vec<TrainExample>,
    /// Example indices per batch, in schedule order.
    pub batches: Vec<Vec<usize>>,
    pub policy: BatchPolicy,
    pub chunk_size: usize,
    pub token_budget: usize,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Debug dump: batch id, policy, example ids, padded dims, token count.
    pub fn dump<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        let policy = match self.policy {
            BatchPolicy::Default => "default",
            BatchPolicy::SepBatch => "sep",
        };
        for (id, batch) in self.batches.iter().enumerate() {
            let s = batch.iter().map(|&i| self.examples[i].source_len()).max().unwrap_or(0);
            let t = batch.iter().map(|&i| self.examples[i].target_len()).max().unwrap_or(0);
            let ids = batch.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
            writeln!(w, "{id}\t{policy}\t{ids}\t{s}\t{t}\t{}", batch.len() * s.max(t))?;
        }
        Ok(())
    }
}

fn check_budget(examples: &[TrainExample], token_budget: usize) -> Result<()> {
    for (index, ex) in examples.iter().enumerate() {
        let tokens = ex.source_len().max(ex.target_len());
        if tokens > token_budget {
            return Err(Error::ExampleExceedsBudget {
                index,
                tokens,
                budget: token_budget,
            });
        }
    }
    Ok(())
}

/// Greedy packing over an already-sorted index run: a batch closes when
/// adding the next example would push padded_rows * max(S, T) past the
/// budget.
fn pack_run(examples: &[TrainExample], run: &[usize], token_budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut batch: Vec<usize> = Vec::new();
    let (mut max_s, mut max_t) = (0usize, 0usize);
    for &idx in run {
        let s = examples[idx].source_len().max(max_s);
        let t = examples[idx].target_len().max(max_t);
        if !batch.is_empty() && (batch.len() + 1) * s.max(t) > token_budget {
            batches.push(std::mem::take(&mut batch));
            max_s = examples[idx].source_len();
            max_t = examples[idx].target_len();
        } else {
            max_s = s;
            max_t = t;
        }
        batch.push(idx);
    }
    if !batch.is_empty() {
        batches.push(batch);
    }
    batches
}

/// Splits shuffled indices into chunks and stable-sorts each chunk by source
/// length (ties keep the shuffled order).
fn sorted_chunks(indices: &[usize], examples: &[TrainExample], chunk_size: usize) -> Vec<Vec<usize>> {
    indices
        .chunks(chunk_size.max(1))
        .map(|chunk| {
            let mut chunk = chunk.to_vec();
            chunk.sort_by_key(|&i| examples[i].source_len());
            chunk
        })
        .collect()
}

/// The shuffle / chunk / sort / pack plan used for normal training.
pub fn plan_default(
    examples: Vec<TrainExample>,
    chunk_size: usize,
    token_budget: usize,
    seed: u64,
) -> Result<BatchPlan> {
    check_budget(&examples, token_budget)?;
    let mut r = rng::seeded(seed);
    let mut indices: Vec<usize> = (0..examples.len()).collect();
    indices.shuffle(&mut r);

    let mut batches = Vec::new();
    for chunk in sorted_chunks(&indices, &examples, chunk_size) {
        batches.extend(pack_run(&examples, &chunk, token_budget));
    }
    batches.shuffle(&mut r);

    Ok(BatchPlan {
        examples,
        batches,
        policy: BatchPolicy::Default,
        chunk_size,
        token_budget,
    })
}

/// The sep-batch plan: concatenation happens after the length sort, and the
/// original and concatenated streams are packed separately, so no batch
/// mixes provenances and concatenation cannot widen a batch's length spread.
pub fn plan_sep_batch(
    d_orig: Vec<TrainExample>,
    chunk_size: usize,
    token_budget: usize,
    seed: u64,
    pairing: SepPairing,
    reset_pos: bool,
) -> Result<BatchPlan> {
    check_budget(&d_orig, token_budget)?;
    let mut r = rng::seeded(seed);
    let mut indices: Vec<usize> = (0..d_orig.len()).collect();
    indices.shuffle(&mut r);

    let mut examples = d_orig;
    let mut batches = Vec::new();
    for chunk in sorted_chunks(&indices, &examples, chunk_size) {
        batches.extend(pack_run(&examples, &chunk, token_budget));

        // Concatenate adjacent, hence similar-length, examples of the sorted
        // chunk. The formed examples are appended after the originals.
        let mut concat_run = Vec::new();
        let pairs: Vec<(usize, usize)> = match pairing {
            SepPairing::Sliding => chunk.windows(2).map(|w| (w[0], w[1])).collect(),
            SepPairing::Disjoint => chunk.chunks_exact(2).map(|w| (w[0], w[1])).collect(),
        };
        for (a, b) in pairs {
            let mut ex = concat_pair(&examples[a], &examples[b], Provenance::Rand);
            if reset_pos {
                ex.reset_positions();
            }
            let tokens = ex.source_len().max(ex.target_len());
            if tokens > token_budget {
                return Err(Error::ExampleExceedsBudget {
                    index: examples.len(),
                    tokens,
                    budget: token_budget,
                });
            }
            concat_run.push(examples.len());
            examples.push(ex);
        }
        batches.extend(pack_run(&examples, &concat_run, token_budget));
    }
    batches.shuffle(&mut r);

    Ok(BatchPlan {
        examples,
        batches,
        policy: BatchPolicy::SepBatch,
        chunk_size,
        token_budget,
    })
}

/// A materialized batch: padded id/position/segment grids plus pad masks.
/// Padding cells carry id `<PAD>`, position 0, segment 0, and pad-mask true.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub source: Array2<usize>,
    pub target_in: Array2<usize>,
    pub target_out: Array2<usize>,
    pub source_positions: Array2<usize>,
    pub target_positions: Array2<usize>,
    pub source_segments: Array2<u8>,
    pub target_segments: Array2<u8>,
    pub source_pad: Array2<bool>,
    pub target_pad: Array2<bool>,
    /// Indices into the plan's example list, one per row.
    pub example_indices: Vec<usize>,
}

impl Minibatch {
    pub fn rows(&self) -> usize {
        self.source.nrows()
    }

    pub fn source_len(&self) -> usize {
        self.source.ncols()
    }

    pub fn target_len(&self) -> usize {
        self.target_in.ncols()
    }
}

pub fn materialize(plan: &BatchPlan, batch_index: usize) -> Result<Minibatch> {
    let batch = plan
        .batches
        .get(batch_index)
        .ok_or(Error::BatchIndexOutOfRange {
            index: batch_index,
            len: plan.batches.len(),
        })?;
    Ok(materialize_examples(&plan.examples, batch))
}

/// Pads a set of examples into grids; rows keep the given order.
pub fn materialize_examples(examples: &[TrainExample], batch: &[usize]) -> Minibatch {
    let rows = batch.len();
    let s = batch.iter().map(|&i| examples[i].source_len()).max().unwrap_or(0);
    let t = batch.iter().map(|&i| examples[i].target_len()).max().unwrap_or(0);

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
        example_indices: batch.to_vec(),
    };

    for (row, &idx) in batch.iter().enumerate() {
        let ex = &examples[idx];
        for (col, &id) in ex.source_ids.iter().enumerate() {
            mb.source[[row, col]] = id;
            mb.source_positions[[row, col]] = ex.source_positions[col];
            mb.source_segments[[row, col]] = ex.source_segments[col];
            mb.source_pad[[row, col]] = false;
        }
        for (col, &id) in ex.target_in_ids.iter().enumerate() {
            mb.target_in[[row, col]] = id;
            mb.target_out[[row, col]] = ex.target_out_ids[col];
            mb.target_positions[[row, col]] = ex.target_positions[col];
            mb.target_segments[[row, col]] = ex.target_segments[col];
            mb.target_pad[[row, col]] = false;
        }
    }
    mb
}

/// Mean within-batch standard deviation of constituent-sentence source
/// lengths: the length-diversity statistic sep-batch is designed to lower.
pub fn constituent_length_std(plan: &BatchPlan) -> f64 {
    let mut per_batch = Vec::with_capacity(plan.batches.len());
    for batch in &plan.batches {
        let lens: Vec<f64> = batch
            .iter()
            .flat_map(|&i| plan.examples[i].source_segment_lens())
            .map(|l| l as f64)
            .collect();
        if lens.is_empty() {
            continue;
        }
        let mean = lens.iter().sum::<f64>() / lens.len() as f64;
        let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / lens.len() as f64;
        per_batch.push(var.sqrt());
    }
    if per_batch.is_empty() {
        0.0
    } else {
        per_batch.iter().sum::<f64>() / per_batch.len() as f64
    }
}
