//! Attention mask construction.
//!
//! Masks are boolean "allowed" tensors. The unmasked mode blocks only padding
//! keys and future target positions; segment masking additionally confines
//! every query to keys of its own segment, in encoder self-attention, decoder
//! self-attention, and cross-attention alike, so the two sentences of a
//! concatenated example cannot see each other.

use ndarray::Array3;

use crate::batching::Minibatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Unmasked,
    SegmentMasked,
}

/// Derived allowed-key tensors for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskSpec {
    pub mode: MaskMode,
    /// (B, S, S) encoder self-attention.
    pub self_source: Array3<bool>,
    /// (B, T, T) decoder self-attention; the causal constraint is always
    /// present.
    pub self_target: Array3<bool>,
    /// (B, T, S) decoder-to-encoder attention.
    pub cross: Array3<bool>,
}

pub fn build_masks(batch: &Minibatch, mode: MaskMode) -> AttentionMaskSpec {
    let b = batch.rows();
    let s = batch.source_len();
    let t = batch.target_len();
    let segment = |q: u8, k: u8| mode == MaskMode::Unmasked || q == k;

    let mut self_source = Array3::from_elem((b, s, s), false);
    let mut self_target = Array3::from_elem((b, t, t), false);
    let mut cross = Array3::from_elem((b, t, s), false);

    for bi in 0..b {
        for q in 0..s {
            for k in 0..s {
                self_source[[bi, q, k]] = !batch.source_pad[[bi, k]]
                    && segment(batch.source_segments[[bi, q]], batch.source_segments[[bi, k]]);
            }
        }
        for q in 0..t {
            for k in 0..t {
                self_target[[bi, q, k]] = k <= q
                    && !batch.target_pad[[bi, k]]
                    && segment(batch.target_segments[[bi, q]], batch.target_segments[[bi, k]]);
            }
            for k in 0..s {
                cross[[bi, q, k]] = !batch.source_pad[[bi, k]]
                    && segment(batch.target_segments[[bi, q]], batch.source_segments[[bi, k]]);
            }
        }
    }

    // Every query must keep at least one permitted key (softmax rows stay
    // well-defined); guaranteed because no row is all padding and pad cells
    // carry segment 0.
    debug_assert!((0..b).all(|bi| {
        (0..s).all(|q| (0..s).any(|k| self_source[[bi, q, k]]))
            && (0..t).all(|q| (0..t).any(|k| self_target[[bi, q, k]]))
            && (0..t).all(|q| (0..s).any(|k| cross[[bi, q, k]]))
    }));

    AttentionMaskSpec {
        mode,
        self_source,
        self_target,
        cross,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{concat_pair, Provenance, TrainExample};
    use crate::batching::materialize_examples;
    use crate::corpus::NumberizedPair;

    fn example(src: usize, tgt: usize) -> TrainExample {
        TrainExample::from_pair(&NumberizedPair {
            source: vec![4; src],
            target: vec![4; tgt],
            origin_index: 0,
        })
    }

    fn concat_batch() -> Minibatch {
        let ex = concat_pair(&example(1, 1), &example(1, 1), Provenance::Rand);
        materialize_examples(&[ex], &[0])
    }

    #[test]
    fn segment_mask_is_block_diagonal() {
        // source segments [0,0,1,1]
        let batch = concat_batch();
        let masks = build_masks(&batch, MaskMode::SegmentMasked);
        for q in 0..4 {
            for k in 0..4 {
                let same_block = (q < 2) == (k < 2);
                assert_eq!(masks.self_source[[0, q, k]], same_block, "({q},{k})");
            }
        }
    }

    #[test]
    fn unconcatenated_segment_mask_equals_unmasked() {
        let batch = materialize_examples(&[example(3, 2)], &[0]);
        let masked = build_masks(&batch, MaskMode::SegmentMasked);
        let unmasked = build_masks(&batch, MaskMode::Unmasked);
        assert_eq!(masked.self_source, unmasked.self_source);
        assert_eq!(masked.self_target, unmasked.self_target);
        assert_eq!(masked.cross, unmasked.cross);
    }

    #[test]
    fn causal_constraint_in_both_modes() {
        let batch = concat_batch();
        for mode in [MaskMode::Unmasked, MaskMode::SegmentMasked] {
            let masks = build_masks(&batch, mode);
            let t = batch.target_len();
            for q in 0..t {
                for k in q + 1..t {
                    assert!(!masks.self_target[[0, q, k]]);
                }
            }
        }
    }

    #[test]
    fn cross_mask_confines_target_to_its_source_segment() {
        let batch = concat_batch();
        let masks = build_masks(&batch, MaskMode::SegmentMasked);
        // target positions 0..1 are segment 0, 2..3 segment 1; source same.
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(masks.cross[[0, q, k]], (q < 2) == (k < 2));
            }
        }
    }

    #[test]
    fn padding_keys_are_always_blocked() {
        let batch = materialize_examples(&[example(2, 1), example(4, 3)], &[0, 1]);
        let masks = build_masks(&batch, MaskMode::Unmasked);
        let s = batch.source_len();
        for q in 0..s {
            for k in 0..s {
                if batch.source_pad[[0, k]] {
                    assert!(!masks.self_source[[0, q, k]]);
                }
            }
        }
    }
}
