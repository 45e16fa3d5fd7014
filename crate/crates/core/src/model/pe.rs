//! Sinusoidal absolute positional encodings driven by explicit indices.
//!
//! Row k depends only on `positions[k]`, which is what makes position
//! shifting work: translating every index by n yields exactly the rows the
//! unshifted encoding would produce at index + n.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Encodes each position index as interleaved sin/cos rows:
/// column 2i holds sin(p / 10000^(2i/d)), column 2i+1 the matching cos.
pub fn positional_encoding(
    positions: &[usize],
    model_dim: usize,
    max_position: usize,
) -> Result<Array2<f64>> {
    debug_assert!(model_dim % 2 == 0, "model_dim must be even");
    if let Some(&p) = positions.iter().find(|&&p| p >= max_position) {
        return Err(Error::PositionOverflow {
            position: p,
            max_position,
        });
    }
    let mut table = Array2::zeros((positions.len(), model_dim));
    for (row, &p) in positions.iter().enumerate() {
        for i in 0..model_dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / model_dim as f64);
            let angle = p as f64 * rate;
            table[[row, 2 * i]] = angle.sin();
            table[[row, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_interleaves_sin_cos() {
        let table = positional_encoding(&[0], 8, 16).unwrap();
        for i in 0..4 {
            assert_eq!(table[[0, 2 * i]], 0.0);
            assert_eq!(table[[0, 2 * i + 1]], 1.0);
        }
    }

    #[test]
    fn rows_depend_only_on_the_index() {
        let shifted = positional_encoding(&[3, 4, 5], 16, 32).unwrap();
        let full = positional_encoding(&(0..10).collect::<Vec<_>>(), 16, 32).unwrap();
        for (r, p) in (3..6).enumerate() {
            assert_eq!(shifted.row(r), full.row(p));
        }
    }

    #[test]
    fn dot_product_peaks_at_zero_offset() {
        let table = positional_encoding(&(0..64).collect::<Vec<_>>(), 64, 128).unwrap();
        let p0 = table.row(0);
        let dots: Vec<f64> = (0..64).map(|k| p0.dot(&table.row(k))).collect();
        let argmax = dots
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 0);
    }

    #[test]
    fn overflow_is_reported() {
        match positional_encoding(&[5], 8, 5) {
            Err(Error::PositionOverflow {
                position: 5,
                max_position: 5,
            }) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
    }
}
