//! Nadaraya–Watson smoothing over a filtered key set.

use crate::attention::mask::Mask;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Smallest admissible row sum of visible scores.
pub const DEFAULT_EPS: f64 = 1e-12;

/// `w[i][j] = s[i][j] / Σ_{visible j'} s[i][j']` on visible entries, exactly
/// zero elsewhere.
pub fn smoothing_weights(scores: &Tensor, mask: &Mask, eps: f64) -> Result<Tensor> {
    check(scores, mask)?;
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let w = tape.normalize_masked(s, mask.data(), eps)?;
    Ok(tape.value(w).clone())
}

/// `out[i] = Σ_j w[i][j] · values[j]`.
pub fn smooth(scores: &Tensor, mask: &Mask, values: &Tensor, eps: f64) -> Result<Tensor> {
    smoothing_weights(scores, mask, eps)?.matmul(values)
}

fn check(scores: &Tensor, mask: &Mask) -> Result<()> {
    if scores.rows() != mask.rows() || scores.cols() != mask.cols() {
        return Err(Error::shape(
            "smooth",
            format!("scores {:?} vs mask {}×{}", scores.shape(), mask.rows(), mask.cols()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::mask::{build_mask, FilterSpec};

    #[test]
    fn hand_normalization() {
        let s = Tensor::from_rows(&[&[2.0, 6.0]]).unwrap();
        let v = Tensor::identity(2);
        let m = build_mask(&FilterSpec::full(), 1, 2).unwrap();
        assert_eq!(smooth(&s, &m, &v, DEFAULT_EPS).unwrap().data(), &[0.25, 0.75]);
    }

    #[test]
    fn single_visible_key_copies_its_value() {
        let s = Tensor::from_rows(&[&[1e-3, 5.0], &[7.0, 1e5]]).unwrap();
        let v = Tensor::from_rows(&[&[1.5, -2.0], &[0.25, 4.0]]).unwrap();
        let m = build_mask(&FilterSpec::causal(), 2, 2).unwrap();
        let out = smooth(&s, &m, &v, DEFAULT_EPS).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn equal_scores_average() {
        let s = Tensor::from_rows(&[&[3.0, 3.0]]).unwrap();
        let v = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -2.0]]).unwrap();
        let m = build_mask(&FilterSpec::full(), 1, 2).unwrap();
        assert_eq!(smooth(&s, &m, &v, DEFAULT_EPS).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn negative_visible_score_is_invalid() {
        let s = Tensor::from_rows(&[&[-1.0, 2.0]]).unwrap();
        let m = build_mask(&FilterSpec::full(), 1, 2).unwrap();
        assert!(matches!(
            smoothing_weights(&s, &m, DEFAULT_EPS),
            Err(Error::InvalidKernel { row: 0, col: 0, .. })
        ));
    }

    #[test]
    fn tiny_row_sum_is_degenerate() {
        let s = Tensor::from_rows(&[&[1e-14, 0.0]]).unwrap();
        let m = build_mask(&FilterSpec::full(), 1, 2).unwrap();
        assert!(matches!(
            smoothing_weights(&s, &m, DEFAULT_EPS),
            Err(Error::DegenerateDenominator { .. })
        ));
        assert!(smoothing_weights(&s, &m, 1e-15).is_ok());
    }
}
