use crate::error::{Error, Result};

use super::Matrix;

/// Boolean keep-mask over a matrix; `true` marks an entry that takes part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    /// The same column mask repeated on every row (attention key masks).
    pub fn columns(rows: usize, cols: &[bool]) -> Self {
        let mut keep = Vec::with_capacity(rows * cols.len());
        for _ in 0..rows {
            keep.extend_from_slice(cols);
        }
        Self {
            rows,
            cols: cols.len(),
            keep,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask {rows}x{cols} needs {} flags, got {}",
                rows * cols,
                keep.len()
            )));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn keeps(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    /// 1.0 where kept, 0.0 elsewhere.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape")
    }
}

/// Row-wise softmax over kept entries; masked entries are exactly zero.
///
/// Each row is shifted by its kept maximum before exponentiation.
pub fn masked_softmax_rows(m: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "softmax mask {:?} vs matrix {:?}",
                mask.shape(),
                m.shape()
            )));
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let keep = |c: usize| mask.is_none_or(|mk| mk.keeps(r, c));
        let row = m.row(r);
        let max = (0..m.cols())
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptySet(format!("softmax row {r} is fully masked")));
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..row.len() {
            if keep(c) {
                let e = (row[c] - max).exp();
                o[c] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Log-softmax over the kept entries of a flat vector, returned only for kept
/// positions (masked positions get `None`).
pub fn masked_log_softmax(values: &[f64], keep: &[bool]) -> Result<Vec<Option<f64>>> {
    let lse = log_sum_exp(values, keep)?;
    Ok(values
        .iter()
        .zip(keep)
        .map(|(&v, &k)| k.then_some(v - lse))
        .collect())
}

pub(crate) fn log_sum_exp(values: &[f64], keep: &[bool]) -> Result<f64> {
    let max = values
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySet("no candidates left".into()));
    }
    let total: f64 = values
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| (v - max).exp())
        .sum();
    Ok(max + total.ln())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_row() {
        let m = Matrix::row_vector(&[0.0, 0.0]);
        let s = masked_softmax_rows(&m, None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn single_kept_entry_gets_all_mass() {
        let m = Matrix::row_vector(&[3.7, 1.2]);
        let mask = Mask::columns(1, &[true, false]);
        let s = masked_softmax_rows(&m, Some(&mask)).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn reference_values_one_two_three() {
        // exp(k) / (e + e^2 + e^3), evaluated independently to 6 digits.
        let m = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let s = masked_softmax_rows(&m, None).unwrap();
        let expected = [0.090031, 0.244728, 0.665241];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mask = Mask::from_vec(2, 2, vec![true, true, false, false]).unwrap();
        assert!(matches!(
            masked_softmax_rows(&m, Some(&mask)),
            Err(Error::EmptySet(_))
        ));
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let m = Matrix::row_vector(&[1000.0, 1000.0, -1000.0]);
        let s = masked_softmax_rows(&m, None).unwrap();
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_are_shift_invariant(
            vals in proptest::collection::vec(-50.0f64..50.0, 12),
            keep in proptest::collection::vec(any::<bool>(), 12),
            shift in -100.0f64..100.0,
        ) {
            let mut keep = keep;
            // at least one kept entry per 4-wide row
            for r in 0..3 { keep[r * 4] = true; }
            let m = Matrix::from_vec(3, 4, vals).unwrap();
            let mask = Mask::from_vec(3, 4, keep.clone()).unwrap();
            let s = masked_softmax_rows(&m, Some(&mask)).unwrap();
            for r in 0..3 {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                for c in 0..4 {
                    if !keep[r * 4 + c] { prop_assert_eq!(s.get(r, c), 0.0); }
                }
            }
            let shifted = masked_softmax_rows(&m.map(|v| v + shift), Some(&mask)).unwrap();
            prop_assert!(s.max_abs_diff(&shifted) < 1e-6);
        }
    }
}
