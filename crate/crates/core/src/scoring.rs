//! Similarity functions and the in-batch softmax objective.
//!
//! Row `i` of a batch score matrix holds the similarities of query `i` to
//! every entry in the batch; the diagonal holds the positives and every other
//! column serves as a negative.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimKind {
    /// Inner product ⟨a, b⟩.
    #[serde(rename = "IPS")]
    Ips,
    /// Negative squared Euclidean distance −‖a − b‖².
    #[serde(rename = "NSD")]
    Nsd,
}

impl SimKind {
    pub const ALL: [SimKind; 2] = [SimKind::Ips, SimKind::Nsd];

    pub fn code(self) -> u8 {
        match self {
            SimKind::Ips => 0,
            SimKind::Nsd => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SimKind::Ips),
            1 => Some(SimKind::Nsd),
            _ => None,
        }
    }
}

impl fmt::Display for SimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimKind::Ips => "IPS",
            SimKind::Nsd => "NSD",
        })
    }
}

impl FromStr for SimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IPS" => Ok(SimKind::Ips),
            "NSD" => Ok(SimKind::Nsd),
            other => Err(Error::Config(format!("unknown similarity {other:?}"))),
        }
    }
}

/// Similarity accumulated in f64.
pub fn similarity<T: Copy + Into<f64>>(kind: SimKind, a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(similarity_unchecked(kind, a, b))
}

pub(crate) fn similarity_unchecked<T: Copy + Into<f64>>(kind: SimKind, a: &[T], b: &[T]) -> f64 {
    match kind {
        SimKind::Ips => a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum(),
        SimKind::Nsd => -a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x.into() - y.into();
                d * d
            })
            .sum::<f64>(),
    }
}

/// Square B×B matrix of finite in-batch scores, B ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(Array2<f64>);

impl ScoreMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::Scores(format!("score matrix must be square, got {r}x{c}")));
        }
        if r < 2 {
            return Err(Error::Scores("in-batch scoring needs at least 2 pairs".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Scores("score matrix contains non-finite values".into()));
        }
        Ok(ScoreMatrix(values))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let b = rows.len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let values = Array2::from_shape_vec((b, flat.len() / b.max(1)), flat)
            .map_err(|e| Error::Scores(e.to_string()))?;
        ScoreMatrix::new(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.nrows()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Row-wise softmax.
    pub fn softmax(&self) -> Array2<f64> {
        let mut out = self.0.clone();
        for mut row in out.outer_iter_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        out
    }
}

/// Pairwise scores between B query and B entry embeddings (rows).
pub fn score_matrix(kind: SimKind, queries: ArrayView2<f64>, entries: ArrayView2<f64>) -> Result<ScoreMatrix> {
    if queries.nrows() != entries.nrows() {
        return Err(Error::DimMismatch {
            left: queries.nrows(),
            right: entries.nrows(),
        });
    }
    if queries.ncols() != entries.ncols() {
        return Err(Error::DimMismatch {
            left: queries.ncols(),
            right: entries.ncols(),
        });
    }
    let b = queries.nrows();
    let mut values = Array2::zeros((b, b));
    for (i, q) in queries.outer_iter().enumerate() {
        let q = q.to_vec();
        for (j, e) in entries.outer_iter().enumerate() {
            values[[i, j]] = similarity_unchecked(kind, &q, &e.to_vec());
        }
    }
    ScoreMatrix::new(values)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_weights(scores: &ScoreMatrix, weights: &[f64]) -> Result<f64> {
    if weights.len() != scores.batch_size() {
        return Err(Error::DimMismatch {
            left: weights.len(),
            right: scores.batch_size(),
        });
    }
    if weights.iter().any(|w| w.is_nan() || *w <= 0.0 || !w.is_finite()) {
        return Err(Error::Scores("pair weights must be positive and finite".into()));
    }
    Ok(weights.iter().sum())
}

/// Weighted mean over rows of −log softmax(row)ᵢᵢ.
pub fn inbatch_loss(scores: &ScoreMatrix, weights: &[f64]) -> Result<f64> {
    let total = check_weights(scores, weights)?;
    let mut loss = 0.0;
    for (i, row) in scores.0.outer_iter().enumerate() {
        let row = row.as_slice().expect("contiguous");
        loss += weights[i] * (log_sum_exp(row) - row[i]);
    }
    Ok(loss / total)
}

/// ∂loss/∂s_ij = (w_i / Σw)·(softmax(row i)_j − δ_ij).
pub fn loss_grad(scores: &ScoreMatrix, weights: &[f64]) -> Result<Array2<f64>> {
    let total = check_weights(scores, weights)?;
    let mut grad = scores.softmax();
    for (i, mut row) in grad.outer_iter_mut().enumerate() {
        row[i] -= 1.0;
        row *= weights[i] / total;
    }
    Ok(grad)
}

/// Chains a score-matrix gradient back to the query and entry embeddings.
pub fn score_backward(
    kind: SimKind,
    queries: ArrayView2<f64>,
    entries: ArrayView2<f64>,
    grad: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    match kind {
        SimKind::Ips => (grad.dot(&entries), grad.t().dot(&queries)),
        SimKind::Nsd => {
            // s_ij = −‖q_i − e_j‖²
            let row_sums = grad.sum_axis(Axis(1)).insert_axis(Axis(1));
            let col_sums = grad.sum_axis(Axis(0)).insert_axis(Axis(1));
            let dq = (grad.dot(&entries) - &queries * &row_sums) * 2.0;
            let de = (grad.t().dot(&queries) - &entries * &col_sums) * 2.0;
            (dq, de)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn similarity_arithmetic() {
        assert_eq!(similarity(SimKind::Ips, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(similarity(SimKind::Nsd, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), -25.0);
        let v = [0.3f32, -1.7, 2.5];
        assert_eq!(similarity(SimKind::Nsd, &v, &v).unwrap(), 0.0);
        assert!(similarity(SimKind::Ips, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn orthonormal_ips_gives_identity() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let s = score_matrix(SimKind::Ips, e.view(), e.view()).unwrap();
        assert_eq!(s.values(), &e);
    }

    #[test]
    fn nsd_self_scores() {
        let e = array![[1.0, 2.0], [-1.0, 0.5]];
        let s = score_matrix(SimKind::Nsd, e.view(), e.view()).unwrap();
        assert_eq!(s.values()[[0, 0]], 0.0);
        assert_eq!(s.values()[[1, 1]], 0.0);
        assert!(s.values()[[0, 1]] < 0.0 && s.values()[[1, 0]] < 0.0);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let e = array![[1.0, 2.0]];
        assert!(score_matrix(SimKind::Ips, e.view(), e.view()).is_err());
    }

    #[test]
    fn uniform_loss_is_ln2() {
        let s = ScoreMatrix::from_rows(&[&[0.7, 0.7], &[0.7, 0.7]]).unwrap();
        let loss = inbatch_loss(&s, &[1.0, 1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let g = loss_grad(&s, &[1.0, 1.0]).unwrap();
        assert_eq!(g, array![[-0.25, 0.25], [0.25, -0.25]]);
    }

    #[test]
    fn identity_scores_loss() {
        let s = ScoreMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let loss = inbatch_loss(&s, &[1.0, 1.0]).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn dominant_diagonal_drives_loss_to_zero() {
        let s = ScoreMatrix::from_rows(&[&[1e4, 0.0], &[0.0, 1e4]]).unwrap();
        assert!(inbatch_loss(&s, &[1.0, 1.0]).unwrap() < 1e-300);
    }

    #[test]
    fn huge_scores_stay_finite() {
        let s = ScoreMatrix::from_rows(&[&[1e300, 1e300], &[-1e300, 1e300]]).unwrap();
        assert!(inbatch_loss(&s, &[1.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn invalid_inputs() {
        assert!(ScoreMatrix::from_rows(&[&[f64::NAN, 0.0], &[0.0, 0.0]]).is_err());
        let s = ScoreMatrix::from_rows(&[&[0.0, 0.0], &[0.0, 0.0]]).unwrap();
        assert!(inbatch_loss(&s, &[1.0, 0.0]).is_err());
        assert!(inbatch_loss(&s, &[1.0]).is_err());
    }

    #[test]
    fn weights_scale_rows() {
        let s = ScoreMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]).unwrap();
        let unit = inbatch_loss(&s, &[1.0, 1.0]).unwrap();
        let heavy_second = inbatch_loss(&s, &[1.0, 3.0]).unwrap();
        // second row is the uniform row (ln 2), the first is easier
        assert!(heavy_second > unit);
    }
}
