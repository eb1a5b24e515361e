//! Dense matrices, stochastic rows and the frame-level metric kernels.
//!
//! Everything downstream (the mapping network, training, evaluation) is built
//! on these few primitives, so their contracts are spelled out precisely:
//!
//! * [`softmax`] subtracts the row maximum before exponentiating and is safe
//!   for logits of magnitude well beyond 1e3.
//! * [`kl_divergence_frame`] computes `sum_k q_k (ln q_k - ln p_k)` with both
//!   probabilities clamped below at [`KL_LOG_EPS`] before the logarithm, and
//!   the usual `0 * ln 0 = 0` convention.
//! * [`levenshtein`] is the plain unit-cost edit distance.
//! * [`top_n_indices`] orders by descending value and breaks ties towards the
//!   lowest index, which keeps every consumer (argmax, accuracy, decoding)
//!   deterministic.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::math;

/// Probabilities are clamped below at this value before any logarithm.
pub const KL_LOG_EPS: f64 = 1e-8;

/// Tolerance on `|sum - 1|` for a freshly constructed [`ProbRow`].
pub const PROB_ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Dense row-major matrix of `f64`.
///
/// Used for parameter tensors, posteriorgrams and cached RNN states. The
/// shape is fixed at construction; all entries are finite when built through
/// [`Matrix::from_vec`], and deserialisation runs the same checks.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "RawMatrix"))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[cfg(feature = "serde")]
impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self, Error> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, checking shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, Error> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "matrix" });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out += self * x` for a column vector `x` of length `cols`.
    pub fn mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o += acc;
        }
    }

    /// `out += transpose(self) * v` for a column vector `v` of length `rows`.
    pub fn mul_tvec_add(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, s) in v.iter().enumerate() {
            let row = self.row(r);
            for (o, w) in out.iter_mut().zip(row) {
                *o += s * w;
            }
        }
    }

    /// Rank-one update `self += a * transpose(b)`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, s) in a.iter().enumerate() {
            let row = self.row_mut(r);
            for (w, v) in row.iter_mut().zip(b) {
                *w += s * v;
            }
        }
    }
}

/// A single stochastic row: entries in `[0, 1]` summing to 1 within
/// [`PROB_ROW_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow(Vec<f64>);

impl ProbRow {
    pub fn new(values: Vec<f64>) -> Result<Self, Error> {
        if values.is_empty() {
            return Err(Error::Empty { what: "prob row" });
        }
        let mut sum = 0.0;
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { what: "prob row" });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::NotAProbability { index, value });
            }
            sum += value;
        }
        if math::abs(sum - 1.0) > PROB_ROW_SUM_TOLERANCE {
            return Err(Error::RowNotStochastic { row: 0, sum });
        }
        Ok(ProbRow(values))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl core::ops::Deref for ProbRow {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Numerically stable softmax over a logit row.
pub fn softmax(logits: &[f64]) -> Result<ProbRow, Error> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "logits" });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| math::exp(z - max)).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(ProbRow(out))
}

/// KL divergence of `mapped` from `target` for one frame.
///
/// Both rows are clamped below at [`KL_LOG_EPS`] inside the logarithms; terms
/// with `target == 0` contribute nothing. For normalised rows the result is
/// nonnegative up to rounding and zero exactly when the rows coincide.
pub fn kl_divergence_frame(target: &[f64], mapped: &[f64]) -> Result<f64, Error> {
    if target.len() != mapped.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            found: mapped.len(),
        });
    }
    if target.is_empty() {
        return Err(Error::Empty { what: "frame" });
    }
    Ok(kl_frame_unchecked(target, mapped))
}

pub(crate) fn kl_frame_unchecked(target: &[f64], mapped: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&q, &p) in target.iter().zip(mapped) {
        if q > 0.0 {
            let q_c = q.max(KL_LOG_EPS);
            let p_c = p.max(KL_LOG_EPS);
            acc += q * (math::ln(q_c) - math::ln(p_c));
        }
    }
    acc
}

/// Unit-cost edit distance between two token slices.
///
/// Two-row dynamic program, `O(len_a * len_b)` time and `O(min)` memory.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0usize; short.len() + 1];
    for (i, lv) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, sv) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lv != sv);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Indices of the `n` largest entries, descending by value, ties broken
/// towards the lowest index.
pub fn top_n_indices(row: &[f64], n: usize) -> Result<Vec<usize>, Error> {
    if n == 0 || n > row.len() {
        return Err(Error::TopNOutOfRange { n, len: row.len() });
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "top-n row" });
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| {
        row[j]
            .partial_cmp(&row[i])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.truncate(n);
    Ok(idx)
}

/// Index of the largest entry, ties towards the lowest index.
pub fn argmax(row: &[f64]) -> Result<usize, Error> {
    if row.is_empty() {
        return Err(Error::Empty { what: "argmax row" });
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "argmax row" });
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Rank of `index` in the ordering used by [`top_n_indices`]: the number of
/// entries that sort strictly ahead of it.
pub(crate) fn top_rank(row: &[f64], index: usize) -> usize {
    let v = row[index];
    let mut rank = 0;
    for (k, &w) in row.iter().enumerate() {
        if w > v || (w == v && k < index) {
            rank += 1;
        }
    }
    rank
}
