//! Dense numeric kernels shared by the target model, the drafter and the trainer.
//!
//! Values are stored as `f32`; every reduction (dot products, softmax sums,
//! normalization statistics) accumulates in `f64`. All functions are pure.

use crate::error::{Error, Result};

/// Variance stabilizer for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major dense matrix of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix payload",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let mut data = Vec::with_capacity(n * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "matrix row",
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(&row);
        }
        Ok(Self {
            rows: n,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · x`, checked.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                what: "matvec inner dimension",
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok(self.matvec_f64(x).into_iter().map(|v| v as f32).collect())
    }

    /// `self · x` with the result left in `f64`. Panics on dimension mismatch.
    pub fn matvec_f64(&self, x: &[f32]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec inner dimension");
        (0..self.rows).map(|r| dot_f32(self.row(r), x)).collect()
    }

    /// `self · x` for an `f64` input vector.
    pub fn matvec_wide(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec inner dimension");
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .map(|(&w, &v)| w as f64 * v)
                    .sum()
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Exact GeLU: `0.5 · x · (1 + erf(x / √2))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of the exact GeLU: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
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

/// Learned layer-norm affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct NormAffine<'a> {
    pub gain: &'a [f32],
    pub bias: &'a [f32],
}

/// Layer normalization in `f64`. Returns the normalized (pre-affine) values and
/// `1 / sqrt(var + eps)`.
pub fn layer_norm_stats(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// The drafter's `f`: GeLU(LayerNorm(x)), with unit gain and zero bias unless
/// `affine` is supplied.
pub fn norm_act(x: &[f32], affine: Option<NormAffine<'_>>) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("norm_act"));
    }
    if let Some(a) = affine {
        for len in [a.gain.len(), a.bias.len()] {
            if len != x.len() {
                return Err(Error::DimensionMismatch {
                    what: "norm_act affine",
                    expected: x.len(),
                    actual: len,
                });
            }
        }
    }
    let wide: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let (normed, _) = layer_norm_stats(&wide);
    Ok(normed
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let a = match affine {
                Some(a) => n * a.gain[i] as f64 + a.bias[i] as f64,
                None => n,
            };
            gelu(a) as f32
        })
        .collect())
}

/// Numerically stable log-softmax in `f64`.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// Log-softmax for `f64` logits.
pub fn log_softmax_wide(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Indices of the `k` largest entries of `scores`, descending, ties to the
/// lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// The `k` most probable tokens with their probabilities, descending.
pub fn softmax_topk(logits: &[f32], k: usize) -> Result<Vec<(u32, f32)>> {
    if k == 0 || k > logits.len() {
        return Err(Error::TopKOutOfRange {
            k,
            vocab: logits.len(),
        });
    }
    let logp = log_softmax(logits);
    Ok(top_k_indices(&logp, k)
        .into_iter()
        .map(|i| (i as u32, logp[i].exp() as f32))
        .collect())
}

/// `-log softmax(logits)[target]`, computed in log-space.
pub fn cross_entropy(logits: &[f32], target: u32) -> Result<f64> {
    if target as usize >= logits.len() {
        return Err(Error::TokenOutOfRange {
            token: target,
            vocab: logits.len(),
        });
    }
    Ok(-log_softmax(logits)[target as usize])
}

/// Index of the maximum, ties to the lower index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
