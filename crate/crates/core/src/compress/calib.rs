//! Calibration activations and the layer Hessians built from them.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Inputs seen by each prunable layer on a calibration batch.
///
/// Each matrix is `tokens × in_features`, one row per token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationSet {
    /// Number of calibration sequences.
    pub samples: usize,
    /// Tokens per sequence.
    pub seq_len: usize,
    layers: BTreeMap<String, Matrix<f32>>,
}

impl CalibrationSet {
    pub fn new(samples: usize, seq_len: usize) -> Result<Self> {
        if samples == 0 || seq_len == 0 {
            return Err(Error::invalid("calibration", "samples and seq_len must be >= 1"));
        }
        Ok(CalibrationSet { samples, seq_len, layers: BTreeMap::new() })
    }

    pub fn insert(&mut self, layer: impl Into<String>, x: Matrix<f32>) {
        self.layers.insert(layer.into(), x);
    }

    pub fn get(&self, layer: &str) -> Result<&Matrix<f32>> {
        self.layers.get(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Matrix<f32>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// `XᵀX` in `f64` for `X` of shape `tokens × n`.
pub fn hessian(x: &Matrix<f32>) -> Vec<f64> {
    let n = x.cols();
    let mut h = vec![0.0f64; n * n];
    let mut row = vec![0.0f64; n];
    for t in 0..x.rows() {
        for (d, &v) in row.iter_mut().zip(x.row(t)) {
            *d = v as f64;
        }
        for i in 0..n {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            let hi = &mut h[i * n..i * n + i + 1];
            for (hj, &xj) in hi.iter_mut().zip(&row[..=i]) {
                *hj += xi * xj;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            h[j * n + i] = h[i * n + j];
        }
    }
    h
}

/// `H + damp · mean(diag H) · I`.
pub fn damped(h: &[f64], n: usize, damp: f64) -> Result<Vec<f64>> {
    if !(damp >= 0.0) || !damp.is_finite() {
        return Err(Error::invalid("damp", alloc::format!("{damp} must be finite and >= 0")));
    }
    let mean = (0..n).map(|i| h[i * n + i]).sum::<f64>() / n as f64;
    let mut out = h.to_vec();
    for i in 0..n {
        out[i * n + i] += damp * mean;
    }
    Ok(out)
}

/// `Σ_r (w_r − ŵ_r) H (w_r − ŵ_r)ᵀ`, the squared output error on the
/// calibration inputs that produced `H`.
pub fn reconstruction_error(w: &Matrix<f32>, w_hat: &Matrix<f64>, h: &[f64]) -> f64 {
    let n = w.cols();
    let mut total = 0.0;
    let mut d = vec![0.0f64; n];
    for r in 0..w.rows() {
        for ((dj, &a), &b) in d.iter_mut().zip(w.row(r)).zip(w_hat.row(r)) {
            *dj = a as f64 - b;
        }
        for i in 0..n {
            if d[i] == 0.0 {
                continue;
            }
            let hi = &h[i * n..(i + 1) * n];
            total += d[i] * hi.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    total
}
