//! INT8 quantization: activation smoothing, error-compensated rounding
//! and kurtosis-based layer skipping.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::compress::calib::{damped, hessian, reconstruction_error};
use crate::error::{Error, Result};
use crate::linalg::inverse_upper_cholesky;
use crate::tensor::{kurtosis, round_half_even, Matrix};

pub const QMAX: f32 = 127.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QuantGroup {
    #[default]
    PerChannel,
    PerTensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantRecipe {
    /// Smoothing strength in `[0, 1]`.
    pub alpha: f64,
    pub skip_top_k_kurtosis: usize,
    pub group: QuantGroup,
    pub damp: f64,
    pub method: QuantMethod,
}

impl Default for QuantRecipe {
    fn default() -> Self {
        QuantRecipe {
            alpha: 0.5,
            skip_top_k_kurtosis: 5,
            group: QuantGroup::PerChannel,
            damp: 0.01,
            method: QuantMethod::Gptq,
        }
    }
}

impl QuantRecipe {
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", "must lie in [0, 1]"));
        }
        if !(self.damp > 0.0) || !self.damp.is_finite() {
            return Err(Error::invalid("damp", "must be finite and > 0"));
        }
        if self.skip_top_k_kurtosis > layer_count {
            return Err(Error::invalid(
                "skip_top_k_kurtosis",
                alloc::format!("{} exceeds the {layer_count} quantizable layers", self.skip_top_k_kurtosis),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMethod {
    /// Nearest rounding.
    Rtn,
    Gptq,
}

/// INT8 weights `q` with row scales, in the smoothed input space when
/// `smoothing` is present: `W ≈ (q · scale_r) / smoothing_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    pub q: Matrix<i8>,
    pub scales: Vec<f32>,
    pub smoothing: Option<Vec<f32>>,
    /// Static per-tensor scale for the (smoothed) input activations.
    pub act_scale: f32,
    pub method: QuantMethod,
}

impl QuantizedMatrix {
    /// `q · scale`, still in the smoothed space.
    pub fn dequantize(&self) -> Matrix<f32> {
        Matrix::from_fn(self.q.rows(), self.q.cols(), |r, c| self.q.get(r, c) as f32 * self.scales[r])
    }

    /// Weights as seen by the original, unsmoothed inputs.
    pub fn effective_weights(&self) -> Matrix<f32> {
        let mut w = self.dequantize();
        if let Some(s) = &self.smoothing {
            for r in 0..w.rows() {
                for (v, &sj) in w.row_mut(r).iter_mut().zip(s) {
                    *v /= sj;
                }
            }
        }
        w
    }

    pub fn sparsity(&self) -> f64 {
        self.q.as_slice().iter().filter(|&&v| v == 0).count() as f64 / self.q.len() as f64
    }

    /// Quantizes one input vector with this layer's smoothing and static
    /// activation scale.
    pub fn quantize_input(&self, x: &[f32], out: &mut [i8]) {
        let inv = 1.0 / self.act_scale;
        match &self.smoothing {
            Some(s) => {
                for ((o, &v), &sj) in out.iter_mut().zip(x).zip(s) {
                    *o = to_i8(v / sj * inv);
                }
            }
            None => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = to_i8(v * inv);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn to_i8(v: f32) -> i8 {
    round_half_even(v as f64).clamp(-127.0, 127.0) as i8
}

fn absmax(v: impl Iterator<Item = f32>) -> f32 {
    v.fold(0.0f32, |m, x| m.max(x.abs()))
}

fn scale_of(max: f32) -> f32 {
    if max > 0.0 {
        max / QMAX
    } else {
        1.0
    }
}

fn weight_scales(w: &Matrix<f32>, group: QuantGroup) -> Vec<f32> {
    match group {
        QuantGroup::PerChannel => (0..w.rows()).map(|r| scale_of(absmax(w.row(r).iter().copied()))).collect(),
        QuantGroup::PerTensor => vec![scale_of(absmax(w.as_slice().iter().copied())); w.rows()],
    }
}

/// Static activation scale from calibration inputs, after smoothing.
pub fn activation_scale(x: &Matrix<f32>, smoothing: Option<&[f32]>) -> f32 {
    let max = match smoothing {
        Some(s) => (0..x.rows()).flat_map(|t| x.row(t).iter().zip(s).map(|(v, sj)| v / sj)).fold(0.0f32, |m, v| m.max(v.abs())),
        None => absmax(x.as_slice().iter().copied()),
    };
    scale_of(max)
}

/// Round-to-nearest quantization without error compensation.
pub fn quantize_rtn(w: &Matrix<f32>, group: QuantGroup) -> QuantizedMatrix {
    let scales = weight_scales(w, group);
    let q = Matrix::from_fn(w.rows(), w.cols(), |r, c| to_i8(w.get(r, c) / scales[r]));
    QuantizedMatrix { q, scales, smoothing: None, act_scale: 1.0, method: QuantMethod::Rtn }
}

/// Per-input-channel smoothing `s_j = max|X_j|^α / max|W_j|^(1−α)`.
///
/// Returns `W · diag(s)` and `s`; inputs are to be divided by `s`.
pub fn smooth_activations(w: &Matrix<f32>, x: &Matrix<f32>, alpha: f64) -> Result<(Matrix<f32>, Vec<f32>)> {
    if x.cols() != w.cols() {
        return Err(Error::shape("smooth_activations", w.shape(), x.shape()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", "must lie in [0, 1]"));
    }
    let n = w.cols();
    let mut xmax = vec![0.0f32; n];
    for t in 0..x.rows() {
        for (m, &v) in xmax.iter_mut().zip(x.row(t)) {
            *m = m.max(v.abs());
        }
    }
    let mut wmax = vec![0.0f32; n];
    for r in 0..w.rows() {
        for (m, &v) in wmax.iter_mut().zip(w.row(r)) {
            *m = m.max(v.abs());
        }
    }
    let s: Vec<f32> = xmax
        .iter()
        .zip(&wmax)
        .map(|(&xm, &wm)| {
            if xm > 0.0 && wm > 0.0 {
                (libm::pow(xm as f64, alpha) / libm::pow(wm as f64, 1.0 - alpha)) as f32
            } else {
                1.0
            }
        })
        .collect();
    let mut out = w.clone();
    for r in 0..out.rows() {
        for (v, &sj) in out.row_mut(r).iter_mut().zip(&s) {
            *v *= sj;
        }
    }
    Ok((out, s))
}

/// Quantized weights and the reconstruction error `‖WX − ŴX‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct GptqResult {
    pub matrix: QuantizedMatrix,
    pub error: f64,
}

/// Error-compensated rounding: columns are quantized in order and each
/// rounding error is spread onto the columns not yet quantized.
///
/// Each kept weight is rounded down or up, never to zero, so the sparsity
/// pattern is unchanged; exact zeros of `w` are treated as pruned.
pub fn quantize_gptq(w: &Matrix<f32>, x: &Matrix<f32>, damp: f64, group: QuantGroup) -> Result<GptqResult> {
    quantize_gptq_scaled(w, x, damp, weight_scales(w, group))
}

/// [`quantize_gptq`] on a caller-chosen grid, one positive scale per row.
pub fn quantize_gptq_scaled(w: &Matrix<f32>, x: &Matrix<f32>, damp: f64, scales: Vec<f32>) -> Result<GptqResult> {
    if x.cols() != w.cols() {
        return Err(Error::shape("quantize_gptq", w.shape(), x.shape()));
    }
    if scales.len() != w.rows() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("scales", "need one positive scale per row"));
    }
    let (rows, n) = w.shape();
    let h = hessian(x);
    let u = inverse_upper_cholesky(&damped(&h, n, damp)?, n).map_err(|_| Error::SingularHessian { damp })?;
    let mut q = Matrix::<i8>::zeros(rows, n);
    let mut row = vec![0.0f64; n];
    for r in 0..rows {
        for (d, &v) in row.iter_mut().zip(w.row(r)) {
            *d = v as f64;
        }
        let s = scales[r] as f64;
        let orig = w.row(r);
        let qr = q.row_mut(r);
        for j in 0..n {
            let code = if orig[j].to_bits() != 0 { rounding_code(row[j] / s, orig[j] as f64 / s) } else { 0 };
            qr[j] = code;
            let err = (row[j] - code as f64 * s) / u[j * n + j];
            let uj = &u[j * n..(j + 1) * n];
            for k in j + 1..n {
                row[k] -= err * uj[k];
            }
        }
    }
    let matrix = QuantizedMatrix { q, scales, smoothing: None, act_scale: 1.0, method: QuantMethod::Gptq };
    let error = reconstruction_error(w, &matrix.dequantize().cast(), &h);
    Ok(GptqResult { matrix, error })
}

/// Code for a kept weight: the compensated value `v` rounded, restricted
/// to the floor or ceiling of the original scaled weight `orig`, never 0.
fn rounding_code(v: f64, orig: f64) -> i8 {
    let lo = libm::floor(orig).clamp(-127.0, 127.0);
    let hi = libm::ceil(orig).clamp(-127.0, 127.0);
    let c = round_half_even(v).clamp(lo, hi);
    let c = if c == 0.0 { if lo == 0.0 { hi } else { lo } } else { c };
    c as i8
}

/// Codes [`quantize_gptq`] may pick for a kept weight with scaled value
/// `orig`.
pub fn rounding_candidates(orig: f64) -> Vec<i8> {
    let lo = libm::floor(orig).clamp(-127.0, 127.0);
    let hi = libm::ceil(orig).clamp(-127.0, 127.0);
    let mut out: Vec<i8> = [lo, hi].iter().filter(|&&c| c != 0.0).map(|&c| c as i8).collect();
    out.dedup();
    out
}

/// Smoothing, error-compensated rounding and the static activation scale
/// for one layer.
/// `‖(W − Ŵ) Xᵀ‖²` computed row by row without forming `XᵀX`.
fn output_error(w: &Matrix<f32>, qm: &QuantizedMatrix, x: &Matrix<f32>) -> f64 {
    let mut diff = vec![0.0f64; w.cols()];
    let mut total = 0.0;
    for r in 0..w.rows() {
        let s = qm.scales[r] as f64;
        for ((d, &a), &q) in diff.iter_mut().zip(w.row(r)).zip(qm.q.row(r)) {
            *d = a as f64 - q as f64 * s;
        }
        for t in 0..x.rows() {
            let e: f64 = diff.iter().zip(x.row(t)).map(|(d, &v)| d * v as f64).sum();
            total += e * e;
        }
    }
    total
}

pub fn quantize_layer(w: &Matrix<f32>, x: &Matrix<f32>, recipe: &QuantRecipe) -> Result<GptqResult> {
    let (ws, s) = smooth_activations(w, x, recipe.alpha)?;
    let xs = Matrix::from_fn(x.rows(), x.cols(), |t, j| x.get(t, j) / s[j]);
    let mut res = match recipe.method {
        QuantMethod::Gptq => quantize_gptq(&ws, &xs, recipe.damp, recipe.group)?,
        QuantMethod::Rtn => {
            let matrix = quantize_rtn(&ws, recipe.group);
            let error = output_error(&ws, &matrix, &xs);
            GptqResult { matrix, error }
        }
    };
    res.matrix.act_scale = activation_scale(x, Some(&s));
    res.matrix.smoothing = Some(s);
    Ok(res)
}

/// The `k` layers with the heaviest-tailed weights (highest kurtosis).
/// Layers whose kurtosis is undefined rank last; ties go to the earlier
/// name.
pub fn select_skip_layers(layers: &[(&str, &Matrix<f32>)], k: usize) -> Result<BTreeSet<String>> {
    if k > layers.len() {
        return Err(Error::invalid("k", alloc::format!("{k} exceeds the {} layers", layers.len())));
    }
    let mut ranked: Vec<(f64, &str)> = layers
        .iter()
        .map(|(name, w)| (kurtosis(w.as_slice()).unwrap_or(f64::NEG_INFINITY), *name))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, n)| n.into()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::prune::{prune_magnitude, PruneScope};
    use crate::rng::Rng;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |_, _| rng.normal_f32())
    }

    #[test]
    fn rtn_is_within_half_a_step() {
        let mut rng = Rng::new(1);
        let w = random(&mut rng, 16, 40);
        for group in [QuantGroup::PerChannel, QuantGroup::PerTensor] {
            let qm = quantize_rtn(&w, group);
            let d = qm.dequantize();
            for r in 0..16 {
                for c in 0..40 {
                    assert!((d.get(r, c) - w.get(r, c)).abs() <= qm.scales[r] * 0.5 * (1.0 + 1e-6));
                    assert!(qm.q.get(r, c).unsigned_abs() <= 127);
                }
            }
        }
    }

    #[test]
    fn grid_weights_are_a_fixed_point() {
        let mut rng = Rng::new(4);
        let codes = Matrix::from_fn(6, 10, |_, c| if c == 0 { 127i8 } else { (rng.below(255) as i32 - 127) as i8 });
        let scales: Vec<f32> = (0..6).map(|r| 0.01 * (r + 1) as f32).collect();
        let w = Matrix::from_fn(6, 10, |r, c| codes.get(r, c) as f32 * scales[r]);
        let x = random(&mut rng, 32, 10);
        let res = quantize_gptq(&w, &x, 0.01, QuantGroup::PerChannel).unwrap();
        assert_eq!(res.matrix.q, codes);
        assert!(res.error < 1e-9, "{}", res.error);
    }

    fn error_of(w: &[f64], what: &[f64], h: &[f64]) -> f64 {
        let d = [w[0] - what[0], w[1] - what[1]];
        d[0] * d[0] * h[0] + 2.0 * d[0] * d[1] * h[1] + d[1] * d[1] * h[3]
    }

    #[test]
    fn two_weight_rounding_matches_brute_force() {
        let w = Matrix::from_rows(&[&[2.2f32, 1.35]]).unwrap();
        let x = Matrix::from_rows(&[&[1.0f32, 1.0], &[1.0, 0.8], &[1.0, 1.2], &[1.0, 0.6]]).unwrap();
        let res = quantize_gptq_scaled(&w, &x, 1e-9, vec![1.0]).unwrap();
        let h = hessian(&x);
        let wf = [2.2f32 as f64, 1.35f32 as f64];
        let mut best = (f64::INFINITY, [0i8; 2]);
        for a in rounding_candidates(wf[0]) {
            for b in rounding_candidates(wf[1]) {
                let e = error_of(&wf, &[a as f64, b as f64], &h);
                if e < best.0 {
                    best = (e, [a, b]);
                }
            }
        }
        assert_eq!(res.matrix.q.row(0), &best.1);
        assert!((res.error - best.0).abs() < 1e-6);
        // Plain rounding lands elsewhere.
        assert_ne!(&[2i8, 1], &best.1);
    }

    #[test]
    fn absmax_rows_match_brute_force() {
        for seed in 0..100 {
            let mut rng = Rng::new(seed);
            let w = random(&mut rng, 1, 2);
            let mix = rng.range(-0.99, 0.99) as f32;
            let x = Matrix::from_fn(6, 2, |_, _| rng.normal_f32());
            let x = Matrix::from_fn(6, 2, |t, j| if j == 1 { mix * x.get(t, 0) + x.get(t, 1) } else { x.get(t, 0) });
            let res = quantize_gptq(&w, &x, 0.01, QuantGroup::PerChannel).unwrap();
            let s = res.matrix.scales[0] as f64;
            let h = hessian(&x);
            let wf = [w.get(0, 0) as f64, w.get(0, 1) as f64];
            let mut best = (f64::INFINITY, [0i8; 2]);
            for a in rounding_candidates(wf[0] / s) {
                for b in rounding_candidates(wf[1] / s) {
                    let e = error_of(&wf, &[a as f64 * s, b as f64 * s], &h);
                    if e < best.0 {
                        best = (e, [a, b]);
                    }
                }
            }
            assert_eq!(res.matrix.q.row(0), &best.1, "seed {seed}");
        }
    }

    #[test]
    fn later_columns_round_optimally_given_earlier_ones() {
        for seed in 0..25 {
            let mut rng = Rng::new(seed);
            let w = Matrix::from_fn(1, 2, |_, _| rng.range(-20.0, 20.0) as f32);
            let x = random(&mut rng, 8, 2);
            let res = quantize_gptq_scaled(&w, &x, 1e-9, vec![1.0]).unwrap();
            let h = hessian(&x);
            let wf = [w.get(0, 0) as f64, w.get(0, 1) as f64];
            let q0 = res.matrix.q.get(0, 0) as f64;
            let chosen = error_of(&wf, &[q0, res.matrix.q.get(0, 1) as f64], &h);
            for b in rounding_candidates(wf[1]) {
                let e = error_of(&wf, &[q0, b as f64], &h);
                assert!(chosen <= e * (1.0 + 1e-9) + 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn sparsity_survives_quantization() {
        let mut rng = Rng::new(8);
        let w = random(&mut rng, 32, 64);
        let (pruned, mask) = prune_magnitude(&w, 0.5, PruneScope::PerRow).unwrap();
        let x = random(&mut rng, 128, 64);
        let res = quantize_gptq(&pruned, &x, 0.01, QuantGroup::PerChannel).unwrap();
        assert_eq!(res.matrix.sparsity(), 0.5);
        for (q, &k) in res.matrix.q.as_slice().iter().zip(mask.as_slice()) {
            assert_eq!(*q != 0, k);
        }
        let layer = quantize_layer(&pruned, &x, &QuantRecipe::default()).unwrap();
        assert_eq!(layer.matrix.sparsity(), 0.5);
    }

    #[test]
    fn smoothing_examples_and_identity() {
        let w = Matrix::from_rows(&[&[1.0f32, -0.5], &[0.25, 2.0]]).unwrap();
        let x = Matrix::from_rows(&[&[4.0f32, 1.0], &[-2.0, 0.0]]).unwrap();
        let (_, s) = smooth_activations(&w, &x, 0.5).unwrap();
        assert_eq!(s[0], 2.0);
        let (w0, s0) = smooth_activations(&w, &x, 0.0).unwrap();
        assert_eq!(s0, vec![1.0, 0.5]);
        assert_eq!(w0.row(0), &[1.0, -0.25]);
        assert_eq!(w0.row(1), &[0.25, 1.0]);

        let zero = Matrix::from_rows(&[&[0.0f32, 1.0]]).unwrap();
        assert_eq!(smooth_activations(&w, &zero, 0.5).unwrap().1[0], 1.0);

        let mut rng = Rng::new(3);
        for alpha in [0.0, 0.25, 0.5, 0.85, 1.0] {
            let w = random(&mut rng, 12, 20);
            let x = Matrix::from_fn(30, 20, |_, j| rng.normal_f32() * (1.0 + j as f32));
            let (ws, s) = smooth_activations(&w, &x, alpha).unwrap();
            let xs = Matrix::from_fn(30, 20, |t, j| x.get(t, j) / s[j]);
            let y = crate::tensor::matmul_transb(&x, &w).unwrap();
            let ys = crate::tensor::matmul_transb(&xs, &ws).unwrap();
            let diff: f64 = y.as_slice().iter().zip(ys.as_slice()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            assert!(diff.sqrt() <= 1e-5 * y.frobenius_sq().sqrt(), "alpha {alpha}");
        }
    }

    #[test]
    fn skip_selection() {
        let mut rng = Rng::new(6);
        let a = random(&mut rng, 16, 16);
        let b = random(&mut rng, 16, 16);
        let mut heavy = random(&mut rng, 16, 16);
        heavy.set(3, 3, 60.0);
        let layers = [("a", &a), ("heavy", &heavy), ("b", &b)];
        assert!(select_skip_layers(&layers, 0).unwrap().is_empty());
        assert_eq!(select_skip_layers(&layers, 1).unwrap().into_iter().collect::<Vec<_>>(), ["heavy"]);
        assert_eq!(select_skip_layers(&layers, 3).unwrap().len(), 3);
        assert!(select_skip_layers(&layers, 4).is_err());
    }

    #[test]
    fn input_quantization_uses_smoothing() {
        let qm = QuantizedMatrix {
            q: Matrix::zeros(1, 3),
            scales: vec![1.0],
            smoothing: Some(vec![2.0, 1.0, 0.5]),
            act_scale: 0.5,
            method: QuantMethod::Gptq,
        };
        let mut out = [0i8; 3];
        qm.quantize_input(&[4.0, -1.25, 100.0], &mut out);
        assert_eq!(out, [4, -2, 127]);
    }

    #[test]
    fn rtn_layer_error_matches_hessian_form() {
        let mut rng = Rng::new(17);
        let w = random(&mut rng, 6, 10);
        let x = random(&mut rng, 20, 10);
        let recipe = QuantRecipe { method: QuantMethod::Rtn, ..QuantRecipe::default() };
        let res = quantize_layer(&w, &x, &recipe).unwrap();
        let s = res.matrix.smoothing.clone().unwrap();
        let (ws, _) = smooth_activations(&w, &x, recipe.alpha).unwrap();
        let xs = Matrix::from_fn(x.rows(), x.cols(), |t, j| x.get(t, j) / s[j]);
        assert_eq!(res.matrix.q, quantize_rtn(&ws, QuantGroup::PerChannel).q);
        let what = res.matrix.dequantize().map(|v| v as f64);
        let want = reconstruction_error(&ws, &what, &hessian(&xs));
        assert!((res.error - want).abs() <= 1e-6 * want.max(1.0));
    }
}
