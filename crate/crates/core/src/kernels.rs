//! Matrix-vector and matrix-matrix kernels over compressed weights.
//!
//! Every float kernel keeps eight partial sums per output element, indexed by
//! column modulo 8, and reduces them with [`reduce8`]. Blocks are visited in
//! column order for each output row, so the sparse kernels follow the exact
//! summation order of [`dot`] and of the dense kernels below. Batched kernels
//! run the per-token computation of the vector kernels unchanged, which keeps
//! a one-token decode bit-identical to the matching row of a batched prefill.
//!
//! Integer kernels accumulate `i8 × i8` products in `i32`. With `|q| ≤ 127`
//! each product is at most 16129 in magnitude, so sums over up to
//! [`I8_MAX_COLS`] columns cannot overflow; wider inputs are rejected.

use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{expand_lanes, BlockLayout, SparseMatrix, LANES};
use crate::error::{Error, Result};
use crate::tensor::{dot, reduce8, Matrix};

#[cfg(target_arch = "x86_64")]
mod avx512;

#[cfg(target_arch = "x86_64")]
fn simd() -> bool {
    avx512::available()
}

#[cfg(not(target_arch = "x86_64"))]
fn simd() -> bool {
    false
}

/// Largest reduction length for which `i32` accumulation is exact.
pub const I8_MAX_COLS: usize = (i32::MAX as usize) / (127 * 127);

/// Multiply-add counts of a kernel invocation, two flops per multiply-add.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    /// Flops spent on stored weights.
    pub useful_flops: u64,
    /// Flops a dense kernel of the same shape would spend.
    pub dense_equiv_flops: u64,
}

impl FlopCounter {
    pub fn for_sparse<T: crate::codec::Element>(sm: &SparseMatrix<T>, batch: usize) -> Self {
        FlopCounter {
            useful_flops: 2 * sm.nnz() as u64 * batch as u64,
            dense_equiv_flops: 2 * (sm.rows() * sm.cols()) as u64 * batch as u64,
        }
    }

    pub fn for_dense(rows: usize, cols: usize, batch: usize) -> Self {
        let f = 2 * (rows * cols) as u64 * batch as u64;
        FlopCounter { useful_flops: f, dense_equiv_flops: f }
    }

    pub fn add(&mut self, other: FlopCounter) {
        self.useful_flops += other.useful_flops;
        self.dense_equiv_flops += other.dense_equiv_flops;
    }

    /// `useful / dense_equiv`, or 1 when nothing was counted.
    pub fn ratio(&self) -> f64 {
        if self.dense_equiv_flops == 0 {
            1.0
        } else {
            self.useful_flops as f64 / self.dense_equiv_flops as f64
        }
    }
}

fn check_len(op: &'static str, rows: usize, cols: usize, x_len: usize) -> Result<()> {
    if cols != x_len {
        return Err(Error::shape(op, (rows, cols), (x_len, 1)));
    }
    Ok(())
}

fn check_i8_cols(cols: usize) -> Result<()> {
    if cols > I8_MAX_COLS {
        return Err(Error::invalid(
            "cols",
            alloc::format!("{cols} exceeds the exact i32 accumulation bound {I8_MAX_COLS}"),
        ));
    }
    Ok(())
}

/// Sixteen values starting at `off`, zero padded past the end of `values`.
#[inline(always)]
fn window<'a, T: Copy + Default>(values: &'a [T], off: usize, pad: &'a mut [T; LANES]) -> &'a [T; LANES] {
    match values.get(off..off + LANES) {
        Some(w) => w.try_into().expect("16 values"),
        None => {
            *pad = [T::default(); LANES];
            let rest = &values[off.min(values.len())..];
            pad[..rest.len()].copy_from_slice(rest);
            pad
        }
    }
}

/// Branch-free bitmask expansion of one block into its 16 lanes.
#[inline(always)]
fn expand16<T: Copy, U: Copy + Default>(mask: u16, w: &[T; LANES], conv: impl Fn(T) -> U) -> [U; LANES] {
    let mut out = [U::default(); LANES];
    let mut pos = 0usize;
    for (j, o) in out.iter_mut().enumerate() {
        let bit = (mask >> (LANES - 1 - j)) & 1;
        let v = conv(w[pos & (LANES - 1)]);
        *o = if bit != 0 { v } else { U::default() };
        pos += bit as usize;
    }
    out
}

/// Inputs duplicated per lane pair: entry `16·cb + 2k + {0, 1}` is `x[8·cb + k]`.
fn duplicate_pairs<T: Copy + Default>(x: &[T], col_blocks: usize) -> Vec<T> {
    let mut out = vec![T::default(); col_blocks * LANES];
    for (c, &v) in x.iter().enumerate() {
        out[2 * c] = v;
        out[2 * c + 1] = v;
    }
    out
}

// ---------------------------------------------------------------------------
// float, compressed
// ---------------------------------------------------------------------------

/// `y = W x` with `W` compressed.
pub fn sparse_gemv(sm: &SparseMatrix<f32>, x: &[f32]) -> Result<Vec<f32>> {
    check_len("sparse_gemv", sm.rows(), sm.cols(), x.len())?;
    let mut y = vec![0.0f32; sm.rows()];
    gemv_into(sm, x, &mut y);
    Ok(y)
}

/// Writes `W x` into `y`; shapes must already agree.
pub fn gemv_into(sm: &SparseMatrix<f32>, x: &[f32], y: &mut [f32]) {
    match sm.layout() {
        BlockLayout::RowPair16 => rowpair_gemv(sm, x, y),
        BlockLayout::Tile { .. } => tile_gemv(sm, x, y),
    }
}

fn rowpair_gemv(sm: &SparseMatrix<f32>, x: &[f32], y: &mut [f32]) {
    let col_blocks = sm.cols().div_ceil(8);
    let xd = duplicate_pairs(x, col_blocks);
    let mut lanes = vec![[0.0f32; LANES]; sm.rows().div_ceil(2)];
    #[cfg(target_arch = "x86_64")]
    if simd() {
        // SAFETY: feature checked; masks and values validated on construction
        unsafe { avx512::rowpair_gemv_f32(sm.masks(), sm.values(), &xd, col_blocks, &mut lanes) };
        finish_rowpairs(&lanes, y);
        return;
    }
    rowpair_lanes_portable(sm.masks(), sm.values(), &xd, col_blocks, &mut lanes);
    finish_rowpairs(&lanes, y);
}

fn rowpair_lanes_portable(
    masks: &[u16],
    values: &[f32],
    xd: &[f32],
    col_blocks: usize,
    out: &mut [[f32; LANES]],
) {
    let mut pad = [0.0f32; LANES];
    let mut off = 0usize;
    for (row_masks, acc) in masks.chunks_exact(col_blocks).zip(out.iter_mut()) {
        *acc = [0.0; LANES];
        for (cb, &mask) in row_masks.iter().enumerate() {
            if mask == 0 {
                continue;
            }
            let w = expand16(mask, window(values, off, &mut pad), |v| v);
            off += mask.count_ones() as usize;
            let xs: &[f32; LANES] = xd[cb * LANES..(cb + 1) * LANES].try_into().expect("16 inputs");
            for j in 0..LANES {
                acc[j] += w[j] * xs[j];
            }
        }
    }
}

/// Reduces per-lane sums of each row pair into the two outputs.
fn finish_rowpairs(lanes: &[[f32; LANES]], y: &mut [f32]) {
    for (rp, acc) in lanes.iter().enumerate() {
        let (a, b) = split_pairs(acc);
        y[2 * rp] = reduce8(&a);
        if 2 * rp + 1 < y.len() {
            y[2 * rp + 1] = reduce8(&b);
        }
    }
}

#[inline(always)]
fn split_pairs<T: Copy + Default>(acc: &[T; LANES]) -> ([T; 8], [T; 8]) {
    let mut a = [T::default(); 8];
    let mut b = [T::default(); 8];
    for k in 0..8 {
        a[k] = acc[2 * k];
        b[k] = acc[2 * k + 1];
    }
    (a, b)
}

fn tile_gemv(sm: &SparseMatrix<f32>, x: &[f32], y: &mut [f32]) {
    let BlockLayout::Tile { rows: tr, cols: tc } = sm.layout() else { unreachable!() };
    let (tr, tc) = (tr as usize, tc as usize);
    let (rows, cols) = (sm.rows(), sm.cols());
    let segs = tc / LANES;
    let tile_cols = cols.div_ceil(tc);
    let masks = sm.masks();
    let values = sm.values();
    let mut acc = vec![[0.0f32; 8]; tr];
    let mut b = 0usize;
    let mut off = 0usize;
    for ti in 0..rows.div_ceil(tr) {
        acc.iter_mut().for_each(|a| *a = [0.0; 8]);
        for tj in 0..tile_cols {
            for acc_r in acc.iter_mut() {
                for s in 0..segs {
                    let mask = masks[b];
                    b += 1;
                    if mask == 0 {
                        continue;
                    }
                    let n = mask.count_ones() as usize;
                    let lanes = expand_lanes(mask, &values[off..off + n], |v| v);
                    off += n;
                    let c0 = tj * tc + s * LANES;
                    for (l, &w) in lanes.iter().enumerate() {
                        if c0 + l < cols {
                            acc_r[l % 8] += w * x[c0 + l];
                        }
                    }
                }
            }
        }
        for (r, a) in acc.iter().enumerate() {
            if ti * tr + r < rows {
                y[ti * tr + r] = reduce8(a);
            }
        }
    }
}

/// `W B` with `B` of shape `cols × n`.
pub fn sparse_gemm(sm: &SparseMatrix<f32>, b: &Matrix<f32>) -> Result<Matrix<f32>> {
    let mut flops = FlopCounter::default();
    sparse_gemm_counted(sm, b, &mut flops)
}

/// [`sparse_gemm`] that also records the flops it spent.
pub fn sparse_gemm_counted(
    sm: &SparseMatrix<f32>,
    b: &Matrix<f32>,
    flops: &mut FlopCounter,
) -> Result<Matrix<f32>> {
    if sm.cols() != b.rows() {
        return Err(Error::shape("sparse_gemm", (sm.rows(), sm.cols()), b.shape()));
    }
    let out = sparse_gemm_tokens(sm, &b.transpose())?;
    flops.add(FlopCounter::for_sparse(sm, b.cols()));
    Ok(out.transpose())
}

/// Token-major product: row `t` of the result is `W xₜ` for row `t` of `xs`.
pub fn sparse_gemm_tokens(sm: &SparseMatrix<f32>, xs: &Matrix<f32>) -> Result<Matrix<f32>> {
    if sm.cols() != xs.cols() {
        return Err(Error::shape("sparse_gemm", (sm.rows(), sm.cols()), (xs.cols(), xs.rows())));
    }
    let mut out = Matrix::zeros(xs.rows(), sm.rows());
    gemm_tokens_into(sm, xs, out.as_mut_slice());
    Ok(out)
}

/// Writes the token-major product into `out` (`tokens × rows`).
pub fn gemm_tokens_into(sm: &SparseMatrix<f32>, xs: &Matrix<f32>, out: &mut [f32]) {
    match sm.layout() {
        BlockLayout::RowPair16 => rowpair_gemm_tokens(sm, xs, out),
        BlockLayout::Tile { .. } => {
            let rows = sm.rows();
            for t in 0..xs.rows() {
                tile_gemv(sm, xs.row(t), &mut out[t * rows..(t + 1) * rows]);
            }
        }
    }
}

fn rowpair_gemm_tokens(sm: &SparseMatrix<f32>, xs: &Matrix<f32>, out: &mut [f32]) {
    let (rows, cols) = (sm.rows(), sm.cols());
    let tokens = xs.rows();
    let col_blocks = cols.div_ceil(8);
    // inputs laid out [col_block][token][lane]
    let mut xdt = vec![0.0f32; col_blocks * tokens * LANES];
    for t in 0..tokens {
        for (c, &v) in xs.row(t).iter().enumerate() {
            let base = ((c / 8) * tokens + t) * LANES + 2 * (c % 8);
            xdt[base] = v;
            xdt[base + 1] = v;
        }
    }
    let masks = sm.masks();
    let offsets = sm.offsets();
    let values = sm.values();
    let mut acc = vec![[0.0f32; LANES]; tokens];
    let use_simd = simd();
    for (rp, row_masks) in masks.chunks_exact(col_blocks).enumerate() {
        acc.iter_mut().for_each(|a| *a = [0.0; LANES]);
        let start = offsets[rp * col_blocks] as usize;
        let row_values = &values[start..];
        if use_simd {
            #[cfg(target_arch = "x86_64")]
            // SAFETY: feature checked; masks and values validated on construction
            unsafe {
                avx512::rowpair_block_row_f32(row_masks, row_values, &xdt, &mut acc)
            };
        } else {
            block_row_portable(row_masks, row_values, &xdt, &mut acc);
        }
        for (t, a) in acc.iter().enumerate() {
            let (ya, yb) = split_pairs(a);
            out[t * rows + 2 * rp] = reduce8(&ya);
            if 2 * rp + 1 < rows {
                out[t * rows + 2 * rp + 1] = reduce8(&yb);
            }
        }
    }
}

fn block_row_portable(row_masks: &[u16], values: &[f32], xdt: &[f32], acc: &mut [[f32; LANES]]) {
    let tokens = acc.len();
    let mut pad = [0.0f32; LANES];
    let mut off = 0usize;
    for (cb, &mask) in row_masks.iter().enumerate() {
        if mask == 0 {
            continue;
        }
        let w = expand16(mask, window(values, off, &mut pad), |v| v);
        off += mask.count_ones() as usize;
        for (t, a) in acc.iter_mut().enumerate() {
            let base = (cb * tokens + t) * LANES;
            let xs: &[f32; LANES] = xdt[base..base + LANES].try_into().expect("16 inputs");
            for j in 0..LANES {
                a[j] += w[j] * xs[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// float, dense
// ---------------------------------------------------------------------------

/// Dense `y = W x` with the same per-element summation order as the sparse
/// kernels.
pub fn dense_gemv(w: &Matrix<f32>, x: &[f32]) -> Result<Vec<f32>> {
    check_len("dense_gemv", w.rows(), w.cols(), x.len())?;
    let mut y = vec![0.0f32; w.rows()];
    dense_gemv_into(w, x, &mut y);
    Ok(y)
}

/// Writes dense `W x` into `y`; shapes must already agree.
pub fn dense_gemv_into(w: &Matrix<f32>, x: &[f32], y: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if simd() {
        // SAFETY: feature checked
        unsafe { avx512::dense_rows_f32(w.as_slice(), w.cols(), x, y) };
        return;
    }
    for (r, o) in y.iter_mut().enumerate() {
        *o = dot(w.row(r), x);
    }
}

/// Dense token-major product `xs Wᵀ`.
pub fn dense_gemm_tokens(w: &Matrix<f32>, xs: &Matrix<f32>) -> Result<Matrix<f32>> {
    if w.cols() != xs.cols() {
        return Err(Error::shape("dense_gemm", w.shape(), (xs.cols(), xs.rows())));
    }
    let mut out = Matrix::zeros(xs.rows(), w.rows());
    for t in 0..xs.rows() {
        dense_gemv_into(w, xs.row(t), out.row_mut(t));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// int8
// ---------------------------------------------------------------------------

/// Exact `i32` accumulators of `Q x` for compressed `i8` weights.
pub fn sparse_gemv_i8_acc(sm: &SparseMatrix<i8>, x: &[i8]) -> Result<Vec<i32>> {
    check_len("sparse_gemv_i8", sm.rows(), sm.cols(), x.len())?;
    check_i8_cols(sm.cols())?;
    let mut y = vec![0i32; sm.rows()];
    gemv_i8_into(sm, x, &mut y);
    Ok(y)
}

/// Dequantized `Q x`: accumulator `r` is scaled by `row_scales[r] · x_scale`.
pub fn sparse_gemv_i8(
    sm: &SparseMatrix<i8>,
    x: &[i8],
    row_scales: &[f32],
    x_scale: f32,
) -> Result<Vec<f32>> {
    if row_scales.len() != sm.rows() {
        return Err(Error::shape("sparse_gemv_i8 scales", (sm.rows(), 1), (row_scales.len(), 1)));
    }
    let acc = sparse_gemv_i8_acc(sm, x)?;
    Ok(acc.iter().zip(row_scales).map(|(&a, &s)| a as f32 * (s * x_scale)).collect())
}

pub fn gemv_i8_into(sm: &SparseMatrix<i8>, x: &[i8], y: &mut [i32]) {
    let (rows, cols) = (sm.rows(), sm.cols());
    let masks = sm.masks();
    let values = sm.values();
    match sm.layout() {
        BlockLayout::RowPair16 => {
            let col_blocks = cols.div_ceil(8);
            #[cfg(target_arch = "x86_64")]
            if simd() {
                let xs = row_split_inputs(x, col_blocks);
                let mut pairs = vec![[0i32; 2]; rows.div_ceil(2)];
                // SAFETY: feature checked; masks and values validated on construction
                unsafe { avx512::rowpair_gemv_i8(masks, values, &xs, weight_bias_excess(x), col_blocks, &mut pairs) };
                for (rp, p) in pairs.iter().enumerate() {
                    y[2 * rp] = p[0];
                    if 2 * rp + 1 < rows {
                        y[2 * rp + 1] = p[1];
                    }
                }
                return;
            }
            let xd: Vec<i16> = duplicate_pairs(x, col_blocks).into_iter().map(i16::from).collect();
            let mut lanes = vec![[0i32; LANES]; rows.div_ceil(2)];
            rowpair_i8_portable(masks, values, &xd, col_blocks, &mut lanes);
            for (rp, acc) in lanes.iter().enumerate() {
                let (a, b) = split_pairs(acc);
                y[2 * rp] = a.iter().sum();
                if 2 * rp + 1 < rows {
                    y[2 * rp + 1] = b.iter().sum();
                }
            }
        }
        BlockLayout::Tile { rows: tr, cols: tc } => {
            let (tr, tc) = (tr as usize, tc as usize);
            y.iter_mut().for_each(|v| *v = 0);
            let segs = tc / LANES;
            let tile_cols = cols.div_ceil(tc);
            let mut b = 0usize;
            let mut off = 0usize;
            for ti in 0..rows.div_ceil(tr) {
                for tj in 0..tile_cols {
                    for r in 0..tr {
                        let row = ti * tr + r;
                        for s in 0..segs {
                            let mask = masks[b];
                            b += 1;
                            if mask == 0 {
                                continue;
                            }
                            let n = mask.count_ones() as usize;
                            let lanes = expand_lanes(mask, &values[off..off + n], i32::from);
                            off += n;
                            let c0 = tj * tc + s * LANES;
                            let mut sum = 0i32;
                            for (l, &w) in lanes.iter().enumerate() {
                                if c0 + l < cols {
                                    sum += w * x[c0 + l] as i32;
                                }
                            }
                            y[row] += sum;
                        }
                    }
                }
            }
        }
    }
}

/// Token-major `i32` accumulators: row `t` is `Q xₜ`.
pub fn sparse_gemm_i8_tokens(sm: &SparseMatrix<i8>, xs: &Matrix<i8>) -> Result<Matrix<i32>> {
    if sm.cols() != xs.cols() {
        return Err(Error::shape("sparse_gemm_i8", (sm.rows(), sm.cols()), (xs.cols(), xs.rows())));
    }
    check_i8_cols(sm.cols())?;
    let rows = sm.rows();
    let mut out = Matrix::zeros(xs.rows(), rows);
    for t in 0..xs.rows() {
        gemv_i8_into(sm, xs.row(t), out.row_mut(t));
    }
    Ok(out)
}

/// Exact `i32` accumulators of a dense `i8` product.
pub fn dense_gemv_i8_acc(q: &Matrix<i8>, x: &[i8]) -> Result<Vec<i32>> {
    check_len("dense_gemv_i8", q.rows(), q.cols(), x.len())?;
    check_i8_cols(q.cols())?;
    let mut y = vec![0i32; q.rows()];
    dense_gemv_i8_into(q, x, &mut y);
    Ok(y)
}

pub fn dense_gemv_i8_into(q: &Matrix<i8>, x: &[i8], y: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    if simd() {
        // SAFETY: feature checked
        unsafe { avx512::dense_rows_i8(q.as_slice(), q.cols(), x, weight_bias_excess(x), y) };
        return;
    }
    for (r, o) in y.iter_mut().enumerate() {
        *o = dot_i8(q.row(r), x);
    }
}

/// `128 · Σx`, the excess every row picks up when its weights are biased
/// by 128.
#[cfg(target_arch = "x86_64")]
fn weight_bias_excess(x: &[i8]) -> i32 {
    x.iter().fold(0i32, |t, &v| t.wrapping_add(v as i32)).wrapping_mul(128)
}

/// Inputs laid out per four column blocks in storage lane order: once over
/// the row A lanes and once over the row B lanes, zero elsewhere.
#[cfg(target_arch = "x86_64")]
fn row_split_inputs(x: &[i8], col_blocks: usize) -> Vec<i8> {
    let groups = col_blocks.div_ceil(4);
    let mut xs = vec![0i8; groups * 128];
    for (c, &v) in x.iter().enumerate() {
        let (g, q) = (c / 32, c % 32);
        let lane = (q / 8) * 16 + 2 * (q % 8);
        xs[g * 128 + lane] = v;
        xs[g * 128 + 64 + lane + 1] = v;
    }
    xs
}

#[inline(always)]
pub(crate) fn dot_i8(w: &[i8], x: &[i8]) -> i32 {
    let mut acc = [0i32; 32];
    let cw = w.chunks_exact(32);
    let cx = x.chunks_exact(32);
    let (tw, tx) = (cw.remainder(), cx.remainder());
    for (w, v) in cw.zip(cx) {
        for k in 0..32 {
            acc[k] += w[k] as i32 * v[k] as i32;
        }
    }
    let mut sum: i32 = acc.iter().sum();
    for (&a, &b) in tw.iter().zip(tx) {
        sum += a as i32 * b as i32;
    }
    sum
}

fn rowpair_i8_portable(
    masks: &[u16],
    values: &[i8],
    xd: &[i16],
    col_blocks: usize,
    out: &mut [[i32; LANES]],
) {
    let mut pad = [0i8; LANES];
    let mut off = 0usize;
    for (row_masks, acc) in masks.chunks_exact(col_blocks).zip(out.iter_mut()) {
        *acc = [0; LANES];
        for (cb, &mask) in row_masks.iter().enumerate() {
            if mask == 0 {
                continue;
            }
            let w = expand16(mask, window(values, off, &mut pad), i32::from);
            off += mask.count_ones() as usize;
            for j in 0..LANES {
                acc[j] += w[j] * xd[cb * LANES + j] as i32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::matmul;
    use proptest::prelude::*;

    fn random_sparse(rng: &mut Rng, rows: usize, cols: usize, s: f64) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |_, _| if rng.uniform() < s { 0.0 } else { rng.normal_f32() })
    }

    fn f64_matvec(m: &Matrix<f32>, x: &[f32]) -> Vec<f64> {
        (0..m.rows())
            .map(|r| m.row(r).iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum())
            .collect()
    }

    fn max_rel(got: &[f32], want: &[f64]) -> f64 {
        let scale = want.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
        got.iter().zip(want).map(|(&g, &w)| (g as f64 - w).abs() / scale).fold(0.0, f64::max)
    }

    #[test]
    fn diagonal_gemv() {
        let m = Matrix::from_rows(&[&[1.0f32, 0.0], &[0.0, 2.0]]).unwrap();
        let sm = SparseMatrix::encode(&m, BlockLayout::RowPair16).unwrap();
        assert_eq!(sparse_gemv(&sm, &[3.0, 4.0]).unwrap(), vec![3.0, 8.0]);
    }

    #[test]
    fn worked_example_against_dense() {
        let a = [0.0, 4.0, 0.0, 8.0, 1.0, 0.0, 0.0, 7.0];
        let b = [2.0, 5.0, 0.0, 0.0, 0.0, 2.0, 6.0, 8.0];
        let m = Matrix::from_rows(&[&a, &b]).unwrap();
        let sm = SparseMatrix::encode(&m, BlockLayout::RowPair16).unwrap();
        let ones = [1.0f32; 8];
        let want = matmul(&m, &Matrix::from_vec(8, 1, ones.to_vec()).unwrap()).unwrap();
        assert_eq!(sparse_gemv(&sm, &ones).unwrap(), want.into_vec());
    }

    #[test]
    fn large_gemv_matches_oracle() {
        let mut rng = Rng::new(1);
        let m = random_sparse(&mut rng, 512, 512, 0.7);
        let x: Vec<f32> = (0..512).map(|_| rng.normal_f32()).collect();
        let want = f64_matvec(&m, &x);
        for layout in [BlockLayout::RowPair16, BlockLayout::TILE_16X16] {
            let sm = SparseMatrix::encode(&m, layout).unwrap();
            assert!(max_rel(&sparse_gemv(&sm, &x).unwrap(), &want) <= 1e-5);
        }
    }

    #[test]
    fn sparse_matches_dense_bit_for_bit() {
        let mut rng = Rng::new(2);
        let m = random_sparse(&mut rng, 37, 53, 0.5);
        let x: Vec<f32> = (0..53).map(|_| rng.normal_f32()).collect();
        let dense = dense_gemv(&m, &x).unwrap();
        for layout in [BlockLayout::RowPair16, BlockLayout::Tile { rows: 4, cols: 32 }] {
            let sm = SparseMatrix::encode(&m, layout).unwrap();
            assert_eq!(sparse_gemv(&sm, &x).unwrap(), dense);
        }
    }

    #[test]
    fn gemm_identity_and_zero() {
        let mut rng = Rng::new(3);
        let b = random_sparse(&mut rng, 24, 5, 0.0);
        let eye = SparseMatrix::encode(&Matrix::identity(24), BlockLayout::RowPair16).unwrap();
        assert_eq!(sparse_gemm(&eye, &b).unwrap(), b);
        let zero = SparseMatrix::encode(&Matrix::<f32>::zeros(24, 24), BlockLayout::RowPair16).unwrap();
        let mut flops = FlopCounter::default();
        let out = sparse_gemm_counted(&zero, &b, &mut flops).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(flops.useful_flops, 0);
        assert_eq!(flops.dense_equiv_flops, 2 * 24 * 24 * 5);
    }

    #[test]
    fn token_rows_equal_gemv_exactly() {
        let mut rng = Rng::new(4);
        let m = random_sparse(&mut rng, 19, 45, 0.6);
        let xs = random_sparse(&mut rng, 7, 45, 0.0);
        for layout in [BlockLayout::RowPair16, BlockLayout::TILE_16X16] {
            let sm = SparseMatrix::encode(&m, layout).unwrap();
            let out = sparse_gemm_tokens(&sm, &xs).unwrap();
            for t in 0..7 {
                assert_eq!(out.row(t), sparse_gemv(&sm, xs.row(t)).unwrap().as_slice());
            }
        }
        let dense = dense_gemm_tokens(&m, &xs).unwrap();
        for t in 0..7 {
            assert_eq!(dense.row(t), dense_gemv(&m, xs.row(t)).unwrap().as_slice());
        }
    }

    #[test]
    fn flop_ratio_is_exact() {
        let n = 256 * 256;
        for s in [0.5, 0.7] {
            let zeros = libm::rint(s * n as f64) as usize;
            let mut placed = 0;
            let m = Matrix::from_fn(256, 256, |_, _| {
                placed += 1;
                if placed > zeros { 1.0f32 } else { 0.0 }
            });
            let sm = SparseMatrix::encode(&m, BlockLayout::RowPair16).unwrap();
            let f = FlopCounter::for_sparse(&sm, 3);
            // useful / dense_equiv == nnz / n as rationals
            assert_eq!(f.useful_flops * n as u64, f.dense_equiv_flops * sm.nnz() as u64);
            assert!((f.ratio() - (1.0 - s)).abs() <= 0.5 / n as f64);
        }
    }

    #[test]
    fn shape_errors() {
        let sm = SparseMatrix::encode(&Matrix::<f32>::zeros(3, 4), BlockLayout::RowPair16).unwrap();
        assert!(matches!(sparse_gemv(&sm, &[0.0; 5]), Err(Error::ShapeMismatch { .. })));
        assert!(sparse_gemm(&sm, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn int8_examples() {
        let q = Matrix::from_fn(5, 40, |_, _| 1i8);
        let sm = SparseMatrix::encode(&q, BlockLayout::RowPair16).unwrap();
        assert_eq!(sparse_gemv_i8_acc(&sm, &[1; 40]).unwrap(), vec![40; 5]);
        let mut single = Matrix::<i8>::zeros(1, 3);
        single.set(0, 1, 127);
        let sm = SparseMatrix::encode(&single, BlockLayout::RowPair16).unwrap();
        let out = sparse_gemv_i8(&sm, &[0, 1, 0], &[0.25], 1.0).unwrap();
        assert_eq!(out, vec![127.0 * 0.25]);
    }

    fn i8_oracle(q: &Matrix<i8>, x: &[i8]) -> Vec<i32> {
        let mut out = vec![0i32; q.rows()];
        for (r, o) in out.iter_mut().enumerate() {
            for c in 0..q.cols() {
                *o += q.get(r, c) as i32 * x[c] as i32;
            }
        }
        out
    }

    #[test]
    fn int8_matches_integer_oracle() {
        let mut rng = Rng::new(6);
        let q = Matrix::from_fn(128, 128, |_, _| {
            if rng.uniform() < 0.5 { 0 } else { (rng.below(255) as i32 - 127) as i8 }
        });
        let x: Vec<i8> = (0..128).map(|_| (rng.below(255) as i32 - 127) as i8).collect();
        let want = i8_oracle(&q, &x);
        for layout in [BlockLayout::RowPair16, BlockLayout::TILE_16X16] {
            let sm = SparseMatrix::encode(&q, layout).unwrap();
            assert_eq!(sparse_gemv_i8_acc(&sm, &x).unwrap(), want);
        }
        assert_eq!(dense_gemv_i8_acc(&q, &x).unwrap(), want);
        let extreme = Matrix::from_fn(2, 64, |_, _| 127i8);
        let sm = SparseMatrix::encode(&extreme, BlockLayout::RowPair16).unwrap();
        assert_eq!(sparse_gemv_i8_acc(&sm, &[127; 64]).unwrap(), vec![64 * 127 * 127; 2]);
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn wide_paths_match_portable_bit_for_bit() {
        if !avx512::available() {
            return;
        }
        let mut rng = Rng::new(11);
        for (rows, cols, s) in [(9, 77, 0.0), (32, 64, 0.5), (17, 130, 0.7), (4, 8, 0.95)] {
            let m = random_sparse(&mut rng, rows, cols, s);
            let sm = SparseMatrix::encode(&m, BlockLayout::RowPair16).unwrap();
            let col_blocks = cols.div_ceil(8);
            let x: Vec<f32> = (0..cols).map(|_| rng.normal_f32()).collect();
            let xd = duplicate_pairs(&x, col_blocks);
            let mut wide = vec![[0.0f32; LANES]; rows.div_ceil(2)];
            let mut port = wide.clone();
            unsafe { avx512::rowpair_gemv_f32(sm.masks(), sm.values(), &xd, col_blocks, &mut wide) };
            rowpair_lanes_portable(sm.masks(), sm.values(), &xd, col_blocks, &mut port);
            let bits = |v: &[[f32; LANES]]| v.iter().flatten().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&wide), bits(&port));

            let tokens = 3;
            let xdt: Vec<f32> = (0..col_blocks * tokens * LANES).map(|_| rng.normal_f32()).collect();
            let row_masks = &sm.masks()[..col_blocks];
            let mut wide = vec![[0.0f32; LANES]; tokens];
            let mut port = wide.clone();
            unsafe { avx512::rowpair_block_row_f32(row_masks, sm.values(), &xdt, &mut wide) };
            block_row_portable(row_masks, sm.values(), &xdt, &mut port);
            assert_eq!(bits(&wide), bits(&port));

            let q = Matrix::from_fn(rows, cols, |r, c| {
                if m.get(r, c) == 0.0 { 0 } else { (rng.below(255) as i32 - 127) as i8 }
            });
            let sq = SparseMatrix::encode(&q, BlockLayout::RowPair16).unwrap();
            let xq: Vec<i8> = (0..cols).map(|_| (rng.below(255) as i32 - 127) as i8).collect();
            let mut pairs = vec![[0i32; 2]; rows.div_ceil(2)];
            let xs = row_split_inputs(&xq, col_blocks);
            let excess = weight_bias_excess(&xq);
            unsafe { avx512::rowpair_gemv_i8(sq.masks(), sq.values(), &xs, excess, col_blocks, &mut pairs) };
            let want = i8_oracle(&q, &xq);
            for (r, &w) in want.iter().enumerate() {
                assert_eq!(pairs[r / 2][r % 2], w);
            }
            let mut dense = vec![0i32; rows];
            unsafe { avx512::dense_rows_i8(q.as_slice(), cols, &xq, excess, &mut dense) };
            assert_eq!(dense, want);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn float_kernels_match_oracle(
            rows in 1usize..48, cols in 1usize..48, tokens in 1usize..4,
            s in 0.0f64..1.0, seed in any::<u64>(), tiled in any::<bool>()
        ) {
            let mut rng = Rng::new(seed);
            let m = random_sparse(&mut rng, rows, cols, s);
            let layout = if tiled { BlockLayout::Tile { rows: 3, cols: 16 } } else { BlockLayout::RowPair16 };
            let sm = SparseMatrix::encode(&m, layout).unwrap();
            let b = random_sparse(&mut rng, cols, tokens, 0.0);
            let got = sparse_gemm(&sm, &b).unwrap();
            for t in 0..tokens {
                let col: Vec<f32> = (0..cols).map(|c| b.get(c, t)).collect();
                let want = f64_matvec(&m, &col);
                let got_t: Vec<f32> = (0..rows).map(|r| got.get(r, t)).collect();
                prop_assert!(max_rel(&got_t, &want) <= 1e-5);
            }
        }

        #[test]
        fn int8_kernels_are_exact(
            rows in 1usize..40, cols in 1usize..70, s in 0.0f64..1.0,
            seed in any::<u64>(), tiled in any::<bool>()
        ) {
            let mut rng = Rng::new(seed);
            let q = Matrix::from_fn(rows, cols, |_, _| {
                if rng.uniform() < s { 0 } else { (rng.below(255) as i32 - 127) as i8 }
            });
            let x: Vec<i8> = (0..cols).map(|_| (rng.below(255) as i32 - 127) as i8).collect();
            let layout = if tiled { BlockLayout::TILE_16X16 } else { BlockLayout::RowPair16 };
            let sm = SparseMatrix::encode(&q, layout).unwrap();
            prop_assert_eq!(sparse_gemv_i8_acc(&sm, &x).unwrap(), i8_oracle(&q, &x));
        }
    }
}
