//! AVX-512 versions of the hot loops, chosen at run time.
//!
//! Each function performs the same per-lane multiply then add as its
//! portable twin, so results are bit-identical across the two paths.

use core::arch::x86_64::*;
use core::sync::atomic::{AtomicU8, Ordering};

use alloc::vec;

use super::LANES;

static STATE: AtomicU8 = AtomicU8::new(0);

/// True when the CPU and OS support the AVX-512 subsets used here.
pub(crate) fn available() -> bool {
    match STATE.load(Ordering::Relaxed) {
        1 => false,
        2 => true,
        _ => {
            let ok = detect();
            STATE.store(if ok { 2 } else { 1 }, Ordering::Relaxed);
            ok
        }
    }
}

#[allow(unused_unsafe)]
fn detect() -> bool {
    // cpuid exists on every x86-64 processor
    let max_leaf = unsafe { __cpuid(0) }.eax;
    if max_leaf < 7 {
        return false;
    }
    let leaf1 = unsafe { __cpuid(1) };
    if leaf1.ecx & (1 << 27) == 0 || leaf1.ecx & (1 << 23) == 0 {
        return false;
    }
    // opmask, upper ymm and zmm state enabled by the OS
    if unsafe { xcr0() } & 0xE6 != 0xE6 {
        return false;
    }
    let leaf7 = unsafe { __cpuid_count(7, 0) };
    let f = leaf7.ebx & (1 << 16) != 0;
    let bw = leaf7.ebx & (1 << 30) != 0;
    let vl = leaf7.ebx & (1 << 31) != 0;
    let vbmi = leaf7.ecx & (1 << 1) != 0;
    let vbmi2 = leaf7.ecx & (1 << 6) != 0;
    let gfni = leaf7.ecx & (1 << 8) != 0;
    let vnni = leaf7.ecx & (1 << 11) != 0;
    let bmi2 = leaf7.ebx & (1 << 8) != 0;
    f && bw && vl && vbmi && vbmi2 && gfni && vnni && bmi2
}

#[target_feature(enable = "xsave")]
unsafe fn xcr0() -> u64 {
    _xgetbv(0)
}

/// Rewrites masks into opmask order (lane 0 in bit 0) by reversing the bits
/// of every 16-bit word. `dst` must be at least as long as `src`.
#[target_feature(enable = "avx512f,avx512bw,gfni,bmi2")]
unsafe fn to_opmasks(src: &[u16], dst: &mut [u16]) {
    let reverse_bytes_bits = _mm512_set1_epi64(0x8040_2010_0804_0201u64 as i64);
    let mut i = 0;
    while i < src.len() {
        let k = _bzhi_u32(u32::MAX, (src.len() - i).min(32) as u32);
        let v = _mm512_maskz_loadu_epi16(k, src.as_ptr().add(i) as *const i16);
        let r = _mm512_gf2p8affine_epi64_epi8(v, reverse_bytes_bits, 0);
        let r = _mm512_or_si512(_mm512_slli_epi16(r, 8), _mm512_srli_epi16(r, 8));
        _mm512_mask_storeu_epi16(dst.as_mut_ptr().add(i) as *mut i16, k, r);
        i += 32;
    }
}

/// Opmask selecting the first `n` lanes.
#[inline(always)]
fn prefix(n: u32) -> __mmask16 {
    ((1u32 << n) - 1) as __mmask16
}

/// # Safety
/// Requires [`available`]. `masks` holds `col_blocks` masks per row pair,
/// their popcounts sum to `values.len()`, and `xd` has `16 · col_blocks`
/// entries.
#[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vbmi,avx512vbmi2,avx512vnni,gfni,bmi2,popcnt")]
pub(crate) unsafe fn rowpair_gemv_f32(
    masks: &[u16],
    values: &[f32],
    xd: &[f32],
    col_blocks: usize,
    out: &mut [[f32; LANES]],
) {
    debug_assert_eq!(xd.len(), col_blocks * LANES);
    let mut vp = values.as_ptr();
    let mut ks = vec![0u16; col_blocks];
    for (row_masks, o) in masks.chunks_exact(col_blocks).zip(out.iter_mut()) {
        to_opmasks(row_masks, &mut ks);
        let mut acc = _mm512_setzero_ps();
        for (cb, &k) in ks.iter().enumerate() {
            let n = k.count_ones();
            let w = _mm512_maskz_expand_ps(k, _mm512_maskz_loadu_ps(prefix(n), vp));
            vp = vp.add(n as usize);
            let x = _mm512_loadu_ps(xd.as_ptr().add(cb * LANES));
            acc = _mm512_add_ps(acc, _mm512_mul_ps(w, x));
        }
        _mm512_storeu_ps(o.as_mut_ptr(), acc);
    }
}

/// # Safety
/// As [`rowpair_gemv_f32`]; `xdt` is laid out `[col_block][token][16]` and
/// `acc` has `tokens` entries.
#[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vbmi,avx512vbmi2,avx512vnni,gfni,bmi2,popcnt")]
pub(crate) unsafe fn rowpair_block_row_f32(
    row_masks: &[u16],
    values: &[f32],
    xdt: &[f32],
    acc: &mut [[f32; LANES]],
) {
    let tokens = acc.len();
    let mut vp = values.as_ptr();
    let mut ks = vec![0u16; row_masks.len()];
    to_opmasks(row_masks, &mut ks);
    for (cb, &k) in ks.iter().enumerate() {
        if k == 0 {
            continue;
        }
        let n = k.count_ones();
        let w = _mm512_maskz_expand_ps(k, _mm512_maskz_loadu_ps(prefix(n), vp));
        vp = vp.add(n as usize);
        let xs = xdt.as_ptr().add(cb * tokens * LANES);
        for (t, a) in acc.iter_mut().enumerate() {
            let x = _mm512_loadu_ps(xs.add(t * LANES));
            let sum = _mm512_add_ps(_mm512_loadu_ps(a.as_ptr()), _mm512_mul_ps(w, x));
            _mm512_storeu_ps(a.as_mut_ptr(), sum);
        }
    }
}

/// Exact `i32` row-pair sums for `i8` weights and activations.
///
/// Weights enter the unsigned side as `w + 128` (absent lanes expand to
/// 128), so every row carries the same excess `128 · Σx`, passed in as
/// `excess` and subtracted at the end. Intermediate sums may wrap; the
/// final difference is exact because the true result fits in `i32`.
///
/// # Safety
/// Requires [`available`]. `masks` holds `col_blocks` masks per row pair
/// and their popcounts sum to `values.len()`. `xs` holds 128 bytes per
/// group of four column blocks: the inputs spread over the row A lanes,
/// then over the row B lanes, zero elsewhere.
#[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vbmi,avx512vbmi2,avx512vnni,gfni,bmi2,popcnt")]
pub(crate) unsafe fn rowpair_gemv_i8(
    masks: &[u16],
    values: &[i8],
    xs: &[i8],
    excess: i32,
    col_blocks: usize,
    out: &mut [[i32; 2]],
) {
    let groups = col_blocks.div_ceil(4);
    debug_assert_eq!(xs.len(), groups * 128);
    let flip = _mm512_set1_epi8(i8::MIN);
    let mut vp = values.as_ptr();
    let safe_end = values.as_ptr().wrapping_add(values.len().saturating_sub(63));
    // masks of the next row pair are converted while the current one runs
    let stride = groups * 4;
    let mut ks = vec![0u16; 2 * stride];
    let mut rows = masks.chunks_exact(col_blocks);
    if let Some(first) = rows.next() {
        to_opmasks(first, &mut ks[..stride]);
    }
    let xp = xs.as_ptr();
    for (rp, o) in out.iter_mut().enumerate() {
        let (cur, next) = if rp % 2 == 0 { (0, stride) } else { (stride, 0) };
        if let Some(row_masks) = rows.next() {
            to_opmasks(row_masks, &mut ks[next..next + stride]);
        }
        let kp = ks.as_ptr().add(cur) as *const u64;
        let zero = _mm512_setzero_si512();
        let (mut a0, mut a1, mut b0, mut b1) = (zero, zero, zero, zero);
        macro_rules! group {
            ($g:expr, $a:ident, $b:ident) => {{
                let m64 = kp.add($g).read_unaligned();
                let n = m64.count_ones();
                let stored = if vp < safe_end {
                    _mm512_loadu_si512(vp as *const __m512i)
                } else {
                    _mm512_maskz_loadu_epi8(_bzhi_u64(u64::MAX, n), vp)
                };
                vp = vp.add(n as usize);
                let w = _mm512_mask_expand_epi8(flip, m64, _mm512_xor_si512(stored, flip));
                let xa = _mm512_loadu_si512(xp.add($g * 128) as *const __m512i);
                let xb = _mm512_loadu_si512(xp.add($g * 128 + 64) as *const __m512i);
                $a = _mm512_dpbusd_epi32($a, w, xa);
                $b = _mm512_dpbusd_epi32($b, w, xb);
            }};
        }
        let mut g = 0;
        while g + 1 < groups {
            group!(g, a0, b0);
            group!(g + 1, a1, b1);
            g += 2;
        }
        if g < groups {
            group!(g, a0, b0);
        }
        *o = [
            _mm512_reduce_add_epi32(_mm512_add_epi32(a0, a1)).wrapping_sub(excess),
            _mm512_reduce_add_epi32(_mm512_add_epi32(b0, b1)).wrapping_sub(excess),
        ];
    }
}

/// Dense `i8` rows, weights biased as in [`rowpair_gemv_i8`].
///
/// # Safety
/// Requires [`available`]; `x.len() == cols`.
#[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vbmi,avx512vbmi2,avx512vnni,gfni,bmi2,popcnt")]
pub(crate) unsafe fn dense_rows_i8(q: &[i8], cols: usize, x: &[i8], excess: i32, y: &mut [i32]) {
    let flip = _mm512_set1_epi8(i8::MIN);
    for (r, o) in y.iter_mut().enumerate() {
        let row = q.as_ptr().add(r * cols);
        let (mut a0, mut a1) = (_mm512_setzero_si512(), _mm512_setzero_si512());
        let mut c = 0;
        while c + 128 <= cols {
            let w0 = _mm512_xor_si512(_mm512_loadu_si512(row.add(c) as *const __m512i), flip);
            let w1 = _mm512_xor_si512(_mm512_loadu_si512(row.add(c + 64) as *const __m512i), flip);
            a0 = _mm512_dpbusd_epi32(a0, w0, _mm512_loadu_si512(x.as_ptr().add(c) as *const __m512i));
            a1 = _mm512_dpbusd_epi32(a1, w1, _mm512_loadu_si512(x.as_ptr().add(c + 64) as *const __m512i));
            c += 128;
        }
        while c < cols {
            let k = _bzhi_u64(u64::MAX, (cols - c).min(64) as u32);
            let w = _mm512_xor_si512(_mm512_maskz_loadu_epi8(k, row.add(c)), flip);
            a0 = _mm512_dpbusd_epi32(a0, w, _mm512_maskz_loadu_epi8(k, x.as_ptr().add(c)));
            c += 64;
        }
        *o = _mm512_reduce_add_epi32(_mm512_add_epi32(a0, a1)).wrapping_sub(excess);
    }
}

/// Dense float rows, compiled with wide vectors.
///
/// # Safety
/// Requires [`available`].
#[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vbmi,avx512vbmi2,avx512vnni,gfni,bmi2,popcnt")]
pub(crate) unsafe fn dense_rows_f32(w: &[f32], cols: usize, x: &[f32], y: &mut [f32]) {
    for (r, o) in y.iter_mut().enumerate() {
        *o = crate::tensor::dot(&w[r * cols..(r + 1) * cols], x);
    }
}
