//! Magnitude and Hessian-based (OBS) one-shot pruning.

use alloc::vec;
use alloc::vec::Vec;

use crate::compress::calib::{damped, hessian, reconstruction_error};
use crate::compress::mask::Mask;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, inverse_upper_cholesky};
use crate::tensor::{round_half_even, Matrix};

/// Population over which the prune count is enforced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PruneScope {
    /// Every output row loses exactly `⌊s·cols⌉` weights.
    PerRow,
    /// The whole matrix loses exactly `⌊s·rows·cols⌉` weights.
    #[default]
    PerLayer,
}

/// Number of weights pruned from a population of `n` at sparsity `s`.
pub fn prune_count(s: f64, n: usize) -> usize {
    round_half_even(s * n as f64) as usize
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::invalid("sparsity", alloc::format!("{s} must lie in [0, 1)")));
    }
    Ok(())
}

fn check_forced(forced: Option<&Mask>, shape: (usize, usize)) -> Result<()> {
    match forced {
        Some(m) if m.shape() != shape => Err(Error::shape("forced mask", m.shape(), shape)),
        _ => Ok(()),
    }
}

fn is_forced(forced: Option<&Mask>, idx: usize) -> bool {
    forced.is_some_and(|m| !m.as_slice()[idx])
}

/// Picks the `k` smallest `(score, index)` pairs from `items`; ties go to
/// the lowest index.
fn smallest_k(items: &mut [(f64, usize)], k: usize) -> &[(f64, usize)] {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k == 0 {
        return &[];
    }
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, cmp);
    }
    let head = &mut items[..k];
    head.sort_unstable_by(cmp);
    head
}

/// Prune set per scope: scores are ranked ascending and the lowest
/// `⌊s·n⌉` are removed. Positions pruned by `forced` go first.
fn select(
    scores: &[f64],
    shape: (usize, usize),
    s: f64,
    scope: PruneScope,
    forced: Option<&Mask>,
) -> Result<Vec<bool>> {
    let (rows, cols) = shape;
    let mut keep = vec![true; rows * cols];
    let rank = |range: core::ops::Range<usize>, keep: &mut [bool]| -> Result<()> {
        let k = prune_count(s, range.len());
        let mut items: Vec<(f64, usize)> = range
            .map(|i| (if is_forced(forced, i) { f64::NEG_INFINITY } else { scores[i] }, i))
            .collect();
        let already = items.iter().filter(|(v, _)| *v == f64::NEG_INFINITY).count();
        if already > k {
            return Err(Error::invalid(
                "sparsity",
                alloc::format!("target prunes {k} weights but {already} are already pruned"),
            ));
        }
        for &(_, i) in smallest_k(&mut items, k) {
            keep[i] = false;
        }
        Ok(())
    };
    match scope {
        PruneScope::PerLayer => rank(0..rows * cols, &mut keep)?,
        PruneScope::PerRow => {
            for r in 0..rows {
                rank(r * cols..(r + 1) * cols, &mut keep)?;
            }
        }
    }
    Ok(keep)
}

/// Zeroes the `⌊s·n⌉` smallest-magnitude weights per scope.
pub fn prune_magnitude(w: &Matrix<f32>, s: f64, scope: PruneScope) -> Result<(Matrix<f32>, Mask)> {
    prune_magnitude_within(w, s, scope, None)
}

/// [`prune_magnitude`] that first re-prunes every position `forced` has
/// already removed, so zeros never come back.
pub fn prune_magnitude_within(
    w: &Matrix<f32>,
    s: f64,
    scope: PruneScope,
    forced: Option<&Mask>,
) -> Result<(Matrix<f32>, Mask)> {
    check_sparsity(s)?;
    check_forced(forced, w.shape())?;
    let scores: Vec<f64> = w.as_slice().iter().map(|v| (*v as f64).abs()).collect();
    let keep = select(&scores, w.shape(), s, scope, forced)?;
    let mask = Mask::from_vec(w.rows(), w.cols(), keep)?;
    let mut out = w.clone();
    mask.apply(&mut out)?;
    Ok((out, mask))
}

/// Knobs of the OBS solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObsConfig {
    /// Dampening as a fraction of the mean Hessian diagonal.
    pub damp: f64,
    /// Columns per lazy update block.
    pub block_size: usize,
    pub scope: PruneScope,
    /// Largest number of candidate subsets searched exactly per block.
    pub exhaustive_limit: usize,
}

impl Default for ObsConfig {
    fn default() -> Self {
        ObsConfig { damp: 0.01, block_size: 128, scope: PruneScope::PerRow, exhaustive_limit: 4096 }
    }
}

/// Pruned weights, mask and the reconstruction error `‖WX − ŴX‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsResult {
    pub weights: Matrix<f32>,
    pub mask: Mask,
    pub error: f64,
}

/// OBS pruning with the default block size and per-row scope.
pub fn prune_obs(w: &Matrix<f32>, x: &Matrix<f32>, s: f64, damp: f64) -> Result<ObsResult> {
    prune_obs_with(w, x, s, &ObsConfig { damp, ..ObsConfig::default() }, None)
}

fn binomial_capped(n: usize, k: usize, cap: usize) -> usize {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > cap as u128 {
            return cap + 1;
        }
    }
    c as usize
}

/// Visits every `k`-subset of `0..n` in lexicographic order.
fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else { return };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Solver state shared by every row of one column block `b0..b1`.
struct Block {
    b0: usize,
    b1: usize,
    /// `G = Ubᵀ Ub` restricted to the block, `Ub = U[b0..b1, :]`.
    gram: Vec<f64>,
}

impl Block {
    fn new(u: &[f64], n: usize, b0: usize, b1: usize) -> Self {
        let w = b1 - b0;
        let mut gram = vec![0.0; w * w];
        for p in 0..w {
            for q in p..w {
                let g: f64 = (b0..=b0 + p).map(|i| u[i * n + b0 + p] * u[i * n + b0 + q]).sum();
                gram[p * w + q] = g;
                gram[q * w + p] = g;
            }
        }
        Block { b0, b1, gram }
    }

    fn width(&self) -> usize {
        self.b1 - self.b0
    }

    fn sub(&self, set: &[usize]) -> Vec<f64> {
        let w = self.width();
        let k = set.len();
        let mut g = vec![0.0; k * k];
        for (a, &p) in set.iter().enumerate() {
            for (b, &q) in set.iter().enumerate() {
                g[a * k + b] = self.gram[(p - self.b0) * w + (q - self.b0)];
            }
        }
        g
    }

    /// `λ = G_PP⁻¹ w_P` and the error `w_Pᵀ λ` of removing the set `P`.
    fn solve(&self, set: &[usize], row: &[f64]) -> Option<(Vec<f64>, f64)> {
        let k = set.len();
        let l = cholesky(&self.sub(set), k).ok()?;
        let wp: Vec<f64> = set.iter().map(|&p| row[p]).collect();
        let mut lambda = wp.clone();
        cholesky_solve(&l, k, &mut lambda);
        let cost = wp.iter().zip(&lambda).map(|(a, b)| a * b).sum();
        Some((lambda, cost))
    }
}

/// OBS pruning: per output row, a saliency ranking `w²/[H⁻¹]_jj` decides
/// how many weights each column block loses, the block's prune set is
/// chosen to minimize the added error, and the surviving weights of the
/// block and every later column absorb the optimal compensation.
///
/// `x` holds the calibration inputs of the layer, one token per row.
pub fn prune_obs_with(
    w: &Matrix<f32>,
    x: &Matrix<f32>,
    s: f64,
    cfg: &ObsConfig,
    forced: Option<&Mask>,
) -> Result<ObsResult> {
    check_sparsity(s)?;
    check_forced(forced, w.shape())?;
    if x.cols() != w.cols() {
        return Err(Error::shape("prune_obs calibration", w.shape(), x.shape()));
    }
    if cfg.block_size == 0 {
        return Err(Error::invalid("block_size", "must be >= 1"));
    }
    let (rows, n) = w.shape();
    let h = hessian(x);
    let u = inverse_upper_cholesky(&damped(&h, n, cfg.damp)?, n)
        .map_err(|_| Error::SingularHessian { damp: cfg.damp })?;
    let hinv_diag: Vec<f64> = (0..n).map(|j| (0..=j).map(|i| u[i * n + j] * u[i * n + j]).sum()).collect();

    let scores: Vec<f64> = w
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64) * (v as f64) / hinv_diag[i % n])
        .collect();
    let planned = select(&scores, w.shape(), s, cfg.scope, forced)?;

    let blocks: Vec<Block> = (0..n)
        .step_by(cfg.block_size)
        .map(|b0| Block::new(&u, n, b0, (b0 + cfg.block_size).min(n)))
        .collect();
    // Trailing inverse-Hessian diagonals seen from each block start.
    let tail_diag: Vec<Vec<f64>> = blocks
        .iter()
        .map(|b| {
            (b.b0..n)
                .map(|j| (b.b0..=j).map(|i| u[i * n + j] * u[i * n + j]).sum())
                .collect()
        })
        .collect();

    let mut out = Matrix::<f64>::zeros(rows, n);
    let mut keep = vec![true; rows * n];
    let mut row = vec![0.0f64; n];
    let mut v = vec![0.0f64; cfg.block_size];
    for r in 0..rows {
        for (d, &s) in row.iter_mut().zip(w.row(r)) {
            *d = s as f64;
        }
        let base = r * n;
        let pinned: Vec<bool> = (0..n).map(|j| is_forced(forced, base + j)).collect();
        let mut free_left = (0..n).filter(|&j| !planned[base + j] && !pinned[j]).count();

        for (blk, tail) in blocks.iter().zip(&tail_diag) {
            let (b0, b1) = (blk.b0, blk.b1);
            let take = if free_left == 0 {
                0
            } else {
                let mut cand: Vec<(f64, usize)> = (b0..n)
                    .filter(|&j| !pinned[j])
                    .map(|j| (row[j] * row[j] / tail[j - b0], j))
                    .collect();
                smallest_k(&mut cand, free_left).iter().filter(|&&(_, j)| j < b1).count()
            };
            let free: Vec<usize> = (b0..b1).filter(|&j| !pinned[j]).collect();
            let chosen: Vec<usize> = if take == 0 {
                Vec::new()
            } else if binomial_capped(free.len(), take, cfg.exhaustive_limit) <= cfg.exhaustive_limit {
                let fixed: Vec<usize> = (b0..b1).filter(|&j| pinned[j]).collect();
                let mut best: Option<(f64, Vec<usize>)> = None;
                let mut set = Vec::with_capacity(fixed.len() + take);
                for_each_subset(free.len(), take, |pick| {
                    set.clear();
                    set.extend(fixed.iter().copied());
                    set.extend(pick.iter().map(|&p| free[p]));
                    set.sort_unstable();
                    if let Some((_, cost)) = blk.solve(&set, &row) {
                        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                            best = Some((cost, pick.iter().map(|&p| free[p]).collect()));
                        }
                    }
                });
                best.map(|(_, c)| c).unwrap_or_default()
            } else {
                let mut cand: Vec<(f64, usize)> =
                    free.iter().map(|&j| (row[j] * row[j] / tail[j - b0], j)).collect();
                smallest_k(&mut cand, take).iter().map(|&(_, j)| j).collect()
            };
            free_left -= take;

            let mut set: Vec<usize> = (b0..b1).filter(|&j| pinned[j]).chain(chosen).collect();
            set.sort_unstable();
            if set.is_empty() {
                continue;
            }
            let (lambda, _) = blk.solve(&set, &row).ok_or(Error::SingularHessian { damp: cfg.damp })?;
            let v = &mut v[..blk.width()];
            v.fill(0.0);
            for (&p, &lp) in set.iter().zip(&lambda) {
                for i in b0..=p {
                    v[i - b0] += u[i * n + p] * lp;
                }
            }
            for (i, &vi) in (b0..b1).zip(v.iter()) {
                if vi == 0.0 {
                    continue;
                }
                let ui = &u[i * n..(i + 1) * n];
                for j in i..n {
                    row[j] -= vi * ui[j];
                }
            }
            for &p in &set {
                row[p] = 0.0;
                keep[base + p] = false;
            }
        }
        out.row_mut(r).copy_from_slice(&row);
    }

    let error = reconstruction_error(w, &out, &h);
    let mask = Mask::from_vec(rows, n, keep)?;
    let mut weights = out.map(|v| v as f32);
    // Survivors stay nonzero after narrowing.
    for (v, &k) in weights.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        if k && v.to_bits() == 0 {
            *v = f32::MIN_POSITIVE;
        } else if !k {
            *v = 0.0;
        }
    }
    Ok(ObsResult { weights, mask, error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::sparsity_of;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |_, _| rng.normal_f32())
    }

    #[test]
    fn magnitude_row_example() {
        let w = Matrix::from_rows(&[&[0.1f32, -3.0, 0.5, 2.0]]).unwrap();
        let (p, m) = prune_magnitude(&w, 0.5, PruneScope::PerRow).unwrap();
        assert_eq!(p.as_slice(), &[0.0, -3.0, 0.0, 2.0]);
        assert_eq!(m.as_slice(), &[false, true, false, true]);
        let (p, m) = prune_magnitude(&w, 0.0, PruneScope::PerLayer).unwrap();
        assert_eq!(p, w);
        assert_eq!(m.kept(), 4);
        assert!(prune_magnitude(&w, 1.0, PruneScope::PerRow).is_err());
    }

    #[test]
    fn magnitude_exact_sparsity_and_ties() {
        let mut rng = Rng::new(11);
        let w = random(&mut rng, 64, 64);
        let (p, _) = prune_magnitude(&w, 0.7, PruneScope::PerLayer).unwrap();
        assert_eq!(sparsity_of(&p, 0.0), 2867.0 / 4096.0);
        let flat = Matrix::from_rows(&[&[1.0f32, 1.0, 1.0, 1.0]]).unwrap();
        let (_, m) = prune_magnitude(&flat, 0.5, PruneScope::PerRow).unwrap();
        assert_eq!(m.as_slice(), &[false, false, true, true]);
    }

    #[test]
    fn forced_positions_stay_pruned() {
        let w = Matrix::from_rows(&[&[5.0f32, 1.0, 2.0, 3.0]]).unwrap();
        let first = Mask::from_vec(1, 4, vec![false, true, true, true]).unwrap();
        let (p, m) = prune_magnitude_within(&w, 0.5, PruneScope::PerRow, Some(&first)).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 0.0, 2.0, 3.0]);
        assert!(m.extends(&first));
        assert!(prune_magnitude_within(&w, 0.0, PruneScope::PerRow, Some(&first)).is_err());
    }

    /// Minimum of `‖WX − ŴX‖²` over `Ŵ` with support `keep`, by normal
    /// equations on the kept columns.
    fn refit(w: &[f64], x: &Matrix<f64>, keep: &[usize]) -> (f64, Vec<f64>) {
        let t = x.rows();
        let n = w.len();
        let y: Vec<f64> = (0..t).map(|i| (0..n).map(|j| w[j] * x.get(i, j)).sum()).collect();
        let k = keep.len();
        let mut a = vec![0.0; k * k];
        let mut b = vec![0.0; k];
        for (p, &cp) in keep.iter().enumerate() {
            for (q, &cq) in keep.iter().enumerate() {
                a[p * k + q] = (0..t).map(|i| x.get(i, cp) * x.get(i, cq)).sum();
            }
            b[p] = (0..t).map(|i| x.get(i, cp) * y[i]).sum();
        }
        let sol = crate::linalg::solve_spd(&a, k, &b).unwrap();
        let mut full = vec![0.0; n];
        for (&c, &v) in keep.iter().zip(&sol) {
            full[c] = v;
        }
        let err = (0..t)
            .map(|i| {
                let d = y[i] - (0..n).map(|j| full[j] * x.get(i, j)).sum::<f64>();
                d * d
            })
            .sum();
        (err, full)
    }

    #[test]
    fn obs_matches_brute_force_on_tiny_row() {
        for seed in 0..20 {
            let mut rng = Rng::new(100 + seed);
            let w = random(&mut rng, 1, 4);
            let x = random(&mut rng, 4, 4);
            let res = prune_obs(&w, &x, 0.5, 0.0).unwrap();
            let wf: Vec<f64> = w.row(0).iter().map(|&v| v as f64).collect();
            let xf = x.cast::<f64>();
            let mut best = (f64::INFINITY, Vec::new(), Vec::new());
            for pair in [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]] {
                let (err, fit) = refit(&wf, &xf, &pair);
                if err < best.0 {
                    best = (err, pair.to_vec(), fit);
                }
            }
            let kept: Vec<usize> = (0..4).filter(|&j| res.mask.keeps(0, j)).collect();
            assert_eq!(kept, best.1, "seed {seed}");
            for j in 0..4 {
                let got = res.weights.get(0, j) as f64;
                assert!((got - best.2[j]).abs() <= 1e-4 * (1.0 + best.2[j].abs()), "seed {seed} col {j}");
            }
            assert!((res.error - best.0).abs() <= 1e-6 * (1.0 + best.0), "seed {seed}");
        }
    }

    #[test]
    fn obs_with_isotropic_inputs_is_magnitude() {
        let mut rng = Rng::new(5);
        let w = random(&mut rng, 8, 16);
        let x = Matrix::from_fn(16, 16, |i, j| if i == j { 3.0f32 } else { 0.0 });
        let res = prune_obs(&w, &x, 0.5, 0.01).unwrap();
        let (pm, mm) = prune_magnitude(&w, 0.5, PruneScope::PerRow).unwrap();
        assert_eq!(res.mask, mm);
        for (a, b) in res.weights.as_slice().iter().zip(pm.as_slice()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn obs_beats_magnitude_and_hits_sparsity() {
        let (mut obs, mut mag) = (0.0, 0.0);
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let w = random(&mut rng, 32, 32);
            let mix = random(&mut rng, 32, 32);
            let z = random(&mut rng, 128, 32);
            let x = crate::tensor::matmul(&z, &mix).unwrap();
            let cfg = ObsConfig { block_size: 8, ..ObsConfig::default() };
            let res = prune_obs_with(&w, &x, 0.5, &cfg, None).unwrap();
            assert_eq!(sparsity_of(&res.weights, 0.0), 0.5);
            assert!(res.mask.holds_zeros(res.weights.as_slice()));
            let (pm, _) = prune_magnitude(&w, 0.5, PruneScope::PerRow).unwrap();
            let h = hessian(&x);
            obs += res.error;
            mag += reconstruction_error(&w, &pm.cast(), &h);
        }
        assert!(obs <= mag, "obs {obs} magnitude {mag}");
    }

    #[test]
    fn obs_layer_scope_and_forced_mask() {
        let mut rng = Rng::new(9);
        let w = random(&mut rng, 12, 24);
        let x = random(&mut rng, 64, 24);
        let cfg = ObsConfig { scope: PruneScope::PerLayer, block_size: 16, ..ObsConfig::default() };
        let first = prune_obs_with(&w, &x, 0.5, &cfg, None).unwrap();
        assert_eq!(first.mask.pruned(), 144);
        let second = prune_obs_with(&first.weights, &x, 0.7, &cfg, Some(&first.mask)).unwrap();
        assert_eq!(second.mask.pruned(), prune_count(0.7, 288));
        assert!(second.mask.extends(&first.mask));
        assert!(second.mask.holds_zeros(second.weights.as_slice()));
    }

    #[test]
    fn singular_hessian_is_reported() {
        let w = Matrix::from_rows(&[&[1.0f32, 2.0]]).unwrap();
        let x = Matrix::from_rows(&[&[1.0f32, 1.0]]).unwrap();
        assert!(matches!(prune_obs(&w, &x, 0.5, 0.0), Err(Error::SingularHessian { .. })));
        assert!(prune_obs(&w, &x, 0.5, 0.01).is_ok());
    }

    #[test]
    fn subset_enumeration() {
        let mut seen = Vec::new();
        for_each_subset(4, 2, |s| seen.push(s.to_vec()));
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[0], vec![0, 1]);
        assert_eq!(seen[5], vec![2, 3]);
        assert_eq!(binomial_capped(16, 8, 100_000), 12870);
        assert_eq!(binomial_capped(128, 64, 4096), 4097);
    }
}
