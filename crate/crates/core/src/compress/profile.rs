//! Layerwise sparsity profiles: uniform and outlier-weighted (OWL).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProfileKind {
    #[default]
    Uniform,
    Owl,
}

/// Target sparsity of every prunable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityProfile {
    pub kind: ProfileKind,
    pub target: f64,
    pub per_layer: BTreeMap<String, f64>,
    pub owl_lambda: f64,
    pub owl_m: f64,
    /// Set when OWL statistics could not separate the layers and the
    /// profile fell back to uniform.
    pub degenerate: bool,
}

pub const DEFAULT_OWL_LAMBDA: f64 = 0.08;
pub const DEFAULT_OWL_M: f64 = 5.0;

fn check_target(target: f64) -> Result<()> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::invalid("target", alloc::format!("{target} must lie in [0, 1)")));
    }
    Ok(())
}

impl SparsityProfile {
    /// Same sparsity for every named layer.
    pub fn uniform<'a>(layers: impl IntoIterator<Item = &'a str>, target: f64) -> Result<Self> {
        check_target(target)?;
        Ok(SparsityProfile {
            kind: ProfileKind::Uniform,
            target,
            per_layer: layers.into_iter().map(|l| (l.into(), target)).collect(),
            owl_lambda: 0.0,
            owl_m: DEFAULT_OWL_M,
            degenerate: false,
        })
    }

    pub fn get(&self, layer: &str) -> Result<f64> {
        self.per_layer.get(layer).copied().ok_or_else(|| Error::UnknownLayer(layer.into()))
    }

    /// Mean sparsity weighted by the parameter count of each layer.
    pub fn weighted_mean(&self, params: &BTreeMap<String, usize>) -> f64 {
        let (num, den) = self.per_layer.iter().fold((0.0, 0.0), |(n, d), (k, &s)| {
            let p = params.get(k).copied().unwrap_or(0) as f64;
            (n + p * s, d + p)
        });
        if den == 0.0 {
            self.target
        } else {
            num / den
        }
    }
}

/// Fraction of entries of `|W| ⊙ mean_t |X_t|` above `m` times their mean.
pub fn outlier_ratio(w: &Matrix<f32>, x: &Matrix<f32>, m: f64) -> Result<f64> {
    if x.cols() != w.cols() {
        return Err(Error::shape("outlier ratio", w.shape(), x.shape()));
    }
    let mut act = alloc::vec![0.0f64; x.cols()];
    for t in 0..x.rows() {
        for (a, &v) in act.iter_mut().zip(x.row(t)) {
            *a += (v as f64).abs();
        }
    }
    for a in &mut act {
        *a /= x.rows() as f64;
    }
    let n = w.cols();
    let score = |i: usize, v: f32| (v as f64).abs() * act[i % n];
    let mean = w.as_slice().iter().enumerate().map(|(i, &v)| score(i, v)).sum::<f64>() / w.len() as f64;
    let over = w.as_slice().iter().enumerate().filter(|&(i, &v)| score(i, v) > m * mean).count();
    Ok(over as f64 / w.len() as f64)
}

/// Ranks scaled to `[0, 1]` with ties sharing their average rank.
fn normalized_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return alloc::vec![0.5; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = alloc::vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg / (n - 1) as f64;
        }
        i = j + 1;
    }
    ranks
}

/// Shifts `raw` by a constant and clips into `[lo, hi]` so that the
/// parameter-weighted mean equals `target`.
pub fn rescale_to_mean(raw: &[f64], params: &[usize], target: f64, lo: f64, hi: f64) -> Vec<f64> {
    let total: f64 = params.iter().map(|&p| p as f64).sum();
    let apply = |c: f64| -> Vec<f64> { raw.iter().map(|&r| (r + c).clamp(lo, hi)).collect() };
    let mean = |v: &[f64]| v.iter().zip(params).map(|(s, &p)| s * p as f64).sum::<f64>() / total;
    let span = hi - lo;
    let (mut a, mut b) = (-span - 1.0, span + 1.0);
    for _ in 0..200 {
        let c = 0.5 * (a + b);
        if mean(&apply(c)) < target {
            a = c;
        } else {
            b = c;
        }
    }
    apply(0.5 * (a + b))
}

/// OWL profile: layers with more activation-weighted outliers are pruned
/// less, by up to `lambda` either side of `target`.
///
/// `layers` pairs each layer name with its weights; `calib` supplies the
/// inputs the layer saw.
pub fn profile_owl(
    calib: &crate::compress::CalibrationSet,
    layers: &[(&str, &Matrix<f32>)],
    target: f64,
    lambda: f64,
    m: f64,
) -> Result<SparsityProfile> {
    check_target(target)?;
    if !(lambda >= 0.0) || target + lambda >= 1.0 {
        return Err(Error::invalid("owl_lambda", "need lambda >= 0 and target + lambda < 1"));
    }
    if !(m > 0.0) {
        return Err(Error::invalid("owl_m", "must be > 0"));
    }
    let ratios = layers
        .iter()
        .map(|(name, w)| outlier_ratio(w, calib.get(name)?, m))
        .collect::<Result<Vec<f64>>>()?;
    let params: Vec<usize> = layers.iter().map(|(_, w)| w.len()).collect();
    Ok(owl_from_ratios(layers.iter().map(|(n, _)| *n), &ratios, &params, target, lambda, m))
}

/// OWL allocation from precomputed outlier ratios.
pub fn owl_from_ratios<'a>(
    names: impl IntoIterator<Item = &'a str>,
    ratios: &[f64],
    params: &[usize],
    target: f64,
    lambda: f64,
    m: f64,
) -> SparsityProfile {
    let names: Vec<&str> = names.into_iter().collect();
    let degenerate = ratios.windows(2).all(|w| w[0] == w[1]);
    let per_layer = if degenerate || lambda == 0.0 {
        alloc::vec![target; ratios.len()]
    } else {
        let raw: Vec<f64> = normalized_ranks(ratios).iter().map(|r| target + lambda * (1.0 - 2.0 * r)).collect();
        rescale_to_mean(&raw, params, target, (target - lambda).max(0.0), target + lambda)
    };
    SparsityProfile {
        kind: ProfileKind::Owl,
        target,
        per_layer: names.iter().map(|n| String::from(*n)).zip(per_layer).collect(),
        owl_lambda: lambda,
        owl_m: m,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn params_map(names: &[&str], params: &[usize]) -> BTreeMap<String, usize> {
        names.iter().map(|n| String::from(*n)).zip(params.iter().copied()).collect()
    }

    #[test]
    fn two_layer_example() {
        let p = owl_from_ratios(["a", "b"], &[0.9, 0.1], &[100, 100], 0.4, 0.08, 5.0);
        assert!((p.get("a").unwrap() - 0.32).abs() < 1e-9);
        assert!((p.get("b").unwrap() - 0.48).abs() < 1e-9);
        assert!(!p.degenerate);
    }

    #[test]
    fn identical_layers_fall_back_to_uniform() {
        let p = owl_from_ratios(["a", "b", "c"], &[0.2; 3], &[5, 6, 7], 0.5, 0.08, 5.0);
        assert!(p.degenerate);
        assert!(p.per_layer.values().all(|&s| s == 0.5));
        let u = SparsityProfile::uniform(["a", "b"], 0.3).unwrap();
        assert!(u.per_layer.values().all(|&s| s == 0.3));
    }

    #[test]
    fn outlier_ratio_counts_heavy_entries() {
        let mut w = Matrix::from_fn(4, 4, |_, _| 1.0f32);
        w.set(2, 1, 100.0);
        let x = Matrix::from_fn(3, 4, |_, _| 1.0f32);
        assert_eq!(outlier_ratio(&w, &x, 5.0).unwrap(), 1.0 / 16.0);
        assert_eq!(outlier_ratio(&w, &x, 1000.0).unwrap(), 0.0);
    }

    #[test]
    fn owl_from_calibration() {
        let mut rng = Rng::new(2);
        let mut calib = crate::compress::CalibrationSet::new(1, 8).unwrap();
        let flat = Matrix::from_fn(8, 8, |_, _| rng.normal_f32());
        let mut spiky = flat.clone();
        spiky.set(0, 0, 80.0);
        spiky.set(3, 5, -90.0);
        calib.insert("flat", Matrix::from_fn(8, 8, |_, _| 1.0f32));
        calib.insert("spiky", Matrix::from_fn(8, 8, |_, _| 1.0f32));
        let p = profile_owl(&calib, &[("flat", &flat), ("spiky", &spiky)], 0.5, 0.1, 5.0).unwrap();
        assert!(p.get("spiky").unwrap() < p.get("flat").unwrap());
        assert!(profile_owl(&calib, &[("flat", &flat)], 0.95, 0.1, 5.0).is_err());
    }

    proptest! {
        #[test]
        fn owl_mean_and_bounds(
            ratios in proptest::collection::vec(0.0f64..1.0, 20),
            params in proptest::collection::vec(1usize..5000, 20),
            target in 0.05f64..0.8,
            lambda in 0.0f64..0.15,
        ) {
            prop_assume!(target + lambda < 1.0);
            let names: Vec<String> = (0..20).map(|i| alloc::format!("l{i}")).collect();
            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let p = owl_from_ratios(refs.iter().copied(), &ratios, &params, target, lambda, 5.0);
            let mean = p.weighted_mean(&params_map(&refs, &params));
            prop_assert!((mean - target).abs() <= 1e-6, "mean {mean} target {target}");
            for &s in p.per_layer.values() {
                prop_assert!(s >= target - lambda - 1e-12 && s <= target + lambda + 1e-12);
            }
        }
    }
}
