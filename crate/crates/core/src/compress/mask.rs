//! Binary keep/prune masks.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Keep mask of one weight matrix: `true` keeps the weight, `false` holds
/// it at zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    /// Everything kept.
    pub fn dense(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, keep: vec![true; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::InvalidShape { rows, cols, reason: "mask length must equal rows * cols" });
        }
        Ok(Mask { rows, cols, keep })
    }

    /// Keeps exactly the entries whose bit pattern is nonzero.
    pub fn from_weights<T: Real>(w: &Matrix<T>) -> Self {
        let keep = w.as_slice().iter().map(|v| v.as_f64().to_bits() != 0).collect();
        Mask { rows: w.rows(), cols: w.cols(), keep }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keeps(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn pruned(&self) -> usize {
        self.keep.len() - self.kept()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned() as f64 / self.keep.len() as f64
    }

    fn check_shape(&self, op: &'static str, shape: (usize, usize)) -> Result<()> {
        if shape != self.shape() {
            return Err(Error::shape(op, self.shape(), shape));
        }
        Ok(())
    }

    /// Zeroes every pruned position of `w`.
    pub fn apply<T: Real>(&self, w: &mut Matrix<T>) -> Result<()> {
        self.check_shape("mask apply", w.shape())?;
        self.apply_slice(w.as_mut_slice());
        Ok(())
    }

    /// [`Mask::apply`] on a flat row-major buffer of matching length.
    pub fn apply_slice<T: Real>(&self, data: &mut [T]) {
        for (v, &k) in data.iter_mut().zip(&self.keep) {
            if !k {
                *v = T::zero();
            }
        }
    }

    /// True when every pruned position of `w` is exactly `+0.0`.
    pub fn holds_zeros<T: Real>(&self, w: &[T]) -> bool {
        w.len() == self.keep.len()
            && w.iter().zip(&self.keep).all(|(v, &k)| k || v.as_f64().to_bits() == 0)
    }

    /// True when every position pruned by `earlier` is pruned here too.
    pub fn extends(&self, earlier: &Mask) -> bool {
        self.shape() == earlier.shape()
            && self.keep.iter().zip(&earlier.keep).all(|(&now, &then)| then || !now)
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        let mut byte = 0u8;
        for (i, &k) in self.keep.iter().enumerate() {
            byte |= (k as u8) << (i % 8);
            if i % 8 == 7 {
                h.update([byte]);
                byte = 0;
            }
        }
        if !self.keep.len().is_multiple_of(8) {
            h.update([byte]);
        }
    }

    /// SHA-256 over the shape and the packed keep bits.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        h.finalize().into()
    }
}

/// Masks of every prunable layer of a model, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparsityMask {
    layers: BTreeMap<String, Mask>,
}

impl SparsityMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: impl Into<String>, mask: Mask) {
        self.layers.insert(layer.into(), mask);
    }

    pub fn get(&self, layer: &str) -> Option<&Mask> {
        self.layers.get(layer)
    }

    pub fn require(&self, layer: &str) -> Result<&Mask> {
        self.get(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mask)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Pruned fraction over all layers.
    pub fn sparsity(&self) -> f64 {
        let (pruned, total) = self
            .layers
            .values()
            .fold((0usize, 0usize), |(p, t), m| (p + m.pruned(), t + m.rows * m.cols));
        if total == 0 {
            0.0
        } else {
            pruned as f64 / total as f64
        }
    }

    /// True when every layer of `self` extends the same layer of `earlier`.
    pub fn extends(&self, earlier: &SparsityMask) -> bool {
        earlier.layers.iter().all(|(k, m)| self.layers.get(k).is_some_and(|n| n.extends(m)))
    }

    /// SHA-256 over layer names and masks in name order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, m) in &self.layers {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            m.hash_into(&mut h);
        }
        h.finalize().into()
    }
}

/// Lower-case hex rendering of a digest.
pub fn hex(digest: &[u8]) -> String {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push(DIGITS[(b >> 4) as usize] as char);
        s.push(DIGITS[(b & 15) as usize] as char);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_from_weights_and_apply() {
        let w = Matrix::from_rows(&[&[0.0f32, 2.0], &[-0.5, 0.0]]).unwrap();
        let m = Mask::from_weights(&w);
        assert_eq!(m.as_slice(), &[false, true, true, false]);
        assert_eq!(m.sparsity(), 0.5);
        let mut full = Matrix::from_fn(2, 2, |_, _| 1.0f32);
        m.apply(&mut full).unwrap();
        assert_eq!(full.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(m.holds_zeros(full.as_slice()));
        assert!(!m.holds_zeros(&[1.0f32, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn extension_and_digest() {
        let a = Mask::from_vec(1, 4, vec![true, false, true, true]).unwrap();
        let b = Mask::from_vec(1, 4, vec![false, false, true, true]).unwrap();
        assert!(b.extends(&a));
        assert!(!a.extends(&b));
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
        let mut s = SparsityMask::new();
        s.insert("x", a.clone());
        let mut t = SparsityMask::new();
        t.insert("x", b);
        assert!(t.extends(&s));
        assert_ne!(s.digest(), t.digest());
        assert_eq!(hex(&[0x0f, 0xa0]), "0fa0");
    }
}
