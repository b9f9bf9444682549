//! Checkpoint directories: `manifest.json` plus one SPKT container per
//! tensor, packed sparsity masks and INT8 layer parameters.
//!
//! ```text
//! manifest.json
//! tensors/<name>.spkt      fp32 weights, any tensor of the model
//! masks/<name>.mask        u32 rows, u32 cols, row-major keep bits (LSB first)
//! quant/<name>.spkt        i8 codes
//! quant/<name>.qparams     f32 act_scale, u32 n, n f32 row scales,
//!                          u32 m, m f32 smoothing factors (m = 0: none)
//! ```
//! All integers and floats are little-endian. Every file's SHA-256 is
//! recorded in the manifest and checked on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparsekit_core::codec::{BlockLayout, SparseMatrix};
use sparsekit_core::compress::apply::QuantizedLayers;
use sparsekit_core::compress::mask::{hex as digest_hex, Mask, SparsityMask};
use sparsekit_core::compress::quant::{QuantMethod, QuantizedMatrix};
use sparsekit_core::model::{Model, ModelConfig};
use sparsekit_core::Matrix;

use crate::error::AppError;
use crate::recipe::hex;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "sparsekit-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Frozen masks of pruned layers; empty for dense checkpoints.
    pub mask: SparsityMask,
    pub quant: Option<QuantizedLayers>,
    /// Provenance: command, recipe hash, seed, parent checkpoint.
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub toolkit_version: String,
    pub config: ConfigEntry,
    pub tensors: Vec<TensorEntry>,
    pub masks: Vec<MaskEntry>,
    pub quantized: Vec<QuantEntry>,
    pub quant_skipped: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEntry {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_ctx: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    pub name: String,
    pub file: String,
    pub pruned: usize,
    /// Digest of the mask itself, stable across file encodings.
    pub mask_digest: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantEntry {
    pub name: String,
    pub file: String,
    pub params_file: String,
    pub method: String,
    pub sha256: String,
    pub params_sha256: String,
}

impl From<ModelConfig> for ConfigEntry {
    fn from(c: ModelConfig) -> Self {
        ConfigEntry { vocab: c.vocab, d_model: c.d_model, n_layers: c.n_layers, n_heads: c.n_heads, d_ff: c.d_ff, max_ctx: c.max_ctx }
    }
}

impl From<ConfigEntry> for ModelConfig {
    fn from(c: ConfigEntry) -> Self {
        ModelConfig { vocab: c.vocab, d_model: c.d_model, n_layers: c.n_layers, n_heads: c.n_heads, d_ff: c.d_ff, max_ctx: c.max_ctx }
    }
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write(dir: &Path, rel: &str, bytes: &[u8]) -> Result<String, AppError> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(AppError::io(parent))?;
    }
    fs::write(&path, bytes).map_err(AppError::io(&path))?;
    Ok(sha(bytes))
}

fn read_checked(dir: &Path, rel: &str, want: &str) -> Result<Vec<u8>, AppError> {
    if rel.contains("..") || Path::new(rel).is_absolute() {
        return Err(AppError::format(dir.join(MANIFEST), format!("file path `{rel}` leaves the checkpoint")));
    }
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(AppError::io(&path))?;
    if sha(&bytes) != want {
        return Err(AppError::format(path, "checksum does not match the manifest"));
    }
    Ok(bytes)
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + mask.as_slice().len().div_ceil(8));
    out.extend_from_slice(&(mask.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(mask.cols() as u32).to_le_bytes());
    for chunk in mask.as_slice().chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &k)| b | ((k as u8) << i)));
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask, String> {
    if bytes.len() < 8 {
        return Err("truncated mask header".into());
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = rows.checked_mul(cols).ok_or("mask size overflows")?;
    if bytes.len() != 8 + n.div_ceil(8) {
        return Err(format!("mask of {rows}x{cols} needs {} bytes, found {}", 8 + n.div_ceil(8), bytes.len()));
    }
    let keep = (0..n).map(|i| bytes[8 + i / 8] >> (i % 8) & 1 == 1).collect();
    Mask::from_vec(rows, cols, keep).map_err(|e| e.to_string())
}

fn encode_qparams(qm: &QuantizedMatrix) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&qm.act_scale.to_le_bytes());
    out.extend_from_slice(&(qm.scales.len() as u32).to_le_bytes());
    for s in &qm.scales {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let smoothing = qm.smoothing.as_deref().unwrap_or(&[]);
    out.extend_from_slice(&(smoothing.len() as u32).to_le_bytes());
    for s in smoothing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn decode_qparams(bytes: &[u8]) -> Result<(f32, Vec<f32>, Option<Vec<f32>>), String> {
    let mut pos = 0;
    let mut word = || -> Result<[u8; 4], String> {
        let w = bytes.get(pos..pos + 4).ok_or("truncated quantization parameters")?;
        pos += 4;
        Ok(w.try_into().unwrap())
    };
    let act = f32::from_le_bytes(word()?);
    let n = u32::from_le_bytes(word()?) as usize;
    let scales = (0..n).map(|_| word().map(f32::from_le_bytes)).collect::<Result<Vec<_>, _>>()?;
    let m = u32::from_le_bytes(word()?) as usize;
    let smoothing = (0..m).map(|_| word().map(f32::from_le_bytes)).collect::<Result<Vec<_>, _>>()?;
    if pos != bytes.len() {
        return Err("trailing bytes after quantization parameters".into());
    }
    Ok((act, scales, (m > 0).then_some(smoothing)))
}

fn method_name(m: QuantMethod) -> &'static str {
    match m {
        QuantMethod::Rtn => "rtn",
        QuantMethod::Gptq => "gptq",
    }
}

impl Checkpoint {
    pub fn dense(model: Model<f32>) -> Self {
        Checkpoint { model, mask: SparsityMask::new(), quant: None, metadata: BTreeMap::new() }
    }

    /// Writes the checkpoint into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<Manifest, AppError> {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
        let mut tensors = Vec::new();
        for (name, t) in self.model.tensors() {
            let sm = SparseMatrix::encode(t, BlockLayout::RowPair16)?;
            let file = format!("tensors/{name}.spkt");
            let sha256 = write(dir, &file, &sm.to_bytes())?;
            tensors.push(TensorEntry { name, file, rows: t.rows(), cols: t.cols(), nnz: sm.nnz(), sha256 });
        }
        let mut masks = Vec::new();
        for (name, m) in self.mask.iter() {
            let file = format!("masks/{name}.mask");
            let sha256 = write(dir, &file, &encode_mask(m))?;
            masks.push(MaskEntry { name: name.into(), file, pruned: m.pruned(), mask_digest: digest_hex(&m.digest()), sha256 });
        }
        let mut quantized = Vec::new();
        let mut quant_skipped = Vec::new();
        if let Some(q) = &self.quant {
            for (name, qm) in &q.layers {
                let file = format!("quant/{name}.spkt");
                let params_file = format!("quant/{name}.qparams");
                let sha256 = write(dir, &file, &SparseMatrix::encode(&qm.q, BlockLayout::RowPair16)?.to_bytes())?;
                let params_sha256 = write(dir, &params_file, &encode_qparams(qm))?;
                quantized.push(QuantEntry {
                    name: name.clone(),
                    file,
                    params_file,
                    method: method_name(qm.method).into(),
                    sha256,
                    params_sha256,
                });
            }
            quant_skipped = q.skipped.iter().cloned().collect();
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            toolkit_version: TOOLKIT_VERSION.into(),
            config: self.model.cfg.into(),
            tensors,
            masks,
            quantized,
            quant_skipped,
            metadata: self.metadata.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write(dir, MANIFEST, text.as_bytes())?;
        Ok(manifest)
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest, AppError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(AppError::io(&path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| AppError::format(&path, e.to_string()))?;
        if m.format != FORMAT {
            return Err(AppError::format(&path, format!("not a {FORMAT} manifest")));
        }
        if m.format_version != FORMAT_VERSION {
            return Err(AppError::format(&path, format!("unsupported format version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self, AppError> {
        let manifest = Self::read_manifest(dir)?;
        let cfg: ModelConfig = manifest.config.into();
        cfg.validate()?;
        let mut model = Model::zeros(cfg);
        let entries: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        if entries.len() != manifest.tensors.len() {
            return Err(AppError::format(dir.join(MANIFEST), "duplicate tensor entries"));
        }
        let mut seen = 0;
        for (name, t) in model.tensors_mut() {
            let e = entries.get(name.as_str()).ok_or_else(|| AppError::format(dir.join(MANIFEST), format!("missing tensor `{name}`")))?;
            let bytes = read_checked(dir, &e.file, &e.sha256)?;
            let sm: SparseMatrix<f32> = SparseMatrix::from_bytes(&bytes).map_err(|err| AppError::format(dir.join(&e.file), err.to_string()))?;
            if (sm.rows(), sm.cols()) != t.shape() {
                return Err(AppError::format(dir.join(&e.file), format!("shape {}x{} where {}x{} is expected", sm.rows(), sm.cols(), t.rows(), t.cols())));
            }
            *t = sm.decode();
            seen += 1;
        }
        if seen != entries.len() {
            return Err(AppError::format(dir.join(MANIFEST), "manifest lists tensors the model does not have"));
        }
        let mut mask = SparsityMask::new();
        for e in &manifest.masks {
            let bytes = read_checked(dir, &e.file, &e.sha256)?;
            let m = decode_mask(&bytes).map_err(|r| AppError::format(dir.join(&e.file), r))?;
            if digest_hex(&m.digest()) != e.mask_digest {
                return Err(AppError::format(dir.join(&e.file), "mask digest does not match the manifest"));
            }
            mask.insert(e.name.clone(), m);
        }
        let quant = if manifest.quantized.is_empty() && manifest.quant_skipped.is_empty() {
            None
        } else {
            let mut layers = BTreeMap::new();
            for e in &manifest.quantized {
                let bytes = read_checked(dir, &e.file, &e.sha256)?;
                let sm: SparseMatrix<i8> = SparseMatrix::from_bytes(&bytes).map_err(|err| AppError::format(dir.join(&e.file), err.to_string()))?;
                let params = read_checked(dir, &e.params_file, &e.params_sha256)?;
                let (act_scale, scales, smoothing) = decode_qparams(&params).map_err(|r| AppError::format(dir.join(&e.params_file), r))?;
                if scales.len() != sm.rows() || smoothing.as_ref().is_some_and(|s| s.len() != sm.cols()) {
                    return Err(AppError::format(dir.join(&e.params_file), "parameter lengths do not match the layer shape"));
                }
                let method = match e.method.as_str() {
                    "rtn" => QuantMethod::Rtn,
                    "gptq" => QuantMethod::Gptq,
                    other => return Err(AppError::format(dir.join(MANIFEST), format!("unknown quantization method `{other}`"))),
                };
                let q: Matrix<i8> = sm.decode();
                layers.insert(e.name.clone(), QuantizedMatrix { q, scales, smoothing, act_scale, method });
            }
            Some(QuantizedLayers { layers, skipped: manifest.quant_skipped.iter().cloned().collect::<BTreeSet<_>>() })
        };
        Ok(Checkpoint { model, mask, quant, metadata: manifest.metadata })
    }

    /// SHA-256 of the manifest file, which pins every other file.
    pub fn digest_of(dir: &Path) -> Result<String, AppError> {
        let path = dir.join(MANIFEST);
        Ok(sha(&fs::read(&path).map_err(AppError::io(&path))?))
    }
}

/// Every file of a checkpoint directory, relative path to bytes.
pub fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, AppError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<(), AppError> {
        for entry in fs::read_dir(dir).map_err(AppError::io(dir))? {
            let path = entry.map_err(AppError::io(dir))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("inside root").to_path_buf();
                out.insert(rel, fs::read(&path).map_err(AppError::io(&path))?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsekit_core::compress::prune::{prune_magnitude, PruneScope};
    use sparsekit_core::compress::quant::{quantize_rtn, QuantGroup};
    use sparsekit_core::Rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { vocab: 16, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_ctx: 8 };
        let mut model = Model::init(cfg, &mut Rng::new(4)).unwrap();
        let mut mask = SparsityMask::new();
        for name in model.linear_names() {
            let w = model.linear_mut(&name).unwrap();
            let (pw, m) = prune_magnitude(w, 0.7, PruneScope::PerLayer).unwrap();
            *w = pw;
            mask.insert(name, m);
        }
        let mut layers = BTreeMap::new();
        let w = model.linear("blocks.0.attn.q").unwrap();
        let mut qm = quantize_rtn(w, QuantGroup::PerChannel);
        qm.smoothing = Some(vec![0.5; w.cols()]);
        qm.act_scale = 0.25;
        layers.insert("blocks.0.attn.q".to_string(), qm);
        let skipped = ["blocks.0.mlp.down".to_string()].into_iter().collect();
        let mut metadata = BTreeMap::new();
        metadata.insert("seed".into(), "4".into());
        Checkpoint { model, mask, quant: Some(QuantizedLayers { layers, skipped }), metadata }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
        let again = tempfile::tempdir().unwrap();
        ck.save(again.path()).unwrap();
        assert_eq!(snapshot(dir.path()).unwrap(), snapshot(again.path()).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let f = dir.path().join("tensors/blocks.0.attn.k.spkt");
        let mut bytes = fs::read(&f).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(AppError::Format { .. })));
    }

    #[test]
    fn mask_encoding() {
        let m = Mask::from_vec(3, 3, vec![true, false, true, true, true, false, false, false, true]).unwrap();
        let bytes = encode_mask(&m);
        assert_eq!(bytes[8..], [0b0001_1101, 0b1]);
        assert_eq!(decode_mask(&bytes).unwrap(), m);
        assert!(decode_mask(&bytes[..9]).is_err());
    }
}
