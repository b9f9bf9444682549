//! Whole-model pruning and quantization over the toy transformer's
//! linear layers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::compress::calib::{hessian, reconstruction_error, CalibrationSet};
use crate::compress::mask::SparsityMask;
use crate::compress::profile::{profile_owl, ProfileKind, SparsityProfile, DEFAULT_OWL_LAMBDA, DEFAULT_OWL_M};
use crate::compress::prune::{prune_magnitude_within, prune_obs_with, ObsConfig, PruneScope};
use crate::compress::quant::{quantize_layer, select_skip_layers, QuantRecipe, QuantizedMatrix};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{kurtosis, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PruneMethod {
    Magnitude,
    #[default]
    Obs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneRecipe {
    pub profile: ProfileKind,
    pub target: f64,
    pub owl_lambda: f64,
    pub owl_m: f64,
    pub method: PruneMethod,
    pub damp: f64,
    pub block_size: usize,
    pub scope: PruneScope,
}

impl Default for PruneRecipe {
    fn default() -> Self {
        PruneRecipe {
            profile: ProfileKind::Uniform,
            target: 0.5,
            owl_lambda: DEFAULT_OWL_LAMBDA,
            owl_m: DEFAULT_OWL_M,
            method: PruneMethod::Obs,
            damp: 0.01,
            block_size: 128,
            scope: PruneScope::PerLayer,
        }
    }
}

/// Per-layer outcome of a compression pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub sparsity: f64,
    /// `‖WX − ŴX‖²` on the calibration inputs.
    pub error: f64,
    /// Weight kurtosis; NaN for a constant layer.
    pub kurtosis: f64,
    pub skipped: bool,
}

/// Inputs of every linear layer over the calibration sequences.
pub fn collect_calibration(model: &Model<f32>, seqs: &[Vec<u32>]) -> Result<CalibrationSet> {
    let first = seqs.first().ok_or_else(|| Error::invalid("calibration", "need at least one sequence"))?;
    let mut calib = CalibrationSet::new(seqs.len(), first.len())?;
    let names = model.linear_names();
    let mut rows: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    let mut cols: BTreeMap<&str, usize> = BTreeMap::new();
    for seq in seqs {
        let tr = model.forward(seq)?;
        for name in &names {
            let x = tr.linear_input(name)?;
            rows.entry(name).or_default().extend_from_slice(x.as_slice());
            cols.insert(name, x.cols());
        }
    }
    for (name, data) in rows {
        let c = cols[name];
        calib.insert(name, Matrix::from_vec(data.len() / c, c, data)?);
    }
    Ok(calib)
}

/// Per-layer sparsity targets for `model` under `recipe`.
pub fn build_profile(model: &Model<f32>, calib: &CalibrationSet, recipe: &PruneRecipe) -> Result<SparsityProfile> {
    let names = model.linear_names();
    match recipe.profile {
        ProfileKind::Uniform => SparsityProfile::uniform(names.iter().map(|s| s.as_str()), recipe.target),
        ProfileKind::Owl => {
            let layers = names.iter().map(|n| Ok((n.as_str(), model.linear(n)?))).collect::<Result<Vec<_>>>()?;
            profile_owl(calib, &layers, recipe.target, recipe.owl_lambda, recipe.owl_m)
        }
    }
}

fn kurt(w: &Matrix<f32>) -> f64 {
    kurtosis(w.as_slice()).unwrap_or(f64::NAN)
}

/// Prunes every linear layer to its profile sparsity. Positions already
/// pruned in `forced` stay pruned.
pub fn prune_model(
    model: &Model<f32>,
    calib: &CalibrationSet,
    profile: &SparsityProfile,
    recipe: &PruneRecipe,
    forced: Option<&SparsityMask>,
) -> Result<(Model<f32>, SparsityMask, Vec<LayerReport>)> {
    let mut out = model.clone();
    let mut masks = SparsityMask::new();
    let mut reports = Vec::new();
    for name in model.linear_names() {
        let w = model.linear(&name)?;
        let x = calib.get(&name)?;
        let s = profile.get(&name)?;
        let prior = forced.and_then(|f| f.get(&name));
        let (pruned, mask, error) = match recipe.method {
            PruneMethod::Magnitude => {
                let (p, m) = prune_magnitude_within(w, s, recipe.scope, prior)?;
                let e = reconstruction_error(w, &p.cast(), &hessian(x));
                (p, m, e)
            }
            PruneMethod::Obs => {
                let cfg = ObsConfig { damp: recipe.damp, block_size: recipe.block_size, scope: recipe.scope, ..ObsConfig::default() };
                let r = prune_obs_with(w, x, s, &cfg, prior)?;
                (r.weights, r.mask, r.error)
            }
        };
        reports.push(LayerReport { name: name.clone(), sparsity: mask.sparsity(), error, kurtosis: kurt(&pruned), skipped: false });
        *out.linear_mut(&name)? = pruned;
        masks.insert(name, mask);
    }
    Ok((out, masks, reports))
}

/// Quantized linears of a model; layers in `skipped` stay in float.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayers {
    pub layers: BTreeMap<String, QuantizedMatrix>,
    pub skipped: BTreeSet<String>,
}

/// Smoothing plus error-compensated INT8 rounding of every linear layer
/// except the `skip_top_k_kurtosis` heaviest-tailed ones.
pub fn quantize_model(
    model: &Model<f32>,
    calib: &CalibrationSet,
    recipe: &QuantRecipe,
) -> Result<(QuantizedLayers, Vec<LayerReport>)> {
    let names = model.linear_names();
    recipe.validate(names.len())?;
    let layers = names.iter().map(|n| Ok((n.as_str(), model.linear(n)?))).collect::<Result<Vec<_>>>()?;
    let skipped = select_skip_layers(&layers, recipe.skip_top_k_kurtosis)?;
    let mut out = BTreeMap::new();
    let mut reports = Vec::new();
    for (name, w) in layers {
        let sparsity = crate::tensor::sparsity_of(w, 0.0);
        if skipped.contains(name) {
            reports.push(LayerReport { name: name.into(), sparsity, error: 0.0, kurtosis: kurt(w), skipped: true });
            continue;
        }
        let res = quantize_layer(w, calib.get(name)?, recipe)?;
        reports.push(LayerReport {
            name: name.into(),
            sparsity: res.matrix.sparsity(),
            error: res.error,
            kurtosis: kurt(w),
            skipped: false,
        });
        out.insert(String::from(name), res.matrix);
    }
    Ok((QuantizedLayers { layers: out, skipped }, reports))
}
