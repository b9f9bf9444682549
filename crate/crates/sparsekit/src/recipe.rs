//! TOML recipe files: one section per pipeline stage, unknown keys rejected,
//! `section.key=value` overrides applied before validation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparsekit_core::bench::{QuantSetting, SweepSpec};
use sparsekit_core::codec::BlockLayout;
use sparsekit_core::compress::apply::{PruneMethod, PruneRecipe};
use sparsekit_core::compress::prune::PruneScope;
use sparsekit_core::compress::quant::{QuantGroup, QuantMethod, QuantRecipe};
use sparsekit_core::compress::ProfileKind;
use sparsekit_core::model::ModelConfig;
use sparsekit_core::pipeline::TrainConfig;
use sparsekit_core::train::{DistillConfig, Optimizer};

use crate::error::AppError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Recipe {
    pub seed: u64,
    pub profile: ProfileSection,
    pub prune: PruneSection,
    pub quant: QuantSection,
    pub train: TrainSection,
    pub bench: BenchSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Uniform,
    Owl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Pretrain,
    Task,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub kind: ProfileName,
    pub target: f64,
    pub owl_lambda: f64,
    pub owl_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethodName {
    Magnitude,
    Obs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeName {
    PerRow,
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub method: PruneMethodName,
    pub damp: f64,
    pub block_size: usize,
    pub scope: ScopeName,
    pub calib_source: DataSource,
    pub calib_samples: usize,
    pub calib_seq_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMethodName {
    Rtn,
    Gptq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupName {
    PerChannel,
    PerTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub method: QuantMethodName,
    pub alpha: f64,
    pub skip_top_k_kurtosis: usize,
    pub group: GroupName,
    pub damp: f64,
    pub calib_source: DataSource,
    pub calib_samples: usize,
    pub calib_seq_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_ctx: usize,
}

impl ModelSection {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_ctx: self.max_ctx,
        }
    }

    fn from_config(c: ModelConfig) -> Self {
        ModelSection {
            vocab: c.vocab,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_ctx: c.max_ctx,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_config(ModelConfig::toy())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub optimizer: OptimizerName,
    pub momentum_beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub data: DataSource,
    /// Distill from the `--teacher` checkpoint.
    pub distill: bool,
    pub lambda_logit: f64,
    pub lambda_feature: f64,
    pub temperature: f64,
    pub model: ModelSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantSettingName {
    Off,
    On,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub levels: Vec<f64>,
    pub quant: QuantSettingName,
    pub prefill_len: usize,
    pub decode_len: usize,
    pub repeats: usize,
    /// `rowpair16` or `tile<R>x<C>`.
    pub layout: String,
    pub calib_samples: usize,
    /// Backends timed by `bench`.
    pub backends: Vec<String>,
    /// Model built by `sweep` when no checkpoint is given.
    pub model: ModelSection,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let r = PruneRecipe::default();
        ProfileSection {
            kind: match r.profile {
                ProfileKind::Uniform => ProfileName::Uniform,
                ProfileKind::Owl => ProfileName::Owl,
            },
            target: r.target,
            owl_lambda: r.owl_lambda,
            owl_m: r.owl_m,
        }
    }
}

impl Default for PruneSection {
    fn default() -> Self {
        let r = PruneRecipe::default();
        PruneSection {
            method: match r.method {
                PruneMethod::Magnitude => PruneMethodName::Magnitude,
                PruneMethod::Obs => PruneMethodName::Obs,
            },
            damp: r.damp,
            block_size: r.block_size,
            scope: match r.scope {
                PruneScope::PerRow => ScopeName::PerRow,
                PruneScope::PerLayer => ScopeName::PerLayer,
            },
            calib_source: DataSource::Task,
            calib_samples: 16,
            calib_seq_len: 48,
        }
    }
}

impl Default for QuantSection {
    fn default() -> Self {
        let q = QuantRecipe::default();
        QuantSection {
            method: QuantMethodName::Gptq,
            alpha: q.alpha,
            skip_top_k_kurtosis: q.skip_top_k_kurtosis,
            group: GroupName::PerChannel,
            damp: q.damp,
            calib_source: DataSource::Task,
            calib_samples: 16,
            calib_seq_len: 48,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DistillConfig::default();
        TrainSection {
            steps: t.steps,
            batch: t.batch,
            seq_len: t.seq_len,
            lr: t.lr,
            optimizer: OptimizerName::Adam,
            momentum_beta: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            data: DataSource::Task,
            distill: false,
            lambda_logit: d.lambda_logit,
            lambda_feature: d.lambda_feature,
            temperature: d.temperature,
            model: ModelSection::default(),
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        let s = SweepSpec::default();
        BenchSection {
            levels: s.levels,
            quant: QuantSettingName::Both,
            prefill_len: s.prefill_len,
            decode_len: s.decode_len,
            repeats: s.repeats,
            layout: "rowpair16".into(),
            calib_samples: s.calib_samples,
            backends: vec!["dense".into(), "sparse".into()],
            model: ModelSection { vocab: 64, d_model: 256, n_layers: 4, n_heads: 4, d_ff: 1024, max_ctx: 640 },
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> AppError {
    AppError::Recipe { key: key.into(), reason: reason.into() }
}

fn positive(key: &str, v: f64) -> Result<(), AppError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("must be finite and > 0, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<(), AppError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(bad(key, "must be at least 1"))
    }
}

fn unit(key: &str, v: f64, upper_open: bool) -> Result<(), AppError> {
    let ok = if upper_open { (0.0..1.0).contains(&v) } else { (0.0..=1.0).contains(&v) };
    if ok {
        Ok(())
    } else {
        Err(bad(key, format!("must lie in [0, 1{} got {v}", if upper_open { ")," } else { "]," })))
    }
}

/// Parses `rowpair16` or `tile<R>x<C>`.
pub fn parse_layout(s: &str) -> Option<BlockLayout> {
    if s == "rowpair16" {
        return Some(BlockLayout::RowPair16);
    }
    let (r, c) = s.strip_prefix("tile")?.split_once('x')?;
    let layout = BlockLayout::Tile { rows: r.parse().ok()?, cols: c.parse().ok()? };
    layout.validate().ok().map(|_| layout)
}

impl Recipe {
    /// Parses a recipe document, applies `overrides` (`section.key=value`,
    /// value in TOML syntax or a bare string) and validates the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, AppError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| bad("<document>", e.message().trim()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let recipe: Recipe = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().to_string();
            let key = match msg.split('`').nth(1) {
                Some(field) if path == "." && msg.starts_with("unknown field") => field.to_string(),
                _ => path,
            };
            bad(&key, msg.trim())
        })?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("recipe serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), AppError> {
        let p = &self.profile;
        unit("profile.target", p.target, true)?;
        if !(p.owl_lambda >= 0.0 && p.owl_lambda.is_finite()) {
            return Err(bad("profile.owl_lambda", "must be finite and >= 0"));
        }
        positive("profile.owl_m", p.owl_m)?;
        let r = &self.prune;
        if !(r.damp >= 0.0 && r.damp.is_finite()) {
            return Err(bad("prune.damp", "must be finite and >= 0"));
        }
        at_least_one("prune.block_size", r.block_size)?;
        at_least_one("prune.calib_samples", r.calib_samples)?;
        if r.calib_seq_len < 2 {
            return Err(bad("prune.calib_seq_len", "must be at least 2"));
        }
        let q = &self.quant;
        unit("quant.alpha", q.alpha, false)?;
        positive("quant.damp", q.damp)?;
        at_least_one("quant.calib_samples", q.calib_samples)?;
        if q.calib_seq_len < 2 {
            return Err(bad("quant.calib_seq_len", "must be at least 2"));
        }
        let n_linears = 6 * self.train.model.n_layers;
        if q.skip_top_k_kurtosis > n_linears {
            return Err(bad("quant.skip_top_k_kurtosis", format!("exceeds the {n_linears} linear layers")));
        }
        let t = &self.train;
        at_least_one("train.batch", t.batch)?;
        if t.seq_len < 2 {
            return Err(bad("train.seq_len", "must be at least 2"));
        }
        positive("train.lr", t.lr)?;
        unit("train.momentum_beta", t.momentum_beta, true)?;
        unit("train.adam_beta1", t.adam_beta1, true)?;
        unit("train.adam_beta2", t.adam_beta2, true)?;
        positive("train.adam_eps", t.adam_eps)?;
        positive("train.temperature", t.temperature)?;
        if !(t.lambda_logit >= 0.0 && t.lambda_feature >= 0.0) {
            return Err(bad("train.lambda_logit", "distillation weights must be >= 0"));
        }
        validate_model("train.model", &t.model)?;
        if t.seq_len > t.model.max_ctx + 1 {
            return Err(bad("train.seq_len", format!("exceeds train.model.max_ctx + 1 = {}", t.model.max_ctx + 1)));
        }
        let b = &self.bench;
        if b.levels.is_empty() {
            return Err(bad("bench.levels", "need at least one level"));
        }
        for &l in &b.levels {
            unit("bench.levels", l, true)?;
        }
        at_least_one("bench.prefill_len", b.prefill_len)?;
        at_least_one("bench.decode_len", b.decode_len)?;
        if b.repeats < 5 {
            return Err(bad("bench.repeats", "must be at least 5"));
        }
        at_least_one("bench.calib_samples", b.calib_samples)?;
        if parse_layout(&b.layout).is_none() {
            return Err(bad("bench.layout", format!("`{}` is not rowpair16 or tile<R>x<C> with R·C = 16", b.layout)));
        }
        if b.backends.is_empty() {
            return Err(bad("bench.backends", "need at least one backend"));
        }
        if let Some(x) = b.backends.iter().find(|x| sparsekit_core::runtime::Backend::parse(x).is_none()) {
            return Err(bad("bench.backends", format!("unknown backend `{x}`")));
        }
        validate_model("bench.model", &b.model)?;
        Ok(())
    }

    pub fn prune_recipe(&self) -> PruneRecipe {
        PruneRecipe {
            profile: match self.profile.kind {
                ProfileName::Uniform => ProfileKind::Uniform,
                ProfileName::Owl => ProfileKind::Owl,
            },
            target: self.profile.target,
            owl_lambda: self.profile.owl_lambda,
            owl_m: self.profile.owl_m,
            method: match self.prune.method {
                PruneMethodName::Magnitude => PruneMethod::Magnitude,
                PruneMethodName::Obs => PruneMethod::Obs,
            },
            damp: self.prune.damp,
            block_size: self.prune.block_size,
            scope: match self.prune.scope {
                ScopeName::PerRow => PruneScope::PerRow,
                ScopeName::PerLayer => PruneScope::PerLayer,
            },
        }
    }

    pub fn quant_recipe(&self) -> QuantRecipe {
        QuantRecipe {
            alpha: self.quant.alpha,
            skip_top_k_kurtosis: self.quant.skip_top_k_kurtosis,
            group: match self.quant.group {
                GroupName::PerChannel => QuantGroup::PerChannel,
                GroupName::PerTensor => QuantGroup::PerTensor,
            },
            damp: self.quant.damp,
            method: match self.quant.method {
                QuantMethodName::Rtn => QuantMethod::Rtn,
                QuantMethodName::Gptq => QuantMethod::Gptq,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch: t.batch,
            seq_len: t.seq_len,
            lr: t.lr,
            optimizer: match t.optimizer {
                OptimizerName::Sgd => Optimizer::Sgd,
                OptimizerName::Momentum => Optimizer::Momentum { beta: t.momentum_beta },
                OptimizerName::Adam => Optimizer::Adam { beta1: t.adam_beta1, beta2: t.adam_beta2, eps: t.adam_eps },
            },
            ..TrainConfig::default()
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            lambda_logit: self.train.lambda_logit,
            lambda_feature: self.train.lambda_feature,
            temperature: self.train.temperature,
        }
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        let b = &self.bench;
        SweepSpec {
            levels: b.levels.clone(),
            quant: match b.quant {
                QuantSettingName::Off => QuantSetting::Off,
                QuantSettingName::On => QuantSetting::On,
                QuantSettingName::Both => QuantSetting::Both,
            },
            prefill_len: b.prefill_len,
            decode_len: b.decode_len,
            repeats: b.repeats,
            seed: self.seed,
            layout: parse_layout(&b.layout).expect("validated layout"),
            quant_recipe: QuantRecipe { skip_top_k_kurtosis: 0, ..self.quant_recipe() },
            calib_samples: b.calib_samples,
        }
    }
}

fn validate_model(key: &str, m: &ModelSection) -> Result<(), AppError> {
    m.config().validate().map_err(|e| bad(key, e.to_string()))
}

/// Sets `path` (dotted) in `table` to `value`, parsed as a TOML value when
/// possible and as a plain string otherwise.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), AppError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| bad(spec, "override must look like section.key=value"))?;
    let path = path.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = path.split('.').collect();
    let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| bad(path, "empty override key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| bad(path, format!("`{p}` is not a section")))?;
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let r = Recipe::default();
        r.validate().unwrap();
        let text = r.to_toml();
        assert_eq!(Recipe::parse(&text, &[]).unwrap(), r);
        assert_eq!(Recipe::parse(&text, &[]).unwrap().to_toml(), text);
        assert_eq!(Recipe::parse("", &[]).unwrap(), r);
    }

    #[test]
    fn unknown_keys_are_named() {
        match Recipe::parse("[prune]\ndmap = 0.1\n", &[]) {
            Err(AppError::Recipe { key, .. }) => assert_eq!(key, "prune.dmap"),
            other => panic!("{other:?}"),
        }
        match Recipe::parse("colour = 1\n", &[]) {
            Err(AppError::Recipe { key, .. }) => assert_eq!(key, "colour"),
            other => panic!("{other:?}"),
        }
        match Recipe::parse("[profile]\nkind = \"triangle\"\n", &[]) {
            Err(AppError::Recipe { key, .. }) => assert_eq!(key, "profile.kind"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_named() {
        for (text, want) in [
            ("[profile]\ntarget = 1.0\n", "profile.target"),
            ("[quant]\ndamp = 0.0\n", "quant.damp"),
            ("[bench]\nrepeats = 3\n", "bench.repeats"),
            ("[bench]\nlayout = \"tile3x3\"\n", "bench.layout"),
            ("[train.model]\nn_heads = 3\n", "train.model"),
        ] {
            match Recipe::parse(text, &[]) {
                Err(AppError::Recipe { key, .. }) => assert_eq!(key, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let r = Recipe::parse("seed = 3\n[profile]\ntarget = 0.5\n", &["profile.target=0.7".into(), "profile.kind=owl".into(), "seed=9".into()])
            .unwrap();
        assert_eq!(r.profile.target, 0.7);
        assert_eq!(r.profile.kind, ProfileName::Owl);
        assert_eq!(r.seed, 9);
        assert!(Recipe::parse("", &["profile.nope=1".into()]).is_err());
        assert!(Recipe::parse("", &["novalue".into()]).is_err());
        let l = Recipe::parse("", &["bench.levels=[0, 0.9]".into()]).unwrap();
        assert_eq!(l.bench.levels, [0.0, 0.9]);
    }

    #[test]
    fn layouts() {
        assert_eq!(parse_layout("rowpair16"), Some(BlockLayout::RowPair16));
        assert_eq!(parse_layout("tile4x32"), Some(BlockLayout::Tile { rows: 4, cols: 32 }));
        assert_eq!(parse_layout("tile4x4"), None);
        assert_eq!(parse_layout("tile0x16"), None);
        assert_eq!(parse_layout("dense"), None);
    }

    #[test]
    fn hash_tracks_content() {
        let a = Recipe::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_eq!(a.hash(), Recipe::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(
            seed in any::<u32>(),
            target in 0.0f64..0.99,
            alpha in 0.0f64..=1.0,
            steps in 0usize..10_000,
            lr in 1e-6f64..1.0,
            levels in proptest::collection::vec(0.0f64..0.99, 1..5),
            owl in any::<bool>(),
        ) {
            let mut r = Recipe::default();
            r.seed = seed as u64;
            r.profile.target = target;
            r.profile.kind = if owl { ProfileName::Owl } else { ProfileName::Uniform };
            r.quant.alpha = alpha;
            r.train.steps = steps;
            r.train.lr = lr;
            r.bench.levels = levels;
            let back = Recipe::parse(&r.to_toml(), &[]).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
