//! `sparsekit` subcommands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sparsekit_core::bench::{bench_model, run_sweep, BenchReport};
use sparsekit_core::codec::Header;
use sparsekit_core::compress::apply::{build_profile, collect_calibration, prune_model, quantize_model, LayerReport};
use sparsekit_core::compress::SparsityMask;
use sparsekit_core::data::{eval_windows, window, DataMixture, TaskData};
use sparsekit_core::model::{Model, BLOCK_LINEARS};
use sparsekit_core::pipeline::{mixture_calibration, train_steps};
use sparsekit_core::runtime::{Backend, Clock};
use sparsekit_core::train::{evaluate, Objective, TrainState};
use sparsekit_core::Rng;

use crate::checkpoint::{Checkpoint, TOOLKIT_VERSION};
use crate::error::AppError;
use crate::recipe::{DataSource, Recipe};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SPARSEKIT_OUT";
pub const RUN_MANIFEST: &str = "run.json";
pub const LOCK_FILE: &str = ".sparsekit.lock";
/// Share of the bundled task used for training; the rest is held out.
pub const TASK_TRAIN_FRACTION: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "sparsekit", version, about = "Sparse LLM pruning, quantization, training and inference benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML recipe; defaults apply to missing keys.
    #[arg(long)]
    recipe: Option<PathBuf>,
    /// Override a recipe key, e.g. `--set profile.target=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `$SPARSEKIT_OUT/<command>-<recipe hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchFlags {
    #[arg(long)]
    prefill: Option<usize>,
    #[arg(long)]
    decode: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// `rowpair16` or `tile<R>x<C>`.
    #[arg(long)]
    layout: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One-shot prune a checkpoint.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// INT8-quantize a checkpoint's linear layers.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train a fresh model, or continue a checkpoint with its mask frozen.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Distillation teacher, required when `train.distill` is set.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Time prefill and decode of a checkpoint on each backend.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated: dense, sparse, int8, sparse_int8.
        #[arg(long)]
        backends: Option<String>,
        #[command(flatten)]
        flags: BenchFlags,
    },
    /// Prefill/decode sweep over sparsity levels and quantization.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Model to sweep; a random model from `bench.model` otherwise.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Comma-separated sparsity levels in [0, 1).
        #[arg(long)]
        levels: Option<String>,
        /// off, on or both.
        #[arg(long)]
        quant: Option<String>,
        #[command(flatten)]
        flags: BenchFlags,
    },
    /// Describe an `.spkt` container or a checkpoint directory.
    Inspect { path: PathBuf },
}

/// Wall clock relative to construction.
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

/// Runs one invocation; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                let err = AppError::Usage(e.kind().to_string());
                eprintln!("{}", err.machine_line());
                return err.exit_code();
            }
            return 0;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.machine_line());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, args: &[String]) -> Result<(), AppError> {
    match command {
        Command::Prune { common, input } => prune(&common, &input, args),
        Command::Quantize { common, input } => quantize(&common, &input, args),
        Command::Train { common, input, teacher } => train(&common, input.as_deref(), teacher.as_deref(), args),
        Command::Bench { common, input, backends, flags } => bench(&common, &input, backends, &flags, args),
        Command::Sweep { common, input, levels, quant, flags } => sweep(&common, input.as_deref(), levels, quant, &flags, args),
        Command::Inspect { path } => inspect(&path),
    }
}

/// Recipe file plus `--set` overrides plus dedicated flags, in that order.
fn resolve(common: &Common, extra: Vec<String>) -> Result<(Recipe, Vec<String>), AppError> {
    let text = match &common.recipe {
        Some(p) => fs::read_to_string(p).map_err(AppError::io(p))?,
        None => String::new(),
    };
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(extra);
    Ok((Recipe::parse(&text, &overrides)?, overrides))
}

fn bench_overrides(flags: &BenchFlags) -> Vec<String> {
    let mut o = Vec::new();
    if let Some(v) = flags.prefill {
        o.push(format!("bench.prefill_len={v}"));
    }
    if let Some(v) = flags.decode {
        o.push(format!("bench.decode_len={v}"));
    }
    if let Some(v) = flags.repeats {
        o.push(format!("bench.repeats={v}"));
    }
    if let Some(v) = &flags.layout {
        o.push(format!("bench.layout={}", toml_string(v)));
    }
    o
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn list_override(key: &str, csv: &str, quote: bool) -> String {
    let items: Vec<String> =
        csv.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| if quote { toml_string(s) } else { s.to_string() }).collect();
    format!("{key}=[{}]", items.join(", "))
}

fn out_dir(common: &Common, command: &str, recipe: &Recipe) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("sparsekit-out"));
    root.join(format!("{command}-{}", &recipe.hash()[..12]))
}

/// Exclusive claim on an output directory for the lifetime of a command.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, AppError> {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AppError::Locked(dir.to_path_buf())),
            Err(e) => Err(AppError::Io { path, source: e }),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Serialize)]
struct RunInput {
    role: String,
    path: String,
    manifest_sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    args: &'a [String],
    inputs: Vec<RunInput>,
    overrides: &'a [String],
    recipe: String,
    recipe_hash: String,
    seed: u64,
    toolkit_version: &'a str,
}

struct Run<'a> {
    command: &'a str,
    args: &'a [String],
    recipe: Recipe,
    overrides: Vec<String>,
    dir: PathBuf,
    inputs: Vec<RunInput>,
    _lock: OutputLock,
}

impl<'a> Run<'a> {
    fn start(command: &'a str, common: &Common, args: &'a [String], extra: Vec<String>) -> Result<Self, AppError> {
        let (recipe, overrides) = resolve(common, extra)?;
        let dir = out_dir(common, command, &recipe);
        let lock = OutputLock::acquire(&dir)?;
        Ok(Run { command, args, recipe, overrides, dir, inputs: Vec::new(), _lock: lock })
    }

    fn load(&mut self, role: &str, path: &Path) -> Result<Checkpoint, AppError> {
        let ck = Checkpoint::load(path)?;
        self.inputs.push(RunInput {
            role: role.into(),
            path: path.display().to_string(),
            manifest_sha256: Checkpoint::digest_of(path)?,
        });
        Ok(ck)
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("command".into(), self.command.into());
        m.insert("recipe_hash".into(), self.recipe.hash());
        m.insert("seed".into(), self.recipe.seed.to_string());
        m.insert("toolkit_version".into(), TOOLKIT_VERSION.into());
        for i in &self.inputs {
            m.insert(format!("parent.{}", i.role), i.manifest_sha256.clone());
        }
        m
    }

    fn write(&self, name: &str, text: &str) -> Result<(), AppError> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(AppError::io(&path))
    }

    fn finish(self) -> Result<(), AppError> {
        let manifest = RunManifest {
            command: self.command,
            args: self.args,
            inputs: self.inputs,
            overrides: &self.overrides,
            recipe: self.recipe.to_toml(),
            recipe_hash: self.recipe.hash(),
            seed: self.recipe.seed,
            toolkit_version: TOOLKIT_VERSION,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("run manifest serializes");
        text.push('\n');
        let path = self.dir.join(RUN_MANIFEST);
        fs::write(&path, text).map_err(AppError::io(&path))?;
        println!("wrote {}", self.dir.display());
        Ok(())
    }
}

fn windows(source: DataSource, rng: &mut Rng, n: usize, len: usize) -> Vec<Vec<u32>> {
    match source {
        DataSource::Pretrain => mixture_calibration(&DataMixture::pretraining(), rng, n, len),
        DataSource::Task => {
            let task = TaskData::bundled(TASK_TRAIN_FRACTION);
            (0..n).map(|_| window(&task.train, rng, len)).collect()
        }
    }
}

fn layer_csv(reports: &[LayerReport]) -> String {
    let mut out = String::from("layer,sparsity,error,kurtosis,skipped\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{},{},{}", r.name, r.sparsity, r.error, r.kurtosis, r.skipped);
    }
    out
}

/// Fraction of exactly-zero weights over all linear layers.
pub fn linear_sparsity(model: &Model<f32>) -> f64 {
    let (mut zeros, mut total) = (0usize, 0usize);
    for name in model.linear_names() {
        let w = model.linear(&name).expect("listed layer");
        zeros += w.as_slice().iter().filter(|v| v.to_bits() == 0).count();
        total += w.len();
    }
    zeros as f64 / total as f64
}

fn prune(common: &Common, input: &Path, args: &[String]) -> Result<(), AppError> {
    let mut run = Run::start("prune", common, args, Vec::new())?;
    let ck = run.load("in", input)?;
    let r = &run.recipe;
    let seqs = windows(r.prune.calib_source, &mut Rng::new(r.seed).substream(100), r.prune.calib_samples, r.prune.calib_seq_len);
    let calib = collect_calibration(&ck.model, &seqs)?;
    let recipe = r.prune_recipe();
    let profile = build_profile(&ck.model, &calib, &recipe)?;
    let forced = (!ck.mask.is_empty()).then_some(&ck.mask);
    let (model, mask, reports) = prune_model(&ck.model, &calib, &profile, &recipe, forced)?;
    let sparsity = linear_sparsity(&model);
    let out = Checkpoint { model, mask, quant: None, metadata: run.metadata() };
    out.save(&run.dir)?;
    run.write("layers.csv", &layer_csv(&reports))?;
    println!("pruned to linear sparsity {sparsity:.6} (target {})", run.recipe.profile.target);
    run.finish()
}

fn quantize(common: &Common, input: &Path, args: &[String]) -> Result<(), AppError> {
    let mut run = Run::start("quantize", common, args, Vec::new())?;
    let ck = run.load("in", input)?;
    let r = &run.recipe;
    let n_linears = ck.model.linear_names().len();
    if r.quant.skip_top_k_kurtosis > n_linears {
        return Err(AppError::Recipe {
            key: "quant.skip_top_k_kurtosis".into(),
            reason: format!("exceeds the {n_linears} linear layers of the input"),
        });
    }
    let seqs = windows(r.quant.calib_source, &mut Rng::new(r.seed).substream(200), r.quant.calib_samples, r.quant.calib_seq_len);
    let calib = collect_calibration(&ck.model, &seqs)?;
    let (layers, reports) = quantize_model(&ck.model, &calib, &r.quant_recipe())?;
    for (name, qm) in &layers.layers {
        if let Some(m) = ck.mask.get(name) {
            if !m.holds_zeros(qm.q.map(|v| v as f32).as_slice()) {
                return Err(AppError::format(input, format!("quantization broke the mask of `{name}`")));
            }
        }
    }
    let skipped = layers.skipped.len();
    let out = Checkpoint { model: ck.model, mask: ck.mask, quant: Some(layers), metadata: run.metadata() };
    out.save(&run.dir)?;
    run.write("layers.csv", &layer_csv(&reports))?;
    println!("quantized {} layers, {skipped} kept in fp32", reports.len() - skipped);
    run.finish()
}

fn train(common: &Common, input: Option<&Path>, teacher: Option<&Path>, args: &[String]) -> Result<(), AppError> {
    let mut run = Run::start("train", common, args, Vec::new())?;
    let root = Rng::new(run.recipe.seed).substream(300);
    let (model, mask) = match input {
        Some(p) => {
            let ck = run.load("in", p)?;
            (ck.model, ck.mask)
        }
        None => (Model::init(run.recipe.train.model.config(), &mut root.substream(0))?, SparsityMask::new()),
    };
    let teacher = match (run.recipe.train.distill, teacher) {
        (true, Some(p)) => Some(run.load("teacher", p)?.model),
        (true, None) => return Err(AppError::Usage("train.distill = true needs --teacher".into())),
        (false, Some(_)) => return Err(AppError::Usage("--teacher given but train.distill is false".into())),
        (false, None) => None,
    };
    let r = &run.recipe;
    let tc = r.train_config();
    if tc.seq_len > model.cfg.max_ctx + 1 {
        return Err(AppError::Recipe { key: "train.seq_len".into(), reason: format!("exceeds the model context {} + 1", model.cfg.max_ctx) });
    }
    let distill = r.distill_config();
    let objective = match &teacher {
        Some(t) => Objective::Distill { teacher: t, cfg: distill },
        None => Objective::Task,
    };
    let mut state = TrainState::freeze(model, mask, tc.lr, tc.steps)?.with_optimizer(tc.optimizer);
    let digest = state.frozen_digest();
    let task = TaskData::bundled(TASK_TRAIN_FRACTION);
    let mix = DataMixture::pretraining();
    let (batch, len) = (tc.batch, tc.seq_len);
    let mut metrics = String::from("step,loss\n");
    let mut broken = None;
    let sample = |rng: &mut Rng| -> Vec<Vec<u32>> {
        match r.train.data {
            DataSource::Task => (0..batch).map(|_| window(&task.train, rng, len)).collect(),
            DataSource::Pretrain => mix.sample_batch(rng, batch, len).into_iter().map(|s| s.tokens).collect(),
        }
    };
    train_steps(&mut state, tc.steps, &mut root.substream(1), sample, &objective, |s, loss| {
        let _ = writeln!(metrics, "{},{}", s.step, loss);
        if broken.is_none() && (s.mask().digest() != digest || !s.holds_mask()) {
            broken = Some(s.step);
        }
    })?;
    if let Some(step) = broken {
        return Err(AppError::Usage(format!("mask changed at step {step}")));
    }
    let eval = match r.train.data {
        DataSource::Task => eval_windows(&task.eval, len),
        DataSource::Pretrain => mixture_calibration(&mix, &mut root.substream(2), 16, len),
    };
    let (eval_loss, acc) = evaluate(&state.theta, &eval)?;
    let mask = state.mask().clone();
    let out = Checkpoint { model: state.theta, mask, quant: None, metadata: run.metadata() };
    out.save(&run.dir)?;
    run.write("metrics.csv", &metrics)?;
    println!("trained {} steps: eval loss {eval_loss:.4}, top-1 accuracy {acc:.4}", tc.steps);
    run.finish()
}

fn parse_backends(list: &[String]) -> Result<Vec<Backend>, AppError> {
    list.iter()
        .map(|b| Backend::parse(b).ok_or_else(|| AppError::Recipe { key: "bench.backends".into(), reason: format!("unknown backend `{b}`") }))
        .collect()
}

fn emit(run: &Run, report: &BenchReport) -> Result<(), AppError> {
    let csv = report.to_csv();
    run.write("bench.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn bench(common: &Common, input: &Path, backends: Option<String>, flags: &BenchFlags, args: &[String]) -> Result<(), AppError> {
    let mut extra = bench_overrides(flags);
    if let Some(b) = backends {
        extra.push(list_override("bench.backends", &b, true));
    }
    let mut run = Run::start("bench", common, args, extra)?;
    let ck = run.load("in", input)?;
    let backends = parse_backends(&run.recipe.bench.backends)?;
    let report = bench_model(&ck.model, ck.quant.as_ref(), &backends, &run.recipe.sweep_spec(), &StdClock::new())?;
    emit(&run, &report)?;
    run.finish()
}

fn sweep(
    common: &Common,
    input: Option<&Path>,
    levels: Option<String>,
    quant: Option<String>,
    flags: &BenchFlags,
    args: &[String],
) -> Result<(), AppError> {
    let mut extra = bench_overrides(flags);
    if let Some(l) = levels {
        extra.push(list_override("bench.levels", &l, false));
    }
    if let Some(q) = quant {
        extra.push(format!("bench.quant={}", toml_string(&q)));
    }
    let mut run = Run::start("sweep", common, args, extra)?;
    let model = match input {
        Some(p) => run.load("in", p)?.model,
        None => Model::init(run.recipe.bench.model.config(), &mut Rng::new(run.recipe.seed).substream(400))?,
    };
    let report = run_sweep(&model, &run.recipe.sweep_spec(), &StdClock::new())?;
    emit(&run, &report)?;
    run.finish()
}

fn inspect(path: &Path) -> Result<(), AppError> {
    if path.is_dir() {
        print!("{}", describe_checkpoint(path)?);
    } else {
        let bytes = fs::read(path).map_err(AppError::io(path))?;
        let h = Header::parse(&bytes).map_err(|e| AppError::format(path, e.to_string()))?;
        let f = h.footprint();
        let mut out = String::new();
        let _ = writeln!(out, "container {}", path.display());
        let _ = writeln!(out, "version {}", h.version);
        let _ = writeln!(out, "dtype {}", h.dtype.name());
        let _ = writeln!(out, "layout {}", h.layout);
        let _ = writeln!(out, "shape {}x{}", h.rows, h.cols);
        let _ = writeln!(out, "blocks {}", h.block_count);
        let _ = writeln!(out, "nnz {}", h.nnz);
        let _ = writeln!(out, "sparsity {:.6}", 1.0 - h.nnz as f64 / (h.rows * h.cols) as f64);
        let _ = writeln!(out, "footprint_ratio {:.6}", f.ratio);
        print!("{out}");
    }
    Ok(())
}

/// Header, per-tensor sparsity table and footprints of a checkpoint.
pub fn describe_checkpoint(dir: &Path) -> Result<String, AppError> {
    let m = Checkpoint::read_manifest(dir)?;
    let mut out = String::new();
    let c = &m.config;
    let _ = writeln!(out, "checkpoint {}", dir.display());
    let _ = writeln!(out, "format {} v{} (toolkit {})", m.format, m.format_version, m.toolkit_version);
    let _ = writeln!(
        out,
        "config vocab={} d_model={} n_layers={} n_heads={} d_ff={} max_ctx={}",
        c.vocab, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_ctx
    );
    for (k, v) in &m.metadata {
        let _ = writeln!(out, "meta {k}={v}");
    }
    let masks: BTreeMap<&str, &str> = m.masks.iter().map(|e| (e.name.as_str(), e.mask_digest.as_str())).collect();
    let quant: BTreeMap<&str, &str> = m.quantized.iter().map(|e| (e.name.as_str(), e.method.as_str())).collect();
    let _ = writeln!(out, "{:<22} {:>9} {:>9} {:>11} {:>6} {:>8}", "tensor", "shape", "sparsity", "footprint", "quant", "mask");
    let (mut zeros, mut total) = (0usize, 0usize);
    for t in &m.tensors {
        let bytes = fs::read(dir.join(&t.file)).map_err(AppError::io(dir.join(&t.file)))?;
        let h = Header::parse(&bytes).map_err(|e| AppError::format(dir.join(&t.file), e.to_string()))?;
        let n = t.rows * t.cols;
        let sparsity = 1.0 - t.nnz as f64 / n as f64;
        let linear = t.name.split('.').skip(2).collect::<Vec<_>>().join(".");
        if BLOCK_LINEARS.contains(&linear.as_str()) {
            zeros += n - t.nnz;
            total += n;
        }
        let _ = writeln!(
            out,
            "{:<22} {:>9} {:>9.6} {:>11.6} {:>6} {:>8}",
            t.name,
            format!("{}x{}", t.rows, t.cols),
            sparsity,
            h.footprint().ratio,
            quant.get(t.name.as_str()).copied().unwrap_or("-"),
            masks.get(t.name.as_str()).map_or("-", |d| &d[..8]),
        );
    }
    if total > 0 {
        let _ = writeln!(out, "linear_sparsity {:.6}", zeros as f64 / total as f64);
    }
    if !m.quant_skipped.is_empty() {
        let _ = writeln!(out, "quant_skipped {}", m.quant_skipped.join(","));
    }
    Ok(out)
}
