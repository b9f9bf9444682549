//! Prefill/decode sweeps over sparsity and quantization levels.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::codec::{BlockLayout, Dtype, Element, SparseMatrix};
use crate::compress::apply::{collect_calibration, quantize_model, QuantizedLayers};
use crate::compress::prune::{prune_magnitude, PruneScope};
use crate::compress::quant::{QuantMethod, QuantRecipe};
use crate::kernels::{gemm_tokens_into, gemv_i8_into, gemv_into, FlopCounter, I8_MAX_COLS};
use crate::model::Model;
use crate::runtime::{Backend, Clock, GenRequest, ToyTransformer};
use crate::tensor::Matrix;
use crate::{Error, Result, Rng};

pub const CSV_HEADER: &str =
    "phase,sparsity,quant,backend,median_ns,tokens_per_s,useful_flops,dense_equiv_flops,footprint_ratio";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantSetting {
    Off,
    On,
    Both,
}

impl QuantSetting {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(QuantSetting::Off),
            "on" => Some(QuantSetting::On),
            "both" => Some(QuantSetting::Both),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantSetting::Off => "off",
            QuantSetting::On => "on",
            QuantSetting::Both => "both",
        }
    }

    pub fn variants(self) -> &'static [bool] {
        match self {
            QuantSetting::Off => &[false],
            QuantSetting::On => &[true],
            QuantSetting::Both => &[false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub levels: Vec<f64>,
    pub quant: QuantSetting,
    pub prefill_len: usize,
    pub decode_len: usize,
    /// Timed runs per configuration, after one warm-up run.
    pub repeats: usize,
    pub seed: u64,
    pub layout: BlockLayout,
    pub quant_recipe: QuantRecipe,
    pub calib_samples: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            levels: alloc::vec![0.0, 0.5, 0.7],
            quant: QuantSetting::Both,
            prefill_len: 512,
            decode_len: 128,
            repeats: 5,
            seed: 0,
            layout: BlockLayout::RowPair16,
            quant_recipe: QuantRecipe { skip_top_k_kurtosis: 0, method: QuantMethod::Rtn, ..QuantRecipe::default() },
            calib_samples: 4,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("levels", "need at least one sparsity level"));
        }
        if let Some(s) = self.levels.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(Error::invalid("levels", format!("{s} is outside [0, 1)")));
        }
        if self.repeats < 5 {
            return Err(Error::invalid("repeats", "must be at least 5"));
        }
        if self.prefill_len == 0 || self.decode_len == 0 {
            return Err(Error::invalid("prefill_len", "prefill and decode lengths must be at least 1"));
        }
        if self.calib_samples == 0 {
            return Err(Error::invalid("calib_samples", "must be at least 1"));
        }
        self.layout.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

/// One CSV row. `median_ns` is the whole phase: the prompt for prefill,
/// all `decode_len` steps for decode. FLOPs cover the linear layers.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub phase: Phase,
    pub sparsity: f64,
    pub quant: bool,
    pub backend: Backend,
    pub median_ns: u64,
    pub tokens_per_s: f64,
    pub useful_flops: u64,
    pub dense_equiv_flops: u64,
    pub footprint_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3},{},{},{:.6}",
                r.phase.name(),
                r.sparsity,
                if r.quant { "on" } else { "off" },
                r.backend.name(),
                r.median_ns,
                r.tokens_per_s,
                r.useful_flops,
                r.dense_equiv_flops,
                r.footprint_ratio
            );
        }
        out
    }

    pub fn find(&self, phase: Phase, sparsity: f64, quant: bool) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.phase == phase && r.sparsity == sparsity && r.quant == quant)
    }
}

/// Middle element, or the mean of the two middle elements.
pub fn median(samples: &[u64]) -> u64 {
    let mut v = samples.to_vec();
    v.sort_unstable();
    let n = v.len();
    match n {
        0 => 0,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2,
    }
}

/// Backend exercised by one sweep point.
pub fn backend_for(sparsity: f64, quant: bool) -> Backend {
    match (sparsity > 0.0, quant) {
        (false, false) => Backend::Dense,
        (true, false) => Backend::Sparse,
        (false, true) => Backend::Int8,
        (true, true) => Backend::SparseInt8,
    }
}

/// Magnitude-prunes every linear layer of `model` to `sparsity`.
pub fn prune_to_level(model: &Model<f32>, sparsity: f64) -> Result<Model<f32>> {
    let mut m = model.clone();
    if sparsity == 0.0 {
        return Ok(m);
    }
    for name in m.linear_names() {
        let w = m.linear_mut(&name)?;
        *w = prune_magnitude(w, sparsity, PruneScope::PerLayer)?.0;
    }
    Ok(m)
}

fn random_tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

/// INT8 weights for `model` calibrated on random token windows.
pub fn quantize_for_bench(model: &Model<f32>, spec: &SweepSpec) -> Result<QuantizedLayers> {
    let cfg = model.cfg;
    let mut rng = Rng::new(spec.seed).substream(1);
    let len = cfg.max_ctx.min(32);
    let seqs: Vec<Vec<u32>> = (0..spec.calib_samples).map(|_| random_tokens(&mut rng, len, cfg.vocab)).collect();
    let calib = collect_calibration(model, &seqs)?;
    Ok(quantize_model(model, &calib, &spec.quant_recipe)?.0)
}

/// Builds the runtime for one sweep point.
pub fn build_point(model: &Model<f32>, sparsity: f64, quant: bool, spec: &SweepSpec) -> Result<ToyTransformer> {
    let pruned = prune_to_level(model, sparsity)?;
    let backend = backend_for(sparsity, quant);
    let layers = if quant { Some(quantize_for_bench(&pruned, spec)?) } else { None };
    ToyTransformer::new(&pruned, backend, spec.layout, layers.as_ref())
}

fn request(model: &Model<f32>, spec: &SweepSpec) -> Result<GenRequest> {
    spec.validate()?;
    let cfg = model.cfg;
    let needed = spec.prefill_len + spec.decode_len;
    if needed > cfg.max_ctx {
        return Err(Error::ContextOverflow { len: needed, max: cfg.max_ctx });
    }
    let prompt = random_tokens(&mut Rng::new(spec.seed), spec.prefill_len, cfg.vocab);
    Ok(GenRequest::greedy(prompt, spec.decode_len + 1))
}

/// One warm-up and `repeats` timed generations; appends a prefill and a
/// decode row.
fn measure(
    report: &mut BenchReport,
    rt: &ToyTransformer,
    req: &GenRequest,
    point: (f64, bool, Backend),
    spec: &SweepSpec,
    clock: &impl Clock,
) -> Result<()> {
    let (sparsity, quant, backend) = point;
    rt.generate(req, clock)?;
    let mut prefill = Vec::with_capacity(spec.repeats);
    let mut decode = Vec::with_capacity(spec.repeats);
    for _ in 0..spec.repeats {
        let res = rt.generate(req, clock)?;
        prefill.push(res.ttft_ns);
        decode.push(res.decode_total_ns());
    }
    let footprint_ratio = rt.footprint_ratio();
    for (phase, samples, tokens) in [(Phase::Prefill, &prefill, spec.prefill_len), (Phase::Decode, &decode, spec.decode_len)] {
        let median_ns = median(samples);
        let flops = rt.linear_flops(tokens);
        let tokens_per_s = if median_ns == 0 { 0.0 } else { tokens as f64 * 1e9 / median_ns as f64 };
        report.rows.push(BenchRow {
            phase,
            sparsity,
            quant,
            backend,
            median_ns,
            tokens_per_s,
            useful_flops: flops.useful_flops,
            dense_equiv_flops: flops.dense_equiv_flops,
            footprint_ratio,
        });
    }
    Ok(())
}

/// Runs every (level, quant) point sequentially, each with one warm-up and
/// `repeats` timed greedy generations from the same random prompt.
pub fn run_sweep(model: &Model<f32>, spec: &SweepSpec, clock: &impl Clock) -> Result<BenchReport> {
    let req = request(model, spec)?;
    let mut report = BenchReport::default();
    for &level in &spec.levels {
        for &quant in spec.quant.variants() {
            let rt = build_point(model, level, quant, spec)?;
            measure(&mut report, &rt, &req, (level, quant, backend_for(level, quant)), spec, clock)?;
        }
    }
    Ok(report)
}

/// Times `model` as stored, once per backend. INT8 backends use `quant`
/// when given and otherwise quantize on the fly; the sparsity column is the
/// fraction of zero weights over all linear layers.
pub fn bench_model(
    model: &Model<f32>,
    quant: Option<&QuantizedLayers>,
    backends: &[Backend],
    spec: &SweepSpec,
    clock: &impl Clock,
) -> Result<BenchReport> {
    if backends.is_empty() {
        return Err(Error::invalid("backends", "need at least one backend"));
    }
    let req = request(model, spec)?;
    let (mut zeros, mut total) = (0usize, 0usize);
    for name in model.linear_names() {
        let w = model.linear(&name)?;
        zeros += w.as_slice().iter().filter(|v| v.to_bits() == 0).count();
        total += w.len();
    }
    let sparsity = zeros as f64 / total as f64;
    let fresh = match quant {
        None if backends.iter().any(|b| b.is_quantized()) => Some(quantize_for_bench(model, spec)?),
        _ => None,
    };
    let layers = quant.or(fresh.as_ref());
    let mut report = BenchReport::default();
    for &backend in backends {
        let rt = ToyTransformer::new(model, backend, spec.layout, layers)?;
        measure(&mut report, &rt, &req, (sparsity, backend.is_quantized(), backend), spec, clock)?;
    }
    Ok(report)
}

/// Kernel call timed by [`bench_kernel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Workload {
    Gemv,
    /// `n` input vectors per call, token-major.
    GemmBatch(usize),
}

impl Workload {
    pub fn batch(self) -> usize {
        match self {
            Workload::Gemv => 1,
            Workload::GemmBatch(n) => n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelTiming {
    pub median_ns: u64,
    pub repeats: usize,
    /// Compressed weights plus input and output activations of one call.
    pub bytes_touched: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelBench {
    pub rows: usize,
    pub cols: usize,
    pub layout: BlockLayout,
    pub dtype: Dtype,
    pub sparsity: f64,
    pub workload: Workload,
    pub flops: FlopCounter,
    pub timing: KernelTiming,
}

pub const KERNEL_CSV_HEADER: &str = "shape,layout,dtype,sparsity,useful_flops,dense_equiv_flops,median_ns,bytes_touched";

impl KernelBench {
    pub fn csv_row(&self) -> String {
        format!(
            "{}x{},{},{},{:.6},{},{},{},{}",
            self.rows,
            self.cols,
            self.layout,
            self.dtype.name(),
            self.sparsity,
            self.flops.useful_flops,
            self.flops.dense_equiv_flops,
            self.timing.median_ns,
            self.timing.bytes_touched
        )
    }
}

/// Element types with a sparse kernel to time.
pub trait KernelOperand: Element {
    type Acc: Copy + Default;
    fn sample(rng: &mut Rng) -> Self;
    fn check(sm: &SparseMatrix<Self>) -> Result<()>;
    /// Token-major product of `xs` into `out` (`tokens × rows`).
    fn run(sm: &SparseMatrix<Self>, xs: &Matrix<Self>, out: &mut [Self::Acc]);
}

impl KernelOperand for f32 {
    type Acc = f32;

    fn sample(rng: &mut Rng) -> Self {
        rng.normal_f32()
    }

    fn check(_: &SparseMatrix<Self>) -> Result<()> {
        Ok(())
    }

    fn run(sm: &SparseMatrix<f32>, xs: &Matrix<f32>, out: &mut [f32]) {
        if xs.rows() == 1 {
            gemv_into(sm, xs.row(0), out);
        } else {
            gemm_tokens_into(sm, xs, out);
        }
    }
}

impl KernelOperand for i8 {
    type Acc = i32;

    fn sample(rng: &mut Rng) -> Self {
        (rng.below(255) as i32 - 127) as i8
    }

    fn check(sm: &SparseMatrix<Self>) -> Result<()> {
        if sm.cols() > I8_MAX_COLS {
            return Err(Error::invalid("cols", format!("int8 accumulation is exact only up to {I8_MAX_COLS} columns")));
        }
        Ok(())
    }

    fn run(sm: &SparseMatrix<i8>, xs: &Matrix<i8>, out: &mut [i32]) {
        let rows = sm.rows();
        for t in 0..xs.rows() {
            gemv_i8_into(sm, xs.row(t), &mut out[t * rows..(t + 1) * rows]);
        }
    }
}

/// Median wall time of `repeats` kernel calls after one warm-up call, on
/// fixed pseudo-random inputs.
pub fn bench_kernel<T: KernelOperand>(
    sm: &SparseMatrix<T>,
    workload: Workload,
    repeats: usize,
    clock: &impl Clock,
) -> Result<KernelBench> {
    if repeats < 5 {
        return Err(Error::invalid("repeats", "must be >= 5"));
    }
    let batch = workload.batch();
    if batch == 0 {
        return Err(Error::invalid("workload", "batch must be >= 1"));
    }
    T::check(sm)?;
    let (rows, cols) = (sm.rows(), sm.cols());
    let mut rng = Rng::new(0);
    let xs = Matrix::from_fn(batch, cols, |_, _| T::sample(&mut rng));
    let mut out = vec![T::Acc::default(); batch * rows];
    T::run(sm, &xs, &mut out);
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = clock.now_ns();
        T::run(sm, core::hint::black_box(&xs), &mut out);
        core::hint::black_box(&out);
        samples.push(clock.now_ns().saturating_sub(t0));
    }
    let bytes_touched = sm.footprint().compressed_bytes
        + batch * (cols * T::DTYPE.size() + rows * core::mem::size_of::<T::Acc>());
    Ok(KernelBench {
        rows,
        cols,
        layout: sm.layout(),
        dtype: T::DTYPE,
        sparsity: sm.sparsity(),
        workload,
        flops: FlopCounter::for_sparse(sm, batch),
        timing: KernelTiming { median_ns: median(&samples), repeats, bytes_touched },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::runtime::NoClock;
    use core::cell::Cell;

    struct Ticker(Cell<u64>);

    impl Clock for Ticker {
        fn now_ns(&self) -> u64 {
            let t = self.0.get() + 1000;
            self.0.set(t);
            t
        }
    }

    fn small() -> (Model<f32>, SweepSpec) {
        let cfg = ModelConfig { vocab: 16, d_model: 32, n_layers: 1, n_heads: 2, d_ff: 64, max_ctx: 24 };
        let model = Model::init(cfg, &mut Rng::new(3)).unwrap();
        let spec = SweepSpec { prefill_len: 8, decode_len: 4, ..SweepSpec::default() };
        (model, spec)
    }

    #[test]
    fn rows_cover_levels_quant_and_phases() {
        let (model, spec) = small();
        let report = run_sweep(&model, &spec, &Ticker(Cell::new(0))).unwrap();
        assert_eq!(report.rows.len(), 3 * 2 * 2);
        let csv = report.to_csv();
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        assert_eq!(csv.lines().count(), 13);
        for r in &report.rows {
            assert!(r.tokens_per_s > 0.0);
            assert_eq!(r.backend, backend_for(r.sparsity, r.quant));
        }
        for quant in [false, true] {
            let useful: Vec<u64> =
                spec.levels.iter().map(|&s| report.find(Phase::Decode, s, quant).unwrap().useful_flops).collect();
            assert!(useful.windows(2).all(|w| w[1] < w[0]), "{useful:?}");
        }
        let r = report.find(Phase::Prefill, 0.5, false).unwrap();
        assert_eq!(r.useful_flops * 2, r.dense_equiv_flops);
    }

    #[test]
    fn baseline_only() {
        let (model, mut spec) = small();
        spec.levels = alloc::vec![0.0];
        spec.quant = QuantSetting::Off;
        let report = run_sweep(&model, &spec, &Ticker(Cell::new(0))).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.backend == Backend::Dense && r.footprint_ratio == 1.0));
    }

    #[test]
    fn spec_validation() {
        let (model, spec) = small();
        for bad in [
            SweepSpec { levels: alloc::vec![1.0], ..spec.clone() },
            SweepSpec { levels: alloc::vec![], ..spec.clone() },
            SweepSpec { repeats: 4, ..spec.clone() },
            SweepSpec { prefill_len: 21, ..spec.clone() },
        ] {
            assert!(run_sweep(&model, &bad, &NoClock).is_err());
        }
    }

    #[test]
    fn model_bench_reports_each_backend() {
        let (model, spec) = small();
        let sparse = prune_to_level(&model, 0.5).unwrap();
        let report = bench_model(&sparse, None, &Backend::ALL, &spec, &Ticker(Cell::new(0))).unwrap();
        assert_eq!(report.rows.len(), 8);
        for r in &report.rows {
            assert_eq!(r.sparsity, 0.5);
            assert_eq!(r.quant, r.backend.is_quantized());
        }
        assert!(bench_model(&sparse, None, &[], &spec, &NoClock).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[5, 1, 3]), 3);
        assert_eq!(median(&[4, 1, 3, 2]), 2);
    }

    #[test]
    fn kernel_bench_counts_and_formats() {
        let mut rng = Rng::new(8);
        let w = Matrix::from_fn(64, 128, |_, _| rng.normal_f32());
        let w = prune_magnitude(&w, 0.75, PruneScope::PerLayer).unwrap().0;
        let sm = SparseMatrix::encode(&w, BlockLayout::RowPair16).unwrap();
        let clock = Ticker(Cell::new(0));
        let b = bench_kernel(&sm, Workload::GemmBatch(4), 5, &clock).unwrap();
        assert_eq!(b.flops.useful_flops, 2 * 2048 * 4);
        assert_eq!(b.flops.dense_equiv_flops, 2 * 8192 * 4);
        assert_eq!(b.timing.median_ns, 1000);
        assert_eq!(b.timing.bytes_touched, sm.footprint().compressed_bytes + 4 * (128 * 4 + 64 * 4));
        assert_eq!(b.csv_row(), format!("64x128,rowpair16,f32,0.750000,16384,65536,1000,{}", b.timing.bytes_touched));
        assert_eq!(KERNEL_CSV_HEADER.split(',').count(), b.csv_row().split(',').count());
        let q = SparseMatrix::encode(&w.map(|v| (v * 20.0) as i8), BlockLayout::TILE_16X16).unwrap();
        let bq = bench_kernel(&q, Workload::Gemv, 5, &NoClock).unwrap();
        assert_eq!(bq.dtype, Dtype::I8);
        assert_eq!(bq.flops.useful_flops, 2 * q.nnz() as u64);
        assert!(bench_kernel(&sm, Workload::Gemv, 4, &NoClock).is_err());
        assert!(bench_kernel(&sm, Workload::GemmBatch(0), 5, &NoClock).is_err());
    }
}
