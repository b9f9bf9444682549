//! Inference runtime: prefill and cached autoregressive decode over a
//! [`Model`] whose linear layers run on dense, compressed or INT8 kernels.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{BlockLayout, SparseMatrix};
use crate::compress::apply::QuantizedLayers;
use crate::compress::quant::{to_i8, QuantizedMatrix};
use crate::kernels::{self, FlopCounter};
use crate::model::{gelu, rmsnorm, softmax_in_place, Model, ModelConfig};
use crate::tensor::{dot, Matrix};
use crate::{Error, Result};

/// Monotonic nanosecond time source.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// A clock that never advances.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ns(&self) -> u64 {
        0
    }
}

/// Kernel family executing one linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Backend {
    Dense,
    Sparse,
    Int8,
    SparseInt8,
}

impl Backend {
    pub const ALL: [Backend; 4] = [Backend::Dense, Backend::Sparse, Backend::Int8, Backend::SparseInt8];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Dense => "dense",
            Backend::Sparse => "sparse",
            Backend::Int8 => "int8",
            Backend::SparseInt8 => "sparse_int8",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, Backend::Int8 | Backend::SparseInt8)
    }

    /// The float backend used for layers left out of quantization.
    pub fn float_fallback(self) -> Backend {
        match self {
            Backend::Int8 => Backend::Dense,
            Backend::SparseInt8 => Backend::Sparse,
            b => b,
        }
    }
}

/// Input side of an INT8 layer: smoothing, static activation scale and the
/// combined output scale per row.
#[derive(Clone, Debug)]
struct Requant {
    smoothing: Option<Vec<f32>>,
    inv_act: f32,
    out_scales: Vec<f32>,
}

impl Requant {
    fn new(qm: &QuantizedMatrix) -> Self {
        Requant {
            smoothing: qm.smoothing.clone(),
            inv_act: 1.0 / qm.act_scale,
            out_scales: qm.scales.iter().map(|&s| s * qm.act_scale).collect(),
        }
    }

    fn quantize(&self, x: &[f32], out: &mut [i8]) {
        match &self.smoothing {
            Some(s) => {
                for ((o, &v), &sj) in out.iter_mut().zip(x).zip(s) {
                    *o = to_i8(v / sj * self.inv_act);
                }
            }
            None => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = to_i8(v * self.inv_act);
                }
            }
        }
    }

    fn dequantize(&self, acc: &[i32], y: &mut [f32]) {
        for ((o, &a), &s) in y.iter_mut().zip(acc).zip(&self.out_scales) {
            *o = a as f32 * s;
        }
    }
}

#[derive(Clone, Debug)]
enum LinearOp {
    Dense(Matrix<f32>),
    Sparse(SparseMatrix<f32>),
    Int8(Matrix<i8>, Requant),
    SparseInt8(SparseMatrix<i8>, Requant),
}

impl LinearOp {
    fn build(w: &Matrix<f32>, backend: Backend, layout: BlockLayout, quant: Option<&QuantizedMatrix>) -> Result<Self> {
        Ok(match (backend, quant) {
            (Backend::Dense, _) => LinearOp::Dense(w.clone()),
            (Backend::Sparse, _) => LinearOp::Sparse(SparseMatrix::encode(w, layout)?),
            (Backend::Int8, Some(qm)) => LinearOp::Int8(qm.q.clone(), Requant::new(qm)),
            (Backend::SparseInt8, Some(qm)) => LinearOp::SparseInt8(SparseMatrix::encode(&qm.q, layout)?, Requant::new(qm)),
            (_, None) => return Err(Error::invalid("quant", "INT8 backends need quantized weights")),
        })
    }

    fn backend(&self) -> Backend {
        match self {
            LinearOp::Dense(_) => Backend::Dense,
            LinearOp::Sparse(_) => Backend::Sparse,
            LinearOp::Int8(..) => Backend::Int8,
            LinearOp::SparseInt8(..) => Backend::SparseInt8,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            LinearOp::Dense(w) => w.shape(),
            LinearOp::Sparse(sm) => (sm.rows(), sm.cols()),
            LinearOp::Int8(q, _) => q.shape(),
            LinearOp::SparseInt8(sm, _) => (sm.rows(), sm.cols()),
        }
    }

    fn apply(&self, x: &[f32], y: &mut [f32], scratch: &mut Scratch) {
        match self {
            LinearOp::Dense(w) => kernels::dense_gemv_into(w, x, y),
            LinearOp::Sparse(sm) => kernels::gemv_into(sm, x, y),
            LinearOp::Int8(q, rq) => {
                let (xq, acc) = scratch.take(q.cols(), q.rows());
                rq.quantize(x, xq);
                kernels::dense_gemv_i8_into(q, xq, acc);
                rq.dequantize(acc, y);
            }
            LinearOp::SparseInt8(sm, rq) => {
                let (xq, acc) = scratch.take(sm.cols(), sm.rows());
                rq.quantize(x, xq);
                kernels::gemv_i8_into(sm, xq, acc);
                rq.dequantize(acc, y);
            }
        }
    }

    fn apply_tokens(&self, xs: &Matrix<f32>, scratch: &mut Scratch) -> Matrix<f32> {
        let rows = self.shape().0;
        let mut out = Matrix::zeros(xs.rows(), rows);
        match self {
            LinearOp::Sparse(sm) => kernels::gemm_tokens_into(sm, xs, out.as_mut_slice()),
            _ => {
                for t in 0..xs.rows() {
                    self.apply(xs.row(t), out.row_mut(t), scratch);
                }
            }
        }
        out
    }

    fn flops(&self, tokens: usize) -> FlopCounter {
        match self {
            LinearOp::Dense(w) => FlopCounter::for_dense(w.rows(), w.cols(), tokens),
            LinearOp::Int8(q, _) => FlopCounter::for_dense(q.rows(), q.cols(), tokens),
            LinearOp::Sparse(sm) => FlopCounter::for_sparse(sm, tokens),
            LinearOp::SparseInt8(sm, _) => FlopCounter::for_sparse(sm, tokens),
        }
    }

    /// Bytes of weight storage: values plus bitmasks, excluding scales.
    fn storage_bytes(&self) -> usize {
        match self {
            LinearOp::Dense(w) => w.len() * 4,
            LinearOp::Int8(q, _) => q.len(),
            LinearOp::Sparse(sm) => sm.footprint().compressed_bytes,
            LinearOp::SparseInt8(sm, _) => sm.footprint().compressed_bytes,
        }
    }

    fn sparsity(&self) -> f64 {
        let (rows, cols) = self.shape();
        let zeros = match self {
            LinearOp::Dense(w) => w.as_slice().iter().filter(|v| v.to_bits() == 0).count(),
            LinearOp::Int8(q, _) => q.as_slice().iter().filter(|&&v| v == 0).count(),
            LinearOp::Sparse(sm) => rows * cols - sm.nnz(),
            LinearOp::SparseInt8(sm, _) => rows * cols - sm.nnz(),
        };
        zeros as f64 / (rows * cols) as f64
    }
}

#[derive(Default)]
struct Scratch {
    xq: Vec<i8>,
    acc: Vec<i32>,
}

impl Scratch {
    fn take(&mut self, cols: usize, rows: usize) -> (&mut [i8], &mut [i32]) {
        self.xq.resize(cols, 0);
        self.acc.resize(rows, 0);
        (&mut self.xq[..cols], &mut self.acc[..rows])
    }
}

#[derive(Clone, Debug)]
struct RtBlock {
    norm1: Matrix<f32>,
    linears: [LinearOp; 6],
    norm2: Matrix<f32>,
}

const Q: usize = 0;
const K: usize = 1;
const V: usize = 2;
const O: usize = 3;
const UP: usize = 4;
const DOWN: usize = 5;

/// Per-layer summary of a built runtime.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub backend: Backend,
    pub rows: usize,
    pub cols: usize,
    pub sparsity: f64,
    pub storage_bytes: usize,
}

/// A [`Model`] compiled for inference with one backend tag per linear layer.
/// Embeddings, norms and the output head stay dense fp32.
#[derive(Clone, Debug)]
pub struct ToyTransformer {
    cfg: ModelConfig,
    tok_emb: Matrix<f32>,
    pos_emb: Matrix<f32>,
    blocks: Vec<RtBlock>,
    norm_f: Matrix<f32>,
    head: Matrix<f32>,
}

/// Keys and values of every processed position, per block.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    max_ctx: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let size = cfg.max_ctx * cfg.d_model;
        KvCache {
            keys: vec![vec![0.0; size]; cfg.n_layers],
            values: vec![vec![0.0; size]; cfg.n_layers],
            len: 0,
            max_ctx: cfg.max_ctx,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.max_ctx
    }
}

/// Output of [`ToyTransformer::prefill`].
#[derive(Clone, Debug)]
pub struct Prefill {
    pub cache: KvCache,
    /// Logits of the last prompt position.
    pub logits: Vec<f32>,
    pub elapsed_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenRequest {
    pub prompt: Vec<u32>,
    pub max_new_tokens: usize,
    /// Only greedy decoding is implemented.
    pub greedy: bool,
}

impl GenRequest {
    pub fn greedy(prompt: Vec<u32>, max_new_tokens: usize) -> Self {
        GenRequest { prompt, max_new_tokens, greedy: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenResult {
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<u32>,
    /// Prefill plus selection of the first token.
    pub ttft_ns: u64,
    /// One entry per token after the first.
    pub decode_ns: Vec<u64>,
}

impl GenResult {
    pub fn decode_total_ns(&self) -> u64 {
        self.decode_ns.iter().sum()
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

impl ToyTransformer {
    /// Every linear layer on `backend`. INT8 backends read `quant`; layers
    /// it lists as skipped run on the float fallback.
    pub fn new(model: &Model<f32>, backend: Backend, layout: BlockLayout, quant: Option<&QuantizedLayers>) -> Result<Self> {
        Self::with_plan(model, |_| backend, layout, quant)
    }

    /// One backend per linear layer, chosen by name.
    pub fn with_plan(
        model: &Model<f32>,
        plan: impl Fn(&str) -> Backend,
        layout: BlockLayout,
        quant: Option<&QuantizedLayers>,
    ) -> Result<Self> {
        model.cfg.validate()?;
        let empty = BTreeSet::new();
        let skipped = quant.map_or(&empty, |q| &q.skipped);
        let mut blocks = Vec::with_capacity(model.blocks.len());
        for (i, b) in model.blocks.iter().enumerate() {
            let weights = [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down];
            let mut ops = Vec::with_capacity(6);
            for (suffix, w) in crate::model::BLOCK_LINEARS.iter().zip(weights) {
                let name = format!("blocks.{i}.{suffix}");
                let mut backend = plan(&name);
                if backend.is_quantized() && skipped.contains(&name) {
                    backend = backend.float_fallback();
                }
                let qm = match (backend.is_quantized(), quant) {
                    (true, Some(q)) => Some(q.layers.get(&name).ok_or_else(|| Error::UnknownLayer(name.clone()))?),
                    _ => None,
                };
                if let Some(qm) = qm {
                    if qm.q.shape() != w.shape() {
                        return Err(Error::shape("quantized layer", w.shape(), qm.q.shape()));
                    }
                }
                ops.push(LinearOp::build(w, backend, layout, qm)?);
            }
            let linears: [LinearOp; 6] = ops.try_into().map_err(|_| Error::Degenerate("block linears"))?;
            blocks.push(RtBlock { norm1: b.norm1.clone(), linears, norm2: b.norm2.clone() });
        }
        Ok(ToyTransformer {
            cfg: model.cfg,
            tok_emb: model.tok_emb.clone(),
            pos_emb: model.pos_emb.clone(),
            blocks,
            norm_f: model.norm_f.clone(),
            head: model.head.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, op) in crate::model::BLOCK_LINEARS.iter().zip(&b.linears) {
                let (rows, cols) = op.shape();
                out.push(LayerInfo {
                    name: format!("blocks.{i}.{suffix}"),
                    backend: op.backend(),
                    rows,
                    cols,
                    sparsity: op.sparsity(),
                    storage_bytes: op.storage_bytes(),
                });
            }
        }
        out
    }

    /// FLOPs of all linear layers for `tokens` positions.
    pub fn linear_flops(&self, tokens: usize) -> FlopCounter {
        let mut total = FlopCounter::default();
        for b in &self.blocks {
            for op in &b.linears {
                total.add(op.flops(tokens));
            }
        }
        total
    }

    /// Linear-layer storage relative to fp32 dense storage.
    pub fn footprint_ratio(&self) -> f64 {
        let mut stored = 0usize;
        let mut dense = 0usize;
        for b in &self.blocks {
            for op in &b.linears {
                let (r, c) = op.shape();
                stored += op.storage_bytes();
                dense += r * c * 4;
            }
        }
        stored as f64 / dense as f64
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.cfg)
    }

    fn check_tokens(&self, tokens: &[u32], cache: &KvCache) -> Result<()> {
        let end = cache.len + tokens.len();
        if end > self.cfg.max_ctx {
            return Err(Error::ContextOverflow { len: end, max: self.cfg.max_ctx });
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::invalid("tokens", format!("id {t} outside vocabulary of {}", self.cfg.vocab)));
        }
        if cache.keys.len() != self.cfg.n_layers || cache.max_ctx != self.cfg.max_ctx {
            return Err(Error::invalid("cache", "built for a different model"));
        }
        Ok(())
    }

    /// Runs `tokens` after the cached prefix, appending their keys and
    /// values; returns the final hidden states of the new positions.
    fn advance(&self, tokens: &[u32], cache: &mut KvCache) -> Result<Matrix<f32>> {
        if tokens.is_empty() {
            return Err(Error::invalid("tokens", "need at least one token"));
        }
        self.check_tokens(tokens, cache)?;
        let d = self.cfg.d_model;
        let start = cache.len;
        let mut scratch = Scratch::default();
        let mut h = Matrix::from_fn(tokens.len(), d, |t, j| {
            self.tok_emb.get(tokens[t] as usize, j) + self.pos_emb.get(start + t, j)
        });
        for (l, b) in self.blocks.iter().enumerate() {
            let (a, _) = rmsnorm(&h, &b.norm1);
            let q = b.linears[Q].apply_tokens(&a, &mut scratch);
            let k = b.linears[K].apply_tokens(&a, &mut scratch);
            let v = b.linears[V].apply_tokens(&a, &mut scratch);
            let (keys, values) = (&mut cache.keys[l], &mut cache.values[l]);
            for t in 0..tokens.len() {
                let p = start + t;
                keys[p * d..(p + 1) * d].copy_from_slice(k.row(t));
                values[p * d..(p + 1) * d].copy_from_slice(v.row(t));
            }
            let mut att = Matrix::zeros(tokens.len(), d);
            for t in 0..tokens.len() {
                attend(q.row(t), &keys[..(start + t + 1) * d], &values[..(start + t + 1) * d], self.cfg.n_heads, att.row_mut(t));
            }
            let mut h_mid = b.linears[O].apply_tokens(&att, &mut scratch);
            add_into(&mut h_mid, &h);
            let (bn, _) = rmsnorm(&h_mid, &b.norm2);
            let u = b.linears[UP].apply_tokens(&bn, &mut scratch).map(gelu);
            h = b.linears[DOWN].apply_tokens(&u, &mut scratch);
            add_into(&mut h, &h_mid);
        }
        cache.len += tokens.len();
        Ok(h)
    }

    fn head_logits(&self, h: &[f32]) -> Vec<f32> {
        let row = Matrix::from_vec(1, h.len(), h.to_vec()).expect("non-empty hidden state");
        let (z, _) = rmsnorm(&row, &self.norm_f);
        let mut logits = vec![0.0; self.cfg.vocab];
        kernels::dense_gemv_into(&self.head, z.as_slice(), &mut logits);
        logits
    }

    /// Logits of every position of `tokens`, without keeping a cache.
    pub fn logits_all(&self, tokens: &[u32]) -> Result<Matrix<f32>> {
        let mut cache = self.new_cache();
        let h = self.advance(tokens, &mut cache)?;
        let mut out = Matrix::zeros(tokens.len(), self.cfg.vocab);
        for t in 0..tokens.len() {
            out.row_mut(t).copy_from_slice(&self.head_logits(h.row(t)));
        }
        Ok(out)
    }

    /// Processes a prompt into a fresh cache.
    pub fn prefill(&self, prompt: &[u32], clock: &impl Clock) -> Result<Prefill> {
        let t0 = clock.now_ns();
        let mut cache = self.new_cache();
        let h = self.advance(prompt, &mut cache)?;
        let logits = self.head_logits(h.row(h.rows() - 1));
        let elapsed_ns = clock.now_ns().saturating_sub(t0);
        Ok(Prefill { cache, logits, elapsed_ns })
    }

    /// Appends one token to the cache and returns its logits.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f32>> {
        if cache.len == cache.max_ctx {
            return Err(Error::ContextOverflow { len: cache.len + 1, max: cache.max_ctx });
        }
        let h = self.advance(&[token], cache)?;
        Ok(self.head_logits(h.row(0)))
    }

    fn check_request(&self, req: &GenRequest) -> Result<()> {
        if !req.greedy {
            return Err(Error::invalid("greedy", "only greedy decoding is supported"));
        }
        if req.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens", "must be at least 1"));
        }
        let needed = req.prompt.len() + req.max_new_tokens - 1;
        if needed > self.cfg.max_ctx {
            return Err(Error::ContextOverflow { len: needed, max: self.cfg.max_ctx });
        }
        Ok(())
    }

    /// Greedy generation with the key/value cache.
    pub fn generate(&self, req: &GenRequest, clock: &impl Clock) -> Result<GenResult> {
        self.check_request(req)?;
        let t0 = clock.now_ns();
        let mut pre = self.prefill(&req.prompt, clock)?;
        let mut tok = argmax(&pre.logits);
        let ttft_ns = clock.now_ns().saturating_sub(t0);
        let mut tokens = vec![tok];
        let mut decode_ns = Vec::with_capacity(req.max_new_tokens - 1);
        for _ in 1..req.max_new_tokens {
            let t = clock.now_ns();
            let logits = self.decode_step(&mut pre.cache, tok)?;
            tok = argmax(&logits);
            decode_ns.push(clock.now_ns().saturating_sub(t));
            tokens.push(tok);
        }
        Ok(GenResult { tokens, ttft_ns, decode_ns })
    }

    /// Greedy generation that re-runs the whole prefix for every token.
    pub fn generate_uncached(&self, req: &GenRequest) -> Result<Vec<u32>> {
        self.check_request(req)?;
        let mut seq = req.prompt.clone();
        let mut out = Vec::with_capacity(req.max_new_tokens);
        for _ in 0..req.max_new_tokens {
            let pre = self.prefill(&seq, &NoClock)?;
            let tok = argmax(&pre.logits);
            out.push(tok);
            seq.push(tok);
        }
        Ok(out)
    }
}

fn add_into(a: &mut Matrix<f32>, b: &Matrix<f32>) {
    for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
}

/// Causal attention of one query over `len = keys.len() / d` cached positions.
fn attend(q: &[f32], keys: &[f32], values: &[f32], heads: usize, out: &mut [f32]) {
    let d = q.len();
    let hd = d / heads;
    let len = keys.len() / d;
    let scale = (1.0 / libm::sqrt(hd as f64)) as f32;
    let mut scores = vec![0.0f32; len];
    out.fill(0.0);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = &q[cols.clone()];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &keys[j * d..(j + 1) * d][cols.clone()]) * scale;
        }
        softmax_in_place(&mut scores);
        let oh = &mut out[cols.clone()];
        for (j, &p) in scores.iter().enumerate() {
            for (o, &v) in oh.iter_mut().zip(&values[j * d..(j + 1) * d][cols.clone()]) {
                *o += p * v;
            }
        }
    }
}
