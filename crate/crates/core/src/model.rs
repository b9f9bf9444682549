//! Decoder-only toy transformer with a hand-written backward pass.
//!
//! Pre-norm blocks (RMSNorm, causal multi-head attention, GELU MLP), learned
//! positions and an untied output head. Linear weights are stored
//! `out × in`, activations one token per row.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_transa, matmul_transb, Matrix, Real};

pub const NORM_EPS: f64 = 1e-5;

/// Names of the prunable linears inside each block, in storage order.
pub const BLOCK_LINEARS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_ctx: usize,
}

impl ModelConfig {
    /// Two-layer, 64-wide model used for training experiments.
    pub const fn toy() -> Self {
        ModelConfig { vocab: 64, d_model: 64, n_layers: 2, n_heads: 4, d_ff: 256, max_ctx: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_ctx];
        if dims.contains(&0) {
            return Err(Error::invalid("model config", "every dimension must be >= 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid("n_heads", "must divide d_model"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub norm2: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Real> Block<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Block {
            norm1: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            norm2: Matrix::zeros(1, d),
            w_up: Matrix::zeros(cfg.d_ff, d),
            w_down: Matrix::zeros(d, cfg.d_ff),
        }
    }

    fn linears(&self) -> [&Matrix<T>; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_up, &self.w_down]
    }

    fn linears_mut(&mut self) -> [&mut Matrix<T>; 6] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.w_up, &mut self.w_down]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub cfg: ModelConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_f: Matrix<T>,
    pub head: Matrix<T>,
}

/// Splits `blocks.{i}.{rest}` into `(i, rest)`.
pub fn parse_block_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("blocks.")?;
    let (idx, tail) = rest.split_once('.')?;
    Some((idx.parse().ok()?, tail))
}

impl<T: Real> Model<T> {
    /// All-zero parameters; doubles as a gradient buffer.
    pub fn zeros(cfg: ModelConfig) -> Self {
        Model {
            cfg,
            tok_emb: Matrix::zeros(cfg.vocab, cfg.d_model),
            pos_emb: Matrix::zeros(cfg.max_ctx, cfg.d_model),
            blocks: (0..cfg.n_layers).map(|_| Block::zeros(&cfg)).collect(),
            norm_f: Matrix::zeros(1, cfg.d_model),
            head: Matrix::zeros(cfg.vocab, cfg.d_model),
        }
    }

    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut m = Self::zeros(cfg);
        let mut fill = |w: &mut Matrix<T>, std: f64| {
            for v in w.as_mut_slice() {
                *v = T::lit(rng.normal() * std);
            }
        };
        fill(&mut m.tok_emb, 0.1);
        fill(&mut m.pos_emb, 0.1);
        let depth = libm::sqrt(2.0 * cfg.n_layers as f64);
        for b in &mut m.blocks {
            let d = cfg.d_model as f64;
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.w_up] {
                fill(w, 1.0 / libm::sqrt(d));
            }
            fill(&mut b.wo, 1.0 / libm::sqrt(d) / depth);
            fill(&mut b.w_down, 1.0 / libm::sqrt(cfg.d_ff as f64) / depth);
            b.norm1.as_mut_slice().fill(T::one());
            b.norm2.as_mut_slice().fill(T::one());
        }
        m.norm_f.as_mut_slice().fill(T::one());
        fill(&mut m.head, 1.0 / libm::sqrt(cfg.d_model as f64));
        Ok(m)
    }

    /// Every parameter tensor with its name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![(String::from("tok_emb"), &self.tok_emb), (String::from("pos_emb"), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm1"), &b.norm1));
            for (name, w) in BLOCK_LINEARS.iter().zip(b.linears()).take(4) {
                out.push((format!("blocks.{i}.{name}"), w));
            }
            out.push((format!("blocks.{i}.norm2"), &b.norm2));
            for (name, w) in BLOCK_LINEARS.iter().zip(b.linears()).skip(4) {
                out.push((format!("blocks.{i}.{name}"), w));
            }
        }
        out.push((String::from("norm_f"), &self.norm_f));
        out.push((String::from("head"), &self.head));
        out
    }

    /// Mutable counterpart of [`Model::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = vec![(String::from("tok_emb"), &mut self.tok_emb), (String::from("pos_emb"), &mut self.pos_emb)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let Block { norm1, wq, wk, wv, wo, norm2, w_up, w_down } = b;
            out.push((format!("blocks.{i}.norm1"), norm1));
            for (name, w) in BLOCK_LINEARS.iter().zip([wq, wk, wv, wo]) {
                out.push((format!("blocks.{i}.{name}"), w));
            }
            out.push((format!("blocks.{i}.norm2"), norm2));
            for (name, w) in BLOCK_LINEARS[4..].iter().zip([w_up, w_down]) {
                out.push((format!("blocks.{i}.{name}"), w));
            }
        }
        out.push((String::from("norm_f"), &mut self.norm_f));
        out.push((String::from("head"), &mut self.head));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix<T>> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Names of the attention and MLP linears, the layers that get pruned
    /// and quantized.
    pub fn linear_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| BLOCK_LINEARS.iter().map(move |n| format!("blocks.{i}.{n}")))
            .collect()
    }

    pub fn linear(&self, name: &str) -> Result<&Matrix<T>> {
        let (i, rest) = parse_block_name(name).ok_or_else(|| Error::UnknownLayer(name.into()))?;
        let k = BLOCK_LINEARS.iter().position(|n| *n == rest).ok_or_else(|| Error::UnknownLayer(name.into()))?;
        let b = self.blocks.get(i).ok_or_else(|| Error::UnknownLayer(name.into()))?;
        Ok(b.linears()[k])
    }

    pub fn linear_mut(&mut self, name: &str) -> Result<&mut Matrix<T>> {
        let (i, rest) = parse_block_name(name).ok_or_else(|| Error::UnknownLayer(name.into()))?;
        let k = BLOCK_LINEARS.iter().position(|n| *n == rest).ok_or_else(|| Error::UnknownLayer(name.into()))?;
        let b = self.blocks.get_mut(i).ok_or_else(|| Error::UnknownLayer(name.into()))?;
        let [a, b2, c, d, e, f] = b.linears_mut();
        Ok([a, b2, c, d, e, f].into_iter().nth(k).expect("index in range"))
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let c = |m: &Matrix<T>| m.cast::<U>();
        Model {
            cfg: self.cfg,
            tok_emb: c(&self.tok_emb),
            pos_emb: c(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1: c(&b.norm1),
                    wq: c(&b.wq),
                    wk: c(&b.wk),
                    wv: c(&b.wv),
                    wo: c(&b.wo),
                    norm2: c(&b.norm2),
                    w_up: c(&b.w_up),
                    w_down: c(&b.w_down),
                })
                .collect(),
            norm_f: c(&self.norm_f),
            head: c(&self.head),
        }
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: T, other: &Model<T>) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x = *x + alpha * y;
            }
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, m)| m.as_slice().iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("tokens", "need at least one token"));
        }
        if tokens.len() > self.cfg.max_ctx {
            return Err(Error::ContextOverflow { len: tokens.len(), max: self.cfg.max_ctx });
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::invalid("tokens", format!("id {t} outside vocabulary of {}", self.cfg.vocab)));
        }
        Ok(())
    }

    /// Full causal forward pass, keeping every intermediate for backward.
    pub fn forward(&self, tokens: &[u32]) -> Result<Trace<T>> {
        self.check_tokens(tokens)?;
        let cfg = &self.cfg;
        let t_len = tokens.len();
        let mut h = Matrix::from_fn(t_len, cfg.d_model, |t, j| {
            self.tok_emb.get(tokens[t] as usize, j) + self.pos_emb.get(t, j)
        });
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for b in &self.blocks {
            let (a, r1) = rmsnorm(&h, &b.norm1);
            let q = matmul_transb(&a, &b.wq)?;
            let k = matmul_transb(&a, &b.wk)?;
            let v = matmul_transb(&a, &b.wv)?;
            let (att, probs) = attention(&q, &k, &v, cfg.n_heads);
            let mut h_mid = matmul_transb(&att, &b.wo)?;
            add_into(&mut h_mid, &h);
            let (bn, r2) = rmsnorm(&h_mid, &b.norm2);
            let u = matmul_transb(&bn, &b.w_up)?;
            let g = u.map(gelu);
            let mut h_out = matmul_transb(&g, &b.w_down)?;
            add_into(&mut h_out, &h_mid);
            let h_in = core::mem::replace(&mut h, h_out.clone());
            blocks.push(BlockTrace { h_in, r1, a, q, k, v, probs, att, h_mid, r2, b: bn, u, g, h_out });
        }
        let (z, rf) = rmsnorm(&h, &self.norm_f);
        let logits = matmul_transb(&z, &self.head)?;
        Ok(Trace { tokens: tokens.to_vec(), blocks, h_final: h, rf, z, logits })
    }

    /// Logits of every position.
    pub fn logits(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        Ok(self.forward(tokens)?.logits)
    }

    /// Gradient of a scalar objective given its gradient with respect to
    /// the logits and, optionally, to each block's output features.
    pub fn backward(&self, tr: &Trace<T>, dlogits: &Matrix<T>, dfeats: Option<&[Matrix<T>]>) -> Result<Model<T>> {
        let cfg = &self.cfg;
        let mut g = Model::zeros(self.cfg);
        g.head = matmul_transa(dlogits, &tr.z)?;
        let dz = matmul(dlogits, &self.head)?;
        let mut dh = rmsnorm_back(&tr.h_final, &tr.rf, &self.norm_f, &dz, &mut g.norm_f);
        for (l, (b, bt)) in self.blocks.iter().zip(&tr.blocks).enumerate().rev() {
            if let Some(df) = dfeats {
                add_into(&mut dh, &df[l]);
            }
            let gb = &mut g.blocks[l];
            gb.w_down = matmul_transa(&dh, &bt.g)?;
            let mut du = matmul(&dh, &b.w_down)?;
            for (d, &u) in du.as_mut_slice().iter_mut().zip(bt.u.as_slice()) {
                *d = *d * gelu_grad(u);
            }
            gb.w_up = matmul_transa(&du, &bt.b)?;
            let dbn = matmul(&du, &b.w_up)?;
            let mut dh_mid = rmsnorm_back(&bt.h_mid, &bt.r2, &b.norm2, &dbn, &mut gb.norm2);
            add_into(&mut dh_mid, &dh);
            gb.wo = matmul_transa(&dh_mid, &bt.att)?;
            let datt = matmul(&dh_mid, &b.wo)?;
            let (dq, dk, dv) = attention_back(&bt.q, &bt.k, &bt.v, &bt.probs, &datt, cfg.n_heads);
            gb.wq = matmul_transa(&dq, &bt.a)?;
            gb.wk = matmul_transa(&dk, &bt.a)?;
            gb.wv = matmul_transa(&dv, &bt.a)?;
            let mut da = matmul(&dq, &b.wq)?;
            add_into(&mut da, &matmul(&dk, &b.wk)?);
            add_into(&mut da, &matmul(&dv, &b.wv)?);
            let mut dh_in = rmsnorm_back(&bt.h_in, &bt.r1, &b.norm1, &da, &mut gb.norm1);
            add_into(&mut dh_in, &dh_mid);
            dh = dh_in;
        }
        for (t, &tok) in tr.tokens.iter().enumerate() {
            let src = dh.row(t);
            for (e, &d) in g.tok_emb.row_mut(tok as usize).iter_mut().zip(src) {
                *e = *e + d;
            }
            for (p, &d) in g.pos_emb.row_mut(t).iter_mut().zip(src) {
                *p = *p + d;
            }
        }
        Ok(g)
    }

    /// Mean next-token cross entropy of `tokens[1..]` given `tokens[..n-1]`.
    pub fn loss(&self, tokens: &[u32]) -> Result<f64> {
        let (inputs, targets) = split_targets(tokens)?;
        let tr = self.forward(inputs)?;
        Ok(cross_entropy(&tr.logits, targets).0)
    }

    /// Loss and parameter gradient of [`Model::loss`].
    pub fn loss_and_grad(&self, tokens: &[u32]) -> Result<(f64, Model<T>)> {
        let (inputs, targets) = split_targets(tokens)?;
        let tr = self.forward(inputs)?;
        let (loss, dlogits) = cross_entropy(&tr.logits, targets);
        Ok((loss, self.backward(&tr, &dlogits, None)?))
    }
}

/// Inputs and next-token targets of a training sequence.
pub fn split_targets(tokens: &[u32]) -> Result<(&[u32], &[u32])> {
    if tokens.len() < 2 {
        return Err(Error::invalid("tokens", "a training sequence needs at least two tokens"));
    }
    Ok((&tokens[..tokens.len() - 1], &tokens[1..]))
}

/// Intermediates of one block.
#[derive(Clone, Debug)]
pub struct BlockTrace<T> {
    pub h_in: Matrix<T>,
    pub r1: Vec<T>,
    /// Normalized input of the q/k/v projections.
    pub a: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub probs: Vec<Matrix<T>>,
    /// Concatenated head outputs, the input of the output projection.
    pub att: Matrix<T>,
    pub h_mid: Matrix<T>,
    pub r2: Vec<T>,
    /// Normalized input of the up projection.
    pub b: Matrix<T>,
    pub u: Matrix<T>,
    /// Activated hidden layer, the input of the down projection.
    pub g: Matrix<T>,
    pub h_out: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub tokens: Vec<u32>,
    pub blocks: Vec<BlockTrace<T>>,
    pub h_final: Matrix<T>,
    pub rf: Vec<T>,
    pub z: Matrix<T>,
    pub logits: Matrix<T>,
}

impl<T: Real> Trace<T> {
    /// Output of every block, the features matched by distillation.
    pub fn features(&self) -> Vec<Matrix<T>> {
        self.blocks.iter().map(|b| b.h_out.clone()).collect()
    }

    /// Input activations of the named linear layer.
    pub fn linear_input(&self, name: &str) -> Result<&Matrix<T>> {
        let (i, rest) = parse_block_name(name).ok_or_else(|| Error::UnknownLayer(name.into()))?;
        let b = self.blocks.get(i).ok_or_else(|| Error::UnknownLayer(name.into()))?;
        match rest {
            "attn.q" | "attn.k" | "attn.v" => Ok(&b.a),
            "attn.o" => Ok(&b.att),
            "mlp.up" => Ok(&b.b),
            "mlp.down" => Ok(&b.g),
            _ => Err(Error::UnknownLayer(name.into())),
        }
    }
}

fn add_into<T: Real>(a: &mut Matrix<T>, b: &Matrix<T>) {
    for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x = *x + y;
    }
}

/// Row-wise `x / rms(x) ⊙ gain`, returning the per-row rms too.
pub fn rmsnorm<T: Real>(x: &Matrix<T>, gain: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut rms = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let row = x.row(t);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::lit(d as f64);
        let r = (ms + T::lit(NORM_EPS)).sqrt();
        for ((o, &v), &g) in out.row_mut(t).iter_mut().zip(row).zip(gain.as_slice()) {
            *o = v / r * g;
        }
        rms.push(r);
    }
    (out, rms)
}

fn rmsnorm_back<T: Real>(x: &Matrix<T>, rms: &[T], gain: &Matrix<T>, dy: &Matrix<T>, dgain: &mut Matrix<T>) -> Matrix<T> {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    let g = gain.as_slice();
    for t in 0..x.rows() {
        let (xr, dyr, r) = (x.row(t), dy.row(t), rms[t]);
        for ((dg, &dyj), &xj) in dgain.as_mut_slice().iter_mut().zip(dyr).zip(xr) {
            *dg = *dg + dyj * xj / r;
        }
        let proj = xr.iter().zip(dyr).zip(g).map(|((&xj, &dyj), &gj)| xj * dyj * gj).sum::<T>();
        let c = proj / (T::lit(d as f64) * r * r * r);
        for (((o, &xj), &dyj), &gj) in dx.row_mut(t).iter_mut().zip(xr).zip(dyr).zip(g) {
            *o = gj * dyj / r - xj * c;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(u: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (u + T::lit(GELU_A) * u * u * u);
    half * u * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(u: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (u + T::lit(GELU_A) * u * u * u);
    let th = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * u * u);
    half * (T::one() + th) + half * u * (T::one() - th * th) * dinner
}

/// Causal multi-head attention over full sequences; returns the
/// concatenated head outputs and each head's probability matrix.
fn attention<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, heads: usize) -> (Matrix<T>, Vec<Matrix<T>>) {
    let (t_len, d) = q.shape();
    let hd = d / heads;
    let scale = T::lit(1.0 / libm::sqrt(hd as f64));
    let mut out = Matrix::zeros(t_len, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut p = Matrix::zeros(t_len, t_len);
        for i in 0..t_len {
            let qi = &q.row(i)[cols.clone()];
            let row = &mut p.row_mut(i)[..=i];
            for (j, s) in row.iter_mut().enumerate() {
                *s = crate::tensor::dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(row);
            let orow = &mut out.row_mut(i)[cols.clone()];
            for (j, &pij) in row.iter().enumerate() {
                for (o, &vj) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o = *o + pij * vj;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

fn attention_back<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    probs: &[Matrix<T>],
    dout: &Matrix<T>,
    heads: usize,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (t_len, d) = q.shape();
    let hd = d / heads;
    let scale = T::lit(1.0 / libm::sqrt(hd as f64));
    let mut dq = Matrix::zeros(t_len, d);
    let mut dk = Matrix::zeros(t_len, d);
    let mut dv = Matrix::zeros(t_len, d);
    let mut ds = vec![T::zero(); t_len];
    for (h, p) in probs.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..t_len {
            let pi = &p.row(i)[..=i];
            let doi = &dout.row(i)[cols.clone()];
            let mut acc = T::zero();
            for j in 0..=i {
                let dp = crate::tensor::dot(doi, &v.row(j)[cols.clone()]);
                ds[j] = dp;
                acc = acc + dp * pi[j];
                for (dvj, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(doi) {
                    *dvj = *dvj + pi[j] * g;
                }
            }
            for j in 0..=i {
                let s = pi[j] * (ds[j] - acc) * scale;
                if s == T::zero() {
                    continue;
                }
                for (a, &kj) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&k.row(j)[cols.clone()]) {
                    *a = *a + s * kj;
                }
                for (a, &qi) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&q.row(i)[cols.clone()]) {
                    *a = *a + s * qi;
                }
            }
        }
    }
    (dq, dk, dv)
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Mean cross entropy over rows and its gradient with respect to logits.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, targets: &[u32]) -> (f64, Matrix<T>) {
    let n = logits.rows();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let inv = T::lit(1.0 / n as f64);
    for (t, &y) in targets.iter().enumerate().take(n) {
        let row = grad.row_mut(t);
        softmax_in_place(row);
        loss -= libm::log(row[y as usize].as_f64().max(f64::MIN_POSITIVE));
        row[y as usize] = row[y as usize] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig { vocab: 11, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_ctx: 8 }
    }

    pub(crate) fn finite_difference_check(model: &Model<f64>, objective: impl Fn(&Model<f64>) -> f64, grad: &Model<f64>) {
        let eps = 1e-5;
        let mut rng = Rng::new(77);
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let len = model.tensor(&name).unwrap().len();
            for _ in 0..4 {
                let idx = rng.below(len);
                let mut plus = model.clone();
                let mut minus = model.clone();
                bump(&mut plus, &name, idx, eps);
                bump(&mut minus, &name, idx, -eps);
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let an = grad.tensor(&name).unwrap().as_slice()[idx];
                let scale = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / scale <= 1e-4 || (fd - an).abs() < 1e-9, "{name}[{idx}]: fd {fd} analytic {an}");
            }
        }
    }

    fn bump(m: &mut Model<f64>, name: &str, idx: usize, by: f64) {
        for (n, t) in m.tensors_mut() {
            if n == name {
                t.as_mut_slice()[idx] += by;
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let m = Model::<f64>::init(tiny(), &mut rng).unwrap();
        let tokens = [1u32, 4, 2, 9, 9, 0, 3];
        let (_, g) = m.loss_and_grad(&tokens).unwrap();
        finite_difference_check(&m, |mm| mm.loss(&tokens).unwrap(), &g);
    }

    #[test]
    fn names_and_lookup_agree() {
        let mut rng = Rng::new(2);
        let mut m = Model::<f32>::init(tiny(), &mut rng).unwrap();
        assert_eq!(m.linear_names().len(), 12);
        assert_eq!(m.tensors().len(), 2 + 2 * 8 + 2);
        let before = m.linear("blocks.1.mlp.up").unwrap().clone();
        assert_eq!(m.tensor("blocks.1.mlp.up").unwrap(), &before);
        m.linear_mut("blocks.1.mlp.up").unwrap().set(0, 0, 42.0);
        assert_eq!(m.tensor("blocks.1.mlp.up").unwrap().get(0, 0), 42.0);
        assert!(m.linear("blocks.2.mlp.up").is_err());
        assert!(m.linear("head").is_err());
        assert_eq!(m.param_count(), m.tensors().iter().map(|(_, t)| t.len()).sum::<usize>());
    }

    #[test]
    fn causal_prefix_logits_do_not_depend_on_the_future() {
        let mut rng = Rng::new(3);
        let m = Model::<f32>::init(tiny(), &mut rng).unwrap();
        let a = m.logits(&[1, 2, 3, 4]).unwrap();
        let b = m.logits(&[1, 2, 3, 7, 7, 7]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert!(matches!(m.logits(&[0; 9]), Err(Error::ContextOverflow { .. })));
        assert!(m.logits(&[11]).is_err());
    }
}
