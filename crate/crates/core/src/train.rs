//! Mask-frozen training and SquareHead-style distillation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::compress::mask::SparsityMask;
use crate::error::{Error, Result};
use crate::model::{cross_entropy, split_targets, Model};
use crate::tensor::{Matrix, Real};

/// Update rule applied to the masked gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// `θ ← θ − η·g`.
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer moments; entries at masked positions are held at zero.
#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Model<f32>,
    second: Option<Model<f32>>,
}

/// Zeroes the masked positions of every masked linear of `model`.
pub fn apply_mask<T: Real>(model: &mut Model<T>, mask: &SparsityMask) -> Result<()> {
    for (name, m) in mask.iter() {
        m.apply(model.linear_mut(name)?)?;
    }
    Ok(())
}

/// True when every masked position of `model` is exactly zero.
pub fn mask_holds(model: &Model<f32>, mask: &SparsityMask) -> bool {
    mask.iter().all(|(name, m)| model.linear(name).is_ok_and(|w| m.holds_zeros(w.as_slice())))
}

/// Parameters, frozen mask and schedule of a sparse training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: Model<f32>,
    mask: SparsityMask,
    mask_digest: [u8; 32],
    pub eta: f64,
    pub step: usize,
    pub num_steps: usize,
    optimizer: Optimizer,
    moments: Option<Moments>,
}

impl TrainState {
    /// Requires `theta` to already be zero wherever `mask` prunes.
    pub fn new(theta: Model<f32>, mask: SparsityMask, eta: f64, num_steps: usize) -> Result<Self> {
        for (name, m) in mask.iter() {
            let w = theta.linear(name)?;
            if w.shape() != m.shape() {
                return Err(Error::shape("train mask", w.shape(), m.shape()));
            }
        }
        if !mask_holds(&theta, &mask) {
            return Err(Error::invalid("theta", "weights at masked positions must be zero"));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::invalid("eta", "learning rate must be finite and > 0"));
        }
        let mask_digest = mask.digest();
        Ok(TrainState { theta, mask, mask_digest, eta, step: 0, num_steps, optimizer: Optimizer::Sgd, moments: None })
    }

    /// Applies `mask` to `theta` and freezes it.
    pub fn freeze(mut theta: Model<f32>, mask: SparsityMask, eta: f64, num_steps: usize) -> Result<Self> {
        apply_mask(&mut theta, &mask)?;
        Self::new(theta, mask, eta, num_steps)
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self.moments = None;
        self
    }

    pub fn mask(&self) -> &SparsityMask {
        &self.mask
    }

    /// Digest of the mask taken when the state was frozen.
    pub fn frozen_digest(&self) -> [u8; 32] {
        self.mask_digest
    }

    /// `θ ⊙ (1−M) = 0`.
    pub fn holds_mask(&self) -> bool {
        mask_holds(&self.theta, &self.mask)
    }

    /// Gradient masking, weight update and weight masking for one step.
    pub fn apply_gradient(&mut self, mut grad: Model<f32>, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            let layer = grad.first_non_finite().or_else(|| self.theta.first_non_finite()).unwrap_or_else(|| String::from("loss"));
            return Err(Error::NonFiniteLoss { step: self.step, layer });
        }
        apply_mask(&mut grad, &self.mask)?;
        let eta = self.eta as f32;
        match self.optimizer {
            Optimizer::Sgd => self.theta.axpy(-eta, &grad),
            Optimizer::Momentum { beta } => {
                let m = self.moments.get_or_insert_with(|| Moments { first: Model::zeros(self.theta.cfg), second: None });
                let beta = beta as f32;
                for ((_, mv), (_, g)) in m.first.tensors_mut().into_iter().zip(grad.tensors()) {
                    for (a, &b) in mv.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *a = beta * *a + b;
                    }
                }
                self.theta.axpy(-eta, &m.first);
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let cfg = self.theta.cfg;
                let m = self.moments.get_or_insert_with(|| Moments { first: Model::zeros(cfg), second: Some(Model::zeros(cfg)) });
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - libm::pow(beta1, t as f64);
                let c2 = 1.0 - libm::pow(beta2, t as f64);
                let (b1, b2) = (beta1 as f32, beta2 as f32);
                let second = m.second.as_mut().expect("adam keeps second moments");
                let params = self.theta.tensors_mut();
                for ((((_, p), (_, m1)), (_, m2)), (_, g)) in
                    params.into_iter().zip(m.first.tensors_mut()).zip(second.tensors_mut()).zip(grad.tensors())
                {
                    for (((w, a), v), &gi) in p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(m1.as_mut_slice())
                        .zip(m2.as_mut_slice())
                        .zip(g.as_slice())
                    {
                        *a = b1 * *a + (1.0 - b1) * gi;
                        *v = b2 * *v + (1.0 - b2) * gi * gi;
                        let mh = *a as f64 / c1;
                        let vh = *v as f64 / c2;
                        *w -= (self.eta * mh / (libm::sqrt(vh) + eps)) as f32;
                    }
                }
            }
        }
        apply_mask(&mut self.theta, &self.mask)?;
        self.step += 1;
        Ok(())
    }
}

/// Weights of the distillation terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub lambda_logit: f64,
    pub lambda_feature: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { lambda_logit: 1.0, lambda_feature: 1.0, temperature: 1.0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_logit >= 0.0 && self.lambda_feature >= 0.0) {
            return Err(Error::invalid("distill", "lambdas must be >= 0"));
        }
        if self.lambda_logit == 0.0 && self.lambda_feature == 0.0 {
            return Err(Error::invalid("distill", "at least one lambda must be > 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature", "must be > 0"));
        }
        Ok(())
    }
}

/// Feature-energy floor in the normalized feature loss.
pub const FEATURE_EPS: f64 = 1e-6;

/// Value and gradients of the distillation terms.
#[derive(Clone, Debug)]
pub struct DistillTerms<T> {
    pub logit_kl: f64,
    pub feature: f64,
    /// Gradient of `λ_logit · KL` with respect to the student logits.
    pub dlogits: Matrix<T>,
    /// Gradient of `λ_feature · Σ_l` with respect to each student feature.
    pub dfeats: Vec<Matrix<T>>,
}

fn check_pair<T: Real>(what: &str, layer: usize, s: &Matrix<T>, t: &Matrix<T>) -> Result<()> {
    if s.shape() != t.shape() {
        return Err(Error::invalid(
            "features",
            format!("{what} {layer}: student is {:?}, teacher is {:?}", s.shape(), t.shape()),
        ));
    }
    Ok(())
}

/// Temperature-softened `KL(teacher ‖ student)` averaged over positions
/// plus `Σ_l ‖f_s − f_t‖² / (‖f_t‖² + ε)`, with gradients.
pub fn distill_terms<T: Real>(
    student_feats: &[Matrix<T>],
    teacher_feats: &[Matrix<T>],
    student_logits: &Matrix<T>,
    teacher_logits: &Matrix<T>,
    cfg: &DistillConfig,
) -> Result<DistillTerms<T>> {
    if student_feats.len() != teacher_feats.len() {
        return Err(Error::invalid(
            "features",
            format!("student has {} layers, teacher has {}", student_feats.len(), teacher_feats.len()),
        ));
    }
    check_pair("logits of layer", student_feats.len(), student_logits, teacher_logits)?;
    let tau = cfg.temperature;
    let n = student_logits.rows();
    let mut dlogits = Matrix::zeros(n, student_logits.cols());
    let mut kl = 0.0;
    let mut ps = Vec::new();
    let mut pt = Vec::new();
    for r in 0..n {
        ps.clear();
        pt.clear();
        ps.extend(student_logits.row(r).iter().map(|v| v.as_f64() / tau));
        pt.extend(teacher_logits.row(r).iter().map(|v| v.as_f64() / tau));
        log_softmax(&mut ps);
        log_softmax(&mut pt);
        for ((&a, &b), d) in pt.iter().zip(&ps).zip(dlogits.row_mut(r)) {
            let p_t = libm::exp(a);
            kl += p_t * (a - b);
            *d = T::lit(cfg.lambda_logit * (libm::exp(b) - p_t) / tau / n as f64);
        }
    }
    kl /= n as f64;
    let mut feature = 0.0;
    let mut dfeats = Vec::with_capacity(student_feats.len());
    for (l, (s, t)) in student_feats.iter().zip(teacher_feats).enumerate() {
        check_pair("feature layer", l, s, t)?;
        let energy = t.frobenius_sq() + FEATURE_EPS;
        let mut d = Matrix::zeros(s.rows(), s.cols());
        let mut sq = 0.0;
        for ((&a, &b), o) in s.as_slice().iter().zip(t.as_slice()).zip(d.as_mut_slice()) {
            let diff = a.as_f64() - b.as_f64();
            sq += diff * diff;
            *o = T::lit(cfg.lambda_feature * 2.0 * diff / energy);
        }
        feature += sq / energy;
        dfeats.push(d);
    }
    Ok(DistillTerms { logit_kl: kl, feature, dlogits, dfeats })
}

fn log_softmax(v: &mut [f64]) {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + libm::log(v.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
    for x in v.iter_mut() {
        *x -= lse;
    }
}

/// `task_loss + λ_logit·KL + λ_feature·Σ_l normalized feature error`.
pub fn squarehead_loss<T: Real>(
    student_feats: &[Matrix<T>],
    teacher_feats: &[Matrix<T>],
    student_logits: &Matrix<T>,
    teacher_logits: &Matrix<T>,
    task_loss: f64,
    cfg: &DistillConfig,
) -> Result<f64> {
    let t = distill_terms(student_feats, teacher_feats, student_logits, teacher_logits, cfg)?;
    Ok(task_loss + cfg.lambda_logit * t.logit_kl + cfg.lambda_feature * t.feature)
}

/// Training objective of one step.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Task,
    Distill { teacher: &'a Model<f32>, cfg: DistillConfig },
}

/// Loss and gradient of `objective` on one sequence.
pub fn objective_grad<T: Real>(
    model: &Model<T>,
    tokens: &[u32],
    teacher: Option<(&Model<T>, &DistillConfig)>,
) -> Result<(f64, Model<T>)> {
    let (inputs, targets) = split_targets(tokens)?;
    let tr = model.forward(inputs)?;
    let (task, mut dlogits) = cross_entropy(&tr.logits, targets);
    let Some((teacher, cfg)) = teacher else {
        return Ok((task, model.backward(&tr, &dlogits, None)?));
    };
    let tt = teacher.forward(inputs)?;
    let feats = tr.features();
    let terms = distill_terms(&feats, &tt.features(), &tr.logits, &tt.logits, cfg)?;
    for (a, &b) in dlogits.as_mut_slice().iter_mut().zip(terms.dlogits.as_slice()) {
        *a = *a + b;
    }
    let total = task + cfg.lambda_logit * terms.logit_kl + cfg.lambda_feature * terms.feature;
    Ok((total, model.backward(&tr, &dlogits, Some(&terms.dfeats))?))
}

/// Mean loss and gradient over a batch of sequences.
pub fn batch_grad(model: &Model<f32>, batch: &[Vec<u32>], objective: &Objective) -> Result<(f64, Model<f32>)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "need at least one sequence"));
    }
    let teacher = match objective {
        Objective::Task => None,
        Objective::Distill { teacher, cfg } => {
            cfg.validate()?;
            Some((*teacher, cfg))
        }
    };
    let mut total = 0.0;
    let mut grad = Model::zeros(model.cfg);
    let inv = 1.0 / batch.len() as f32;
    for seq in batch {
        let (l, g) = objective_grad(model, seq, teacher)?;
        total += l;
        grad.axpy(inv, &g);
    }
    Ok((total / batch.len() as f64, grad))
}

/// One iteration of the mask-frozen loop: forward, loss, backward,
/// gradient masking, update, weight masking.
pub fn sparse_train_step(state: &mut TrainState, batch: &[Vec<u32>], objective: &Objective) -> Result<f64> {
    let (loss, grad) = batch_grad(&state.theta, batch, objective)?;
    state.apply_gradient(grad, loss)?;
    Ok(loss)
}

/// Mean next-token loss and top-1 accuracy over evaluation windows.
pub fn evaluate(model: &Model<f32>, windows: &[Vec<u32>]) -> Result<(f64, f64)> {
    let (mut loss, mut hits, mut count) = (0.0, 0usize, 0usize);
    for w in windows {
        let (inputs, targets) = split_targets(w)?;
        let logits = model.logits(inputs)?;
        let (l, _) = cross_entropy(&logits, targets);
        loss += l * targets.len() as f64;
        for (t, &y) in targets.iter().enumerate() {
            let row = logits.row(t);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            hits += (best == y as usize) as usize;
        }
        count += targets.len();
    }
    if count == 0 {
        return Err(Error::invalid("windows", "nothing to evaluate"));
    }
    Ok((loss / count as f64, hits as f64 / count as f64))
}
