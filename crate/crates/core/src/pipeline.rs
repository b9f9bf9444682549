//! Pretraining, iterative pruning and the four sparse fine-tuning modes.

use alloc::vec::Vec;

use crate::compress::apply::{build_profile, collect_calibration, prune_model, PruneRecipe};
use crate::compress::mask::SparsityMask;
use crate::data::{eval_windows, window, DataMixture, TaskData};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;
use crate::train::{evaluate, sparse_train_step, DistillConfig, Objective, Optimizer, TrainState};

/// Schedule and batch shape of a training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Tokens per training window, including the final target.
    pub seq_len: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Steps between evaluations when training to convergence.
    pub eval_every: usize,
    /// Evaluations without improvement that count as converged.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 500, batch: 4, seq_len: 48, lr: 3e-3, optimizer: Optimizer::adam(), eval_every: 50, patience: 5 }
    }
}

/// Runs `steps` mask-frozen steps on batches drawn by `sample`.
pub fn train_steps(
    state: &mut TrainState,
    steps: usize,
    rng: &mut Rng,
    mut sample: impl FnMut(&mut Rng) -> Vec<Vec<u32>>,
    objective: &Objective,
    mut after_step: impl FnMut(&TrainState, f64),
) -> Result<()> {
    for _ in 0..steps {
        let batch = sample(rng);
        let loss = sparse_train_step(state, &batch, objective)?;
        after_step(state, loss);
    }
    Ok(())
}

/// Trains until the evaluation loss has not improved for `patience`
/// evaluations or `max_steps` is reached; keeps the best evaluated
/// parameters. Returns the steps taken.
pub fn train_until_converged(
    state: &mut TrainState,
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut sample: impl FnMut(&mut Rng) -> Vec<Vec<u32>>,
    objective: &Objective,
    eval: &[Vec<u32>],
) -> Result<usize> {
    let every = cfg.eval_every.max(1);
    let mut best = (evaluate(&state.theta, eval)?.0, state.theta.clone());
    let mut stale = 0;
    let mut taken = 0;
    while taken < cfg.steps && stale < cfg.patience {
        let n = every.min(cfg.steps - taken);
        train_steps(state, n, rng, &mut sample, objective, |_, _| {})?;
        taken += n;
        let loss = evaluate(&state.theta, eval)?.0;
        if loss < best.0 {
            best = (loss, state.theta.clone());
            stale = 0;
        } else {
            stale += 1;
        }
    }
    state.theta = best.1;
    Ok(taken)
}

/// Prunes to each target in turn and trains in between; zeros of earlier
/// stages stay zero. Returns the model and mask after every stage.
pub fn iterative_prune_schedule(
    model: &Model<f32>,
    targets: &[f64],
    mut prune: impl FnMut(&Model<f32>, f64, Option<&SparsityMask>) -> Result<(Model<f32>, SparsityMask)>,
    mut train: impl FnMut(TrainState) -> Result<TrainState>,
    eta: f64,
) -> Result<Vec<(Model<f32>, SparsityMask)>> {
    if targets.is_empty() {
        return Err(Error::invalid("targets", "need at least one sparsity target"));
    }
    if targets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("targets", "sparsity targets must be strictly increasing"));
    }
    let mut stages: Vec<(Model<f32>, SparsityMask)> = Vec::new();
    let mut current = model.clone();
    for &t in targets {
        let (pruned, mask) = prune(&current, t, stages.last().map(|(_, m)| m))?;
        let state = train(TrainState::new(pruned, mask.clone(), eta, 0)?)?;
        if state.frozen_digest() != mask.digest() {
            return Err(Error::invalid("train", "training replaced the frozen mask"));
        }
        current = state.theta;
        stages.push((current.clone(), mask));
    }
    Ok(stages)
}

fn sample_stream(stream: &[u32], batch: usize, len: usize) -> impl FnMut(&mut Rng) -> Vec<Vec<u32>> + '_ {
    move |rng| (0..batch).map(|_| window(stream, rng, len)).collect()
}

fn sample_mix(mix: &DataMixture, batch: usize, len: usize) -> impl FnMut(&mut Rng) -> Vec<Vec<u32>> + '_ {
    move |rng| mix.sample_batch(rng, batch, len).into_iter().map(|s| s.tokens).collect()
}

/// Dense pretraining of a fresh model on the mixture.
pub fn pretrain_dense(cfg: ModelConfig, mix: &DataMixture, train: &TrainConfig, seed: u64) -> Result<Model<f32>> {
    let root = Rng::new(seed);
    let model = Model::init(cfg, &mut root.substream(0))?;
    let mut state = TrainState::new(model, SparsityMask::new(), train.lr, train.steps)?.with_optimizer(train.optimizer);
    let mut rng = root.substream(1);
    train_steps(&mut state, train.steps, &mut rng, sample_mix(mix, train.batch, train.seq_len), &Objective::Task, |_, _| {})?;
    Ok(state.theta)
}

/// Calibration windows drawn from the mixture.
pub fn mixture_calibration(mix: &DataMixture, rng: &mut Rng, samples: usize, len: usize) -> Vec<Vec<u32>> {
    mix.sample_batch(rng, samples, len).into_iter().map(|s| s.tokens).collect()
}

/// One-shot prune of every linear layer to `target` using calibration
/// windows `calib`.
pub fn one_shot(
    model: &Model<f32>,
    calib: &[Vec<u32>],
    recipe: &PruneRecipe,
    target: f64,
    forced: Option<&SparsityMask>,
) -> Result<(Model<f32>, SparsityMask)> {
    let set = collect_calibration(model, calib)?;
    let recipe = PruneRecipe { target, ..*recipe };
    let profile = build_profile(model, &set, &recipe)?;
    let (m, mask, _) = prune_model(model, &set, &profile, &recipe, forced)?;
    Ok((m, mask))
}

/// Knobs shared by the sparse pretraining and fine-tuning pipelines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub sparsity: f64,
    pub prune: PruneRecipe,
    pub calib_samples: usize,
    pub finetune: TrainConfig,
    pub sparse_pretrain: TrainConfig,
    /// Distillation from the dense fine-tuned teacher during sparse
    /// fine-tuning; `None` trains on the task loss alone.
    pub distill: Option<DistillConfig>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sparsity: 0.7,
            prune: PruneRecipe::default(),
            calib_samples: 16,
            finetune: TrainConfig { steps: 200, ..TrainConfig::default() },
            sparse_pretrain: TrainConfig { steps: 600, ..TrainConfig::default() },
            distill: Some(DistillConfig::default()),
            seed: 0,
        }
    }
}

/// Sparse pretraining: one-shot prune through the iterative `targets`
/// schedule, training with the frozen mask on the mixture after each
/// prune until convergence.
pub fn sparse_pretrain(
    base: &Model<f32>,
    mix: &DataMixture,
    targets: &[f64],
    cfg: &PipelineConfig,
) -> Result<(Model<f32>, SparsityMask)> {
    let root = Rng::new(cfg.seed).substream(10);
    let tc = cfg.sparse_pretrain;
    let calib = mixture_calibration(mix, &mut root.substream(0), cfg.calib_samples, tc.seq_len);
    let eval = mixture_calibration(mix, &mut root.substream(1), cfg.calib_samples, tc.seq_len);
    let mut rng = root.substream(2);
    let stages = iterative_prune_schedule(
        base,
        targets,
        |m, t, forced| one_shot(m, &calib, &cfg.prune, t, forced),
        |state| {
            let mut state = state.with_optimizer(tc.optimizer);
            train_until_converged(&mut state, &tc, &mut rng, sample_mix(mix, tc.batch, tc.seq_len), &Objective::Task, &eval)?;
            Ok(state)
        },
        tc.lr,
    )?;
    Ok(stages.into_iter().last().expect("at least one stage"))
}

/// Dense fine-tuning on the task's training split.
pub fn dense_finetune(base: &Model<f32>, task: &TaskData, cfg: &PipelineConfig) -> Result<Model<f32>> {
    let tc = cfg.finetune;
    let mut state = TrainState::new(base.clone(), SparsityMask::new(), tc.lr, tc.steps)?.with_optimizer(tc.optimizer);
    let mut rng = Rng::new(cfg.seed).substream(20);
    train_steps(&mut state, tc.steps, &mut rng, sample_stream(&task.train, tc.batch, tc.seq_len), &Objective::Task, |_, _| {})?;
    Ok(state.theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FinetuneMode {
    /// Dense fine-tune, then one-shot prune on the task data.
    DenseThenOneShot,
    /// The previous mode followed by sparse fine-tuning.
    PruneDuringFinetune,
    /// One-shot prune the pretrained model, then sparse fine-tune.
    OneShotThenSparseFT,
    /// Sparse fine-tune a sparse pretrained model.
    SparsePretrainedThenSparseFT,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 4] = [
        FinetuneMode::DenseThenOneShot,
        FinetuneMode::PruneDuringFinetune,
        FinetuneMode::OneShotThenSparseFT,
        FinetuneMode::SparsePretrainedThenSparseFT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::DenseThenOneShot => "dense-then-one-shot",
            FinetuneMode::PruneDuringFinetune => "prune-during-finetune",
            FinetuneMode::OneShotThenSparseFT => "one-shot-then-sparse-ft",
            FinetuneMode::SparsePretrainedThenSparseFT => "sparse-pretrained-then-sparse-ft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Models a fine-tuning run starts from.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneInputs<'a> {
    /// Dense pretrained model.
    pub base: &'a Model<f32>,
    pub task: &'a TaskData,
    /// Dense fine-tuned model; computed from `base` when absent.
    pub dense_finetuned: Option<&'a Model<f32>>,
    /// Sparse pretrained model and its mask, required by
    /// [`FinetuneMode::SparsePretrainedThenSparseFT`].
    pub sparse_pretrained: Option<(&'a Model<f32>, &'a SparsityMask)>,
    /// Windows used to calibrate pruning of the pretrained model.
    pub pretrain_calibration: &'a [Vec<u32>],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageMetric {
    pub stage: &'static str,
    pub eval_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub mode: FinetuneMode,
    pub model: Model<f32>,
    pub mask: SparsityMask,
    pub stages: Vec<StageMetric>,
    pub eval_loss: f64,
    pub accuracy: f64,
    pub dense_eval_loss: f64,
    pub dense_accuracy: f64,
    /// Sparse accuracy over dense accuracy on the held-out task split.
    pub recovery: f64,
}

/// Runs the stage sequence of `mode` and reports held-out task metrics.
pub fn run_finetune(mode: FinetuneMode, inputs: &FinetuneInputs, cfg: &PipelineConfig) -> Result<FinetuneOutcome> {
    let tc = cfg.finetune;
    let eval = eval_windows(&inputs.task.eval, tc.seq_len);
    let root = Rng::new(cfg.seed).substream(30 + mode as u64);
    let mut stages = Vec::new();
    let mut record = |stage: &'static str, m: &Model<f32>| -> Result<()> {
        let (eval_loss, accuracy) = evaluate(m, &eval)?;
        stages.push(StageMetric { stage, eval_loss, accuracy });
        Ok(())
    };

    let owned;
    let dense = match inputs.dense_finetuned {
        Some(m) => m,
        None => {
            owned = dense_finetune(inputs.base, inputs.task, cfg)?;
            &owned
        }
    };
    record("dense-finetune", dense)?;
    let task_calib: Vec<Vec<u32>> = {
        let mut rng = root.substream(0);
        (0..cfg.calib_samples).map(|_| window(&inputs.task.train, &mut rng, tc.seq_len)).collect()
    };

    let (start, mask) = match mode {
        FinetuneMode::DenseThenOneShot | FinetuneMode::PruneDuringFinetune => {
            one_shot(dense, &task_calib, &cfg.prune, cfg.sparsity, None)?
        }
        FinetuneMode::OneShotThenSparseFT => one_shot(inputs.base, inputs.pretrain_calibration, &cfg.prune, cfg.sparsity, None)?,
        FinetuneMode::SparsePretrainedThenSparseFT => {
            let (m, mask) = inputs
                .sparse_pretrained
                .ok_or(Error::ModeMismatch { mode: mode.name(), missing: "a sparse pretrained checkpoint" })?;
            (m.clone(), mask.clone())
        }
    };
    record("pruned", &start)?;

    let model = if mode == FinetuneMode::DenseThenOneShot {
        start
    } else {
        let mut state = TrainState::new(start, mask.clone(), tc.lr, tc.steps)?.with_optimizer(tc.optimizer);
        let objective = match &cfg.distill {
            Some(d) => Objective::Distill { teacher: dense, cfg: *d },
            None => Objective::Task,
        };
        let mut rng = root.substream(1);
        train_steps(&mut state, tc.steps, &mut rng, sample_stream(&inputs.task.train, tc.batch, tc.seq_len), &objective, |_, _| {})?;
        record("sparse-finetune", &state.theta)?;
        state.theta
    };

    let last = *stages.last().expect("recorded");
    let dense_metric = stages[0];
    Ok(FinetuneOutcome {
        mode,
        model,
        mask,
        eval_loss: last.eval_loss,
        accuracy: last.accuracy,
        dense_eval_loss: dense_metric.eval_loss,
        dense_accuracy: dense_metric.accuracy,
        recovery: if dense_metric.accuracy > 0.0 { last.accuracy / dense_metric.accuracy } else { 0.0 },
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::apply::PruneMethod;

    fn small() -> ModelConfig {
        ModelConfig { vocab: 64, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_ctx: 16 }
    }

    fn quick() -> PipelineConfig {
        let t = TrainConfig { steps: 10, batch: 2, seq_len: 12, eval_every: 5, patience: 2, ..TrainConfig::default() };
        PipelineConfig {
            sparsity: 0.5,
            prune: PruneRecipe { method: PruneMethod::Magnitude, ..PruneRecipe::default() },
            calib_samples: 4,
            finetune: t,
            sparse_pretrain: t,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn schedule_rejects_non_increasing_targets() {
        let m = Model::<f32>::zeros(small());
        let noop = |s: TrainState| Ok(s);
        let prune = |m: &Model<f32>, _: f64, _: Option<&SparsityMask>| Ok((m.clone(), SparsityMask::new()));
        assert!(iterative_prune_schedule(&m, &[0.7, 0.5], prune, noop, 0.1).is_err());
        assert!(iterative_prune_schedule(&m, &[], prune, noop, 0.1).is_err());
    }

    #[test]
    fn iterative_schedule_keeps_zeros() {
        let mix = DataMixture::pretraining();
        let cfg = quick();
        let base = pretrain_dense(small(), &mix, &cfg.sparse_pretrain, 1).unwrap();
        let calib = mixture_calibration(&mix, &mut Rng::new(3), 4, 12);
        let mut rng = Rng::new(4);
        let stages = iterative_prune_schedule(
            &base,
            &[0.5, 0.75],
            |m, t, f| one_shot(m, &calib, &cfg.prune, t, f),
            |state| {
                let mut s = state.with_optimizer(Optimizer::adam());
                train_steps(&mut s, 5, &mut rng, sample_mix(&mix, 2, 12), &Objective::Task, |st, _| assert!(st.holds_mask()))?;
                Ok(s)
            },
            1e-3,
        )
        .unwrap();
        assert_eq!(stages.len(), 2);
        assert!(stages[1].1.extends(&stages[0].1));
        assert_eq!(stages[1].1.sparsity(), 0.75);
        let single = iterative_prune_schedule(&base, &[0.5], |m, t, f| one_shot(m, &calib, &cfg.prune, t, f), Ok, 1e-3).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn modes_run_and_mode_four_needs_a_checkpoint() {
        let mix = DataMixture::pretraining();
        let cfg = quick();
        let base = pretrain_dense(small(), &mix, &cfg.sparse_pretrain, 2).unwrap();
        let task = TaskData::bundled(0.5);
        let calib = mixture_calibration(&mix, &mut Rng::new(5), 4, 12);
        let mut inputs = FinetuneInputs { base: &base, task: &task, dense_finetuned: None, sparse_pretrained: None, pretrain_calibration: &calib };
        let err = run_finetune(FinetuneMode::SparsePretrainedThenSparseFT, &inputs, &cfg).unwrap_err();
        assert!(matches!(err, Error::ModeMismatch { .. }));

        let dense = dense_finetune(&base, &task, &cfg).unwrap();
        inputs.dense_finetuned = Some(&dense);
        let sp = sparse_pretrain(&base, &mix, &[0.5], &cfg).unwrap();
        inputs.sparse_pretrained = Some((&sp.0, &sp.1));
        for mode in FinetuneMode::ALL {
            let out = run_finetune(mode, &inputs, &cfg).unwrap();
            assert!(out.eval_loss.is_finite() && out.recovery >= 0.0);
            assert!(crate::train::mask_holds(&out.model, &out.mask));
            if mode == FinetuneMode::OneShotThenSparseFT {
                let (_, one) = one_shot(&base, &calib, &cfg.prune, 0.5, None).unwrap();
                assert_eq!(out.mask, one);
            }
        }
        let zero = PipelineConfig { sparsity: 0.0, ..cfg };
        let out = run_finetune(FinetuneMode::DenseThenOneShot, &inputs, &zero).unwrap();
        assert_eq!(out.model, dense);
    }
}
