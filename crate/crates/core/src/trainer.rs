//! Training loop: AdamW over the composite objective, periodic one-step
//! evaluation, JSON-friendly metric records, and checkpoints that resume
//! bit-exactly.
//!
//! Determinism contract: given (architecture, objective, train config, seed,
//! datasets), every optimizer step, every evaluation, and therefore every
//! logged metric is reproducible bit for bit — including across a
//! checkpoint/restore boundary and regardless of the parallel feature.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor};
use crate::eval::mmd2;
use crate::network::{Architecture, NetError, VelocityNet};
use crate::objective::{total_loss, LossTerms, ObjectiveConfig, ObjectiveError};
use crate::objective::FlowBatch;
use crate::rng::{RngSnapshot, StreamRng, STREAM_DATA, STREAM_NOISE, STREAM_TIMES};
use crate::sampler::{sample_multi_step, sample_one_step, SamplerError};
use crate::tasks::{eval_success, Dataset, StratumStats, TaskError, TaskSpec};

use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("optimizer state mismatch: {0}")]
    OptState(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint serialisation: {0}")]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Training totals above this are treated as divergence; the run stops
/// cleanly and reports why instead of looping on garbage.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Decorrelates evaluation noise from every training noise stream while
/// keeping `(seed, step) -> eval seed` injective.
const EVAL_SEED_SALT: u64 = 0x5EED_EA1C_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay (applied to parameters, not gradients).
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate every this many epochs (0 = only after the final epoch).
    pub eval_every: usize,
    /// One-step samples drawn per evaluation.
    pub eval_samples: usize,
    /// Sampler steps used by in-training evaluation (1 = one-step).
    pub eval_nfe: usize,
    /// Dataset actions are divided by this before entering the flow, and
    /// sampled outputs multiplied back before any success/MMD judgment.
    /// Judgment criteria are scale-relative, so this changes only the
    /// optimization geometry: it sets the action magnitude relative to the
    /// unit sampling noise.
    pub action_scale: f64,
    /// Seeds a multi-seed driver should run; a single `Trainer` uses one.
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 128,
            epochs: 500,
            eval_every: 25,
            eval_samples: 256,
            eval_nfe: 1,
            action_scale: 1.0,
            seeds: vec![0, 1, 2],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(TrainError::InvalidConfig("adam_eps must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_samples == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size, epochs and eval_samples must be positive".into(),
            ));
        }
        if self.eval_nfe == 0 {
            return Err(TrainError::InvalidConfig("eval_nfe must be at least 1".into()));
        }
        if !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "action_scale must be positive and finite, got {}",
                self.action_scale
            )));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::InvalidConfig("at least one seed".into()));
        }
        Ok(())
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &[&Tensor]) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::OptState(format!(
                "{} params and {} grads for {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads.iter()).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(TrainError::OptState(format!(
                    "slot {i}: param {:?} / grad {:?} vs moment {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            let gd = g.data();
            for j in 0..pd.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gd[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gd[j] * gd[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pd[j] -= self.lr * self.weight_decay * pd[j];
                pd[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Aggregates of one epoch of optimizer steps.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub steps: usize,
    /// Per-term means over the executed (non-skipped) steps.
    pub mean_terms: LossTerms,
    pub clamped_stencil_rows: usize,
    pub tape_nodes: usize,
    pub tape_saved_elems: u64,
    pub skipped: usize,
    pub diverged: Option<String>,
}

/// One logged evaluation point. Field order is the JSONL column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub mse: f64,
    pub dispersive: f64,
    pub cosine: f64,
    pub mean_cos_alpha: f64,
    pub mean_pred_norm: f64,
    pub mean_target_norm: f64,
    pub clamped_stencil_rows: usize,
    pub skipped_steps: usize,
    pub tape_nodes: usize,
    pub tape_saved_elems: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd2: Option<f64>,
    /// Success stats per stratum plus `"all"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_by_stratum: Option<BTreeMap<String, StratumStats>>,
}

/// Full state needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub skipped_steps: usize,
    pub net: VelocityNet,
    pub opt: AdamW,
    pub data_rng: RngSnapshot,
    pub noise_rng: RngSnapshot,
    pub times_rng: RngSnapshot,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct Trainer {
    net: VelocityNet,
    opt: AdamW,
    objective: ObjectiveConfig,
    config: TrainConfig,
    seed: u64,
    epoch: usize,
    step: u64,
    skipped_steps: usize,
    data_rng: StreamRng,
    noise_rng: StreamRng,
    times_rng: StreamRng,
}

impl Trainer {
    pub fn new(
        arch: &Architecture,
        objective: &ObjectiveConfig,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        objective.validate()?;
        config.validate()?;
        let net = VelocityNet::init(arch.clone(), seed)?;
        let opt = AdamW::new(config, &net.params_flat());
        Ok(Trainer {
            net,
            opt,
            objective: objective.clone(),
            config: config.clone(),
            seed,
            epoch: 0,
            step: 0,
            skipped_steps: 0,
            data_rng: StreamRng::new(seed, STREAM_DATA),
            noise_rng: StreamRng::new(seed, STREAM_NOISE),
            times_rng: StreamRng::new(seed, STREAM_TIMES),
        })
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn skipped_steps(&self) -> usize {
        self.skipped_steps
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn objective(&self) -> &ObjectiveConfig {
        &self.objective
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.net.arch().clone(),
            objective: self.objective.clone(),
            train: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            step: self.step,
            skipped_steps: self.skipped_steps,
            net: self.net.clone(),
            opt: self.opt.clone(),
            data_rng: self.data_rng.snapshot(),
            noise_rng: self.noise_rng.snapshot(),
            times_rng: self.times_rng.snapshot(),
        }
    }

    /// Rebuilds a trainer mid-run; continuing from here produces the same
    /// stream of steps and metrics as the uninterrupted run.
    pub fn restore(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.objective.validate()?;
        ckpt.train.validate()?;
        ckpt.net.validate()?;
        if ckpt.net.arch() != &ckpt.arch {
            return Err(TrainError::InvalidConfig(
                "checkpoint architecture disagrees with its network".into(),
            ));
        }
        Ok(Trainer {
            net: ckpt.net,
            opt: ckpt.opt,
            objective: ckpt.objective,
            config: ckpt.train,
            seed: ckpt.seed,
            epoch: ckpt.epoch,
            step: ckpt.step,
            skipped_steps: ckpt.skipped_steps,
            data_rng: StreamRng::restore(&ckpt.data_rng),
            noise_rng: StreamRng::restore(&ckpt.noise_rng),
            times_rng: StreamRng::restore(&ckpt.times_rng),
        })
    }

    /// One pass over the dataset in shuffled order, full batches only (the
    /// remainder is dropped; if the dataset is smaller than the batch size,
    /// the whole dataset forms one batch). Non-finite losses skip the update
    /// and are counted; totals above [`DIVERGENCE_LIMIT`] stop the epoch.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<EpochStats, TrainError> {
        if ds.is_empty() {
            return Err(TrainError::InvalidConfig("empty training dataset".into()));
        }
        let n = ds.len();
        let batch = self.config.batch_size.min(n);
        let n_batches = n / batch;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(self.data_rng.rng());

        let mut sums = LossTerms {
            total: 0.0,
            mse: 0.0,
            dispersive: 0.0,
            cosine: 0.0,
            mean_cos_alpha: 0.0,
            mean_pred_norm: 0.0,
            mean_target_norm: 0.0,
        };
        let mut stats = EpochStats {
            steps: 0,
            mean_terms: sums,
            clamped_stencil_rows: 0,
            tape_nodes: 0,
            tape_saved_elems: 0,
            skipped: 0,
            diverged: None,
        };

        for b in 0..n_batches {
            let rows = &idx[b * batch..(b + 1) * batch];
            let (mut actions, conds) = ds.gather(rows);
            if self.config.action_scale != 1.0 {
                actions = actions.scale(1.0 / self.config.action_scale);
            }
            let fb = FlowBatch::make(
                &actions,
                conds.as_ref(),
                self.objective.p_equal,
                &mut self.noise_rng,
                &mut self.times_rng,
            )?;
            let tape = Tape::new();
            match total_loss(&self.net, &fb, &self.objective, &tape) {
                Ok(sr) => {
                    let grads = sr.grads.ordered(&sr.param_ids)?;
                    self.opt.apply(self.net.params_flat_mut(), &grads)?;
                    self.step += 1;
                    stats.steps += 1;
                    sums.total += sr.terms.total;
                    sums.mse += sr.terms.mse;
                    sums.dispersive += sr.terms.dispersive;
                    sums.cosine += sr.terms.cosine;
                    sums.mean_cos_alpha += sr.terms.mean_cos_alpha;
                    sums.mean_pred_norm += sr.terms.mean_pred_norm;
                    sums.mean_target_norm += sr.terms.mean_target_norm;
                    stats.clamped_stencil_rows += sr.diagnostics.clamped_stencil_rows;
                    stats.tape_nodes = sr.diagnostics.tape_nodes;
                    stats.tape_saved_elems = sr.diagnostics.tape_saved_elems;
                    if sr.terms.total > DIVERGENCE_LIMIT {
                        stats.diverged = Some(format!(
                            "loss {:.3e} exceeded {DIVERGENCE_LIMIT:.0e} at step {}",
                            sr.terms.total, self.step
                        ));
                        break;
                    }
                }
                Err(ObjectiveError::NonFinite { context }) => {
                    // The streams were already consumed, so a replay skips
                    // the same batch; no update is applied.
                    self.skipped_steps += 1;
                    stats.skipped += 1;
                    let _ = context;
                }
                Err(other) => return Err(other.into()),
            }
        }
        if stats.steps > 0 {
            let k = stats.steps as f64;
            stats.mean_terms = LossTerms {
                total: sums.total / k,
                mse: sums.mse / k,
                dispersive: sums.dispersive / k,
                cosine: sums.cosine / k,
                mean_cos_alpha: sums.mean_cos_alpha / k,
                mean_pred_norm: sums.mean_pred_norm / k,
                mean_target_norm: sums.mean_target_norm / k,
            };
        }
        self.epoch += 1;
        Ok(stats)
    }

    /// One-step evaluation on held-out rows. Noise comes from a seed derived
    /// from `(seed, step)`, so evaluation never advances the training
    /// streams and never reuses their draws.
    pub fn evaluate(&self, eval_ds: &Dataset) -> Result<EvalOutcome, TrainError> {
        if eval_ds.is_empty() {
            return Err(TrainError::InvalidConfig("empty evaluation dataset".into()));
        }
        let eval_seed = EVAL_SEED_SALT ^ (self.seed.wrapping_shl(32)).wrapping_add(self.step);
        match &eval_ds.spec {
            TaskSpec::Gmm2d(_) => {
                let n = self.config.eval_samples;
                let samples = self.draw_eval_samples(None, n, eval_seed)?;
                let value = mmd2(&samples, &eval_ds.actions)?;
                Ok(EvalOutcome {
                    mmd2: Some(value),
                    success: None,
                })
            }
            spec => {
                let n = self.config.eval_samples.min(eval_ds.len());
                let rows: Vec<usize> = (0..n).collect();
                let (_, conds) = eval_ds.gather(&rows);
                let actions = self.draw_eval_samples(conds.as_ref(), n, eval_seed)?;
                let conds = conds.unwrap_or_else(|| Tensor::zeros(vec![n, 0]));
                let report = eval_success(spec, &conds, &actions, &eval_ds.tags[..n])?;
                let mut map = report.by_stratum.clone();
                map.insert("all".to_string(), report.overall);
                Ok(EvalOutcome {
                    mmd2: None,
                    success: Some(map),
                })
            }
        }
    }

    /// Samples in flow space at the configured NFE and maps back to task
    /// units via `action_scale`.
    fn draw_eval_samples(
        &self,
        conds: Option<&Tensor>,
        n: usize,
        seed: u64,
    ) -> Result<Tensor, TrainError> {
        let raw = if self.config.eval_nfe <= 1 {
            sample_one_step(&self.net, conds, n, seed)?
        } else {
            sample_multi_step(&self.net, conds, n, self.config.eval_nfe, seed)?
        };
        let out = if self.config.action_scale != 1.0 {
            raw.scale(self.config.action_scale)
        } else {
            raw
        };
        Ok(out)
    }

    fn record(&self, stats: &EpochStats, eval: Option<EvalOutcome>) -> MetricRecord {
        MetricRecord {
            seed: self.seed,
            epoch: self.epoch,
            step: self.step,
            total: stats.mean_terms.total,
            mse: stats.mean_terms.mse,
            dispersive: stats.mean_terms.dispersive,
            cosine: stats.mean_terms.cosine,
            mean_cos_alpha: stats.mean_terms.mean_cos_alpha,
            mean_pred_norm: stats.mean_terms.mean_pred_norm,
            mean_target_norm: stats.mean_terms.mean_target_norm,
            clamped_stencil_rows: stats.clamped_stencil_rows,
            skipped_steps: self.skipped_steps,
            tape_nodes: stats.tape_nodes,
            tape_saved_elems: stats.tape_saved_elems,
            mmd2: eval.as_ref().and_then(|e| e.mmd2),
            success_by_stratum: eval.and_then(|e| e.success),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub mmd2: Option<f64>,
    pub success: Option<BTreeMap<String, StratumStats>>,
}

pub struct TrainRun {
    pub trainer: Trainer,
    pub metrics: Vec<MetricRecord>,
    pub aborted: Option<String>,
}

/// Runs `trainer` up to `config.epochs`, evaluating and logging on the
/// `eval_every` grid and after the final epoch. Usable both for fresh runs
/// and for continuing a restored trainer.
pub fn train_loop(
    trainer: &mut Trainer,
    train_ds: &Dataset,
    eval_ds: &Dataset,
) -> Result<(Vec<MetricRecord>, Option<String>), TrainError> {
    let mut metrics = Vec::new();
    let mut aborted = None;
    while trainer.epoch < trainer.config.epochs {
        let stats = trainer.run_epoch(train_ds)?;
        if let Some(reason) = &stats.diverged {
            aborted = Some(reason.clone());
            metrics.push(trainer.record(&stats, None));
            break;
        }
        let every = trainer.config.eval_every;
        let due = trainer.epoch == trainer.config.epochs
            || (every > 0 && trainer.epoch % every == 0);
        if due {
            let eval = trainer.evaluate(eval_ds)?;
            metrics.push(trainer.record(&stats, Some(eval)));
        }
    }
    Ok((metrics, aborted))
}

/// Convenience wrapper: fresh trainer, full run.
pub fn train(
    arch: &Architecture,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    seed: u64,
) -> Result<TrainRun, TrainError> {
    let mut trainer = Trainer::new(arch, objective, config, seed)?;
    let (metrics, aborted) = train_loop(&mut trainer, train_ds, eval_ds)?;
    Ok(TrainRun {
        trainer,
        metrics,
        aborted,
    })
}
