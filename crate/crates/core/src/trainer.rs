//! Mini-batch training over `Q` prompts × `G` rollouts per step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::advantage::RolloutGroup;
use crate::error::{LabError, Result};
use crate::objectives::{batch_loss_and_gradient, ObjectiveSpec};
use crate::policy::{sample_trajectory, GradientVector, PolicyParams};
use crate::tasks::{mean_success_probability, reward, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrScaling {
    None,
    /// `lr = base_lr · Q / Q0`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, delta: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            delta: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Prompts per step, `Q`.
    pub prompts_per_step: usize,
    /// Rollouts per prompt, `G`.
    pub group_size: usize,
    pub base_lr: f64,
    pub lr_scaling: LrScaling,
    /// Reference prompt count `Q0` at which `base_lr` applies.
    pub reference_prompts: usize,
    pub epochs: usize,
    /// Overrides the default of `ceil(num_prompts / Q)` steps per epoch.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub warmup_steps: usize,
    /// Optimizer updates per generated batch. Values above one reuse the
    /// batch off-policy and exercise the clipping branch.
    pub updates_per_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prompts_per_step: 8,
            group_size: 16,
            base_lr: 0.1,
            lr_scaling: LrScaling::None,
            reference_prompts: 8,
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
            optimizer: OptimizerKind::adam(),
            warmup_steps: 10,
            updates_per_batch: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts_per_step == 0 {
            return Err(LabError::config("trainer.prompts_per_step", "must be ≥ 1"));
        }
        if self.group_size < 2 {
            return Err(LabError::config(
                "trainer.group_size",
                "group size must be ≥ 2",
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(LabError::config(
                "trainer.base_lr",
                "must be a positive finite number",
            ));
        }
        if self.reference_prompts == 0 {
            return Err(LabError::config("trainer.reference_prompts", "must be ≥ 1"));
        }
        if self.epochs == 0 {
            return Err(LabError::config("trainer.epochs", "must be ≥ 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(LabError::config("trainer.steps_per_epoch", "must be ≥ 1"));
        }
        if self.updates_per_batch == 0 {
            return Err(LabError::config("trainer.updates_per_batch", "must be ≥ 1"));
        }
        if let OptimizerKind::Adam {
            beta1,
            beta2,
            delta,
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&beta1) {
                return Err(LabError::config("trainer.adam_beta1", "must lie in [0, 1)"));
            }
            if !(0.0..1.0).contains(&beta2) {
                return Err(LabError::config("trainer.adam_beta2", "must lie in [0, 1)"));
            }
            if delta.is_nan() || delta <= 0.0 {
                return Err(LabError::config("trainer.adam_delta", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn rollouts_per_step(&self) -> u64 {
        (self.prompts_per_step * self.group_size) as u64
    }

    pub fn steps_per_epoch(&self, num_prompts: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| num_prompts.div_ceil(self.prompts_per_step))
    }

    /// Learning rate after batch-size scaling, before warmup.
    pub fn scaled_lr(&self) -> f64 {
        lr_for_batch(
            self.base_lr,
            self.reference_prompts,
            self.prompts_per_step,
            self.lr_scaling,
        )
    }
}

/// Learning rate for `q` prompts per step given `base_lr` tuned at `q0`.
pub fn lr_for_batch(base_lr: f64, q0: usize, q: usize, scaling: LrScaling) -> f64 {
    match scaling {
        LrScaling::None => base_lr,
        LrScaling::Linear => base_lr * q as f64 / q0 as f64,
    }
}

/// One row of the per-step training log.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    /// 1-based step index.
    pub step: usize,
    /// 1-based epoch index.
    pub epoch: usize,
    pub mean_reward: f64,
    pub p_hat_mean: f64,
    pub p_hat_min: f64,
    pub p_hat_max: f64,
    pub degenerate_fraction: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub cumulative_rollouts: u64,
    /// Exact mean success probability over all prompts after the update.
    pub exact_success: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

impl RunRecord {
    pub fn total_rollouts(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cumulative_rollouts)
    }

    pub fn final_exact_success(&self) -> Option<f64> {
        self.rows.last().map(|r| r.exact_success)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub params: PolicyParams,
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        delta: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl OptimizerState {
    fn new(kind: OptimizerKind, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam {
                beta1,
                beta2,
                delta,
            } => OptimizerState::Adam {
                beta1,
                beta2,
                delta,
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
            },
        }
    }

    /// Descent step on a loss gradient. An exactly-zero gradient is a no-op
    /// for both optimizers, including Adam's moment decay.
    fn apply(&mut self, params: &mut PolicyParams, grad: &GradientVector, lr: f64) -> Result<()> {
        if grad.is_zero() {
            return Ok(());
        }
        match self {
            OptimizerState::Sgd => params.add_scaled(grad, -lr),
            OptimizerState::Adam {
                beta1,
                beta2,
                delta,
                m,
                v,
                t,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (i, l) in params.logits_mut().iter_mut().enumerate() {
                    let g = grad.0[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    *l -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *delta);
                }
                Ok(())
            }
        }
    }
}

/// Epoch-shuffled prompt stream: every prompt appears once per pass, passes
/// are reshuffled independently.
#[derive(Debug, Clone)]
struct PromptStream {
    order: Vec<usize>,
    pos: usize,
}

impl PromptStream {
    fn new(num_prompts: usize) -> Self {
        Self {
            order: (0..num_prompts).collect(),
            pos: num_prompts,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let q = self.order[self.pos];
        self.pos += 1;
        q
    }
}

/// Stateful training loop. Each [`Trainer::step`] generates one on-policy
/// batch and applies `updates_per_batch` optimizer updates to it.
pub struct Trainer<'a> {
    task: &'a TaskSpec,
    config: TrainConfig,
    objective: ObjectiveSpec,
    params: PolicyParams,
    reference: PolicyParams,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    prompts: PromptStream,
    step: usize,
    rollouts: u64,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Starts from the uniform policy, which is also frozen as the reference.
    pub fn new(task: &'a TaskSpec, config: TrainConfig, objective: ObjectiveSpec) -> Result<Self> {
        Self::with_params(task, config, objective, task.uniform_policy())
    }

    pub fn with_params(
        task: &'a TaskSpec,
        config: TrainConfig,
        objective: ObjectiveSpec,
        params: PolicyParams,
    ) -> Result<Self> {
        config.validate()?;
        objective.validate()?;
        if objective.group_size != config.group_size {
            return Err(LabError::config(
                "trainer.group_size",
                format!(
                    "objective expects groups of {}, trainer generates {}",
                    objective.group_size, config.group_size
                ),
            ));
        }
        task.check_policy(&params)?;
        Ok(Self {
            task,
            optimizer: OptimizerState::new(config.optimizer, params.dim()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            prompts: PromptStream::new(task.num_prompts()),
            reference: params.clone(),
            params,
            config,
            objective,
            step: 0,
            rollouts: 0,
            started: Instant::now(),
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    /// Learning rate of the next step, including linear warmup.
    pub fn current_lr(&self) -> f64 {
        let lr = self.config.scaled_lr();
        let w = self.config.warmup_steps;
        if w == 0 || self.step >= w {
            lr
        } else {
            lr * (self.step + 1) as f64 / w as f64
        }
    }

    /// Samples `G` rollouts for each of the next `Q` prompts in the stream.
    pub fn sample_batch(&mut self) -> Result<Vec<RolloutGroup>> {
        let g = self.config.group_size;
        let mut groups = Vec::with_capacity(self.config.prompts_per_step);
        for _ in 0..self.config.prompts_per_step {
            let prompt = self.prompts.next(&mut self.rng);
            let mut trajs = Vec::with_capacity(g);
            let mut rewards = Vec::with_capacity(g);
            for _ in 0..g {
                let traj = sample_trajectory(&self.params, prompt, &mut self.rng)?;
                rewards.push(reward(self.task, &traj)?);
                trajs.push(traj);
            }
            groups.push(RolloutGroup::new(prompt, trajs, rewards)?);
        }
        Ok(groups)
    }

    /// Applies the configured updates to an already sampled batch.
    pub fn update_on(&mut self, groups: &[RolloutGroup]) -> Result<RunRow> {
        let lr = self.current_lr();
        let step = self.step + 1;
        let mut grad_norm = 0.0;
        for u in 0..self.config.updates_per_batch {
            let (_, grad) =
                batch_loss_and_gradient(&self.params, &self.reference, groups, &self.objective)?;
            if !grad.is_finite() {
                return Err(LabError::NonFiniteGradient {
                    step,
                    snapshot: format!(
                        "update {u}, max |logit| = {}, non-finite entries = {}",
                        self.params
                            .logits()
                            .iter()
                            .fold(0.0f64, |m, l| m.max(l.abs())),
                        grad.0.iter().filter(|x| !x.is_finite()).count()
                    ),
                });
            }
            if u == 0 {
                grad_norm = grad.norm();
            }
            self.optimizer.apply(&mut self.params, &grad, lr)?;
        }

        self.step = step;
        self.rollouts += self.config.rollouts_per_step();
        let p_hats: Vec<f64> = groups.iter().map(RolloutGroup::p_hat).collect();
        let n = groups.len() as f64;
        let total_rollouts: usize = groups.iter().map(RolloutGroup::size).sum();
        let correct: usize = groups.iter().map(RolloutGroup::num_correct).sum();
        Ok(RunRow {
            step,
            epoch: (step - 1) / self.config.steps_per_epoch(self.task.num_prompts()) + 1,
            mean_reward: correct as f64 / total_rollouts as f64,
            p_hat_mean: p_hats.iter().sum::<f64>() / n,
            p_hat_min: p_hats.iter().copied().fold(f64::INFINITY, f64::min),
            p_hat_max: p_hats.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            degenerate_fraction: groups.iter().filter(|g| g.is_degenerate()).count() as f64 / n,
            grad_norm,
            lr,
            cumulative_rollouts: self.rollouts,
            exact_success: mean_success_probability(self.task, &self.params)?,
            elapsed_secs: self.started.elapsed().as_secs_f64(),
        })
    }

    /// One generation batch followed by its optimizer update(s).
    pub fn step(&mut self) -> Result<RunRow> {
        let groups = self.sample_batch()?;
        self.update_on(&groups)
    }
}

/// Runs `epochs × steps_per_epoch` steps from the uniform policy.
pub fn run_training(
    task: &TaskSpec,
    config: &TrainConfig,
    objective: &ObjectiveSpec,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(task, config.clone(), objective.clone())?;
    let total = config.epochs * config.steps_per_epoch(task.num_prompts());
    let mut record = RunRecord::default();
    for _ in 0..total {
        record.rows.push(trainer.step()?);
    }
    Ok(TrainOutcome {
        record,
        params: trainer.into_params(),
    })
}
