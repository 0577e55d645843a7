//! Generative action policies: DDPM noise prediction, flow-matching
//! velocity fields, and MeanFlow average-velocity fields.
//!
//! Losses and samplers are generic over [`TensorOps`], so one code path
//! serves plain evaluation, reverse-mode training, and the forward-mode
//! target. Every stochastic entry point has a `*_with` twin that takes the
//! noise explicitly.

pub mod ddpm;
pub mod flow;
pub mod meanflow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor, TensorOps, Var};
use crate::error::{Error, Result};
use crate::nn::{MlpParams, PolicyNet};

pub use ddpm::{
    ddim_one_step_with, ddpm_bc_loss, ddpm_bc_loss_with, ddpm_sample, ddpm_sample_with, DdpmNoise,
    DdpmSchedule,
};
pub use flow::{cfm_loss, cfm_loss_with, euler_sample, euler_sample_with, flow_path, FlowPathSample};
pub use meanflow::{
    fbc_loss, fbc_loss_with, meanflow_target, one_step_sample, one_step_sample_with,
    sample_logit_normal, sample_time_pair, TimePairDistribution,
};

/// Optional elementwise `[lo, hi]` box applied to sampler outputs.
pub type Bounds = Option<(f64, f64)>;

pub const ACTION_BOUNDS: Bounds = Some((-1.0, 1.0));

/// Anything evaluable as `f(x_t, s, t [, r])`. Implemented by [`PolicyNet`];
/// tests implement it with closed-form fields.
pub trait Field {
    fn action_dim(&self) -> usize;
    /// True for average-velocity fields that take the extra time `r`.
    fn takes_r(&self) -> bool;
    fn eval<V: TensorOps>(&self, params: &[V], x: &V, s: Option<&V>, t: &V, r: Option<&V>) -> V;
}

impl Field for PolicyNet {
    fn action_dim(&self) -> usize {
        self.action_dim
    }
    fn takes_r(&self) -> bool {
        self.with_r
    }
    fn eval<V: TensorOps>(&self, params: &[V], x: &V, s: Option<&V>, t: &V, r: Option<&V>) -> V {
        self.forward(params, x, s, t, r)
    }
}

pub(crate) fn time_column(rows: usize, t: f64) -> Tensor {
    Tensor::column(vec![t; rows])
}

pub(crate) fn clip_output<V: TensorOps>(x: V, bounds: Bounds) -> V {
    match bounds {
        Some((lo, hi)) => x.clip(lo, hi),
        None => x,
    }
}

pub(crate) fn ensure_finite<V: TensorOps>(x: &V, what: &'static str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Which family a policy belongs to, with its step counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PolicySpec {
    /// Noise prediction with a `steps`-step reverse chain (DQL).
    Ddpm { steps: usize },
    /// Instantaneous velocity; `train_steps` Euler steps inside the actor
    /// loss, `eval_steps` at inference (FBRAC).
    FlowMatching { train_steps: usize, eval_steps: usize },
    /// Average velocity with one-step sampling (OFQL).
    MeanFlow { time: TimePairDistribution },
}

/// Inference-time sampler choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// The family's own sampler with its configured step count.
    Native,
    /// One deterministic DDIM jump (DDPM family only).
    DdimOneStep,
    /// `n` Euler steps of the instantaneous velocity.
    Euler(usize),
}

/// A policy family bound to a network architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub spec: PolicySpec,
    pub net: PolicyNet,
    pub bounds: Bounds,
    schedule: Option<DdpmSchedule>,
}

impl Policy {
    pub fn new(
        spec: PolicySpec,
        action_dim: usize,
        state_dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        bounds: Bounds,
    ) -> Result<Self> {
        let (with_r, schedule) = match &spec {
            PolicySpec::Ddpm { steps } => (false, Some(DdpmSchedule::variance_preserving(*steps)?)),
            PolicySpec::FlowMatching {
                train_steps,
                eval_steps,
            } => {
                if *train_steps == 0 || *eval_steps == 0 {
                    return Err(Error::invalid("Euler step counts must be positive"));
                }
                (false, None)
            }
            PolicySpec::MeanFlow { time } => {
                time.validate()?;
                (true, None)
            }
        };
        let net = PolicyNet::new(action_dim, state_dim, embed_dim, with_r, hidden)?;
        Ok(Policy {
            spec,
            net,
            bounds,
            schedule,
        })
    }

    pub fn schedule(&self) -> Option<&DdpmSchedule> {
        self.schedule.as_ref()
    }

    /// Behavior-cloning term of the actor loss.
    pub fn behavior_loss<V: TensorOps, R: Rng>(
        &self,
        params: &[V],
        actions: &Tensor,
        states: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<V> {
        match &self.spec {
            PolicySpec::Ddpm { .. } => {
                ddpm_bc_loss(&self.net, params, actions, states, self.schedule.as_ref().unwrap(), rng)
            }
            PolicySpec::FlowMatching { .. } => cfm_loss(&self.net, params, actions, states, rng),
            PolicySpec::MeanFlow { time } => fbc_loss(&self.net, params, actions, states, time, rng),
        }
    }

    /// Differentiable sampler used inside the actor loss and for target
    /// actions: the full chain for DDPM, `train_steps` Euler steps for flow
    /// matching, one step for MeanFlow.
    pub fn sample_train<V: TensorOps, R: Rng>(
        &self,
        params: &[V],
        states: Option<&V>,
        batch: usize,
        rng: &mut R,
    ) -> Result<V> {
        match &self.spec {
            PolicySpec::Ddpm { .. } => ddpm_sample(
                &self.net,
                params,
                states,
                batch,
                self.schedule.as_ref().unwrap(),
                rng,
                self.bounds,
            ),
            PolicySpec::FlowMatching { train_steps, .. } => {
                euler_sample(&self.net, params, states, batch, *train_steps, rng, self.bounds)
            }
            PolicySpec::MeanFlow { .. } => one_step_sample(&self.net, params, states, batch, rng, self.bounds),
        }
    }

    /// Inference-time sampling.
    pub fn sample_eval<V: TensorOps, R: Rng>(
        &self,
        sampler: Sampler,
        params: &[V],
        states: Option<&V>,
        batch: usize,
        rng: &mut R,
    ) -> Result<V> {
        match (sampler, &self.spec) {
            (Sampler::Native, PolicySpec::FlowMatching { eval_steps, .. }) => {
                euler_sample(&self.net, params, states, batch, *eval_steps, rng, self.bounds)
            }
            (Sampler::Native, _) => self.sample_train(params, states, batch, rng),
            (Sampler::DdimOneStep, PolicySpec::Ddpm { .. }) => {
                let prior = ddpm::gaussian(rng, batch, self.net.action_dim);
                ddim_one_step_with(
                    &self.net,
                    params,
                    states,
                    self.schedule.as_ref().unwrap(),
                    &prior,
                    self.bounds,
                )
            }
            (Sampler::DdimOneStep, _) => Err(Error::invalid("DDIM sampling needs a DDPM policy")),
            (Sampler::Euler(_), PolicySpec::Ddpm { .. }) => {
                Err(Error::invalid("Euler sampling needs a velocity policy"))
            }
            (Sampler::Euler(n), _) => euler_sample(&self.net, params, states, batch, n, rng, self.bounds),
        }
    }

    /// Network evaluations per generated action.
    pub fn nfe(&self, sampler: Sampler) -> usize {
        match (sampler, &self.spec) {
            (Sampler::Native, PolicySpec::Ddpm { steps }) => *steps,
            (Sampler::Native, PolicySpec::FlowMatching { eval_steps, .. }) => *eval_steps,
            (Sampler::Native, PolicySpec::MeanFlow { .. }) => 1,
            (Sampler::DdimOneStep, _) => 1,
            (Sampler::Euler(n), _) => n,
        }
    }

    /// Network evaluations per action inside the actor update.
    pub fn train_nfe(&self) -> usize {
        match &self.spec {
            PolicySpec::Ddpm { steps } => *steps,
            PolicySpec::FlowMatching { train_steps, .. } => *train_steps,
            PolicySpec::MeanFlow { .. } => 1,
        }
    }
}

/// Minibatch schedule for [`fit_behavior`]. The learning rate follows a
/// cosine from `lr` to `final_lr`; equal values give a constant rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub final_lr: f64,
}

impl FitConfig {
    pub fn constant(steps: usize, batch: usize, lr: f64) -> Self {
        FitConfig {
            steps,
            batch,
            lr,
            final_lr: lr,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.final_lr + 0.5 * (self.lr - self.final_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Pure behavior cloning: Adam updates of the family's behavior loss on
/// minibatches drawn with replacement. Returns the per-step losses (`NaN`
/// marks a skipped non-finite step).
pub fn fit_behavior<R: Rng>(
    policy: &Policy,
    params: &mut MlpParams,
    actions: &Tensor,
    states: Option<&Tensor>,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if actions.is_empty() || cfg.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut adam = AdamState::new(&params.tensors, AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..actions.rows())).collect();
        let a = actions.gather_rows(&idx);
        let s = states.map(|s| s.gather_rows(&idx));
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.tensors.iter().map(|p| tape.var(p.clone())).collect();
        let loss = policy.behavior_loss(&vars, &a, s.as_ref(), rng)?;
        let value = loss.value().item();
        if !value.is_finite() {
            losses.push(f64::NAN);
            continue;
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|v| v.grad().expect("populated")).collect();
        adam.step(&mut params.tensors, &grads, cfg.lr_at(step))?;
        losses.push(value);
    }
    Ok(losses)
}
