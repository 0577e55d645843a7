//! Behavior-regularized actor-critic training: double-Q critics with EMA
//! targets, an actor loss mixing behavior cloning with Q maximization, and
//! lockstep batched evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ema_update, AdamConfig, AdamOutcome, AdamState, Tape, Tensor, TensorOps, Var};
use crate::envs::dataset::Batch;
use crate::envs::{normalized_score, Env, OfflineDataset};
use crate::error::{Error, Result};
use crate::nn::{CriticNet, MlpParams, POLICY_FORWARD_TAG};
use crate::policy::{Policy, PolicySpec, Sampler, TimePairDistribution, ACTION_BOUNDS};

/// Trainer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub policy: PolicySpec,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub gamma: f64,
    /// EMA rate of the target networks.
    pub rho: f64,
    /// Target networks are updated every `target_period` steps.
    pub target_period: usize,
    pub eta: f64,
    pub alpha_decay: f64,
    pub batch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub max_q_backup: bool,
    pub max_q_actions: usize,
    /// Global gradient-norm clip applied to each update.
    pub grad_clip: Option<f64>,
    /// Metrics rows average over this many steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            policy: PolicySpec::MeanFlow {
                time: TimePairDistribution::default(),
            },
            hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            embed_dim: 64,
            gamma: 0.99,
            rho: 0.995,
            target_period: 5,
            eta: 0.1,
            alpha_decay: 0.99,
            batch: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            max_q_backup: false,
            max_q_actions: 10,
            grad_clip: None,
            log_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid("gamma and rho must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.alpha_decay) {
            return Err(Error::invalid("alpha_decay must lie in [0, 1)"));
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::invalid("eta must be finite and non-negative"));
        }
        if self.batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.target_period == 0 || self.log_every == 0 || self.max_q_actions == 0 {
            return Err(Error::invalid("target_period, log_every and max_q_actions must be positive"));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// `alpha = eta / E|Q(s, a)|` with the expectation tracked as an EMA of batch
/// means; it is a plain number, so no gradient flows through it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaStat {
    pub eta: f64,
    pub decay: f64,
    /// `None` until the first batch.
    pub mean_abs_q: Option<f64>,
}

impl AlphaStat {
    pub fn new(eta: f64, decay: f64) -> Self {
        AlphaStat {
            eta,
            decay,
            mean_abs_q: None,
        }
    }

    /// Folds in one batch mean; the first batch initializes the average.
    pub fn update(&mut self, batch_mean_abs_q: f64) {
        if !batch_mean_abs_q.is_finite() {
            return;
        }
        self.mean_abs_q = Some(match self.mean_abs_q {
            None => batch_mean_abs_q,
            Some(m) => self.decay * m + (1.0 - self.decay) * batch_mean_abs_q,
        });
    }

    pub fn alpha(&self) -> f64 {
        match self.mean_abs_q {
            Some(m) => alpha_from(self.eta, m),
            None => self.eta,
        }
    }
}

pub fn alpha_from(eta: f64, mean_abs_q: f64) -> f64 {
    eta / mean_abs_q.max(1e-8)
}

/// One averaged metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub behavior_loss: f64,
    pub q_mean: f64,
    pub alpha: f64,
    pub nonfinite_count: u64,
}

/// Everything the trainer owns.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub policy: Policy,
    pub critic: CriticNet,
    pub actor: MlpParams,
    pub actor_target: MlpParams,
    pub critics: [MlpParams; 2],
    pub critic_targets: [MlpParams; 2],
    pub actor_adam: AdamState,
    pub critic_adam: [AdamState; 2],
    pub alpha: AlphaStat,
    pub step: u64,
    pub nonfinite: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        config.validate()?;
        let policy = Policy::new(
            config.policy.clone(),
            action_dim,
            state_dim,
            config.embed_dim,
            &config.hidden,
            ACTION_BOUNDS,
        )?;
        let critic = CriticNet::new(action_dim, state_dim, &config.critic_hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let actor = policy.net.init(rng.random());
        let critics = [critic.init(rng.random()), critic.init(rng.random())];
        let adam = AdamConfig::default();
        Ok(TrainState {
            actor_adam: AdamState::new(&actor.tensors, adam),
            critic_adam: [
                AdamState::new(&critics[0].tensors, adam),
                AdamState::new(&critics[1].tensors, adam),
            ],
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            alpha: AlphaStat::new(config.eta, config.alpha_decay),
            config,
            policy,
            critic,
            actor,
            critics,
            step: 0,
            nonfinite: 0,
            rng,
        })
    }

    pub fn for_dataset(config: TrainConfig, dataset: &OfflineDataset) -> Result<Self> {
        Self::new(config, dataset.meta.state_dim, dataset.meta.action_dim)
    }
}

/// `[B, 1]` of `min(Q1, Q2)`.
pub fn min_q<V: TensorOps>(critic: &CriticNet, q1: &[V], q2: &[V], s: &V, a: &V) -> V {
    critic.forward(q1, s, a).minimum(&critic.forward(q2, s, a))
}

/// `r + gamma (1 - done) min_i Q_i'(s', a')` with `a' ~ pi_theta'`; a plain
/// tensor, so gradient-blocked by construction.
pub fn bellman_target<R: Rng>(state: &TrainState, batch: &Batch, rng: &mut R) -> Result<Tensor> {
    let next_v = if state.config.max_q_backup {
        max_q_backup_target(state, &batch.next_states, state.config.max_q_actions, rng)?
    } else {
        let a_next = state.policy.sample_train(
            &state.actor_target.tensors,
            Some(&batch.next_states),
            batch.next_states.rows(),
            rng,
        )?;
        target_min_q(state, &batch.next_states, &a_next)
    };
    Ok(bootstrap(state.config.gamma, batch, &next_v))
}

fn target_min_q(state: &TrainState, s: &Tensor, a: &Tensor) -> Tensor {
    min_q(
        &state.critic,
        &state.critic_targets[0].tensors,
        &state.critic_targets[1].tensors,
        s,
        a,
    )
}

fn bootstrap(gamma: f64, batch: &Batch, next_v: &Tensor) -> Tensor {
    let b = batch.rewards.rows();
    Tensor::column(
        (0..b)
            .map(|i| batch.rewards.get(i, 0) + gamma * (1.0 - batch.dones.get(i, 0)) * next_v.get(i, 0))
            .collect(),
    )
}

/// Max over `n_actions` target-policy samples of `min_i Q_i'(s', a')`.
pub fn max_q_backup_target<R: Rng>(state: &TrainState, s_next: &Tensor, n_actions: usize, rng: &mut R) -> Result<Tensor> {
    if n_actions == 0 {
        return Err(Error::invalid("max-Q backup needs at least one action"));
    }
    let rep = s_next.repeat_rows(n_actions);
    let actions = state
        .policy
        .sample_train(&state.actor_target.tensors, Some(&rep), rep.rows(), rng)?;
    Ok(max_q_over_samples(state, s_next, &actions, n_actions))
}

/// `actions` holds `n_actions` consecutive rows per state (the layout of
/// [`Tensor::repeat_rows`]).
pub fn max_q_over_samples(state: &TrainState, s_next: &Tensor, actions: &Tensor, n_actions: usize) -> Tensor {
    let rep = s_next.repeat_rows(n_actions);
    let q = target_min_q(state, &rep, actions);
    Tensor::column(
        (0..s_next.rows())
            .map(|i| (0..n_actions).map(|j| q.get(i * n_actions + j, 0)).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    )
}

/// `sum_i mean_B (Q_i(s, a) - y)^2`.
pub fn critic_loss<V: TensorOps>(critic: &CriticNet, q1: &[V], q2: &[V], batch: &Batch, target: &Tensor) -> Result<V> {
    let b = batch.states.rows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let anchor = &q1[0];
    let s = anchor.lift(batch.states.clone());
    let a = anchor.lift(batch.actions.clone());
    let y = anchor.lift(target.clone()).stop_grad();
    let l1 = critic.forward(q1, &s, &a).sub(&y).square().mean();
    let l2 = critic.forward(q2, &s, &a).sub(&y).square().mean();
    Ok(l1.add(&l2))
}

/// Actor loss parts; `total = behavior - alpha * q_term`.
pub struct ActorLoss<V> {
    pub total: V,
    pub behavior: V,
    pub q_term: V,
}

/// `L_behavior - alpha mean(min(Q1, Q2)(s, a))` with `a ~ pi_theta(.|s)`
/// sampled differentiably by the family's training sampler.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss<V: TensorOps, R: Rng>(
    policy: &Policy,
    critic: &CriticNet,
    actor: &[V],
    q1: &[V],
    q2: &[V],
    batch: &Batch,
    alpha: f64,
    rng: &mut R,
) -> Result<ActorLoss<V>> {
    let b = batch.states.rows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let anchor = &actor[0];
    let s = anchor.lift(batch.states.clone());
    let a = policy.sample_train(actor, Some(&s), b, rng)?;
    let q_term = min_q(critic, q1, q2, &s, &a).mean();
    let behavior = policy.behavior_loss(actor, &batch.actions, Some(&batch.states), rng)?;
    let total = behavior.sub(&q_term.scale(alpha));
    Ok(ActorLoss {
        total,
        behavior,
        q_term,
    })
}

/// Scalars from one critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStats {
    pub loss: f64,
    pub mean_abs_q: f64,
    pub applied: bool,
}

/// Scalars from one actor update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorStats {
    pub loss: f64,
    pub behavior: f64,
    pub q_term: f64,
    pub alpha: f64,
    /// Policy-net forward passes recorded while sampling the actor's actions.
    pub sampler_forwards: usize,
    pub applied: bool,
}

fn clip_grads(grads: &mut [Tensor], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
}

fn leaf_grads(vars: &[Var<'_>]) -> Vec<Tensor> {
    vars.iter().map(|v| v.grad().expect("backward populates every leaf")).collect()
}

/// One Adam step on both critics; also folds the batch mean `|Q1(s, a)|`
/// into the alpha statistic.
pub fn critic_step(state: &mut TrainState, batch: &Batch) -> Result<CriticStats> {
    let mut rng = state.rng.clone();
    let target = bellman_target(state, batch, &mut rng)?;
    state.rng = rng;
    let tape = Tape::new();
    let v1: Vec<Var<'_>> = state.critics[0].tensors.iter().map(|p| tape.var(p.clone())).collect();
    let v2: Vec<Var<'_>> = state.critics[1].tensors.iter().map(|p| tape.var(p.clone())).collect();
    let q_data = state.critic.forward(&state.critics[0].tensors, &batch.states, &batch.actions);
    let mean_abs_q = q_data.data().iter().map(|q| q.abs()).sum::<f64>() / q_data.len() as f64;
    let loss = critic_loss(&state.critic, &v1, &v2, batch, &target)?;
    let value = loss.value().item();
    if !value.is_finite() {
        state.nonfinite += 1;
        return Ok(CriticStats {
            loss: value,
            mean_abs_q,
            applied: false,
        });
    }
    tape.backward(loss)?;
    let mut applied = true;
    for (i, vars) in [v1, v2].iter().enumerate() {
        let mut g = leaf_grads(vars);
        clip_grads(&mut g, state.config.grad_clip);
        let out = state.critic_adam[i].step(&mut state.critics[i].tensors, &g, state.config.critic_lr)?;
        if out == AdamOutcome::SkippedNonFinite {
            applied = false;
            state.nonfinite += 1;
        }
    }
    state.alpha.update(mean_abs_q);
    Ok(CriticStats {
        loss: value,
        mean_abs_q,
        applied,
    })
}

/// One Adam step on the actor; critics enter as constants.
pub fn actor_step(state: &mut TrainState, batch: &Batch) -> Result<ActorStats> {
    let alpha = state.alpha.alpha();
    let mut rng = state.rng.clone();
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = state.actor.tensors.iter().map(|p| tape.var(p.clone())).collect();
    let q1: Vec<Var<'_>> = state.critics[0].tensors.iter().map(|p| tape.constant(p.clone())).collect();
    let q2: Vec<Var<'_>> = state.critics[1].tensors.iter().map(|p| tape.constant(p.clone())).collect();
    let parts = actor_loss_counted(state, &tape, &vars, &q1, &q2, batch, alpha, &mut rng)?;
    state.rng = rng;
    let (loss, sampler_forwards) = parts;
    let stats = ActorStats {
        loss: loss.total.value().item(),
        behavior: loss.behavior.value().item(),
        q_term: loss.q_term.value().item(),
        alpha,
        sampler_forwards,
        applied: false,
    };
    if !stats.loss.is_finite() {
        state.nonfinite += 1;
        return Ok(stats);
    }
    tape.backward(loss.total)?;
    let mut g = leaf_grads(&vars);
    clip_grads(&mut g, state.config.grad_clip);
    let out = state.actor_adam.step(&mut state.actor.tensors, &g, state.config.actor_lr)?;
    if out == AdamOutcome::SkippedNonFinite {
        state.nonfinite += 1;
        return Ok(stats);
    }
    Ok(ActorStats { applied: true, ..stats })
}

#[allow(clippy::too_many_arguments)]
fn actor_loss_counted<'t, R: Rng>(
    state: &TrainState,
    tape: &'t Tape,
    actor: &[Var<'t>],
    q1: &[Var<'t>],
    q2: &[Var<'t>],
    batch: &Batch,
    alpha: f64,
    rng: &mut R,
) -> Result<(ActorLoss<Var<'t>>, usize)> {
    // same computation as `actor_loss`, split so the sampler's forward
    // passes can be counted on their own
    let b = batch.states.rows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let s = tape.constant(batch.states.clone());
    let before = tape.tag_count(POLICY_FORWARD_TAG);
    let a = state.policy.sample_train(actor, Some(&s), b, rng)?;
    let sampler_forwards = tape.tag_count(POLICY_FORWARD_TAG) - before;
    let q_term = min_q(&state.critic, q1, q2, &s, &a).mean();
    let behavior = state
        .policy
        .behavior_loss(actor, &batch.actions, Some(&batch.states), rng)?;
    let total = behavior.sub(&q_term.scale(alpha));
    Ok((
        ActorLoss {
            total,
            behavior,
            q_term,
        },
        sampler_forwards,
    ))
}

/// EMA of actor and both critics into their targets.
pub fn update_targets(state: &mut TrainState) -> Result<()> {
    let rho = state.config.rho;
    ema_update(&mut state.actor_target.tensors, &state.actor.tensors, rho)?;
    for i in 0..2 {
        ema_update(&mut state.critic_targets[i].tensors, &state.critics[i].tensors, rho)?;
    }
    Ok(())
}

/// `n_steps` iterations of: sample batch, critic step, actor step, and every
/// `target_period` steps an EMA of the targets. Returns one metrics row per
/// `log_every` steps (plus a final partial row).
pub fn train(state: &mut TrainState, dataset: &OfflineDataset, n_steps: usize) -> Result<Vec<MetricsRow>> {
    if n_steps == 0 {
        return Ok(Vec::new());
    }
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if dataset.meta.state_dim != state.critic.state_dim || dataset.meta.action_dim != state.critic.action_dim {
        return Err(Error::invalid("dataset dims do not match the networks"));
    }
    let mut rows = Vec::new();
    let mut acc = [0.0f64; 5];
    let mut count = 0usize;
    for _ in 0..n_steps {
        let mut rng = state.rng.clone();
        let batch = dataset.sample_batch(state.config.batch, &mut rng)?;
        state.rng = rng;
        let c = critic_step(state, &batch)?;
        let a = actor_step(state, &batch)?;
        state.step += 1;
        if state.step.is_multiple_of(state.config.target_period as u64) {
            update_targets(state)?;
        }
        acc[0] += c.loss;
        acc[1] += a.loss;
        acc[2] += a.behavior;
        acc[3] += a.q_term;
        acc[4] += a.alpha;
        count += 1;
        if state.step.is_multiple_of(state.config.log_every as u64) {
            rows.push(flush(state, &mut acc, &mut count));
        }
    }
    if count > 0 {
        rows.push(flush(state, &mut acc, &mut count));
    }
    Ok(rows)
}

fn flush(state: &TrainState, acc: &mut [f64; 5], count: &mut usize) -> MetricsRow {
    let n = *count as f64;
    let row = MetricsRow {
        step: state.step,
        critic_loss: acc[0] / n,
        actor_loss: acc[1] / n,
        behavior_loss: acc[2] / n,
        q_mean: acc[3] / n,
        alpha: acc[4] / n,
        nonfinite_count: state.nonfinite,
    };
    *acc = [0.0; 5];
    *count = 0;
    row
}

/// Mean return and normalized score over a set of episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
    pub returns: Vec<f64>,
}

/// Runs `episodes` episodes in lockstep: at every time step the states of
/// all unfinished episodes form one batch passed to `act`, which returns
/// one action row per state. Episodes end when done or at the horizon.
pub fn evaluate_with<F>(env: &Env, episodes: usize, seed: u64, mut act: F) -> Result<EvalResult>
where
    F: FnMut(&Tensor, &mut ChaCha8Rng) -> Result<Tensor>,
{
    if episodes == 0 {
        return Err(Error::invalid("need at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states: Vec<Vec<f64>> = (0..episodes).map(|_| env.reset(&mut rng)).collect();
    let mut returns = vec![0.0; episodes];
    let mut active: Vec<usize> = (0..episodes).collect();
    for t in 0..env.horizon() {
        if active.is_empty() {
            break;
        }
        let rows: Vec<Vec<f64>> = active.iter().map(|&i| states[i].clone()).collect();
        let batch = Tensor::from_rows(&rows);
        let actions = act(&batch, &mut rng)?;
        if actions.rows() != active.len() || actions.cols() != env.action_dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![active.len(), env.action_dim()],
                actual: actions.shape().to_vec(),
            });
        }
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let out = env.step(&states[i], actions.row(k), t);
            returns[i] += out.reward;
            states[i] = out.next_state;
            if !out.done {
                still.push(i);
            }
        }
        active = still;
    }
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalResult {
        mean_return: mean,
        std_return: var.sqrt(),
        normalized_score: normalized_score(mean, &env.ref_scores())?,
        returns,
    })
}

/// Evaluates the learned policy with the chosen inference sampler.
pub fn evaluate_policy(
    policy: &Policy,
    params: &MlpParams,
    env: &Env,
    sampler: Sampler,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    evaluate_with(env, episodes, seed, |s, rng| {
        policy.sample_eval(sampler, &params.tensors, Some(s), s.rows(), rng)
    })
}
