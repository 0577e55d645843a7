use ofql_core::autodiff::{Tape, Tensor, TensorOps, Var};
use ofql_core::envs::dataset::Batch;
use ofql_core::envs::*;
use ofql_core::policy::*;
use ofql_core::rl::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(policy: PolicySpec, seed: u64) -> TrainConfig {
    TrainConfig {
        policy,
        hidden: vec![32, 32],
        critic_hidden: vec![32, 32],
        embed_dim: 8,
        batch: 64,
        seed,
        log_every: 10,
        ..Default::default()
    }
}

fn ofql() -> PolicySpec {
    PolicySpec::MeanFlow {
        time: TimePairDistribution::default(),
    }
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, sd: usize, ad: usize, done_p: f64) -> Batch {
    let m = |rng: &mut ChaCha8Rng, c: usize| Tensor::matrix(b, c, (0..b * c).map(|_| rng.random_range(-1.0..1.0)).collect());
    Batch {
        states: m(rng, sd),
        actions: m(rng, ad),
        rewards: Tensor::column((0..b).map(|_| rng.random_range(-1.0..0.0)).collect()),
        next_states: m(rng, sd),
        dones: Tensor::column((0..b).map(|_| if rng.random::<f64>() < done_p { 1.0 } else { 0.0 }).collect()),
    }
}

/// Critic whose output is the constant `c`: zero weights, final bias `c`.
fn constant_critic(state: &mut TrainState, c: f64) {
    for q in state.critics.iter_mut().chain(state.critic_targets.iter_mut()) {
        for t in q.tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let last = q.tensors.len() - 1;
        q.tensors[last].data_mut()[0] = c;
    }
}

#[test]
fn gamma_zero_target_is_reward_and_oracle_critic_has_zero_loss() {
    let mut st = TrainState::new(
        TrainConfig {
            gamma: 0.0,
            ..small_config(ofql(), 0)
        },
        2,
        2,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut batch = random_batch(&mut rng, 16, 2, 2, 0.0);
    let y = bellman_target(&st, &batch, &mut rng).unwrap();
    assert_eq!(y, batch.rewards);
    // oracle Q == r: constant rewards and a constant critic
    batch.rewards = Tensor::column(vec![-0.3; 16]);
    constant_critic(&mut st, -0.3);
    let y = bellman_target(&st, &batch, &mut rng).unwrap();
    let loss = critic_loss(&st.critic, &st.critics[0].tensors, &st.critics[1].tensors, &batch, &y).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn done_transitions_ignore_next_state_value() {
    let mut st = TrainState::new(small_config(ofql(), 0), 2, 2).unwrap();
    constant_critic(&mut st, 123.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = random_batch(&mut rng, 32, 2, 2, 0.5);
    let y = bellman_target(&st, &batch, &mut rng).unwrap();
    for i in 0..32 {
        let r = batch.rewards.get(i, 0);
        if batch.dones.get(i, 0) == 1.0 {
            assert_eq!(y.get(i, 0), r);
        } else {
            assert!((y.get(i, 0) - (r + 0.99 * 123.0)).abs() < 1e-10);
        }
    }
}

#[test]
fn bandit_critic_reaches_fixed_point() {
    // one state, one action, r = 1, gamma = 0
    let mut st = TrainState::new(
        TrainConfig {
            gamma: 0.0,
            critic_lr: 1e-2,
            ..small_config(ofql(), 3)
        },
        1,
        1,
    )
    .unwrap();
    let batch = Batch {
        states: Tensor::matrix(8, 1, vec![0.0; 8]),
        actions: Tensor::matrix(8, 1, vec![0.3; 8]),
        rewards: Tensor::column(vec![1.0; 8]),
        next_states: Tensor::matrix(8, 1, vec![0.0; 8]),
        dones: Tensor::column(vec![1.0; 8]),
    };
    for _ in 0..500 {
        assert!(critic_step(&mut st, &batch).unwrap().applied);
    }
    for q in &st.critics {
        let v = st.critic.forward(&q.tensors, &batch.states, &batch.actions);
        assert!(v.data().iter().all(|x| (x - 1.0).abs() < 1e-3), "{:?}", v.row(0));
    }
}

#[test]
fn double_q_target_never_exceeds_either_critic() {
    let st = TrainState::new(small_config(PolicySpec::Ddpm { steps: 3 }, 4), 2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(&mut rng, 64, 2, 2, 0.2);
    let mut r1 = rng.clone();
    let y = bellman_target(&st, &batch, &mut r1).unwrap();
    // same rng stream gives the same next actions
    let a_next = st
        .policy
        .sample_train(&st.actor_target.tensors, Some(&batch.next_states), 64, &mut rng)
        .unwrap();
    for q in &st.critic_targets {
        let qi = st.critic.forward(&q.tensors, &batch.next_states, &a_next);
        for i in 0..64 {
            let bound = batch.rewards.get(i, 0) + 0.99 * (1.0 - batch.dones.get(i, 0)) * qi.get(i, 0);
            assert!(y.get(i, 0) <= bound + 1e-12);
        }
    }
}

#[test]
fn max_q_backup_with_one_action_is_standard_target() {
    let st = TrainState::new(small_config(ofql(), 6), 2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = random_batch(&mut rng, 32, 2, 2, 0.0);
    let mut r1 = rng.clone();
    let standard = bellman_target(&st, &batch, &mut r1).unwrap();
    let st_max = TrainState {
        config: TrainConfig {
            max_q_backup: true,
            max_q_actions: 1,
            ..st.config.clone()
        },
        ..st.clone()
    };
    let with_max = bellman_target(&st_max, &batch, &mut rng).unwrap();
    assert_eq!(standard, with_max);
}

#[test]
fn max_q_backup_with_deterministic_actions_ignores_count() {
    let st = TrainState::new(small_config(ofql(), 8), 2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s_next = random_batch(&mut rng, 10, 2, 2, 0.0).next_states;
    // zero noise injection: one_step_sample with eps = 0 for every copy
    let actions_for = |n: usize| {
        let rep = s_next.repeat_rows(n);
        one_step_sample_with(
            &st.policy.net,
            &st.actor_target.tensors,
            Some(&rep),
            &Tensor::zeros(&[rep.rows(), 2]),
            ACTION_BOUNDS,
        )
        .unwrap()
    };
    let base = max_q_over_samples(&st, &s_next, &actions_for(1), 1);
    for n in [2, 5, 10] {
        assert_eq!(max_q_over_samples(&st, &s_next, &actions_for(n), n), base);
    }
}

#[test]
fn max_q_backup_grows_with_action_count_in_expectation() {
    let mut st = TrainState::new(small_config(ofql(), 10), 2, 2).unwrap();
    // a non-trivial actor so sampled actions spread out
    st.actor_target = ofql_core::nn::init_params_with(77, &st.policy.net.dims(), ofql_core::nn::FinalLayerInit::FanIn);
    let reps = 10_000;
    let s_next = Tensor::matrix(reps, 2, [0.2, -0.4].repeat(reps));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut means = Vec::new();
    for n in [1, 2, 4, 8] {
        let v = max_q_backup_target(&st, &s_next, n, &mut rng).unwrap();
        means.push(v.mean());
    }
    for w in means.windows(2) {
        assert!(w[1] >= w[0], "{means:?}");
    }
    assert!(means[3] > means[0]);
}

#[test]
fn alpha_arithmetic_and_statistic() {
    assert!((alpha_from(0.1, 10.0) - 0.01).abs() < 1e-18);
    let mut a = AlphaStat::new(0.1, 0.99);
    assert_eq!(a.mean_abs_q, None);
    a.update(10.0);
    assert_eq!(a.alpha(), 0.1 / 10.0);
    a.update(20.0);
    assert!((a.mean_abs_q.unwrap() - 10.1).abs() < 1e-12);
    a.update(f64::NAN);
    assert!((a.mean_abs_q.unwrap() - 10.1).abs() < 1e-12);
}

#[test]
fn eta_zero_actor_loss_is_behavior_term() {
    let st = TrainState::new(small_config(PolicySpec::Ddpm { steps: 3 }, 12), 2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let batch = random_batch(&mut rng, 16, 2, 2, 0.0);
    let loss = actor_loss(
        &st.policy,
        &st.critic,
        &st.actor.tensors,
        &st.critics[0].tensors,
        &st.critics[1].tensors,
        &batch,
        0.0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(loss.total.item(), loss.behavior.item());
}

#[test]
fn gradients_stay_isolated() {
    for spec in [ofql(), PolicySpec::Ddpm { steps: 3 }] {
        let st = TrainState::new(small_config(spec, 14), 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let batch = random_batch(&mut rng, 16, 2, 2, 0.0);

        // behavior term of the actor loss: no gradient into critics
        let tape = Tape::new();
        let actor: Vec<Var<'_>> = st.actor.tensors.iter().map(|p| tape.var(p.clone())).collect();
        let q1: Vec<Var<'_>> = st.critics[0].tensors.iter().map(|p| tape.var(p.clone())).collect();
        let q2: Vec<Var<'_>> = st.critics[1].tensors.iter().map(|p| tape.var(p.clone())).collect();
        let parts = actor_loss(&st.policy, &st.critic, &actor, &q1, &q2, &batch, 0.3, &mut rng).unwrap();
        tape.backward(parts.behavior).unwrap();
        for v in q1.iter().chain(&q2) {
            assert!(v.grad().unwrap().data().iter().all(|&g| g == 0.0));
        }
        assert!(actor.iter().any(|v| v.grad().unwrap().data().iter().any(|&g| g != 0.0)));

        // critic loss: no gradient into the actor even when it shares the tape
        let tape = Tape::new();
        let actor: Vec<Var<'_>> = st.actor.tensors.iter().map(|p| tape.var(p.clone())).collect();
        let q1: Vec<Var<'_>> = st.critics[0].tensors.iter().map(|p| tape.var(p.clone())).collect();
        let q2: Vec<Var<'_>> = st.critics[1].tensors.iter().map(|p| tape.var(p.clone())).collect();
        let nxt = tape.constant(batch.next_states.clone());
        let a_next = st.policy.sample_train(&actor, Some(&nxt), 16, &mut rng).unwrap();
        let y = batch.rewards.add(&min_q(&st.critic, &st.critic_targets[0].tensors, &st.critic_targets[1].tensors, &batch.next_states, &a_next.value()).scale(0.99));
        let loss = critic_loss(&st.critic, &q1, &q2, &batch, &y).unwrap();
        tape.backward(loss).unwrap();
        for v in &actor {
            assert!(v.grad().unwrap().data().iter().all(|&g| g == 0.0));
        }
        assert!(q1.iter().any(|v| v.grad().unwrap().data().iter().any(|&g| g != 0.0)));
    }
}

#[test]
fn actor_tape_counts_policy_forwards() {
    let env = Env::by_name("point_mass").unwrap();
    let ds = make_offline_dataset(&env, Behavior::Mixture, 200, 0).unwrap();
    for (spec, expected) in [
        (ofql(), 1),
        (PolicySpec::Ddpm { steps: 5 }, 5),
        (PolicySpec::Ddpm { steps: 12 }, 12),
        (
            PolicySpec::FlowMatching {
                train_steps: 4,
                eval_steps: 1,
            },
            4,
        ),
    ] {
        let mut st = TrainState::for_dataset(small_config(spec, 0), &ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = ds.sample_batch(32, &mut rng).unwrap();
        critic_step(&mut st, &batch).unwrap();
        let stats = actor_step(&mut st, &batch).unwrap();
        assert_eq!(stats.sampler_forwards, expected);
        assert_eq!(st.policy.train_nfe(), expected);
    }
}

#[test]
fn targets_track_frozen_online_params() {
    let mut st = TrainState::new(small_config(ofql(), 16), 2, 2).unwrap();
    st.critics[0] = st.critic.init(999);
    st.actor = st.policy.net.init(998);
    let dist = |st: &TrainState| {
        st.critics[0]
            .tensors
            .iter()
            .zip(&st.critic_targets[0].tensors)
            .map(|(a, b)| a.zip_map(b, |x, y| (x - y).powi(2)).sum())
            .sum::<f64>()
            .sqrt()
    };
    let mut last = dist(&st);
    for _ in 0..50 {
        update_targets(&mut st).unwrap();
        let d = dist(&st);
        assert!(d < last);
        assert!((d - 0.995 * last).abs() < 1e-9 * last.max(1.0));
        last = d;
    }
}

#[test]
fn zero_steps_leave_state_untouched() {
    let env = Env::by_name("bandit").unwrap();
    let ds = make_offline_dataset(&env, Behavior::BanditMixture, 100, 0).unwrap();
    let mut st = TrainState::for_dataset(small_config(ofql(), 0), &ds).unwrap();
    let before = st.clone();
    let rows = train(&mut st, &ds, 0).unwrap();
    assert!(rows.is_empty());
    assert_eq!(st.actor, before.actor);
    assert_eq!(st.critics, before.critics);
    assert_eq!(st.step, 0);
}

#[test]
fn training_is_bitwise_deterministic() {
    let env = Env::by_name("point_mass").unwrap();
    let ds = make_offline_dataset(&env, Behavior::Mixture, 400, 1).unwrap();
    let run = || {
        let mut st = TrainState::for_dataset(small_config(ofql(), 21), &ds).unwrap();
        let rows = train(&mut st, &ds, 25).unwrap();
        (st, rows)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    for (x, y) in a.actor.tensors.iter().chain(&a.critics[1].tensors).zip(b.actor.tensors.iter().chain(&b.critics[1].tensors)) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_eq!(a.step, 25);
    // 25 steps logged every 10: rows at 10, 20 and a partial row at 25
    assert_eq!(ra.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 25]);
    assert!(ra.iter().all(|r| r.critic_loss.is_finite() && r.behavior_loss >= 0.0));
}

#[test]
fn empty_batches_are_rejected() {
    let st = TrainState::new(small_config(ofql(), 0), 1, 1).unwrap();
    let env = Env::by_name("bandit").unwrap();
    let ds = make_offline_dataset(&env, Behavior::BanditMixture, 10, 0).unwrap();
    assert!(matches!(ds.batch(&[]), Err(ofql_core::Error::EmptyBatch)));
    assert!(matches!(
        TrainState::new(TrainConfig { batch: 0, ..st.config.clone() }, 1, 1),
        Err(ofql_core::Error::EmptyBatch)
    ));
}

#[test]
fn reference_policies_score_near_anchors() {
    let env = Env::by_name("point_mass").unwrap();
    let random = evaluate_with(&env, 1000, 5, |s, rng| {
        Ok(Tensor::matrix(s.rows(), 2, (0..2 * s.rows()).map(|_| rng.random_range(-1.0..=1.0)).collect()))
    })
    .unwrap();
    assert!(random.normalized_score.abs() <= 5.0, "{}", random.normalized_score);
    let expert = evaluate_with(&env, 1000, 5, |s, _| {
        let rows: Vec<Vec<f64>> = (0..s.rows()).map(|i| env.expert_action(s.row(i))).collect();
        Ok(Tensor::from_rows(&rows))
    })
    .unwrap();
    assert!((expert.normalized_score - 100.0).abs() <= 5.0, "{}", expert.normalized_score);
}

#[test]
fn evaluation_is_reproducible() {
    let env = Env::by_name("point_mass").unwrap();
    let st = TrainState::new(small_config(ofql(), 3), 2, 2).unwrap();
    let a = evaluate_policy(&st.policy, &st.actor, &env, Sampler::Native, 20, 9).unwrap();
    let b = evaluate_policy(&st.policy, &st.actor, &env, Sampler::Native, 20, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.returns.len(), 20);
    // zero-initialized policy: a = clip(eps), a random walk
    assert!(a.normalized_score < 30.0);
}

fn bandit_reward_after_training(eta: f64, seed: u64) -> (f64, f64, f64) {
    let env = Env::by_name("bandit").unwrap();
    let ds = make_offline_dataset(&env, Behavior::BanditMixture, 2000, seed).unwrap();
    let cfg = TrainConfig {
        eta,
        actor_lr: 1e-3,
        critic_lr: 1e-3,
        ..small_config(ofql(), seed)
    };
    let mut st = TrainState::for_dataset(cfg, &ds).unwrap();
    train(&mut st, &ds, 1500).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let s = Tensor::matrix(1000, 1, vec![0.0; 1000]);
    let a = st.policy.sample_eval(Sampler::Native, &st.actor.tensors, Some(&s), 1000, &mut rng).unwrap();
    let reward = a.data().iter().map(|&x| MultimodalBandit::reward(x)).sum::<f64>() / 1000.0;
    let hi = a.data().iter().filter(|x| (**x - 0.6).abs() < 0.2).count() as f64 / 1000.0;
    let lo = a.data().iter().filter(|x| (**x + 0.6).abs() < 0.2).count() as f64 / 1000.0;
    (reward, hi, lo)
}

#[test]
fn q_guidance_raises_bandit_reward() {
    for seed in 0..3 {
        let (r0, _, _) = bandit_reward_after_training(0.0, seed);
        let (r5, hi5, _) = bandit_reward_after_training(0.5, seed);
        assert!(r5 > r0, "seed {seed}: eta 0 -> {r0}, eta 0.5 -> {r5}");
        assert!(hi5 > 0.8, "seed {seed}: {hi5}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn losses_are_finite_and_critic_loss_non_negative(seed in 0u64..1000) {
        let st = TrainState::new(small_config(ofql(), seed), 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, 8, 2, 2, 0.3);
        let y = bellman_target(&st, &batch, &mut rng).unwrap();
        let c = critic_loss(&st.critic, &st.critics[0].tensors, &st.critics[1].tensors, &batch, &y).unwrap();
        prop_assert!(c.item().is_finite() && c.item() >= 0.0);
        let a = actor_loss(&st.policy, &st.critic, &st.actor.tensors, &st.critics[0].tensors, &st.critics[1].tensors, &batch, 0.1, &mut rng).unwrap();
        prop_assert!(a.total.item().is_finite() && a.behavior.item() >= 0.0);
    }
}
