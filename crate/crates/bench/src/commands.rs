//! The subcommands. Each writes its artifacts plus a manifest under
//! `config.out`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ofql_core::autodiff::Tensor;
use ofql_core::envs::{energy_distance, make_offline_dataset, OfflineDataset, ToyDensity};
use ofql_core::nn::Checkpoint;
use ofql_core::policy::{fit_behavior, FitConfig, Policy, PolicySpec, Sampler, TimePairDistribution, ACTION_BOUNDS};
use ofql_core::rl::{evaluate_policy, train, EvalResult, MetricsRow, TrainState};

use crate::config::{Axis, Command, Family, RunConfig, Strategy};
use crate::manifest::Manifest;
use crate::timing::{time_calls, TimingSummary};
use crate::{BenchError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SCORES_FILE: &str = "scores.json";
pub const TIMING_FILE: &str = "timing.csv";
pub const TOY_FILE: &str = "toy_study.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Environment variable with the number of parallel sweep workers.
pub const WORKERS_VAR: &str = "OFQL_WORKERS";

/// Evaluation episodes use `EVAL_SEED_OFFSET + seed`, disjoint from training seeds.
pub const EVAL_SEED_OFFSET: u64 = 10_000;

/// Validates, then runs the configured command unless `dry_run`.
pub fn run(config: &RunConfig, checkpoint: Option<&Path>, dry_run: bool) -> Result<()> {
    config.validate()?;
    if config.command == Command::Eval && checkpoint.is_none() {
        return Err(BenchError::Config("eval needs --checkpoint".into()));
    }
    if dry_run {
        return Ok(());
    }
    match config.command {
        Command::Train => cmd_train(config).map(|_| ()),
        Command::Eval => cmd_eval(config, checkpoint.expect("checked above")).map(|_| ()),
        Command::BenchSpeed => cmd_bench_speed(config).map(|_| ()),
        Command::ToyStudy => cmd_toy_study(config).map(|_| ()),
        Command::Ablate => cmd_ablate(config).map(|_| ()),
        Command::Repro => cmd_repro(config),
    }
}

pub fn workers() -> usize {
    std::env::var(WORKERS_VAR)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on `n_workers` threads; results keep input order.
pub fn run_parallel<T: Sync, R: Send, F>(items: &[T], n_workers: usize, f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..n_workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| BenchError::Run(format!("cannot create output dir {}: {e}", dir.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// The offline dataset named by the config.
pub fn dataset_for(config: &RunConfig) -> Result<OfflineDataset> {
    let env = config.env()?;
    Ok(make_offline_dataset(
        &env,
        config.behavior()?,
        config.dataset.n_transitions,
        config.dataset.seed,
    )?)
}

/// Trains one `family` run on `dataset` for `config.n_steps` steps.
pub fn train_run(
    config: &RunConfig,
    family: Family,
    seed: u64,
    dataset: &OfflineDataset,
) -> Result<(TrainState, Vec<MetricsRow>)> {
    let mut state = TrainState::for_dataset(config.train_config(family, seed), dataset)?;
    let rows = train(&mut state, dataset, config.n_steps)?;
    Ok((state, rows))
}

/// Actor, critics and their targets, tagged with the config hash.
pub fn checkpoint_of(state: &TrainState, config_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.insert("actor", &state.actor);
    ck.insert("actor_target", &state.actor_target);
    for i in 0..2 {
        ck.insert(&format!("critic{}", i + 1), &state.critics[i]);
        ck.insert(&format!("critic{}_target", i + 1), &state.critic_targets[i]);
    }
    ck.meta.insert("config_hash".into(), config_hash.into());
    ck.meta.insert("step".into(), state.step.into());
    ck.meta.insert("seed".into(), state.config.seed.into());
    ck
}

/// One directory per seed with `metrics.csv` and `checkpoint.json`.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    create_out(&config.out)?;
    Manifest::new(config).write(&config.out)?;
    let dataset = dataset_for(config)?;
    let hash = config.hash();
    let results = run_parallel(&config.seeds, workers(), |&seed| -> Result<PathBuf> {
        let dir = seed_dir(&config.out, seed);
        create_out(&dir)?;
        let (state, rows) = train_run(config, config.family, seed, &dataset)?;
        write_csv(&dir.join(METRICS_FILE), &rows)?;
        checkpoint_of(&state, &hash).save(&dir.join(CHECKPOINT_FILE))?;
        Ok(dir)
    });
    let mut dirs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in config.seeds.iter().zip(results) {
        match r {
            Ok(d) => dirs.push(d),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(BenchError::Run(failures.join("; ")));
    }
    Ok(dirs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub env: String,
    pub family: Family,
    pub sampler: Sampler,
    pub nfe: usize,
    pub seed: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
    /// Per-episode returns.
    pub episodes: Vec<f64>,
}

pub fn policy_for(config: &RunConfig, family: Family) -> Result<Policy> {
    let env = config.env()?;
    Ok(Policy::new(
        config.policy_spec(family),
        env.action_dim(),
        env.state_dim(),
        config.embed_dim,
        &config.hidden,
        ACTION_BOUNDS,
    )?)
}

/// Scores the checkpoint's actor; writes `scores.json` under `config.out`.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<Scores> {
    config.validate()?;
    let env = config.env()?;
    let policy = policy_for(config, config.family)?;
    let ck = Checkpoint::load(checkpoint)?;
    let actor = ck.get("actor", &policy.net.dims())?;
    let seed = EVAL_SEED_OFFSET + config.seeds[0];
    let r = evaluate_policy(&policy, &actor, &env, config.eval_sampler, config.eval_episodes, seed)?;
    let scores = Scores {
        config_hash: config.hash(),
        checkpoint: checkpoint.to_path_buf(),
        env: env.name().to_string(),
        family: config.family,
        sampler: config.eval_sampler,
        nfe: policy.nfe(config.eval_sampler),
        seed,
        mean_return: r.mean_return,
        std_return: r.std_return,
        normalized_score: r.normalized_score,
        episodes: r.returns,
    };
    create_out(&config.out)?;
    std::fs::write(config.out.join(SCORES_FILE), serde_json::to_string_pretty(&scores)?)?;
    Ok(scores)
}

/// One row of `timing.csv`. Times are seconds; `per_action_us` is the
/// median batch time divided by the batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub label: String,
    pub family: Family,
    pub nfe: usize,
    pub train_nfe: usize,
    pub batch: usize,
    pub timed_batches: usize,
    pub batch_median_s: f64,
    pub batch_iqr_s: f64,
    pub decisions_hz: f64,
    pub actions_per_s: f64,
    pub per_action_us: f64,
    pub train_step_median_s: f64,
    pub train_step_iqr_s: f64,
}

/// Families compared by the timing run: OFQL, DQL at each K, FBRAC.
pub fn speed_lineup(config: &RunConfig) -> Vec<(String, Family, RunConfig)> {
    let mut out = vec![("ofql".to_string(), Family::Ofql, config.clone())];
    for &k in &config.timing.dql_steps {
        let mut c = config.clone();
        c.steps = k;
        out.push((format!("dql_k{k}"), Family::Dql, c));
    }
    out.push((
        format!("fbrac_n{}_infer{}", config.steps, config.infer_steps),
        Family::Fbrac,
        config.clone(),
    ));
    out
}

/// Decision frequency and training step time on freshly initialized
/// networks, one family at a time on the calling thread.
pub fn cmd_bench_speed(config: &RunConfig) -> Result<Vec<SpeedRow>> {
    config.validate()?;
    create_out(&config.out)?;
    Manifest::new(config).write(&config.out)?;
    let env = config.env()?;
    let t = &config.timing;
    let dataset = make_offline_dataset(&env, config.behavior()?, config.dataset.n_transitions, config.dataset.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds[0]);
    let states = Tensor::from_rows(&(0..t.batch).map(|_| env.reset(&mut rng)).collect::<Vec<_>>());
    let mut rows = Vec::new();
    for (label, family, c) in speed_lineup(config) {
        let mut state = TrainState::for_dataset(c.train_config(family, config.seeds[0]), &dataset)?;
        let policy = state.policy.clone();
        let actor = state.actor.clone();
        let mut srng = ChaCha8Rng::seed_from_u64(config.seeds[0]);
        let decide: TimingSummary = time_calls(t.n_batches, || {
            policy.sample_eval(Sampler::Native, &actor.tensors, Some(&states), t.batch, &mut srng)?;
            Ok(())
        })?;
        let step = time_calls(t.train_steps, || {
            train(&mut state, &dataset, 1)?;
            Ok(())
        })?;
        rows.push(SpeedRow {
            label,
            family,
            nfe: policy.nfe(Sampler::Native),
            train_nfe: policy.train_nfe(),
            batch: t.batch,
            timed_batches: decide.n,
            batch_median_s: decide.median,
            batch_iqr_s: decide.iqr,
            decisions_hz: 1.0 / decide.median,
            actions_per_s: t.batch as f64 / decide.median,
            per_action_us: 1e6 * decide.median / t.batch as f64,
            train_step_median_s: step.median,
            train_step_iqr_s: step.iqr,
        });
    }
    write_csv(&config.out.join(TIMING_FILE), &rows)?;
    Ok(rows)
}

/// One row of `toy_study.csv`; `param` is `v` or `u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRow {
    pub density: String,
    pub seed: u64,
    pub param: String,
    pub steps: usize,
    pub energy_distance: f64,
    pub samples_file: String,
}

fn toy_policy(config: &RunConfig, spec: PolicySpec) -> Result<Policy> {
    Ok(Policy::new(spec, 2, 0, config.toy.embed_dim, &config.toy.hidden, None)?)
}

fn write_points(path: &Path, pts: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y"])?;
    for i in 0..pts.rows() {
        let r = pts.row(i);
        w.write_record([r[0].to_string(), r[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Fits both parameterizations to one density and scores every sampler
/// configuration against fresh target samples.
pub fn toy_cell(config: &RunConfig, density: ToyDensity, seed: u64, dump_dir: Option<&Path>) -> Result<Vec<ToyRow>> {
    let t = &config.toy;
    let data = density.sample(t.n_train, 2 * seed)?;
    let target = density.sample(t.eval_samples, 2 * seed + 1)?;
    let fit = FitConfig {
        steps: t.fit_steps,
        batch: t.batch,
        lr: t.lr,
        final_lr: t.final_lr,
    };
    let v_pol = toy_policy(config, PolicySpec::FlowMatching { train_steps: 1, eval_steps: 1 })?;
    let u_pol = toy_policy(
        config,
        PolicySpec::MeanFlow {
            time: TimePairDistribution::with_flow_ratio(config.flow_ratio),
        },
    )?;
    let mut rows = Vec::new();
    let mut runs: Vec<(&str, &Policy, Vec<Sampler>)> =
        vec![("v", &v_pol, t.v_steps.iter().map(|&n| Sampler::Euler(n)).collect())];
    runs.push(("u", &u_pol, vec![Sampler::Native]));
    for (param, policy, samplers) in runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = policy.net.init(seed);
        fit_behavior(policy, &mut params, &data, None, &fit, &mut rng)?;
        for sampler in samplers {
            let steps = policy.nfe(sampler);
            let mut srng = ChaCha8Rng::seed_from_u64(EVAL_SEED_OFFSET + seed);
            let gen = policy.sample_eval(sampler, &params.tensors, None, t.eval_samples, &mut srng)?;
            let file = format!("{}_seed{seed}_{param}{steps}.csv", density.name());
            if let Some(dir) = dump_dir {
                write_points(&dir.join(&file), &gen)?;
            }
            rows.push(ToyRow {
                density: density.name().to_string(),
                seed,
                param: param.to_string(),
                steps,
                energy_distance: energy_distance(&gen, &target)?,
                samples_file: file,
            });
        }
    }
    if let Some(dir) = dump_dir {
        write_points(&dir.join(format!("{}_seed{seed}_target.csv", density.name())), &target)?;
    }
    Ok(rows)
}

/// `toy_study.csv` plus raw samples under `samples/`.
pub fn cmd_toy_study(config: &RunConfig) -> Result<Vec<ToyRow>> {
    config.validate()?;
    let dump = config.out.join("samples");
    create_out(&dump)?;
    Manifest::new(config).write(&config.out)?;
    let cells: Vec<(ToyDensity, u64)> = config
        .densities()?
        .into_iter()
        .flat_map(|d| config.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let results = run_parallel(&cells, workers(), |&(d, s)| toy_cell(config, d, s, Some(&dump)));
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    write_csv(&config.out.join(TOY_FILE), &rows)?;
    Ok(rows)
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: String,
    pub seed: u64,
    pub nfe: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
}

struct SweepJob {
    config: RunConfig,
    family: Family,
    seed: u64,
    /// Label and inference sampler of every row this trainer produces.
    evals: Vec<(String, Sampler)>,
}

fn sweep_jobs(config: &RunConfig) -> Vec<SweepJob> {
    let a = &config.ablate;
    let mut jobs = Vec::new();
    for &seed in &config.seeds {
        match a.axis {
            Axis::FlowRatio => {
                for &fr in &a.flow_ratios {
                    let mut c = config.clone();
                    c.flow_ratio = fr;
                    jobs.push(SweepJob {
                        config: c,
                        family: Family::Ofql,
                        seed,
                        evals: vec![(fr.to_string(), Sampler::Native)],
                    });
                }
            }
            Axis::Eta => {
                for &eta in &a.etas {
                    let mut c = config.clone();
                    c.eta = eta;
                    jobs.push(SweepJob {
                        config: c,
                        family: config.family,
                        seed,
                        evals: vec![(eta.to_string(), config.eval_sampler)],
                    });
                }
            }
            Axis::Strategy => {
                // one trainer per family; DQL serves both of its samplers
                let mut families: Vec<Family> = Vec::new();
                for s in &a.strategies {
                    if !families.contains(&s.family()) {
                        families.push(s.family());
                    }
                }
                for family in families {
                    let evals = a
                        .strategies
                        .iter()
                        .filter(|s| s.family() == family)
                        .map(|s| (s.name().to_string(), s.sampler()))
                        .collect();
                    jobs.push(SweepJob {
                        config: config.clone(),
                        family,
                        seed,
                        evals,
                    });
                }
            }
        }
    }
    jobs
}

/// Trains and evaluates a point of a sweep, returning one result per entry
/// of `samplers`.
pub fn train_and_score(
    config: &RunConfig,
    family: Family,
    seed: u64,
    dataset: &OfflineDataset,
    samplers: &[Sampler],
) -> Result<Vec<EvalResult>> {
    let env = config.env()?;
    let (state, _) = train_run(config, family, seed, dataset)?;
    samplers
        .iter()
        .map(|&s| {
            Ok(evaluate_policy(
                &state.policy,
                &state.actor,
                &env,
                s,
                config.eval_episodes,
                EVAL_SEED_OFFSET + seed,
            )?)
        })
        .collect()
}

/// Cross product of sweep values and seeds, one row per (value, seed).
pub fn cmd_ablate(config: &RunConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    create_out(&config.out)?;
    Manifest::new(config).write(&config.out)?;
    let dataset = dataset_for(config)?;
    let jobs = sweep_jobs(config);
    let results = run_parallel(&jobs, workers(), |job| -> Result<Vec<SweepRow>> {
        let samplers: Vec<Sampler> = job.evals.iter().map(|e| e.1).collect();
        let scores = train_and_score(&job.config, job.family, job.seed, &dataset, &samplers)?;
        let nfe_policy = policy_for(&job.config, job.family)?;
        Ok(job
            .evals
            .iter()
            .zip(scores)
            .map(|((label, sampler), r)| SweepRow {
                axis: config.ablate.axis,
                value: label.clone(),
                seed: job.seed,
                nfe: nfe_policy.nfe(*sampler),
                mean_return: r.mean_return,
                std_return: r.std_return,
                normalized_score: r.normalized_score,
            })
            .collect())
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    write_csv(&config.out.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}

/// Toy study over all densities, the three sweeps, then timing, each in
/// its own subdirectory of `config.out`.
pub fn cmd_repro(config: &RunConfig) -> Result<()> {
    config.validate()?;
    create_out(&config.out)?;
    Manifest::new(config).write(&config.out)?;
    let sub = |name: &str, command: Command| {
        let mut c = config.clone();
        c.command = command;
        c.out = config.out.join(name);
        c
    };
    let mut toy = sub("toy_study", Command::ToyStudy);
    toy.density = "all".into();
    cmd_toy_study(&toy)?;
    for axis in [Axis::FlowRatio, Axis::Eta, Axis::Strategy] {
        let name = match axis {
            Axis::FlowRatio => "ablate_flow_ratio",
            Axis::Eta => "ablate_eta",
            Axis::Strategy => "ablate_strategy",
        };
        let mut c = sub(name, Command::Ablate);
        c.ablate.axis = axis;
        cmd_ablate(&c)?;
    }
    cmd_bench_speed(&sub("bench_speed", Command::BenchSpeed))?;
    Ok(())
}

/// Strategy rows in sweep order.
pub fn strategy_rows(rows: &[SweepRow], strategy: Strategy) -> Vec<&SweepRow> {
    rows.iter().filter(|r| r.value == strategy.name()).collect()
}
