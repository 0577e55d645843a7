//! Offline transition datasets generated by behavior policies.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Env, EnvRefScores};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Behavior policies used to fill datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Point mass: per episode, a clockwise or counter-clockwise detour
    /// controller (equal odds) with Gaussian action noise.
    Mixture,
    /// Uniform actions over the action box.
    Uniform,
    /// Bandit: 60/40 mixture of `N(0.6, 0.1^2)` and `N(-0.6, 0.1^2)`.
    BanditMixture,
}

impl Behavior {
    pub fn by_name(name: &str) -> Result<Behavior> {
        match name {
            "mixture" => Ok(Behavior::Mixture),
            "uniform" => Ok(Behavior::Uniform),
            "bandit_mixture" => Ok(Behavior::BanditMixture),
            other => Err(Error::UnknownName(format!("behavior {other}"))),
        }
    }

    /// Natural dataset behavior for an environment.
    pub fn default_for(env: &Env) -> Behavior {
        match env {
            Env::PointMass(_) => Behavior::Mixture,
            Env::Bandit(_) => Behavior::BanditMixture,
        }
    }
}

pub const MIXTURE_NOISE_STD: f64 = 0.3;
/// Radius of the circle the detour controllers steer around.
pub const MIXTURE_DETOUR_RADIUS: f64 = 0.6;
/// Largest action component of the noiseless detour controllers.
pub const MIXTURE_SPEED: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub n: usize,
    pub behavior: Behavior,
    pub seed: u64,
    /// Mean undiscounted return over the episodes that terminate inside
    /// the dataset.
    pub mean_return: f64,
    pub episodes: usize,
    pub action_low: f64,
    pub action_high: f64,
    pub refs: EnvRefScores,
}

/// Columnar store; `episode_ends[i]` marks the last stored transition of an
/// episode (terminated, or cut off by the dataset size).
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
    pub episode_ends: Vec<bool>,
}

/// A minibatch in tensor form; `rewards` and `dones` are `[B, 1]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub dones: Tensor,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            s: self.states.row(i).to_vec(),
            a: self.actions.row(i).to_vec(),
            r: self.rewards[i],
            s_next: self.next_states.row(i).to_vec(),
            done: self.dones[i],
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Batch {
            states: self.states.gather_rows(idx),
            actions: self.actions.gather_rows(idx),
            rewards: Tensor::column(idx.iter().map(|&i| self.rewards[i]).collect()),
            next_states: self.next_states.gather_rows(idx),
            dones: Tensor::column(idx.iter().map(|&i| if self.dones[i] { 1.0 } else { 0.0 }).collect()),
        })
    }

    pub fn sample_batch<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.batch(&idx)
    }

    /// Returns of the episodes that terminate inside the dataset, in order.
    pub fn episode_returns(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut acc = 0.0;
        for i in 0..self.len() {
            acc += self.rewards[i];
            if self.episode_ends[i] {
                if self.dones[i] {
                    out.push(acc);
                }
                acc = 0.0;
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = FileHeader {
            format: FORMAT.to_string(),
            version: VERSION,
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for i in 0..self.len() {
            let row = Row {
                t: self.transition(i),
                end: self.episode_ends[i],
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: FileHeader = serde_json::from_str(&first)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset {} v{}",
                header.format, header.version
            )));
        }
        let mut b = Builder::new(header.meta.state_dim, header.meta.action_dim);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&line)?;
            b.push(row.t, row.end)?;
        }
        if b.rewards.len() != header.meta.n {
            return Err(Error::Format(format!(
                "header declares {} transitions, file holds {}",
                header.meta.n,
                b.rewards.len()
            )));
        }
        Ok(b.finish(header.meta))
    }
}

const FORMAT: &str = "ofql-dataset";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct Row {
    #[serde(flatten)]
    t: Transition,
    end: bool,
}

struct Builder {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<bool>,
    ends: Vec<bool>,
}

impl Builder {
    fn new(state_dim: usize, action_dim: usize) -> Self {
        Builder {
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
            ends: Vec::new(),
        }
    }

    fn push(&mut self, t: Transition, end: bool) -> Result<()> {
        if t.s.len() != self.state_dim || t.s_next.len() != self.state_dim || t.a.len() != self.action_dim {
            return Err(Error::Format("transition width does not match header".into()));
        }
        let finite = t.s.iter().chain(&t.a).chain(&t.s_next).all(|x| x.is_finite()) && t.r.is_finite();
        if !finite {
            return Err(Error::NonFinite("dataset transition"));
        }
        if t.a.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::invalid("dataset action outside [-1, 1]"));
        }
        self.states.extend(&t.s);
        self.actions.extend(&t.a);
        self.rewards.push(t.r);
        self.next_states.extend(&t.s_next);
        self.dones.push(t.done);
        self.ends.push(end || t.done);
        Ok(())
    }

    fn finish(self, meta: DatasetMeta) -> OfflineDataset {
        let n = self.rewards.len();
        OfflineDataset {
            meta,
            states: Tensor::matrix(n, self.state_dim, self.states),
            actions: Tensor::matrix(n, self.action_dim, self.actions),
            rewards: self.rewards,
            next_states: Tensor::matrix(n, self.state_dim, self.next_states),
            dones: self.dones,
            episode_ends: self.ends,
        }
    }
}

/// Roll out `behavior` in `env` until exactly `n_transitions` are stored.
pub fn make_offline_dataset(env: &Env, behavior: Behavior, n_transitions: usize, seed: u64) -> Result<OfflineDataset> {
    if n_transitions < env.horizon() {
        return Err(Error::invalid(format!(
            "{n_transitions} transitions is less than one horizon ({})",
            env.horizon()
        )));
    }
    match (env, behavior) {
        (Env::PointMass(_), Behavior::BanditMixture) | (Env::Bandit(_), Behavior::Mixture) => {
            return Err(Error::invalid(format!("behavior {behavior:?} does not fit {}", env.name())));
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0_f64, MIXTURE_NOISE_STD).expect("positive std");
    let mode = Normal::new(0.0_f64, 0.1).expect("positive std");
    let mut b = Builder::new(env.state_dim(), env.action_dim());
    while b.rewards.len() < n_transitions {
        let mut s = env.reset(&mut rng);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for t in 0..env.horizon() {
            let a: Vec<f64> = match (env, behavior) {
                (Env::PointMass(pm), Behavior::Mixture) => {
                    let dir = pm.avoidance_direction(&s, MIXTURE_DETOUR_RADIUS, Some(side));
                    let m = dir[0].abs().max(dir[1].abs());
                    dir.iter()
                        .map(|d| (MIXTURE_SPEED * d / m + noise.sample(&mut rng)).clamp(-1.0, 1.0))
                        .collect()
                }
                (_, Behavior::Uniform) => (0..env.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect(),
                (Env::Bandit(_), Behavior::BanditMixture) => {
                    let center = if rng.random::<f64>() < 0.6 { 0.6 } else { -0.6 };
                    vec![(center + mode.sample(&mut rng)).clamp(-1.0, 1.0)]
                }
                _ => unreachable!("checked above"),
            };
            let out = env.step(&s, &a, t);
            let full = b.rewards.len() + 1 == n_transitions;
            let done = out.done;
            b.push(
                Transition {
                    s: s.clone(),
                    a,
                    r: out.reward,
                    s_next: out.next_state.clone(),
                    done,
                },
                full,
            )?;
            s = out.next_state;
            if done || full {
                break;
            }
        }
    }
    let provisional = DatasetMeta {
        env: env.name().to_string(),
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
        n: n_transitions,
        behavior,
        seed,
        mean_return: 0.0,
        episodes: 0,
        action_low: -1.0,
        action_high: 1.0,
        refs: env.ref_scores(),
    };
    let mut ds = b.finish(provisional);
    let returns = ds.episode_returns();
    ds.meta.episodes = returns.len();
    ds.meta.mean_return = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
    Ok(ds)
}
