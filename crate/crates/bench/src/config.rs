//! Run configuration and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ofql_core::envs::{Behavior, Env, ToyDensity};
use ofql_core::policy::{PolicySpec, Sampler, TimePairDistribution};
use ofql_core::rl::TrainConfig;

use crate::BenchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Eval,
    BenchSpeed,
    ToyStudy,
    Ablate,
    Repro,
}

/// Policy family of a trainer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// One-step MeanFlow policy.
    Ofql,
    /// DDPM policy with `steps` reverse steps.
    Dql,
    /// Flow-matching policy, `steps` Euler steps in training.
    Fbrac,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Ofql => "ofql",
            Family::Dql => "dql",
            Family::Fbrac => "fbrac",
        }
    }
}

/// A trained family paired with an inference sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Dql,
    DqlDdim1,
    Fbrac,
    Ofql,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Dql, Strategy::DqlDdim1, Strategy::Fbrac, Strategy::Ofql];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Dql => "dql",
            Strategy::DqlDdim1 => "dql_ddim1",
            Strategy::Fbrac => "fbrac",
            Strategy::Ofql => "ofql",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Strategy::Dql | Strategy::DqlDdim1 => Family::Dql,
            Strategy::Fbrac => Family::Fbrac,
            Strategy::Ofql => Family::Ofql,
        }
    }

    /// FBRAC is scored with one Euler step at inference.
    pub fn sampler(self) -> Sampler {
        match self {
            Strategy::Dql | Strategy::Ofql => Sampler::Native,
            Strategy::DqlDdim1 => Sampler::DdimOneStep,
            Strategy::Fbrac => Sampler::Euler(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    FlowRatio,
    Eta,
    Strategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Behavior policy name; `None` picks the environment's default.
    pub behavior: Option<String>,
    pub n_transitions: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            behavior: None,
            n_transitions: 20_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// States per action batch.
    pub batch: usize,
    /// Timed action batches per family (the first 10% are warmup).
    pub n_batches: usize,
    /// Timed training steps per family.
    pub train_steps: usize,
    pub dql_steps: Vec<usize>,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            batch: 256,
            n_batches: 1000,
            train_steps: 50,
            dql_steps: vec![5, 10, 20, 50],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_train: usize,
    pub fit_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Generated (and fresh target) samples per evaluated configuration.
    pub eval_samples: usize,
    pub v_steps: Vec<usize>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_train: 20_000,
            fit_steps: 4000,
            batch: 512,
            lr: 3e-3,
            final_lr: 1e-5,
            hidden: vec![64, 64, 64],
            embed_dim: 16,
            eval_samples: 2000,
            v_steps: vec![1, 2, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub axis: Axis,
    pub flow_ratios: Vec<f64>,
    pub etas: Vec<f64>,
    pub strategies: Vec<Strategy>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            axis: Axis::Strategy,
            flow_ratios: vec![1.0, 0.75, 0.5, 0.25, 0.0],
            etas: vec![0.001, 0.01, 0.1, 0.3, 0.5],
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub env: String,
    pub density: String,
    pub family: Family,
    /// DDPM reverse steps for `dql`, training Euler steps for `fbrac`.
    pub steps: usize,
    /// Euler steps at inference for `fbrac`.
    pub infer_steps: usize,
    pub flow_ratio: f64,
    pub eta: f64,
    pub gamma: f64,
    /// EMA coefficient and update period of the target networks.
    pub rho: f64,
    pub target_period: usize,
    pub seeds: Vec<u64>,
    pub n_steps: usize,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub log_every: usize,
    pub max_q_backup: bool,
    pub eval_episodes: usize,
    pub eval_sampler: Sampler,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub timing: TimingConfig,
    pub toy: ToyConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            command: Command::Train,
            env: "point_mass".into(),
            density: "checkerboard".into(),
            family: Family::Ofql,
            steps: 5,
            infer_steps: 1,
            flow_ratio: TimePairDistribution::default().flow_ratio,
            eta: train.eta,
            gamma: train.gamma,
            rho: train.rho,
            target_period: train.target_period,
            seeds: vec![0],
            n_steps: 50_000,
            batch: train.batch,
            hidden: train.hidden,
            critic_hidden: train.critic_hidden,
            embed_dim: train.embed_dim,
            actor_lr: train.actor_lr,
            critic_lr: train.critic_lr,
            log_every: train.log_every,
            max_q_backup: train.max_q_backup,
            eval_episodes: 100,
            eval_sampler: Sampler::Native,
            out: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            timing: TimingConfig::default(),
            toy: ToyConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a JSON file (`.json`) or TOML otherwise.
    pub fn load(path: &Path) -> Result<RunConfig, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn env(&self) -> Result<Env, BenchError> {
        Env::by_name(&self.env).map_err(|e| BenchError::Config(e.to_string()))
    }

    /// The named density, or all three for `"all"`.
    pub fn densities(&self) -> Result<Vec<ToyDensity>, BenchError> {
        if self.density == "all" {
            return Ok(ToyDensity::ALL.to_vec());
        }
        let d = ToyDensity::from_name(&self.density).map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(vec![d])
    }

    pub fn behavior(&self) -> Result<Behavior, BenchError> {
        let env = self.env()?;
        match &self.dataset.behavior {
            None => Ok(Behavior::default_for(&env)),
            Some(name) => Behavior::by_name(name).map_err(|e| BenchError::Config(e.to_string())),
        }
    }

    /// Policy spec of `family` under this config.
    pub fn policy_spec(&self, family: Family) -> PolicySpec {
        match family {
            Family::Ofql => PolicySpec::MeanFlow {
                time: TimePairDistribution::with_flow_ratio(self.flow_ratio),
            },
            Family::Dql => PolicySpec::Ddpm { steps: self.steps },
            Family::Fbrac => PolicySpec::FlowMatching {
                train_steps: self.steps,
                eval_steps: self.infer_steps,
            },
        }
    }

    pub fn train_config(&self, family: Family, seed: u64) -> TrainConfig {
        TrainConfig {
            policy: self.policy_spec(family),
            hidden: self.hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            embed_dim: self.embed_dim,
            eta: self.eta,
            gamma: self.gamma,
            rho: self.rho,
            target_period: self.target_period,
            batch: self.batch,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            max_q_backup: self.max_q_backup,
            log_every: self.log_every,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Checks every field the chosen command reads.
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        match self.command {
            Command::Train | Command::Eval | Command::Ablate => self.validate_rl()?,
            Command::BenchSpeed => self.validate_timing()?,
            Command::ToyStudy => self.validate_toy()?,
            Command::Repro => {
                self.validate_rl()?;
                self.validate_timing()?;
                self.validate_toy()?;
            }
        }
        if self.command == Command::Ablate {
            let a = &self.ablate;
            let empty = match a.axis {
                Axis::FlowRatio => a.flow_ratios.is_empty(),
                Axis::Eta => a.etas.is_empty(),
                Axis::Strategy => a.strategies.is_empty(),
            };
            if empty {
                return bad(format!("empty {:?} sweep", a.axis));
            }
        }
        Ok(())
    }

    fn validate_rl(&self) -> Result<(), BenchError> {
        let env = self.env()?;
        let behavior = self.behavior()?;
        let compatible = !matches!(
            (&env, behavior),
            (Env::PointMass(_), Behavior::BanditMixture) | (Env::Bandit(_), Behavior::Mixture)
        );
        if !compatible {
            return Err(BenchError::Config(format!(
                "behavior {behavior:?} does not fit env {}",
                env.name()
            )));
        }
        if self.dataset.n_transitions < env.horizon() {
            return Err(BenchError::Config("dataset smaller than one episode".into()));
        }
        if self.eval_episodes == 0 {
            return Err(BenchError::Config("eval_episodes must be positive".into()));
        }
        let families: Vec<Family> = if self.command == Command::Ablate && self.ablate.axis == Axis::Strategy {
            self.ablate.strategies.iter().map(|s| s.family()).collect()
        } else {
            vec![self.family]
        };
        for family in families {
            self.train_config(family, 0)
                .validate()
                .map_err(|e| BenchError::Config(e.to_string()))?;
        }
        for &fr in &self.ablate.flow_ratios {
            if !(0.0..=1.0).contains(&fr) {
                return Err(BenchError::Config(format!("flow ratio {fr} outside [0, 1]")));
            }
        }
        match (self.eval_sampler, self.family) {
            (Sampler::DdimOneStep, Family::Ofql | Family::Fbrac) => {
                Err(BenchError::Config("ddim_one_step needs family dql".into()))
            }
            (Sampler::Euler(_), Family::Dql) => Err(BenchError::Config("euler sampling needs a velocity family".into())),
            (Sampler::Euler(0), _) => Err(BenchError::Config("euler steps must be positive".into())),
            _ => Ok(()),
        }
    }

    fn validate_timing(&self) -> Result<(), BenchError> {
        let t = &self.timing;
        self.env()?;
        if t.batch == 0 || t.n_batches < 10 || t.train_steps == 0 {
            return Err(BenchError::Config(
                "timing needs batch > 0, n_batches >= 10, train_steps > 0".into(),
            ));
        }
        if t.dql_steps.is_empty() || t.dql_steps.contains(&0) {
            return Err(BenchError::Config("dql_steps must be non-empty and positive".into()));
        }
        Ok(())
    }

    fn validate_toy(&self) -> Result<(), BenchError> {
        self.densities()?;
        let t = &self.toy;
        if t.n_train == 0 || t.batch == 0 || t.eval_samples == 0 || t.hidden.is_empty() {
            return Err(BenchError::Config("toy study sizes must be positive".into()));
        }
        if t.v_steps.is_empty() || t.v_steps.contains(&0) {
            return Err(BenchError::Config("v_steps must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the config with `command` and `out`
    /// blanked, so a training run and its evaluation share one hash.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.command = Command::Train;
        canon.out = PathBuf::new();
        let json = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
