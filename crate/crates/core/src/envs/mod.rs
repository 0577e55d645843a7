//! Desk-scale environments, offline datasets, and sample-quality metrics.

pub mod dataset;
pub mod toy;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{make_offline_dataset, Behavior, DatasetMeta, OfflineDataset, Transition};
pub use toy::{energy_distance, ToyDensity};

/// Average returns of the uniform-random and expert reference policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvRefScores {
    pub random_score: f64,
    pub expert_score: f64,
}

/// `100 (score - random) / (expert - random)`.
pub fn normalized_score(score: f64, refs: &EnvRefScores) -> Result<f64> {
    let span = refs.expert_score - refs.random_score;
    if !(span.is_finite() && span != 0.0) {
        return Err(Error::invalid("degenerate reference scores"));
    }
    Ok(100.0 * (score - refs.random_score) / span)
}

/// Result of one environment transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// 2-D point mass steering around a disk obstacle to a goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassEnv {
    pub goal: [f64; 2],
    pub obstacle_radius: f64,
    pub step_size: f64,
    pub horizon: usize,
    pub goal_tolerance: f64,
    pub start: [f64; 2],
    /// Half-width of the uniform start jitter.
    pub start_jitter: f64,
}

impl Default for PointMassEnv {
    fn default() -> Self {
        PointMassEnv {
            goal: [0.8, 0.8],
            obstacle_radius: 0.3,
            step_size: 0.1,
            horizon: 40,
            goal_tolerance: 0.05,
            start: [-0.8, -0.8],
            start_jitter: 0.05,
        }
    }
}

impl PointMassEnv {
    pub fn reset<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let j = self.start_jitter;
        (0..2)
            .map(|i| self.start[i] + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 })
            .collect()
    }

    /// Moves by `step_size * clip(a)`, clips to the box, and truncates any
    /// motion that would enter the obstacle disk at its boundary.
    pub fn move_point(&self, s: &[f64], a: &[f64]) -> [f64; 2] {
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        let p = [
            (s[0] + self.step_size * a[0]).clamp(-1.0, 1.0),
            (s[1] + self.step_size * a[1]).clamp(-1.0, 1.0),
        ];
        let rad = self.obstacle_radius;
        if p[0].hypot(p[1]) >= rad {
            // the segment may still graze the disk; check the closest point
            let d = [p[0] - s[0], p[1] - s[1]];
            let dd = d[0] * d[0] + d[1] * d[1];
            if dd == 0.0 {
                return p;
            }
            let lam = (-(s[0] * d[0] + s[1] * d[1]) / dd).clamp(0.0, 1.0);
            let c = [s[0] + lam * d[0], s[1] + lam * d[1]];
            if c[0].hypot(c[1]) >= rad {
                return p;
            }
        }
        // first crossing of |s + lam d| = rad
        let d = [p[0] - s[0], p[1] - s[1]];
        let qa = d[0] * d[0] + d[1] * d[1];
        let qb = 2.0 * (s[0] * d[0] + s[1] * d[1]);
        let qc = s[0] * s[0] + s[1] * s[1] - rad * rad;
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
        let lam = ((-qb - disc.sqrt()) / (2.0 * qa)).clamp(0.0, 1.0);
        let mut q = [s[0] + lam * d[0], s[1] + lam * d[1]];
        let n = q[0].hypot(q[1]);
        if n < rad {
            let scale = rad / n;
            q = [q[0] * scale, q[1] * scale];
            if q[0].hypot(q[1]) < rad {
                // rounding: nudge outward by one ulp-scale step
                q = [q[0] * (1.0 + 1e-15), q[1] * (1.0 + 1e-15)];
            }
        }
        q
    }

    pub fn distance_to_goal(&self, s: &[f64]) -> f64 {
        (s[0] - self.goal[0]).hypot(s[1] - self.goal[1])
    }

    pub fn step(&self, s: &[f64], a: &[f64], t: usize) -> StepOutcome {
        let next = self.move_point(s, a);
        let dist = self.distance_to_goal(&next);
        StepOutcome {
            next_state: next.to_vec(),
            reward: -dist,
            done: dist < self.goal_tolerance || t + 1 >= self.horizon,
        }
    }

    /// Shortest-path controller: heads straight for the goal when the
    /// segment clears the obstacle, otherwise along the tangent to a slightly
    /// inflated obstacle circle on the side closer to the goal heading.
    /// Actions are scaled so the larger component has magnitude 1, shortened
    /// on the final approach so the goal is not overshot.
    pub fn expert_action(&self, s: &[f64]) -> Vec<f64> {
        let dir = self.avoidance_direction(s, self.obstacle_radius + 0.02, None);
        let m = dir[0].abs().max(dir[1].abs());
        let dist = self.distance_to_goal(s);
        let reach = (dist * m / self.step_size).min(1.0);
        vec![reach * dir[0] / m, reach * dir[1] / m]
    }

    /// Unit heading towards the goal, detouring along a tangent to the
    /// circle of radius `rad` when the direct segment is blocked. `side`
    /// forces the detour (`+1` counter-clockwise around the obstacle, `-1`
    /// clockwise); `None` picks the side better aligned with the goal.
    pub fn avoidance_direction(&self, s: &[f64], rad: f64, side: Option<f64>) -> [f64; 2] {
        let g = self.goal;
        let to_goal = [g[0] - s[0], g[1] - s[1]];
        let norm = to_goal[0].hypot(to_goal[1]);
        if norm == 0.0 {
            return [1.0, 0.0];
        }
        if segment_clears(s, &g, rad) {
            return [to_goal[0] / norm, to_goal[1] / norm];
        }
        let pick = |d: [f64; 2]| d[0] * to_goal[0] + d[1] * to_goal[1];
        match side {
            Some(side) => tangent_direction(s, rad, side),
            None => {
                let ccw = tangent_direction(s, rad, 1.0);
                let cw = tangent_direction(s, rad, -1.0);
                if pick(ccw) >= pick(cw) {
                    ccw
                } else {
                    cw
                }
            }
        }
    }
}

fn segment_clears(s: &[f64], g: &[f64; 2], rad: f64) -> bool {
    let d = [g[0] - s[0], g[1] - s[1]];
    let dd = d[0] * d[0] + d[1] * d[1];
    if dd == 0.0 {
        return s[0].hypot(s[1]) >= rad;
    }
    let lam = (-(s[0] * d[0] + s[1] * d[1]) / dd).clamp(0.0, 1.0);
    (s[0] + lam * d[0]).hypot(s[1] + lam * d[1]) >= rad
}

/// Unit direction from `s` along a tangent to the origin-centred circle of
/// radius `rad`; `side = +1` passes the circle counter-clockwise.
fn tangent_direction(s: &[f64], rad: f64, side: f64) -> [f64; 2] {
    let n = s[0].hypot(s[1]);
    if n <= rad {
        // on or inside the circle: slide along it
        return [-side * s[1] / n, side * s[0] / n];
    }
    let beta = (rad / n).asin();
    let phi = (-s[1]).atan2(-s[0]) - side * beta;
    [phi.cos(), phi.sin()]
}

/// One state, scalar action in `[-1, 1]`, two reward bumps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MultimodalBandit;

impl MultimodalBandit {
    pub const STATE: [f64; 1] = [0.0];

    pub fn reward(a: f64) -> f64 {
        let a = a.clamp(-1.0, 1.0);
        (-((a - 0.6) / 0.1).powi(2)).exp() + 0.5 * (-((a + 0.6) / 0.1).powi(2)).exp()
    }
}

/// Environments available to the trainers.
#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    PointMass(PointMassEnv),
    Bandit(MultimodalBandit),
}

impl Env {
    pub fn by_name(name: &str) -> Result<Env> {
        match name {
            "point_mass" | "pointmass" => Ok(Env::PointMass(PointMassEnv::default())),
            "bandit" | "multimodal_bandit" => Ok(Env::Bandit(MultimodalBandit)),
            other => Err(Error::UnknownName(format!("environment {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Env::PointMass(_) => "point_mass",
            Env::Bandit(_) => "bandit",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::PointMass(_) => 2,
            Env::Bandit(_) => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::PointMass(_) => 2,
            Env::Bandit(_) => 1,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::PointMass(e) => e.horizon,
            Env::Bandit(_) => 1,
        }
    }

    pub fn reset<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Env::PointMass(e) => e.reset(rng),
            Env::Bandit(_) => MultimodalBandit::STATE.to_vec(),
        }
    }

    /// `t` is the 0-based index of this step within the episode.
    pub fn step(&self, s: &[f64], a: &[f64], t: usize) -> StepOutcome {
        match self {
            Env::PointMass(e) => e.step(s, a, t),
            Env::Bandit(_) => StepOutcome {
                next_state: MultimodalBandit::STATE.to_vec(),
                reward: MultimodalBandit::reward(a[0]),
                done: true,
            },
        }
    }

    pub fn expert_action(&self, s: &[f64]) -> Vec<f64> {
        match self {
            Env::PointMass(e) => e.expert_action(s),
            Env::Bandit(_) => vec![0.6],
        }
    }

    /// Reference scores frozen from 1000-episode runs of
    /// [`Env::reference_returns`] with seed 0.
    pub fn ref_scores(&self) -> EnvRefScores {
        match self {
            Env::PointMass(_) => POINT_MASS_REFS,
            Env::Bandit(_) => BANDIT_REFS,
        }
    }

    /// Mean return of the uniform-random and expert policies over `episodes`.
    pub fn reference_returns<R: Rng>(&self, episodes: usize, rng: &mut R) -> EnvRefScores {
        let mut random = 0.0;
        let mut expert = 0.0;
        for _ in 0..episodes {
            random += self.rollout(rng, |_, rng| {
                (0..self.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
            });
            expert += self.rollout(rng, |s, _| self.expert_action(s));
        }
        EnvRefScores {
            random_score: random / episodes as f64,
            expert_score: expert / episodes as f64,
        }
    }

    /// Undiscounted return of one episode under `policy`.
    pub fn rollout<R: Rng>(&self, rng: &mut R, mut policy: impl FnMut(&[f64], &mut R) -> Vec<f64>) -> f64 {
        let mut s = self.reset(rng);
        let mut ret = 0.0;
        for t in 0..self.horizon() {
            let a = policy(&s, rng);
            let out = self.step(&s, &a, t);
            ret += out.reward;
            s = out.next_state;
            if out.done {
                break;
            }
        }
        ret
    }
}

pub const POINT_MASS_REFS: EnvRefScores = EnvRefScores {
    random_score: -87.58582297234352,
    expert_score: -22.328434852242115,
};

pub const BANDIT_REFS: EnvRefScores = EnvRefScores {
    random_score: 0.11799809460015317,
    expert_score: 1.0,
};
