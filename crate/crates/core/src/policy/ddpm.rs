//! DDPM noise-prediction policy: behavior-cloning loss, ancestral sampler,
//! and a one-jump DDIM sampler used only at inference.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{clip_output, ensure_finite, time_column, Bounds, Field};
use crate::autodiff::{Tensor, TensorOps};
use crate::error::{Error, Result};

pub const BETA_MIN: f64 = 0.1;
pub const BETA_MAX: f64 = 10.0;

/// Variance schedule with precomputed `alpha_k = 1 - beta_k` and
/// `alpha_bar_k = prod_{i<=k} alpha_i`. Index 0 holds step `k = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdpmSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DdpmSchedule {
    /// Discretized variance-preserving schedule
    /// `beta_k = 1 - exp(-b_min/K - (b_max - b_min)(2k - 1) / (2K^2))`.
    pub fn variance_preserving(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("DDPM needs at least one step"));
        }
        let kf = steps as f64;
        let betas = (1..=steps)
            .map(|k| {
                let kk = k as f64;
                1.0 - (-BETA_MIN / kf - (BETA_MAX - BETA_MIN) * (2.0 * kk - 1.0) / (2.0 * kf * kf)).exp()
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("empty beta schedule"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        if betas.len() >= 5 && *alpha_bars.last().unwrap() >= 0.01 {
            return Err(Error::invalid(format!(
                "terminal alpha_bar {} too large for a Gaussian prior",
                alpha_bars.last().unwrap()
            )));
        }
        Ok(DdpmSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_k` for `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    /// Embedding time for step `k`.
    pub fn time_of(&self, k: usize) -> f64 {
        k as f64 / self.steps() as f64
    }
}

/// Mean of `||eps - eps_theta(sqrt(ab_k) a0 + sqrt(1 - ab_k) eps, k; s)||^2`
/// over the batch, for given per-row steps and noise.
pub fn ddpm_bc_loss_with<F: Field, V: TensorOps>(
    field: &F,
    params: &[V],
    actions: &Tensor,
    states: Option<&Tensor>,
    schedule: &DdpmSchedule,
    ks: &[usize],
    noise: &Tensor,
) -> Result<V> {
    let b = actions.rows();
    if b == 0 || ks.len() != b {
        return Err(Error::EmptyBatch);
    }
    let d = actions.cols();
    let mut noisy = Vec::with_capacity(b * d);
    for (i, &k) in ks.iter().enumerate() {
        let (sa, sn) = (schedule.alpha_bar(k).sqrt(), (1.0 - schedule.alpha_bar(k)).sqrt());
        for j in 0..d {
            noisy.push(sa * actions.get(i, j) + sn * noise.get(i, j));
        }
    }
    let anchor = &params[0];
    let x = anchor.lift(Tensor::matrix(b, d, noisy));
    let t = anchor.lift(Tensor::column(ks.iter().map(|&k| schedule.time_of(k)).collect()));
    let s = states.map(|s| anchor.lift(s.clone()));
    let pred = field.eval(params, &x, s.as_ref(), &t, None);
    let diff = pred.sub(&anchor.lift(noise.clone()));
    Ok(diff.square().sum().scale(1.0 / b as f64))
}

/// Behavior-cloning loss with `k ~ U{1..K}` and `eps ~ N(0, I)`.
pub fn ddpm_bc_loss<F: Field, V: TensorOps, R: Rng>(
    field: &F,
    params: &[V],
    actions: &Tensor,
    states: Option<&Tensor>,
    schedule: &DdpmSchedule,
    rng: &mut R,
) -> Result<V> {
    if actions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ks: Vec<usize> = (0..actions.rows())
        .map(|_| rng.random_range(1..=schedule.steps()))
        .collect();
    let noise = gaussian(rng, actions.rows(), actions.cols());
    ddpm_bc_loss_with(field, params, actions, states, schedule, &ks, &noise)
}

/// Noise for one reverse chain: the prior draw and one draw per step
/// (`step_noise[k - 1]` is used at step `k`; the entry for `k = 1` is unused).
#[derive(Clone, Debug)]
pub struct DdpmNoise {
    pub prior: Tensor,
    pub step_noise: Vec<Tensor>,
}

impl DdpmNoise {
    pub fn sample<R: Rng>(rng: &mut R, batch: usize, dim: usize, steps: usize) -> Self {
        DdpmNoise {
            prior: gaussian(rng, batch, dim),
            step_noise: (0..steps).map(|_| gaussian(rng, batch, dim)).collect(),
        }
    }
}

/// Ancestral sampling `a^{k-1} = (a^k - beta_k / sqrt(1 - ab_k) eps_theta) / sqrt(alpha_k)
/// + sqrt(beta_k) eps`, from `k = K` down to 1 with the final step noiseless.
///
/// With `V = Var` every step is recorded (back-propagation through the chain).
pub fn ddpm_sample_with<F: Field, V: TensorOps>(
    field: &F,
    params: &[V],
    states: Option<&V>,
    schedule: &DdpmSchedule,
    noise: &DdpmNoise,
    bounds: Bounds,
) -> Result<V> {
    let anchor = &params[0];
    let b = noise.prior.rows();
    let mut x = anchor.lift(noise.prior.clone());
    for k in (1..=schedule.steps()).rev() {
        let t = anchor.lift(time_column(b, schedule.time_of(k)));
        let eps_hat = field.eval(params, &x, states, &t, None);
        let coef = schedule.beta(k) / (1.0 - schedule.alpha_bar(k)).sqrt();
        x = x.sub(&eps_hat.scale(coef)).scale(1.0 / schedule.alpha(k).sqrt());
        if k > 1 {
            let z = noise.step_noise[k - 1].map(|e| e * schedule.beta(k).sqrt());
            x = x.add(&anchor.lift(z));
        }
        ensure_finite(&x, "ddpm sampler")?;
    }
    Ok(clip_output(x, bounds))
}

pub fn ddpm_sample<F: Field, V: TensorOps, R: Rng>(
    field: &F,
    params: &[V],
    states: Option<&V>,
    batch: usize,
    schedule: &DdpmSchedule,
    rng: &mut R,
    bounds: Bounds,
) -> Result<V> {
    let noise = DdpmNoise::sample(rng, batch, field.action_dim(), schedule.steps());
    ddpm_sample_with(field, params, states, schedule, &noise, bounds)
}

/// Deterministic DDIM (eta = 0) jump from `k = K` straight to the clean
/// action: `a^0 = (a^K - sqrt(1 - ab_K) eps_theta(a^K, K)) / sqrt(ab_K)`.
pub fn ddim_one_step_with<F: Field, V: TensorOps>(
    field: &F,
    params: &[V],
    states: Option<&V>,
    schedule: &DdpmSchedule,
    prior: &Tensor,
    bounds: Bounds,
) -> Result<V> {
    let anchor = &params[0];
    let k = schedule.steps();
    let x = anchor.lift(prior.clone());
    let t = anchor.lift(time_column(prior.rows(), schedule.time_of(k)));
    let eps_hat = field.eval(params, &x, states, &t, None);
    let ab = schedule.alpha_bar(k);
    let a0 = x.sub(&eps_hat.scale((1.0 - ab).sqrt())).scale(1.0 / ab.sqrt());
    ensure_finite(&a0, "ddim sampler")?;
    Ok(clip_output(a0, bounds))
}

pub(crate) fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vp_schedule_is_valid_for_small_k() {
        for k in [1, 2, 5, 10, 20, 50] {
            let s = DdpmSchedule::variance_preserving(k).unwrap();
            assert_eq!(s.steps(), k);
            for i in 1..k {
                assert!(s.alpha_bar(i + 1) < s.alpha_bar(i));
            }
            // sum of exponents is b_min + (b_max - b_min) / 2 for every K
            let expect = (-(BETA_MIN + (BETA_MAX - BETA_MIN) / 2.0)).exp();
            assert!((s.alpha_bar(k) - expect).abs() < 1e-12);
            assert!(s.alpha_bar(k) < 0.01);
        }
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(DdpmSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(DdpmSchedule::from_betas(vec![]).is_err());
        assert!(DdpmSchedule::from_betas(vec![0.01; 5]).is_err());
    }
}
