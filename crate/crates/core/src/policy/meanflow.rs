//! Average-velocity (MeanFlow) training target, regression loss, and
//! one-step sampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ddpm::gaussian;
use super::flow::flow_path;
use super::{clip_output, ensure_finite, time_column, Bounds, Field};
use crate::autodiff::{jvp, DualTensor, Tensor, TensorOps};
use crate::error::{Error, Result};

/// Logit-normal time pairs with a collapse probability `flow_ratio = P(r = t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimePairDistribution {
    pub mu: f64,
    pub sigma: f64,
    pub flow_ratio: f64,
}

impl Default for TimePairDistribution {
    fn default() -> Self {
        TimePairDistribution {
            mu: -0.4,
            sigma: 1.0,
            flow_ratio: 0.5,
        }
    }
}

impl TimePairDistribution {
    pub fn with_flow_ratio(flow_ratio: f64) -> Self {
        TimePairDistribution {
            flow_ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flow_ratio) {
            return Err(Error::invalid(format!("flow_ratio {} outside [0, 1]", self.flow_ratio)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite() && self.mu.is_finite()) {
            return Err(Error::invalid("logit-normal needs finite mu and positive sigma"));
        }
        Ok(())
    }
}

/// `sigmoid(X)`, `X ~ N(mu, sigma^2)`.
pub fn sample_logit_normal<R: Rng>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    let x = Normal::new(mu, sigma).expect("sigma validated").sample(rng);
    1.0 / (1.0 + (-x).exp())
}

/// Two logit-normal draws ordered as `t = max`, `r = min`; then `r := t`
/// with probability `flow_ratio`.
pub fn sample_time_pair<R: Rng>(dist: &TimePairDistribution, rng: &mut R) -> (f64, f64) {
    let u1 = sample_logit_normal(dist.mu, dist.sigma, rng);
    let u2 = sample_logit_normal(dist.mu, dist.sigma, rng);
    let (t, r) = if u1 >= u2 { (u1, u2) } else { (u2, u1) };
    if rng.random::<f64>() < dist.flow_ratio {
        (t, t)
    } else {
        (t, r)
    }
}

/// `u_tgt = v_t - (t - r) (v_t . d_a u + d_t u)`, the total derivative taken
/// by one forward-mode pass with tangents `(v_t, 0, 1)` for `(a_t, r, t)`.
///
/// Returned as a plain tensor: nothing in it is connected to any tape.
pub fn meanflow_target<F: Field>(
    field: &F,
    params: &[Tensor],
    actions: &Tensor,
    states: Option<&Tensor>,
    eps: &Tensor,
    t: &Tensor,
    r: &Tensor,
) -> Result<Tensor> {
    if !field.takes_r() {
        return Err(Error::invalid("MeanFlow target needs an average-velocity field"));
    }
    let path = flow_path(actions, eps, t, r)?;
    if let Some(i) = (0..t.rows()).find(|&i| r.get(i, 0) > t.get(i, 0)) {
        return Err(Error::invalid(format!(
            "time pair {i} has r = {} > t = {}",
            r.get(i, 0),
            t.get(i, 0)
        )));
    }
    let mut inputs = vec![path.a_t.clone(), path.t.clone(), path.r.clone()];
    let mut tangents = vec![Some(path.v_t.clone()), Some(Tensor::full(t.shape(), 1.0)), None];
    if let Some(s) = states {
        inputs.push(s.clone());
        tangents.push(None);
    }
    let (_, du_dt) = jvp(
        |xs: &[DualTensor]| {
            let lifted: Vec<DualTensor> = params.iter().cloned().map(DualTensor::constant).collect();
            field.eval(&lifted, &xs[0], xs.get(3), &xs[1], Some(&xs[2]))
        },
        &inputs,
        &tangents,
    )?;
    let (b, d) = (actions.rows(), actions.cols());
    let mut out = Vec::with_capacity(b * d);
    for i in 0..b {
        let gap = t.get(i, 0) - r.get(i, 0);
        for j in 0..d {
            out.push(path.v_t.get(i, j) - gap * du_dt.get(i, j));
        }
    }
    let target = Tensor::matrix(b, d, out);
    if !target.is_finite() {
        return Err(Error::NonFinite("meanflow target"));
    }
    Ok(target)
}

/// Mean over the batch of `||u_theta(a_t, r, t; s) - sg(u_tgt)||^2`.
pub fn fbc_loss_with<F: Field, V: TensorOps>(
    field: &F,
    params: &[V],
    actions: &Tensor,
    states: Option<&Tensor>,
    eps: &Tensor,
    t: &Tensor,
    r: &Tensor,
) -> Result<V> {
    let b = actions.rows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let values: Vec<Tensor> = params.iter().map(|p| p.value()).collect();
    let target = meanflow_target(field, &values, actions, states, eps, t, r)?;
    let path = flow_path(actions, eps, t, r)?;
    let anchor = &params[0];
    let x = anchor.lift(path.a_t);
    let tv = anchor.lift(path.t);
    let rv = anchor.lift(path.r);
    let s = states.map(|s| anchor.lift(s.clone()));
    let pred = field.eval(params, &x, s.as_ref(), &tv, Some(&rv));
    let diff = pred.sub(&anchor.lift(target).stop_grad());
    Ok(diff.square().sum().scale(1.0 / b as f64))
}

/// L_FBC with per-row time pairs from `dist` and `eps ~ N(0, I)`.
pub fn fbc_loss<F: Field, V: TensorOps, R: Rng>(
    field: &F,
    params: &[V],
    actions: &Tensor,
    states: Option<&Tensor>,
    dist: &TimePairDistribution,
    rng: &mut R,
) -> Result<V> {
    if actions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = actions.rows();
    let eps = gaussian(rng, b, actions.cols());
    let (t, r): (Vec<f64>, Vec<f64>) = (0..b).map(|_| sample_time_pair(dist, rng)).unzip();
    fbc_loss_with(field, params, actions, states, &eps, &Tensor::column(t), &Tensor::column(r))
}

/// `a = eps - u_theta(eps, r = 0, t = 1; s)`: one network evaluation.
pub fn one_step_sample_with<F: Field, V: TensorOps>(
    field: &F,
    params: &[V],
    states: Option<&V>,
    eps: &Tensor,
    bounds: Bounds,
) -> Result<V> {
    if !field.takes_r() {
        return Err(Error::invalid("one-step sampling needs an average-velocity field"));
    }
    let anchor = &params[0];
    let b = eps.rows();
    let x = anchor.lift(eps.clone());
    let t = anchor.lift(time_column(b, 1.0));
    let r = anchor.lift(time_column(b, 0.0));
    let u = field.eval(params, &x, states, &t, Some(&r));
    let a = x.sub(&u);
    ensure_finite(&a, "one-step sampler")?;
    Ok(clip_output(a, bounds))
}

pub fn one_step_sample<F: Field, V: TensorOps, R: Rng>(
    field: &F,
    params: &[V],
    states: Option<&V>,
    batch: usize,
    rng: &mut R,
    bounds: Bounds,
) -> Result<V> {
    let eps = gaussian(rng, batch, field.action_dim());
    one_step_sample_with(field, params, states, &eps, bounds)
}
