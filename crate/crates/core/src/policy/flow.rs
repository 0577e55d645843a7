//! Linear flow path, conditional flow-matching loss, and Euler sampling.

use rand::Rng;

use super::ddpm::gaussian;
use super::{clip_output, ensure_finite, time_column, Bounds, Field};
use crate::autodiff::{Tensor, TensorOps};
use crate::error::{Error, Result};

/// One batch of points on `a_t = (1 - t) a + t eps` with `v_t = eps - a`.
/// `t` and `r` are `[B, 1]` columns.
#[derive(Clone, Debug)]
pub struct FlowPathSample {
    pub a: Tensor,
    pub eps: Tensor,
    pub t: Tensor,
    pub r: Tensor,
    pub a_t: Tensor,
    pub v_t: Tensor,
}

pub fn flow_path(a: &Tensor, eps: &Tensor, t: &Tensor, r: &Tensor) -> Result<FlowPathSample> {
    if a.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: eps.shape().to_vec(),
        });
    }
    let b = a.rows();
    for col in [t, r] {
        if col.shape() != [b, 1] {
            return Err(Error::ShapeMismatch {
                expected: vec![b, 1],
                actual: col.shape().to_vec(),
            });
        }
    }
    let d = a.cols();
    let mut a_t = Vec::with_capacity(b * d);
    for i in 0..b {
        let ti = t.get(i, 0);
        for j in 0..d {
            a_t.push((1.0 - ti) * a.get(i, j) + ti * eps.get(i, j));
        }
    }
    Ok(FlowPathSample {
        a: a.clone(),
        eps: eps.clone(),
        t: t.clone(),
        r: r.clone(),
        a_t: Tensor::matrix(b, d, a_t),
        v_t: eps.zip_map(a, |e, x| e - x),
    })
}

/// Mean over the batch of `||v_theta(a_t, t; s) - (eps - a)||^2`.
///
/// Average-velocity fields are queried on the diagonal `r = t`.
pub fn cfm_loss_with<F: Field, V: TensorOps>(
    field: &F,
    params: &[V],
    actions: &Tensor,
    states: Option<&Tensor>,
    eps: &Tensor,
    t: &Tensor,
) -> Result<V> {
    let b = actions.rows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let path = flow_path(actions, eps, t, t)?;
    let anchor = &params[0];
    let x = anchor.lift(path.a_t);
    let tv = anchor.lift(path.t);
    let s = states.map(|s| anchor.lift(s.clone()));
    let r = field.takes_r().then(|| tv.clone());
    let pred = field.eval(params, &x, s.as_ref(), &tv, r.as_ref());
    let diff = pred.sub(&anchor.lift(path.v_t));
    Ok(diff.square().sum().scale(1.0 / b as f64))
}

/// CFM loss with `t ~ U[0, 1]` and `eps ~ N(0, I)`.
pub fn cfm_loss<F: Field, V: TensorOps, R: Rng>(
    field: &F,
    params: &[V],
    actions: &Tensor,
    states: Option<&Tensor>,
    rng: &mut R,
) -> Result<V> {
    if actions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let eps = gaussian(rng, actions.rows(), actions.cols());
    let t = Tensor::column((0..actions.rows()).map(|_| rng.random::<f64>()).collect());
    cfm_loss_with(field, params, actions, states, &eps, &t)
}

/// `N` Euler steps from `a_1 = eps` on the grid `t = 1, 1 - dt, ..., dt`:
/// `a_{t - dt} = a_t - dt * v(a_t, t; s)`.
pub fn euler_sample_with<F: Field, V: TensorOps>(
    field: &F,
    params: &[V],
    states: Option<&V>,
    eps: &Tensor,
    steps: usize,
    bounds: Bounds,
) -> Result<V> {
    if steps == 0 {
        return Err(Error::invalid("Euler sampling needs at least one step"));
    }
    let anchor = &params[0];
    let b = eps.rows();
    let dt = 1.0 / steps as f64;
    let mut x = anchor.lift(eps.clone());
    for i in 0..steps {
        let t = anchor.lift(time_column(b, 1.0 - i as f64 * dt));
        let r = field.takes_r().then(|| t.clone());
        let v = field.eval(params, &x, states, &t, r.as_ref());
        x = x.sub(&v.scale(dt));
        ensure_finite(&x, "euler sampler")?;
    }
    Ok(clip_output(x, bounds))
}

pub fn euler_sample<F: Field, V: TensorOps, R: Rng>(
    field: &F,
    params: &[V],
    states: Option<&V>,
    batch: usize,
    steps: usize,
    rng: &mut R,
    bounds: Bounds,
) -> Result<V> {
    let eps = gaussian(rng, batch, field.action_dim());
    euler_sample_with(field, params, states, &eps, steps, bounds)
}
