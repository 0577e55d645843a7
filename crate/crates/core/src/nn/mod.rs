//! Mish MLPs with sinusoidal time embeddings for policies and critics.

mod checkpoint;

pub use checkpoint::Checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, TensorOps};
use crate::error::{Error, Result};

/// Multiplier on time inputs before the frequency ladder. Kept at 1 so the
/// time derivative of the embedding (which enters the MeanFlow target) is O(1).
pub const TIME_SCALE: f64 = 1.0;

/// Tape label counted once per policy-network forward pass.
pub const POLICY_FORWARD_TAG: &str = "policy_forward";

/// Geometric frequency ladder `TIME_SCALE * 10000^(-i / (half - 1))`.
pub fn embedding_frequencies(dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "time embedding dim must be even and >= 2, got {dim}"
        )));
    }
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    Ok((0..half)
        .map(|i| TIME_SCALE * (-(10000f64.ln()) * i as f64 / denom).exp())
        .collect())
}

/// Sinusoidal embedding `[sin(t f_1), .., sin(t f_h), cos(t f_1), .., cos(t f_h)]`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    let freqs = embedding_frequencies(dim)?;
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}

/// Batched embedding of a `[B, 1]` time column; differentiable in `t`.
pub fn time_embed_batch<V: TensorOps>(t: &V, freqs: &Tensor) -> V {
    let phase = t.mul(&t.lift(freqs.clone()));
    V::concat(&[&phase.sin(), &phase.cos()])
}

pub fn mish<V: TensorOps>(x: &V) -> V {
    x.mish()
}

/// Layer widths, input first and output last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims(pub Vec<usize>);

impl MlpDims {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut d = vec![input];
        d.extend_from_slice(hidden);
        d.push(output);
        MlpDims(d)
    }

    pub fn n_layers(&self) -> usize {
        self.0.len() - 1
    }

    /// Expected tensor shapes in parameter order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.0
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![1, w[1]]])
            .collect()
    }
}

/// Weights and biases of a fully connected network, stored as
/// `[w0, b0, w1, b1, ..]` with `w_i: [in, out]` and `b_i: [1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: MlpDims,
    pub tensors: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalLayerInit {
    Zero,
    FanIn,
}

/// Deterministic initialization with a zeroed output layer.
pub fn init_params(seed: u64, dims: &MlpDims) -> MlpParams {
    init_params_with(seed, dims, FinalLayerInit::Zero)
}

/// Weights `U(-sqrt(3/fan_in), sqrt(3/fan_in))` (std `1/sqrt(fan_in)`),
/// biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_params_with(seed: u64, dims: &MlpDims, last: FinalLayerInit) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.n_layers();
    let mut tensors = Vec::with_capacity(2 * n);
    for (i, w) in dims.0.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        if i == n - 1 && last == FinalLayerInit::Zero {
            tensors.push(Tensor::zeros(&[fan_in, fan_out]));
            tensors.push(Tensor::zeros(&[1, fan_out]));
            continue;
        }
        let wb = (3.0 / fan_in as f64).sqrt();
        let bb = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-wb..wb)).collect();
        let biases = (0..fan_out).map(|_| rng.random_range(-bb..bb)).collect();
        tensors.push(Tensor::matrix(fan_in, fan_out, weights));
        tensors.push(Tensor::matrix(1, fan_out, biases));
    }
    MlpParams {
        dims: dims.clone(),
        tensors,
    }
}

impl MlpParams {
    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.dims.n_layers())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// `x -> mish(x W0 + b0) -> .. -> x Wn + bn`.
pub fn mlp_forward<V: TensorOps>(params: &[V], x: &V) -> V {
    let n = params.len() / 2;
    let mut h = x.clone();
    for i in 0..n {
        h = h.matmul(&params[2 * i]).add(&params[2 * i + 1]);
        if i + 1 < n {
            h = h.mish();
        }
    }
    h
}

/// Velocity / noise predictor `f(x_t, s, t [, r])`.
///
/// Input layout is `[x_t, s, embed(t), embed(r)]`; the `r` embedding exists
/// only for average-velocity networks. `state_dim` may be 0 for
/// unconditional models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub action_dim: usize,
    pub state_dim: usize,
    pub embed_dim: usize,
    pub with_r: bool,
    pub hidden: Vec<usize>,
}

impl PolicyNet {
    pub fn new(
        action_dim: usize,
        state_dim: usize,
        embed_dim: usize,
        with_r: bool,
        hidden: &[usize],
    ) -> Result<Self> {
        if action_dim == 0 {
            return Err(Error::invalid("action dim must be positive"));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be non-empty and positive"));
        }
        embedding_frequencies(embed_dim)?;
        Ok(PolicyNet {
            action_dim,
            state_dim,
            embed_dim,
            with_r,
            hidden: hidden.to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.action_dim + self.state_dim + self.embed_dim * if self.with_r { 2 } else { 1 }
    }

    pub fn dims(&self) -> MlpDims {
        MlpDims::new(self.input_dim(), &self.hidden, self.action_dim)
    }

    pub fn init(&self, seed: u64) -> MlpParams {
        init_params(seed, &self.dims())
    }

    fn freqs(&self) -> Tensor {
        let f = embedding_frequencies(self.embed_dim).expect("validated at construction");
        Tensor::new(vec![1, f.len()], f)
    }

    /// Batched forward. `x: [B, action_dim]`, `s: [B, state_dim]` (omitted
    /// when `state_dim == 0`), `t` and `r`: `[B, 1]`.
    pub fn forward<V: TensorOps>(&self, params: &[V], x: &V, s: Option<&V>, t: &V, r: Option<&V>) -> V {
        assert_eq!(x.shape().last().copied(), Some(self.action_dim), "action latent width");
        assert_eq!(r.is_some(), self.with_r, "r input present iff the net embeds r");
        x.tag(POLICY_FORWARD_TAG);
        let freqs = self.freqs();
        let mut parts = vec![x.clone()];
        if self.state_dim > 0 {
            let s = s.expect("state required");
            assert_eq!(s.shape().last().copied(), Some(self.state_dim), "state width");
            parts.push(s.clone());
        }
        parts.push(time_embed_batch(t, &freqs));
        if let Some(r) = r {
            parts.push(time_embed_batch(r, &freqs));
        }
        let refs: Vec<&V> = parts.iter().collect();
        mlp_forward(params, &V::concat(&refs))
    }
}

/// `Q(s, a)`: MLP over `[a, s]` with a scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub action_dim: usize,
    pub state_dim: usize,
    pub hidden: Vec<usize>,
}

impl CriticNet {
    pub fn new(action_dim: usize, state_dim: usize, hidden: &[usize]) -> Result<Self> {
        if action_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("critic dims must be positive"));
        }
        Ok(CriticNet {
            action_dim,
            state_dim,
            hidden: hidden.to_vec(),
        })
    }

    pub fn dims(&self) -> MlpDims {
        MlpDims::new(self.action_dim + self.state_dim, &self.hidden, 1)
    }

    pub fn init(&self, seed: u64) -> MlpParams {
        init_params_with(seed, &self.dims(), FinalLayerInit::FanIn)
    }

    /// `[B, 1]` Q-values.
    pub fn forward<V: TensorOps>(&self, params: &[V], s: &V, a: &V) -> V {
        let input = if self.state_dim > 0 {
            V::concat(&[a, s])
        } else {
            a.clone()
        };
        mlp_forward(params, &input)
    }
}

/// Lift a parameter set as constants of the given context.
pub fn lift_params<V: TensorOps>(anchor: &V, params: &MlpParams) -> Vec<V> {
    params.tensors.iter().map(|p| anchor.lift(p.clone())).collect()
}
