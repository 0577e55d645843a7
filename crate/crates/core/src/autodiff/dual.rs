//! Forward-mode tensors: a primal value paired with a tangent.
//!
//! A missing tangent stands for an exact zero, which lets constant inputs
//! (network weights, the state) skip their half of every product rule.

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct DualTensor {
    primal: Tensor,
    tangent: Option<Vec<f64>>,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(Error::ShapeMismatch {
                expected: primal.shape().to_vec(),
                actual: tangent.shape().to_vec(),
            });
        }
        Ok(DualTensor {
            primal,
            tangent: Some(tangent.into_data()),
        })
    }

    pub fn constant(primal: Tensor) -> Self {
        DualTensor {
            primal,
            tangent: None,
        }
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    /// Tangent as a dense tensor (zeros for constants).
    pub fn tangent(&self) -> Tensor {
        match &self.tangent {
            Some(t) => Tensor::new(self.primal.shape().to_vec(), t.clone()),
            None => Tensor::zeros(self.primal.shape()),
        }
    }

    pub fn has_tangent(&self) -> bool {
        self.tangent.is_some()
    }

    fn with(primal: Tensor, tangent: Option<Vec<f64>>) -> Self {
        DualTensor { primal, tangent }
    }

    /// Element-wise unary op with derivative `d(x, y)`.
    fn unary(&self, f: impl Fn(f64) -> f64, d: impl Fn(f64, f64) -> f64) -> Self {
        let y = self.primal.map(f);
        let t = self.tangent.as_ref().map(|t| {
            t.iter()
                .zip(self.primal.data().iter().zip(y.data()))
                .map(|(ti, (&xi, &yi))| ti * d(xi, yi))
                .collect()
        });
        DualTensor::with(y, t)
    }

    /// Broadcast tangent of `self` to `shape` (for sums).
    fn tangent_broadcast(&self, shape: &[usize]) -> Option<Tensor> {
        let t = self.tangent.as_ref()?;
        let tt = Tensor::new(self.primal.shape().to_vec(), t.clone());
        if tt.shape() == shape {
            Some(tt)
        } else {
            Some(tensor::broadcast_binary(&tt, &Tensor::zeros(shape), |a, _| a))
        }
    }

    fn tangent_tensor(&self) -> Option<Tensor> {
        self.tangent
            .as_ref()
            .map(|t| Tensor::new(self.primal.shape().to_vec(), t.clone()))
    }

    pub(crate) fn add_d(&self, o: &Self) -> Self {
        let p = tensor::broadcast_binary(&self.primal, &o.primal, |a, b| a + b);
        let t = add_opt(
            self.tangent_broadcast(p.shape()),
            o.tangent_broadcast(p.shape()),
            1.0,
        );
        DualTensor::with(p, t)
    }

    pub(crate) fn sub_d(&self, o: &Self) -> Self {
        let p = tensor::broadcast_binary(&self.primal, &o.primal, |a, b| a - b);
        let t = add_opt(
            self.tangent_broadcast(p.shape()),
            o.tangent_broadcast(p.shape()),
            -1.0,
        );
        DualTensor::with(p, t)
    }

    pub(crate) fn mul_d(&self, o: &Self) -> Self {
        let p = tensor::broadcast_binary(&self.primal, &o.primal, |a, b| a * b);
        let ta = self
            .tangent_tensor()
            .map(|t| tensor::broadcast_binary(&t, &o.primal, |ti, b| ti * b));
        let tb = o
            .tangent_tensor()
            .map(|t| tensor::broadcast_binary(&self.primal, &t, |a, ti| a * ti));
        DualTensor::with(p, add_opt(ta, tb, 1.0))
    }

    pub(crate) fn div_d(&self, o: &Self) -> Self {
        let p = tensor::broadcast_binary(&self.primal, &o.primal, |a, b| a / b);
        let ta = self
            .tangent_tensor()
            .map(|t| tensor::broadcast_binary(&t, &o.primal, |ti, b| ti / b));
        let tb = o.tangent_tensor().map(|t| {
            let q = tensor::broadcast_binary(&self.primal, &o.primal, |a, b| -a / (b * b));
            tensor::broadcast_binary(&q, &t, |qi, ti| qi * ti)
        });
        DualTensor::with(p, add_opt(ta, tb, 1.0))
    }

    pub(crate) fn neg_d(&self) -> Self {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub(crate) fn scale_d(&self, c: f64) -> Self {
        self.unary(|x| x * c, |_, _| c)
    }

    pub(crate) fn add_scalar_d(&self, c: f64) -> Self {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    pub(crate) fn matmul_d(&self, o: &Self) -> Self {
        let p = tensor::matmul_values(&self.primal, &o.primal);
        let (m, k, n) = (self.primal.rows(), self.primal.cols(), o.primal.cols());
        let t = match (&self.tangent, &o.tangent) {
            (None, None) => None,
            (ta, tb) => {
                let mut out = vec![0.0; m * n];
                let mut acc = false;
                if let Some(ta) = ta {
                    tensor::gemm(m, k, n, ta, false, o.primal.data(), false, &mut out, acc);
                    acc = true;
                }
                if let Some(tb) = tb {
                    tensor::gemm(m, k, n, self.primal.data(), false, tb, false, &mut out, acc);
                }
                Some(out)
            }
        };
        DualTensor::with(p, t)
    }

    pub(crate) fn tanh_d(&self) -> Self {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }
    pub(crate) fn softplus_d(&self) -> Self {
        self.unary(tensor::softplus, |x, _| tensor::sigmoid(x))
    }
    pub(crate) fn mish_d(&self) -> Self {
        self.unary(tensor::mish, |x, _| tensor::mish_grad(x))
    }
    pub(crate) fn exp_d(&self) -> Self {
        self.unary(f64::exp, |_, y| y)
    }
    pub(crate) fn log_d(&self) -> Self {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }
    pub(crate) fn square_d(&self) -> Self {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }
    pub(crate) fn sin_d(&self) -> Self {
        self.unary(f64::sin, |x, _| x.cos())
    }
    pub(crate) fn cos_d(&self) -> Self {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    pub(crate) fn sum_d(&self) -> Self {
        let p = Tensor::scalar(self.primal.sum());
        let t = self.tangent.as_ref().map(|t| vec![t.iter().sum()]);
        DualTensor::with(p, t)
    }

    pub(crate) fn mean_d(&self) -> Self {
        let n = self.primal.len() as f64;
        let p = Tensor::scalar(self.primal.mean());
        let t = self.tangent.as_ref().map(|t| vec![t.iter().sum::<f64>() / n]);
        DualTensor::with(p, t)
    }

    pub(crate) fn minimum_d(&self, o: &Self) -> Self {
        assert_eq!(self.primal.shape(), o.primal.shape());
        let p = self.primal.zip_map(&o.primal, f64::min);
        let t = if self.tangent.is_none() && o.tangent.is_none() {
            None
        } else {
            let ta = self.tangent();
            let tb = o.tangent();
            Some(
                (0..p.len())
                    .map(|i| {
                        if self.primal.data()[i] <= o.primal.data()[i] {
                            ta.data()[i]
                        } else {
                            tb.data()[i]
                        }
                    })
                    .collect(),
            )
        };
        DualTensor::with(p, t)
    }

    pub(crate) fn concat_d(parts: &[&Self]) -> Self {
        let primals: Vec<&Tensor> = parts.iter().map(|p| &p.primal).collect();
        let p = tensor::concat_cols(&primals);
        let t = if parts.iter().all(|x| x.tangent.is_none()) {
            None
        } else {
            let ts: Vec<Tensor> = parts.iter().map(|x| x.tangent()).collect();
            let refs: Vec<&Tensor> = ts.iter().collect();
            Some(tensor::concat_cols(&refs).into_data())
        };
        DualTensor::with(p, t)
    }

    pub(crate) fn slice_cols_d(&self, start: usize, end: usize) -> Self {
        let p = tensor::slice_cols(&self.primal, start, end);
        let t = self
            .tangent_tensor()
            .map(|t| tensor::slice_cols(&t, start, end).into_data());
        DualTensor::with(p, t)
    }

    pub(crate) fn clip_d(&self, lo: f64, hi: f64) -> Self {
        self.unary(|x| x.clamp(lo, hi), |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    pub(crate) fn stop_grad_d(&self) -> Self {
        DualTensor::constant(self.primal.clone())
    }
}

fn add_opt(a: Option<Tensor>, b: Option<Tensor>, sign_b: f64) -> Option<Vec<f64>> {
    match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(a.into_data()),
        (None, Some(b)) => Some(b.data().iter().map(|x| sign_b * x).collect()),
        (Some(a), Some(b)) => Some(
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x + sign_b * y)
                .collect(),
        ),
    }
}
