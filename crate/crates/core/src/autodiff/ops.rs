use super::dual::DualTensor;
use super::tape::Var;
use super::tensor::{self, Tensor};

/// The primitive set shared by every evaluation mode.
///
/// Model code is written once against this trait and runs as a plain
/// forward pass ([`Tensor`]), recorded for reverse mode ([`Var`]), or
/// with tangents for forward mode ([`DualTensor`]).
pub trait TensorOps: Clone {
    /// A constant in the same evaluation context as `self`.
    fn lift(&self, value: Tensor) -> Self;
    fn value(&self) -> Tensor;
    fn shape(&self) -> Vec<usize>;
    fn all_finite(&self) -> bool;

    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    fn scale(&self, c: f64) -> Self;
    fn add_scalar(&self, c: f64) -> Self;
    fn matmul(&self, o: &Self) -> Self;

    fn tanh(&self) -> Self;
    fn softplus(&self) -> Self;
    /// `x * tanh(softplus(x))`, fused.
    fn mish(&self) -> Self;
    fn exp(&self) -> Self;
    fn log(&self) -> Self;
    fn square(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;

    fn sum(&self) -> Self;
    fn mean(&self) -> Self;
    fn minimum(&self, o: &Self) -> Self;
    fn concat(parts: &[&Self]) -> Self;
    fn slice_cols(&self, start: usize, end: usize) -> Self;
    fn clip(&self, lo: f64, hi: f64) -> Self;
    /// Identity on values; blocks reverse gradients and forward tangents.
    fn stop_grad(&self) -> Self;

    /// Hook for structural accounting; only the tape records it.
    fn tag(&self, _label: &'static str) {}
}

impl TensorOps for Tensor {
    fn lift(&self, value: Tensor) -> Self {
        value
    }
    fn value(&self) -> Tensor {
        self.clone()
    }
    fn shape(&self) -> Vec<usize> {
        Tensor::shape(self).to_vec()
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
    fn add(&self, o: &Self) -> Self {
        tensor::broadcast_binary(self, o, |a, b| a + b)
    }
    fn sub(&self, o: &Self) -> Self {
        tensor::broadcast_binary(self, o, |a, b| a - b)
    }
    fn mul(&self, o: &Self) -> Self {
        tensor::broadcast_binary(self, o, |a, b| a * b)
    }
    fn div(&self, o: &Self) -> Self {
        tensor::broadcast_binary(self, o, |a, b| a / b)
    }
    fn neg(&self) -> Self {
        self.map(|x| -x)
    }
    fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }
    fn add_scalar(&self, c: f64) -> Self {
        self.map(|x| x + c)
    }
    fn matmul(&self, o: &Self) -> Self {
        tensor::matmul_values(self, o)
    }
    fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }
    fn softplus(&self) -> Self {
        self.map(tensor::softplus)
    }
    fn mish(&self) -> Self {
        self.map(tensor::mish)
    }
    fn exp(&self) -> Self {
        self.map(f64::exp)
    }
    fn log(&self) -> Self {
        self.map(f64::ln)
    }
    fn square(&self) -> Self {
        self.map(|x| x * x)
    }
    fn sin(&self) -> Self {
        self.map(f64::sin)
    }
    fn cos(&self) -> Self {
        self.map(f64::cos)
    }
    fn sum(&self) -> Self {
        Tensor::scalar(Tensor::sum(self))
    }
    fn mean(&self) -> Self {
        Tensor::scalar(Tensor::mean(self))
    }
    fn minimum(&self, o: &Self) -> Self {
        self.zip_map(o, f64::min)
    }
    fn concat(parts: &[&Self]) -> Self {
        tensor::concat_cols(parts)
    }
    fn slice_cols(&self, start: usize, end: usize) -> Self {
        tensor::slice_cols(self, start, end)
    }
    fn clip(&self, lo: f64, hi: f64) -> Self {
        self.map(|x| x.clamp(lo, hi))
    }
    fn stop_grad(&self) -> Self {
        self.clone()
    }
}

impl<'t> TensorOps for Var<'t> {
    fn lift(&self, value: Tensor) -> Self {
        self.tape().constant(value)
    }
    fn value(&self) -> Tensor {
        Var::value(self)
    }
    fn shape(&self) -> Vec<usize> {
        Var::shape(self)
    }
    fn all_finite(&self) -> bool {
        self.with_value(|v| v.is_finite())
    }
    fn add(&self, o: &Self) -> Self {
        self.add_v(o)
    }
    fn sub(&self, o: &Self) -> Self {
        self.sub_v(o)
    }
    fn mul(&self, o: &Self) -> Self {
        self.mul_v(o)
    }
    fn div(&self, o: &Self) -> Self {
        self.div_v(o)
    }
    fn neg(&self) -> Self {
        self.neg_v()
    }
    fn scale(&self, c: f64) -> Self {
        self.scale_v(c)
    }
    fn add_scalar(&self, c: f64) -> Self {
        self.add_scalar_v(c)
    }
    fn matmul(&self, o: &Self) -> Self {
        self.matmul_v(o)
    }
    fn tanh(&self) -> Self {
        self.tanh_v()
    }
    fn softplus(&self) -> Self {
        self.softplus_v()
    }
    fn mish(&self) -> Self {
        self.mish_v()
    }
    fn exp(&self) -> Self {
        self.exp_v()
    }
    fn log(&self) -> Self {
        self.log_v()
    }
    fn square(&self) -> Self {
        self.square_v()
    }
    fn sin(&self) -> Self {
        self.sin_v()
    }
    fn cos(&self) -> Self {
        self.cos_v()
    }
    fn sum(&self) -> Self {
        self.sum_v()
    }
    fn mean(&self) -> Self {
        self.mean_v()
    }
    fn minimum(&self, o: &Self) -> Self {
        self.minimum_v(o)
    }
    fn concat(parts: &[&Self]) -> Self {
        Var::concat_v(parts)
    }
    fn slice_cols(&self, start: usize, end: usize) -> Self {
        self.slice_cols_v(start, end)
    }
    fn clip(&self, lo: f64, hi: f64) -> Self {
        self.clip_v(lo, hi)
    }
    fn stop_grad(&self) -> Self {
        self.stop_grad_v()
    }
    fn tag(&self, label: &'static str) {
        self.tape().tag(label)
    }
}

impl TensorOps for DualTensor {
    fn lift(&self, value: Tensor) -> Self {
        DualTensor::constant(value)
    }
    fn value(&self) -> Tensor {
        self.primal().clone()
    }
    fn shape(&self) -> Vec<usize> {
        self.primal().shape().to_vec()
    }
    fn all_finite(&self) -> bool {
        self.primal().is_finite()
    }
    fn add(&self, o: &Self) -> Self {
        self.add_d(o)
    }
    fn sub(&self, o: &Self) -> Self {
        self.sub_d(o)
    }
    fn mul(&self, o: &Self) -> Self {
        self.mul_d(o)
    }
    fn div(&self, o: &Self) -> Self {
        self.div_d(o)
    }
    fn neg(&self) -> Self {
        self.neg_d()
    }
    fn scale(&self, c: f64) -> Self {
        self.scale_d(c)
    }
    fn add_scalar(&self, c: f64) -> Self {
        self.add_scalar_d(c)
    }
    fn matmul(&self, o: &Self) -> Self {
        self.matmul_d(o)
    }
    fn tanh(&self) -> Self {
        self.tanh_d()
    }
    fn softplus(&self) -> Self {
        self.softplus_d()
    }
    fn mish(&self) -> Self {
        self.mish_d()
    }
    fn exp(&self) -> Self {
        self.exp_d()
    }
    fn log(&self) -> Self {
        self.log_d()
    }
    fn square(&self) -> Self {
        self.square_d()
    }
    fn sin(&self) -> Self {
        self.sin_d()
    }
    fn cos(&self) -> Self {
        self.cos_d()
    }
    fn sum(&self) -> Self {
        self.sum_d()
    }
    fn mean(&self) -> Self {
        self.mean_d()
    }
    fn minimum(&self, o: &Self) -> Self {
        self.minimum_d(o)
    }
    fn concat(parts: &[&Self]) -> Self {
        DualTensor::concat_d(parts)
    }
    fn slice_cols(&self, start: usize, end: usize) -> Self {
        self.slice_cols_d(start, end)
    }
    fn clip(&self, lo: f64, hi: f64) -> Self {
        self.clip_d(lo, hi)
    }
    fn stop_grad(&self) -> Self {
        self.stop_grad_d()
    }
}
