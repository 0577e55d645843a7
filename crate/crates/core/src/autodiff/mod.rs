//! Dense tensor arithmetic with reverse-mode (tape) and forward-mode (dual)
//! differentiation, plus Adam and EMA parameter updates.

mod dual;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use dual::DualTensor;
pub use ops::TensorOps;
pub use optim::{ema_update, AdamConfig, AdamOutcome, AdamState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Evaluate `f` at `inputs` and its directional derivative along `tangents`
/// in a single forward pass.
///
/// Returns `(f(x), J_f(x) · tangent)`. An input whose tangent is `None` is
/// treated as a constant.
pub fn jvp<F>(f: F, inputs: &[Tensor], tangents: &[Option<Tensor>]) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&[DualTensor]) -> DualTensor,
{
    if inputs.len() != tangents.len() {
        return Err(Error::invalid(format!(
            "{} inputs but {} tangents",
            inputs.len(),
            tangents.len()
        )));
    }
    let duals = inputs
        .iter()
        .zip(tangents)
        .map(|(x, t)| match t {
            Some(t) => DualTensor::new(x.clone(), t.clone()),
            None => Ok(DualTensor::constant(x.clone())),
        })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&duals);
    Ok((out.primal().clone(), out.tangent()))
}

/// Gradient of a scalar function at `inputs` by one reverse pass.
pub fn grad<F>(f: F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let loss = f(&vars);
    tape.backward(loss)?;
    let value = loss.value().item();
    let grads = vars
        .iter()
        .map(|v| v.grad().expect("backward populates every leaf"))
        .collect();
    Ok((value, grads))
}
