//! Reverse-mode automatic differentiation with support for differentiating
//! through gradients (double backprop).

mod kernels;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

pub use tape::{GradOptions, Primitive, Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::{maxpool_indices, softplus};

use crate::error::{Error, Result};

/// Non-linearity used by every activation layer of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    #[default]
    Relu,
    /// `ln(1 + e^{βx}) / β`, a smooth surrogate of ReLU that approaches it as β grows.
    Softplus { beta: f64 },
}

impl ActivationKind {
    pub fn softplus(beta: f64) -> Result<Self> {
        let kind = ActivationKind::Softplus { beta };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::Relu => Ok(()),
            ActivationKind::Softplus { beta } if beta > 0.0 && beta.is_finite() => Ok(()),
            ActivationKind::Softplus { beta } => Err(Error::InvalidBeta(beta)),
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self, ActivationKind::Softplus { .. })
    }

    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        match *self {
            ActivationKind::Relu => Ok(x.relu()),
            ActivationKind::Softplus { beta } => x.softplus(beta),
        }
    }

    /// Scalar evaluation, matching what [`ActivationKind::apply`] records.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Softplus { beta } => softplus(x, beta),
        }
    }
}

/// Differentiates a loss built on top of a first-order gradient.
///
/// Computes `g = ∂output/∂wrt` as a recorded expression, builds `loss(g)`, and
/// returns `∂loss/∂wrt`. Fails with [`Error::NotTwiceDifferentiable`] if the
/// first-order graph passes through a ReLU activation.
pub fn grad_of_loss_on_grad<'t>(
    tape: &'t Tape,
    output: Var<'t>,
    wrt: Var<'t>,
    loss: impl FnOnce(Var<'t>) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    let g = tape.grad(output, &[wrt], GradOptions::smooth())?[0];
    let l = loss(g)?;
    Ok(tape.grad(l, &[wrt], GradOptions::default())?[0])
}
