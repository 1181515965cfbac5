//! Dense matrices and MLP building blocks with hand-written gradients.

mod adam;
mod layer;
mod matrix;

pub use adam::{adam_step, Adam, AdamConfig, AdamSlot};
pub use layer::{Activation, LinearLayer, Mlp, MlpTape, ParamMut, ParamRef, Parameters};
pub(crate) use layer::join;
pub use matrix::Matrix;

/// Numerically stable `log(1 + eᵗ)`.
#[inline]
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
