//! Feedforward networks with explicit backpropagation, Adam and a
//! finite-difference gradient checker.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod mlp;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_mlp, mlp_from_json, mlp_to_json, save_mlp, MlpCheckpoint};
pub use gradcheck::{finite_diff_check, FdOptions};
pub use mlp::{Activation, ForwardCache, InputGradCache, Layer, Mlp, MlpGrads, MlpShape, OutputHead};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without cancellation.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
