//! Deterministic dense-tensor reverse-mode engine with exact
//! Hessian-vector products.

mod grad;
mod scalar;
mod tape;
mod tensor;

pub use grad::{
    grad_dot, grad_norm, gradient, hvp, loss_value, relative_error, scale_grads, Bindings,
    Objective, ParamSet,
};
pub use scalar::{Dual, Scalar};
pub use tape::{GradMap, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
