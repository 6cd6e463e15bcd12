//! Dense tensors, a reverse-mode tape, and finite-difference checks.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_mixed, relative_error, CoordCheck, GradCheckOptions, GradCheckReport,
};
pub use tape::{ElementwiseOp, Gradients, Tape, Var, NORM_FLOOR};
pub use tensor::{
    gelu, gelu_derivative, layernorm, relu, softmax, Scalar, Tensor, GELU_CUBIC,
    GELU_SQRT_2_OVER_PI,
};
