//! Minimal dense tensors with eager and reverse-mode evaluation.

mod backend;
mod tape;
mod tensor;

pub use backend::{Backend, Binary, Eager, Unary};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{
    add_row, concat_cols, concat_rows, gather_rows, gelu_scalar, log_softmax_rows, matmul, mul_row,
    reduce_sum, reshape, sigmoid_scalar, slice_cols, slice_rows, transpose, Tensor,
    ACTIVATION_CLAMP,
};
